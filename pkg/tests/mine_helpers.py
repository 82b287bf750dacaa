import numpy as np
import torch

from domain_embed.losses import mine_mi
from domain_embed.model import StatisticsNetwork


def gaussian_pairs(n, rho, seed):
    rng = np.random.default_rng(seed)
    cov = [[1.0, rho], [rho, 1.0]]
    xy = rng.multivariate_normal([0.0, 0.0], cov, size=n)
    return torch.tensor(xy[:, :1], dtype=torch.float32), torch.tensor(xy[:, 1:], dtype=torch.float32)


def estimate_mi(x, y, steps=600, lr=5e-3, hidden=64, seed=0):
    """Fit the statistics network on (x, y) by ascending the estimate; return the final estimate."""
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    t = StatisticsNetwork(x.shape[1], y.shape[1], hidden)
    opt = torch.optim.Adam(t.parameters(), lr=lr)
    n = len(x)
    for _ in range(steps):
        mi = mine_mi(t(x, y), t(x, y[torch.randperm(n, generator=gen)]))
        opt.zero_grad()
        (-mi).backward()
        opt.step()
    with torch.no_grad():
        vals = [float(mine_mi(t(x, y), t(x, y[torch.randperm(n, generator=gen)]))) for _ in range(10)]
    return float(np.mean(vals))
