"""Network components: generator, two disentangler heads, classifiers,
reconstructor and the MINE statistics network, plus checkpoint I/O."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ConfigurationError, DimensionError

CHECKPOINT_FORMAT = "domain-embed-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkSpec:
    num_classes: int = 10
    num_domains: int = 54
    in_channels: int = 3
    image_size: int = 32
    conv_channels: tuple = (64, 64, 128)
    kernel_size: int = 5
    padding: int = 2
    disentangler_hidden: int = 3072
    latent_dim: int = 2048
    dc_hidden: int = 256
    mine_hidden: int = 512
    dropout: float = 0.5

    @classmethod
    def reference(cls, num_classes=10, num_domains=54):
        return cls(num_classes=num_classes, num_domains=num_domains)

    @classmethod
    def desk(cls, num_classes=10, num_domains=9):
        return cls(num_classes=num_classes, num_domains=num_domains, conv_channels=(16, 16, 32),
                   disentangler_hidden=768, latent_dim=256, dc_hidden=64, mine_hidden=64)

    @classmethod
    def for_scale(cls, scale, num_classes, num_domains):
        if scale == "reference":
            return cls.reference(num_classes, num_domains)
        if scale == "desk":
            return cls.desk(num_classes, num_domains)
        raise ConfigurationError(f"unknown model scale {scale!r}")

    @property
    def feature_map_size(self):
        # two 2x poolings
        return self.image_size // 4

    @property
    def flat_dim(self):
        return self.conv_channels[-1] * self.feature_map_size ** 2

    def layers(self):
        """Human-readable layer table, one dict per layer."""
        chans = (self.in_channels,) + tuple(self.conv_channels)
        k, p = self.kernel_size, self.padding
        conv = [
            {"component": "G", "kind": "conv", "in": cin, "out": cout, "kernel": k, "stride": 1, "padding": p,
             "norm": "bn", "act": "relu", "pool": i < 2}
            for i, (cin, cout) in enumerate(zip(chans[:-1], chans[1:]))
        ]
        heads = []
        for name in ("D_ds", "D_cs"):
            heads += [
                {"component": name, "kind": "fc", "in": self.flat_dim, "out": self.disentangler_hidden,
                 "norm": "bn", "act": "relu"},
                {"component": name, "kind": "fc", "in": self.disentangler_hidden, "out": self.latent_dim,
                 "norm": "bn", "act": "relu", "dropout": self.dropout},
            ]
        return conv + heads + [
            {"component": "DC", "kind": "fc", "in": self.latent_dim, "out": self.dc_hidden, "act": "leaky_relu"},
            {"component": "DC", "kind": "fc", "in": self.dc_hidden, "out": self.num_domains, "act": "leaky_relu"},
            {"component": "C", "kind": "fc", "in": self.latent_dim, "out": self.num_classes, "norm": "bn",
             "act": "softmax"},
            {"component": "R", "kind": "fc", "in": 2 * self.latent_dim, "out": self.flat_dim},
            {"component": "T", "kind": "fc", "name": "fc1_x", "in": self.latent_dim, "out": self.mine_hidden},
            {"component": "T", "kind": "fc", "name": "fc1_y", "in": self.latent_dim, "out": self.mine_hidden,
             "act": "leaky_relu(sum)"},
            {"component": "T", "kind": "fc", "in": self.mine_hidden, "out": 1},
        ]

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d["conv_channels"] = tuple(d["conv_channels"])
        return cls(**d)


class FeatureGenerator(nn.Module):
    """Three 5x5 conv blocks; returns the flattened map and each block's post-ReLU activations."""

    def __init__(self, spec):
        super().__init__()
        chans = (spec.in_channels,) + tuple(spec.conv_channels)
        self.blocks = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(cin, cout, spec.kernel_size, 1, spec.padding),
                nn.BatchNorm2d(cout),
                nn.ReLU(),
            )
            for cin, cout in zip(chans[:-1], chans[1:])
        )
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        acts = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            acts.append(x)
            if i < len(self.blocks) - 1:
                x = self.pool(x)
        return x.flatten(1), acts


class Disentangler(nn.Module):
    def __init__(self, spec):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(spec.flat_dim, spec.disentangler_hidden),
            nn.BatchNorm1d(spec.disentangler_hidden),
            nn.ReLU(),
            nn.Dropout(spec.dropout),
            nn.Linear(spec.disentangler_hidden, spec.latent_dim),
            nn.BatchNorm1d(spec.latent_dim),
            nn.ReLU(),
        )

    def forward(self, f_g):
        return self.net(f_g)


class CategoryClassifier(nn.Module):
    def __init__(self, spec):
        super().__init__()
        self.fc = nn.Linear(spec.latent_dim, spec.num_classes)
        self.bn = nn.BatchNorm1d(spec.num_classes)

    def logits(self, f):
        return self.bn(self.fc(f))

    def forward(self, f):
        return F.softmax(self.logits(f), dim=1)


class DomainClassifier(nn.Module):
    def __init__(self, spec):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(spec.latent_dim, spec.dc_hidden),
            nn.LeakyReLU(0.2),
            nn.Linear(spec.dc_hidden, spec.num_domains),
            nn.LeakyReLU(0.2),
        )

    def logits(self, f):
        return self.net(f)

    def forward(self, f):
        return F.softmax(self.logits(f), dim=1)


class Reconstructor(nn.Module):
    def __init__(self, spec):
        super().__init__()
        self.fc = nn.Linear(2 * spec.latent_dim, spec.flat_dim)

    def forward(self, f_ds, f_cs):
        return self.fc(torch.cat([f_ds, f_cs], dim=1))


class StatisticsNetwork(nn.Module):
    """T(p, q): fc_x(p) + fc_y(q) -> LeakyReLU -> scalar, applied row-wise."""

    def __init__(self, p_dim, q_dim, hidden, zero_init_output=False):
        super().__init__()
        self.fc_x = nn.Linear(p_dim, hidden)
        self.fc_y = nn.Linear(q_dim, hidden)
        self.fc_out = nn.Linear(hidden, 1)
        if zero_init_output:
            nn.init.zeros_(self.fc_out.weight)
            nn.init.zeros_(self.fc_out.bias)

    def forward(self, p, q):
        if p.shape[-1] != self.fc_x.in_features or q.shape[-1] != self.fc_y.in_features:
            raise DimensionError(f"statistic inputs {tuple(p.shape)}, {tuple(q.shape)} do not match "
                                 f"({self.fc_x.in_features}, {self.fc_y.in_features})")
        h = F.leaky_relu(self.fc_x(p) + self.fc_y(q), 0.2)
        return self.fc_out(h).squeeze(-1)


class ForwardOutput(NamedTuple):
    f_g: torch.Tensor
    f_ds: torch.Tensor
    f_cs: torch.Tensor
    class_probs: torch.Tensor
    domain_probs: torch.Tensor
    f_g_hat: torch.Tensor
    conv_activations: list


class DisentangleNet(nn.Module):
    def __init__(self, spec, seed=0):
        super().__init__()
        self.spec = spec
        self.G = FeatureGenerator(spec)
        self.D_ds = Disentangler(spec)
        self.D_cs = Disentangler(spec)
        self.C = CategoryClassifier(spec)
        self.DC = DomainClassifier(spec)
        self.R = Reconstructor(spec)
        self.T = StatisticsNetwork(spec.latent_dim, spec.latent_dim, spec.mine_hidden)
        init_weights(self, seed)

    def check_input(self, x):
        s = self.spec
        if x.dim() != 4 or tuple(x.shape[1:]) != (s.in_channels, s.image_size, s.image_size):
            raise DimensionError(f"expected B x {s.in_channels} x {s.image_size} x {s.image_size}, "
                                 f"got {tuple(x.shape)}")

    def forward(self, x):
        self.check_input(x)
        f_g, acts = self.G(x)
        f_ds = self.D_ds(f_g)
        f_cs = self.D_cs(f_g)
        return ForwardOutput(f_g, f_ds, f_cs, self.C(f_cs), self.DC(f_ds), self.R(f_ds, f_cs), acts)

    def predict_logits(self, x):
        f_g, _ = self.G(x)
        return self.C.logits(self.D_cs(f_g))

    def mine_statistic(self, p, q):
        return self.T(p, q)

    def component(self, name):
        return getattr(self, name)


def init_weights(module, seed):
    """He-uniform (fan-in) weights, zero biases, BN affine at (1, 0); seeded."""
    gen = torch.Generator().manual_seed(int(seed))
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, a=0.0, mode="fan_in", nonlinearity="relu", generator=gen)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())


def save_checkpoint(path, model, extra=None):
    """Write model parameters, the spec header and any extra state to ``path``."""
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": model.spec.to_json(),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)
    except OSError as exc:
        raise OSError(f"writing checkpoint {path}: {exc}") from exc


def load_checkpoint(path, model_cls=DisentangleNet):
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except OSError as exc:
        raise OSError(f"reading checkpoint {path}: {exc}") from exc
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"{path} is not a version-{CHECKPOINT_VERSION} checkpoint")
    spec = NetworkSpec.from_json(payload["spec"])
    model = model_cls(spec)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload["extra"]
