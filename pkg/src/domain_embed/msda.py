"""Distance-weighted multi-source domain adaptation.

``alpha`` aligns first and second feature moments of every source with the
target; ``beta`` trains one source-vs-target discriminator per source through a
gradient-reversal layer. Both scale each source's classification and alignment
terms by a weight derived from its embedding distance to the target.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .embedding import EmbeddingStandardizer, domain_distance, embed_images, embedding_matrix
from .exceptions import ConfigurationError, NumericError, PreconditionError
from .model import CategoryClassifier, Disentangler, FeatureGenerator, NetworkSpec, init_weights, save_checkpoint

VARIANTS = ("alpha", "beta", "uniform-alpha", "uniform-beta", "source-only")


@dataclass(frozen=True)
class TransferTask:
    source_domain_ids: tuple
    target_domain_id: int
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "source_domain_ids", tuple(int(i) for i in self.source_domain_ids))
        if not self.source_domain_ids:
            raise PreconditionError("a transfer task needs at least one source domain")
        if self.target_domain_id in self.source_domain_ids:
            raise PreconditionError(f"target {self.target_domain_id} is also listed as a source")

    @classmethod
    def load(cls, path):
        d = json.loads(Path(path).read_text())
        return cls(d["source_domain_ids"], d["target_domain_id"], d.get("name", ""))

    def label(self):
        return self.name or f"{'+'.join(map(str, self.source_domain_ids))}->{self.target_domain_id}"


@dataclass
class SourceWeights:
    weights: np.ndarray
    tau: float

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if np.any(self.weights < 0) or not math.isclose(self.weights.sum(), 1.0, rel_tol=0, abs_tol=1e-9):
            raise PreconditionError(f"source weights must be non-negative and sum to 1: {self.weights}")


def distance_to_weights(distances, tau=1.0):
    """Softmax of -d / tau. Equal distances give exactly uniform weights."""
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 1 or len(d) == 0:
        raise PreconditionError("need a non-empty vector of distances")
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise PreconditionError(f"distances must be finite and non-negative: {d}")
    if not tau > 0:
        raise PreconditionError(f"temperature must be positive, got {tau}")
    e = np.exp(-(d - d.min()) / tau)
    return SourceWeights(e / e.sum(), tau)


def uniform_weights(n):
    return distance_to_weights(np.zeros(n))


@dataclass
class MSDAConfig:
    epochs: int = 5
    batch_size: int = 32
    lr: float = 1e-3
    align_weight: float = 1.0
    seed: int = 0
    scale: str = "desk"
    tau: float = 1.0
    disc_hidden: int = 128
    pairwise_sources: bool = False
    steps_per_epoch: int | None = None

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return asdict(self)


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -grad


def grad_reverse(x):
    return _GradReverse.apply(x)


class ClassifierNet(nn.Module):
    """G followed by the category head and classifier: the path used for prediction."""

    def __init__(self, spec, seed=0):
        super().__init__()
        self.spec = spec
        self.G = FeatureGenerator(spec)
        self.D_cs = Disentangler(spec)
        self.C = CategoryClassifier(spec)
        init_weights(self, seed)

    def features(self, x):
        f_g, _ = self.G(x)
        return self.D_cs(f_g)

    def predict_logits(self, x):
        return self.C.logits(self.features(x))

    forward = predict_logits


def moment_distance(a, b):
    """Mean squared gap between feature means plus between per-dimension variances."""
    mean_gap = ((a.mean(0) - b.mean(0)) ** 2).mean()
    var_gap = ((a.var(0, unbiased=False) - b.var(0, unbiased=False)) ** 2).mean()
    return mean_gap + var_gap


def _discriminators(n, spec, hidden, seed):
    discs = nn.ModuleList(
        nn.Sequential(nn.Linear(spec.latent_dim, hidden), nn.ReLU(), nn.Linear(hidden, 1)) for _ in range(n)
    )
    init_weights(discs, seed + 1)
    return discs


def adapt(data, task, weights, mode, config):
    """Train a classifier on the task's sources with the given alignment ``mode``.

    ``mode`` is "moment", "adversarial" or None (source only). Returns the
    trained network and a per-step log.
    """
    if len(weights.weights) != len(task.source_domain_ids):
        raise PreconditionError("one weight per source domain is required")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    num_classes = int(max(data.train[i][1].max() for i in task.source_domain_ids)) + 1
    spec = NetworkSpec.for_scale(config.scale, max(num_classes, 2), 2)
    net = ClassifierNet(spec, seed=config.seed)
    params = list(net.parameters())
    discs = None
    if mode == "adversarial":
        discs = _discriminators(len(task.source_domain_ids), spec, config.disc_hidden, config.seed)
        params += list(discs.parameters())
    opt = torch.optim.Adam(params, lr=config.lr)

    sources = [data.labeled(i) for i in task.source_domain_ids]
    target = data.unlabeled(task.target_domain_id) if mode is not None else None
    w = torch.as_tensor(weights.weights, dtype=torch.float32)
    bs = config.batch_size
    steps = config.steps_per_epoch or max(1, math.ceil(max(len(X) for X, _ in sources) / bs))
    log = []
    net.train()
    for epoch in range(config.epochs):
        for _ in range(steps):
            xs, ys, sizes = [], [], []
            for X, y in sources:
                idx = rng.choice(len(X), size=min(bs, len(X)), replace=False)
                xs.append(X[idx])
                ys.append(torch.from_numpy(y[idx]))
                sizes.append(len(idx))
            if target is not None:
                idx = rng.choice(len(target), size=min(bs, len(target)), replace=False)
                xs.append(target.images[idx])
                sizes.append(len(idx))
            feats = net.features(data.tensor(np.concatenate(xs)))
            chunks = list(torch.split(feats, sizes))
            f_t = chunks.pop() if target is not None else None

            # one classifier pass over all source rows so its batch norm sees a full batch
            logits = torch.split(net.C.logits(torch.cat(chunks)), sizes[:len(chunks)])
            cls_terms = [F.cross_entropy(z, y) for z, y in zip(logits, ys)]
            loss = sum(wi * t for wi, t in zip(w, cls_terms))
            align_terms = []
            if mode == "moment":
                for f in chunks:
                    align_terms.append(moment_distance(f, f_t) if len(f) > 1 and len(f_t) > 1 else None)
                if config.pairwise_sources:
                    for a in range(len(chunks)):
                        for b in range(a + 1, len(chunks)):
                            if len(chunks[a]) > 1 and len(chunks[b]) > 1:
                                loss = loss + config.align_weight * w[a] * w[b] * moment_distance(chunks[a], chunks[b])
            elif mode == "adversarial":
                rt = grad_reverse(f_t)
                for disc, f in zip(discs, chunks):
                    ls = disc(grad_reverse(f)).squeeze(1)
                    lt = disc(rt).squeeze(1)
                    align_terms.append(F.binary_cross_entropy_with_logits(ls, torch.ones_like(ls))
                                       + F.binary_cross_entropy_with_logits(lt, torch.zeros_like(lt)))
            for wi, t in zip(w, align_terms):
                if t is not None:
                    loss = loss + config.align_weight * wi * t
            if not torch.isfinite(loss):
                raise NumericError("msda loss", float(loss.detach()))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            log.append({
                "epoch": epoch,
                "loss": float(loss.detach()),
                "class": [float(t.detach()) for t in cls_terms],
                "align": [None if t is None else float(t.detach()) for t in align_terms],
            })
    net.eval()
    return net, log


def msda_alpha(data, task, weights, config):
    return adapt(data, task, weights, "moment", config)


def msda_beta(data, task, weights, config):
    return adapt(data, task, weights, "adversarial", config)


def train_source_only(data, task, config, weights=None):
    return adapt(data, task, weights or uniform_weights(len(task.source_domain_ids)), None, config)


@torch.no_grad()
def predict(net, data, images, batch_size=256):
    net.eval()
    out = [net.predict_logits(data.tensor(images[i:i + batch_size])).argmax(1) for i in range(0, len(images), batch_size)]
    return torch.cat(out).numpy()


def target_accuracy(net, data, domain_id):
    X, y = data.labeled(domain_id, "eval")
    return float((predict(net, data, X) == y).mean())


def run_msda(data, task, variant, config, weights=None, checkpoint_path=None):
    """Adapt with one variant and score it on the target's held-out split.

    ``weights`` (distance-derived) are required for "alpha" and "beta".
    Returns a report row ``{task, variant, seed, accuracy, weights}``.
    """
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    n = len(task.source_domain_ids)
    if variant in ("alpha", "beta"):
        if weights is None:
            raise PreconditionError(f"variant {variant!r} needs distance-derived source weights")
    else:
        weights = uniform_weights(n)
    mode = {"alpha": "moment", "uniform-alpha": "moment", "beta": "adversarial",
            "uniform-beta": "adversarial", "source-only": None}[variant]
    net, log = adapt(data, task, weights, mode, config)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, net, {"variant": variant, "task": asdict(task),
                                               "weights": weights.weights.tolist(), "log": log})
    acc = target_accuracy(net, data, task.target_domain_id)
    return {"task": task.label(), "variant": variant, "seed": config.seed, "accuracy": acc,
            "weights": [float(x) for x in weights.weights]}


def source_weights(model, data, task, metric="cosine", tau=1.0, use_gram=True, gram_layers="all"):
    """Weights from embedding distances between each source and the target.

    Embeddings use training-split images only; target labels are never read.
    """
    ids = list(task.source_domain_ids) + [task.target_domain_id]
    embs = []
    for i in ids:
        images = data.labeled(i)[0] if i != task.target_domain_id else data.unlabeled(i).images
        embs.append(embed_images(model, data.tensor(images), i, gram_layers))
    Z = EmbeddingStandardizer().fit_transform(embedding_matrix(embs, use_gram))
    d = np.array([domain_distance(z, Z[-1], metric) for z in Z[:-1]])
    return distance_to_weights(d, tau), d


def toy_transfer_task(count=500, seed=0, num_classes=10):
    """Three labelled sources and one target, where source 1 is rendered from
    exactly the target's distribution (same glyph family, background and mode,
    independent random stream) and the other two use a different glyph
    vocabulary in other modes.
    """
    from .data import CorpusData
    from .datagen import DomainSpec, RenderMode, render_domain

    layout = [
        ("fine", "texture-a", RenderMode.Cr),
        ("fine", "texture-a", RenderMode.Cr),
        ("symbols", "texture-b", RenderMode.BB),
        ("symbols-bold", "texture-b", RenderMode.WB),
    ]
    domains, names = {}, {}
    for i, (fg, bg, mode) in enumerate(layout):
        spec = DomainSpec(i, fg, bg, mode, num_classes)
        domains[i] = render_domain(spec, fg, bg, count, seed)
        names[i] = f"{spec.name}#{i}"
    data = CorpusData.from_arrays(domains, seed=seed, names=names)
    return data, TransferTask((1, 2, 3), 0, "toy-matched")
