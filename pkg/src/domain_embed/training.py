"""Two-step adversarial training of the disentanglement model.

Every minibatch step runs three phases in order:

1. supervised: G, D_cs, C on the class cross-entropy, G, D_ds, DC on the
   domain cross-entropy, and R (plus both heads) on reconstruction + KL;
2. adversarial: with DC frozen, D_cs minimizes the negative entropy of
   DC(f_cs); with C frozen, D_ds minimizes the negative entropy of C(f_ds);
3. mutual information: T ascends the MINE estimate on (f_ds, f_cs), then
   both heads descend it.
"""
from __future__ import annotations

import contextlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from ._validation import to_tensor
from .datagen.corpus import load_domain
from .exceptions import ConfigurationError, NumericError, PreconditionError
from .model import DisentangleNet, NetworkSpec, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

COMPONENTS = ("G", "D_ds", "D_cs", "C", "DC", "R", "T")


@dataclass
class TrainConfig:
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    optimizer: str = "adam"
    lr: float = 1e-4
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    labeled_domain_ids: tuple | None = None
    device: str = "cpu"
    scale: str = "desk"
    mine_steps: int = 1
    mine_lr: float | None = None
    detach_reconstruction_target: bool = True

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = L.LossWeights(**self.weights)
        self.betas = tuple(self.betas)
        if self.labeled_domain_ids is not None:
            self.labeled_domain_ids = tuple(int(i) for i in self.labeled_domain_ids)
        if not self.lr > 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2 (MINE needs a shuffle partner)")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        if self.labeled_domain_ids is not None:
            d["labeled_domain_ids"] = list(self.labeled_domain_ids)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def make_optimizer(params, config, lr=None):
    lr = lr or config.lr
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=lr, betas=config.betas)
    return torch.optim.SGD(params, lr=lr, momentum=config.momentum)


@contextlib.contextmanager
def frozen(*modules):
    """Hold modules fixed: no gradients, and BN layers use running statistics."""
    saved = [(m, m.training, [p.requires_grad for p in m.parameters()]) for m in modules]
    for m in modules:
        m.eval()
        m.requires_grad_(False)
    try:
        yield
    finally:
        for m, was_training, flags in saved:
            m.train(was_training)
            for p, flag in zip(m.parameters(), flags):
                p.requires_grad_(flag)


def _finite(name, value):
    v = float(value.detach()) if torch.is_tensor(value) else float(value)
    if not math.isfinite(v):
        raise NumericError(name, v)
    return v


class DisentangleTrainer:
    """Owns a model, its per-component optimizers and the RNG state of a run."""

    def __init__(self, model, config):
        self.model = model
        self.config = config
        self.optimizers = {
            name: make_optimizer(model.component(name).parameters(), config,
                                 config.mine_lr if name == "T" else None)
            for name in COMPONENTS
        }
        self.step = 0
        self.epoch = 0
        self.running = {}
        self.np_rng = np.random.default_rng(config.seed)
        self.torch_rng = torch.Generator().manual_seed(config.seed)
        # dropout draws from the global generator
        torch.manual_seed(config.seed)

    # -- phases ---------------------------------------------------------------

    def _zero(self, names=COMPONENTS):
        for n in names:
            self.optimizers[n].zero_grad(set_to_none=True)

    def _step(self, names):
        for n in names:
            self.optimizers[n].step()

    def train_step(self, x, y, d):
        """One three-phase update on a batch; returns the LossBreakdown."""
        self.model.train()
        labeled = y >= 0
        vals, f_g = self.supervised_phase(x, y, d)
        vals.update(self.adversarial_phase(f_g, labeled))
        w4 = self.config.weights.w4
        vals["mi"] = self.mi_phase(f_g) if w4 > 0 else self._mi_estimate(f_g)
        self._zero()

        breakdown = L.total_loss(vals, self.config.weights)
        _finite("total", breakdown.total)
        self.step += 1
        for k, v in breakdown.to_dict().items():
            self.running[k] = self.running.get(k, 0.0) + v
        return breakdown

    def supervised_phase(self, x, y, d):
        """Class, domain and reconstruction terms; returns their values and detached f_G."""
        m, w = self.model, self.config.weights
        labeled = y >= 0
        has_labels = bool(labeled.any())
        vals = {}
        self._zero()
        out = m(x)
        ce_c = L.ce_class(out.class_probs[labeled], y[labeled]) if has_labels else x.new_zeros(())
        ce_d = L.ce_domain(out.domain_probs, d)
        target = out.f_g.detach() if self.config.detach_reconstruction_target else out.f_g
        rec, kl = L.rec_kl(target, out.f_g_hat, torch.cat([out.f_ds, out.f_cs], dim=1))
        for name, v in (("ce_class", ce_c), ("ce_domain", ce_d), ("rec", rec), ("kl", kl)):
            vals[name] = _finite(name, v)
        loss = 0.0
        if w.w1 > 0 and has_labels:
            loss = loss + w.w1 * ce_c
        if w.w2 > 0:
            loss = loss + w.w2 * ce_d
        if w.w3 > 0:
            loss = loss + w.w3 * (rec + kl)
        if torch.is_tensor(loss):
            loss.backward()
            self._step(("G", "D_ds", "D_cs", "C", "DC", "R"))
        return vals, out.f_g.detach()

    def adversarial_phase(self, f_g, labeled):
        """D_cs confuses the frozen DC, then D_ds confuses the frozen C."""
        m, w = self.model, self.config.weights
        has_labels = bool(labeled.any())
        vals = {}
        self._zero()
        with frozen(m.DC):
            f_cs = m.D_cs(f_g)
            ent_c = L.ent_class(m.DC(f_cs)[labeled]) if has_labels else f_g.new_zeros(())
            vals["ent_class"] = _finite("ent_class", ent_c)
            if w.w1 * w.alpha > 0 and has_labels:
                (w.w1 * w.alpha * ent_c).backward()
                self._step(("D_cs",))
        self._zero()
        with frozen(m.C):
            f_ds = m.D_ds(f_g)
            ent_d = L.ent_domain(m.C(f_ds))
            vals["ent_domain"] = _finite("ent_domain", ent_d)
            if w.w2 * w.alpha_d > 0:
                (w.w2 * w.alpha_d * ent_d).backward()
                self._step(("D_ds",))
        return vals

    def _shuffled(self, n):
        return torch.randperm(n, generator=self.torch_rng)

    def _mi_estimate(self, f_g):
        m = self.model
        with torch.no_grad(), frozen(m.D_ds, m.D_cs):
            p, q = m.D_ds(f_g), m.D_cs(f_g)
            t_joint = m.T(p, q)
            t_marg = m.T(p, q[self._shuffled(len(q))])
            return _finite("mi", L.mine_mi(t_joint, t_marg))

    def mi_phase(self, f_g):
        """T ascends the estimate for ``mine_steps`` steps, then both heads descend it."""
        m, w = self.model, self.config.weights
        with torch.no_grad():
            p, q = m.D_ds(f_g), m.D_cs(f_g)
        for _ in range(self.config.mine_steps):
            self._zero(("T",))
            mi = L.mine_mi(m.T(p, q), m.T(p, q[self._shuffled(len(q))]))
            _finite("mi", mi)
            (-mi).backward()
            self._step(("T",))
        self._zero()
        with frozen(m.T):
            p, q = m.D_ds(f_g), m.D_cs(f_g)
            mi = L.mine_mi(m.T(p, q), m.T(p, q[self._shuffled(len(q))]))
            value = _finite("mi", mi)
            (w.w4 * mi).backward()
        self._step(("D_ds", "D_cs"))
        return value

    # -- epochs ---------------------------------------------------------------

    def batches(self, n):
        """Seeded shuffled index batches; a trailing batch smaller than 2 is dropped."""
        order = self.np_rng.permutation(n)
        bs = self.config.batch_size
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            if len(idx) >= 2:
                yield idx

    def run_epoch(self, X, y, d, log=None):
        """``X`` is a normalized float tensor; ``y`` uses -1 for rows without a class label."""
        self.running = {}
        n_steps = 0
        for idx in self.batches(len(X)):
            idx_t = torch.from_numpy(idx)
            bd = self.train_step(X[idx_t], y[idx_t], d[idx_t])
            n_steps += 1
            if log is not None:
                log({"epoch": self.epoch, "step": self.step, **bd.to_dict()})
        self.epoch += 1
        return {k: v / max(n_steps, 1) for k, v in self.running.items()}

    # -- persistence ----------------------------------------------------------

    def state(self):
        return {
            "config": self.config.to_dict(),
            "step": self.step,
            "epoch": self.epoch,
            "running": dict(self.running),
            "optimizers": {k: o.state_dict() for k, o in self.optimizers.items()},
            "np_rng": self.np_rng.bit_generator.state,
            "torch_rng": self.torch_rng.get_state(),
            "global_torch_rng": torch.get_rng_state(),
        }

    def load_state(self, state):
        self.step = state["step"]
        self.epoch = state["epoch"]
        self.running = dict(state["running"])
        for k, o in self.optimizers.items():
            o.load_state_dict(state["optimizers"][k])
        self.np_rng.bit_generator.state = state["np_rng"]
        self.torch_rng.set_state(state["torch_rng"])
        torch.set_rng_state(state["global_torch_rng"])

    def save(self, path, extra=None):
        save_checkpoint(path, self.model, {"train_state": self.state(), **(extra or {})})

    @classmethod
    def resume(cls, path):
        model, extra = load_checkpoint(path)
        state = extra["train_state"]
        trainer = cls(model, TrainConfig.from_dict(state["config"]))
        trainer.load_state(state)
        return trainer, extra


def label_mask(domains, labels, labeled_domain_ids):
    """Class labels with rows outside ``labeled_domain_ids`` replaced by -1."""
    labels = np.asarray(labels, dtype=np.int64).copy()
    if labeled_domain_ids is not None:
        labels[~np.isin(domains, list(labeled_domain_ids))] = -1
    return labels


def collect_split(manifest, split="train", domain_ids=None):
    """Concatenate one split of several domains: (images, class labels, domain labels)."""
    ids = range(manifest.num_domains) if domain_ids is None else domain_ids
    xs, ys, ds = [], [], []
    for i in ids:
        imgs, labs = load_domain(manifest, i, split)
        xs.append(imgs)
        ys.append(labs)
        ds.append(np.full(len(labs), i, dtype=np.int64))
    return np.concatenate(xs), np.concatenate(ys), np.concatenate(ds)


def train_disentangler(config, images, labels, domains, channel_stats, num_classes=None, num_domains=None,
                       log=None, on_epoch=None):
    """Train a fresh model on uint8 images; ``labels`` uses -1 for rows without a class label.

    Domain labels must already be contiguous ids ``0..num_domains-1``.
    Returns the trainer, whose ``model`` is left in inference mode.
    """
    X = to_tensor(images, *channel_stats)
    y = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    d = torch.as_tensor(np.asarray(domains, dtype=np.int64))
    if len(X) < 2:
        raise PreconditionError("training needs at least two images")
    num_classes = num_classes or int(y.max()) + 1
    num_domains = num_domains or int(d.max()) + 1
    spec = NetworkSpec.for_scale(config.scale, num_classes, num_domains)
    trainer = DisentangleTrainer(DisentangleNet(spec, seed=config.seed), config)
    for _ in range(config.epochs):
        avg = trainer.run_epoch(X, y, d, log)
        logger.info("epoch %d: %s", trainer.epoch, {k: round(v, 4) for k, v in avg.items()})
        if on_epoch is not None:
            on_epoch(trainer)
    trainer.model.eval()
    return trainer


def fit(config, manifest, out_dir):
    """Train on the manifest's training splits; checkpoint every epoch and log every step.

    Returns the path of the final checkpoint.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"creating output directory {out_dir}: {exc}") from exc
    images, labels, domains = collect_split(manifest, "train")
    labels = label_mask(domains, labels, config.labeled_domain_ids)
    stats = (manifest.channel_mean, manifest.channel_std)
    extra = {"channel_mean": manifest.channel_mean, "channel_std": manifest.channel_std}
    with open(out_dir / "train_log.jsonl", "w") as fh:
        def log(row):
            fh.write(json.dumps(row, sort_keys=True) + "\n")

        def on_epoch(trainer):
            fh.flush()
            trainer.save(out_dir / f"checkpoint_epoch{trainer.epoch:03d}.pt", extra)

        trainer = train_disentangler(config, images, labels, domains, stats, manifest.num_classes,
                                     manifest.num_domains, log, on_epoch)
    final = out_dir / "checkpoint.pt"
    trainer.save(final, extra)
    return final


@torch.no_grad()
def predict_classes(model, X, batch_size=256):
    """argmax of C(D_cs(G(x))) in inference mode; ``X`` is a normalized tensor."""
    model.eval()
    preds = []
    for start in range(0, len(X), batch_size):
        preds.append(model.predict_logits(X[start:start + batch_size]).argmax(1))
    return torch.cat(preds).numpy() if preds else np.zeros(0, dtype=np.int64)


def accuracy(pred, labels):
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise PreconditionError("accuracy of an empty split is undefined")
    return float((pred == labels).mean())


def evaluate_accuracy(model, manifest, domain_id, channel_stats=None):
    """Top-1 accuracy on the held-out split of ``domain_id``; ``model`` may be a checkpoint path."""
    if isinstance(model, (str, Path)):
        model, extra = load_checkpoint(model)
        channel_stats = channel_stats or (extra.get("channel_mean"), extra.get("channel_std"))
    mean, std = channel_stats or (manifest.channel_mean, manifest.channel_std)
    images, labels = load_domain(manifest, domain_id, "eval")
    return accuracy(predict_classes(model, to_tensor(images, mean, std)), labels)
