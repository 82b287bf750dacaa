"""In-memory view of a corpus split into train / held-out parts per domain."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import channel_stats, check_images, check_labels, to_tensor
from .datagen.corpus import load_domain
from .exceptions import LabelAccessError, PreconditionError


class UnlabeledImages:
    """Images of a target domain whose labels must not be read during adaptation."""

    def __init__(self, images, domain_id):
        self.images = images
        self.domain_id = domain_id

    def __len__(self):
        return len(self.images)

    @property
    def labels(self):
        raise LabelAccessError(f"labels of target domain {self.domain_id} are not available for training")


@dataclass
class CorpusData:
    """Per-domain ``(images, labels)`` for the training and held-out splits."""

    train: dict
    eval: dict
    channel_mean: np.ndarray
    channel_std: np.ndarray
    names: dict = field(default_factory=dict)

    @classmethod
    def from_manifest(cls, manifest, domain_ids=None):
        ids = range(manifest.num_domains) if domain_ids is None else domain_ids
        train, held = {}, {}
        for i in ids:
            train[i] = load_domain(manifest, i, "train")
            held[i] = load_domain(manifest, i, "eval")
        names = {i: manifest.entry(i).spec.name for i in ids}
        return cls(train, held, np.asarray(manifest.channel_mean), np.asarray(manifest.channel_std), names)

    @classmethod
    def from_arrays(cls, domains, eval_fraction=0.2, seed=0, names=None, stats=None):
        """Build from ``{domain_id: (images, labels)}``, splitting each domain with a seeded permutation."""
        train, held = {}, {}
        rng = np.random.default_rng(seed)
        for i, (X, y) in domains.items():
            X = check_images(X)
            y = check_labels(y, len(X))
            order = rng.permutation(len(X))
            n_eval = max(1, int(round(eval_fraction * len(X))))
            held[i] = (X[order[:n_eval]], y[order[:n_eval]])
            train[i] = (X[order[n_eval:]], y[order[n_eval:]])
        if stats is None:
            stats = channel_stats(np.concatenate([t[0] for t in train.values()]))
        return cls(train, held, np.asarray(stats[0]), np.asarray(stats[1]), dict(names or {}))

    @property
    def domain_ids(self):
        return sorted(self.train)

    def name(self, i):
        return self.names.get(i, str(i))

    def tensor(self, images):
        return to_tensor(images, self.channel_mean, self.channel_std)

    def labeled(self, i, split="train"):
        X, y = (self.train if split == "train" else self.eval)[i]
        return X, y

    def unlabeled(self, i):
        return UnlabeledImages(self.train[i][0], i)

    def stack(self, domain_ids, split="train", labeled_ids=None):
        """Concatenate domains; class labels of domains outside ``labeled_ids`` become -1."""
        if not domain_ids:
            raise PreconditionError("no domains selected")
        xs, ys, ds = [], [], []
        for i in domain_ids:
            X, y = self.labeled(i, split)
            xs.append(X)
            ys.append(y if labeled_ids is None or i in labeled_ids else np.full(len(y), -1))
            ds.append(np.full(len(y), i))
        return np.concatenate(xs), np.concatenate(ys).astype(np.int64), np.concatenate(ds).astype(np.int64)
