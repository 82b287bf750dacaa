"""Domain vectors: f_ds prototype plus Gram tri-diagonals, then distances,
dimensionality reduction and the k-nearest-neighbour knowledge graph."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.decomposition import PCA
from sklearn.manifold import TSNE
from sklearn.utils.validation import check_array, check_is_fitted

from ._validation import to_tensor
from .exceptions import PreconditionError


@dataclass
class GramDiagonals:
    main: np.ndarray
    upper: np.ndarray
    lower: np.ndarray

    def concat(self):
        return np.concatenate([self.main, self.upper, self.lower])


def gram_tridiagonal(activations):
    """Main, super- and sub-diagonal of F F^T for a C x H x W stack (or a batch of them).

    For a batch the diagonals are returned per example, shape (B, C) / (B, C-1).
    """
    a = torch.as_tensor(activations)
    squeeze = a.dim() == 3
    if squeeze:
        a = a.unsqueeze(0)
    f = a.reshape(a.shape[0], a.shape[1], -1)
    main = (f * f).sum(-1)
    upper = (f[:, :-1] * f[:, 1:]).sum(-1)
    lower = (f[:, 1:] * f[:, :-1]).sum(-1)
    out = [t.detach().cpu().numpy() for t in (main, upper, lower)]
    if squeeze:
        out = [t[0] for t in out]
    return GramDiagonals(*out)


@dataclass
class DomainPrototype:
    vector: np.ndarray
    sample_count: int


def domain_prototype(latents):
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2 or len(latents) == 0:
        raise PreconditionError("prototype needs a non-empty list of feature vectors")
    return DomainPrototype(latents.mean(axis=0), len(latents))


@dataclass
class DomainEmbedding:
    domain_id: int
    prototype: DomainPrototype
    gram: list
    standardized: np.ndarray | None = None
    reduced: np.ndarray | None = None

    @property
    def raw(self):
        return np.concatenate([self.prototype.vector] + [g.concat() for g in self.gram])

    @property
    def sample_count(self):
        return self.prototype.sample_count


@torch.no_grad()
def embed_images(model, X, domain_id=0, gram_layers="all", batch_size=256):
    """Embed one domain from normalized images ``X`` (tensor) with an inference-mode model.

    Diagonals are accumulated per example and averaged, which equals taking
    the diagonals of the example-averaged Gram matrix.
    """
    if len(X) == 0:
        raise PreconditionError(f"domain {domain_id} has no images to embed")
    model.eval()
    f_sum = None
    diag_sums = None
    n = 0
    for start in range(0, len(X), batch_size):
        xb = X[start:start + batch_size]
        f_g, acts = model.G(xb)
        f_ds = model.D_ds(f_g).double()
        if gram_layers == "last":
            acts = acts[-1:]
        diags = [gram_tridiagonal(a.double()) for a in acts]
        sums = [[d.main.sum(0), d.upper.sum(0), d.lower.sum(0)] for d in diags]
        f_sum = f_ds.sum(0).numpy() if f_sum is None else f_sum + f_ds.sum(0).numpy()
        if diag_sums is None:
            diag_sums = sums
        else:
            diag_sums = [[a + b for a, b in zip(x, y)] for x, y in zip(diag_sums, sums)]
        n += len(xb)
    gram = [GramDiagonals(*(s / n for s in triple)) for triple in diag_sums]
    return DomainEmbedding(domain_id, DomainPrototype(f_sum / n, n), gram)


def embed_domain(model, manifest, domain_id, gram_layers="all", channel_stats=None, split="train"):
    from .datagen.corpus import load_domain

    manifest.entry(domain_id)
    mean, std = channel_stats or (manifest.channel_mean, manifest.channel_std)
    images, _ = load_domain(manifest, domain_id, split)
    return embed_images(model, to_tensor(images, mean, std), domain_id, gram_layers)


def embedding_matrix(embeddings, use_gram=True):
    if use_gram:
        return np.stack([e.raw for e in embeddings])
    return np.stack([e.prototype.vector for e in embeddings])


class EmbeddingStandardizer(BaseEstimator, TransformerMixin):
    """Per-dimension z-scoring across domains; near-constant dimensions are dropped."""

    def __init__(self, tol=1e-10):
        self.tol = tol

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        self.keep_ = std > self.tol * np.maximum(1.0, np.abs(self.mean_))
        self.scale_ = np.where(self.keep_, std, 1.0)
        self.dropped_ = np.flatnonzero(~self.keep_)
        return self

    def transform(self, X):
        check_is_fitted(self, "keep_")
        X = check_array(X, dtype=np.float64)
        return ((X - self.mean_) / self.scale_)[:, self.keep_]


class DomainReducer(BaseEstimator, TransformerMixin):
    """PCA to ``pca_dim`` followed by stochastic neighbour embedding to ``final_dim``.

    ``pca_dim`` is clamped to min(N - 1, d); the default perplexity is
    min(5, (N - 1) / 3) so that small domain sets stay valid.
    """

    def __init__(self, pca_dim=50, final_dim=2, perplexity=None, random_state=0):
        self.pca_dim = pca_dim
        self.final_dim = final_dim
        self.perplexity = perplexity
        self.random_state = random_state

    def fit_transform(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        n, d = X.shape
        if n < 2:
            raise PreconditionError("dimensionality reduction needs at least two domains")
        self.pca_dim_ = max(1, min(self.pca_dim, n - 1, d))
        self.pca_ = PCA(n_components=self.pca_dim_, random_state=self.random_state).fit(X)
        Z = self.pca_.transform(X)
        perplexity = self.perplexity or min(5.0, (n - 1) / 3.0)
        self.perplexity_ = perplexity
        init = "pca" if self.pca_dim_ >= self.final_dim else "random"
        tsne = TSNE(n_components=self.final_dim, perplexity=perplexity, init=init, method="exact",
                    random_state=self.random_state, learning_rate="auto")
        self.embedding_ = tsne.fit_transform(Z)
        return self.embedding_

    def fit(self, X, y=None):
        self.fit_transform(X)
        return self

    def pca_stage(self, X):
        check_is_fitted(self, "pca_")
        return self.pca_.transform(check_array(X, dtype=np.float64))


def reduce_dims(embeddings, pca_dim=50, final_dim=2, seed=0):
    return DomainReducer(pca_dim, final_dim, random_state=seed).fit_transform(embeddings)


def domain_distance(a, b, metric="cosine"):
    """1 - cos(a, b) (in [0, 2]) or the Euclidean distance between two standardized vectors."""
    if isinstance(a, DomainEmbedding):
        a = a.standardized
    if isinstance(b, DomainEmbedding):
        b = b.standardized
    if a is None or b is None:
        raise PreconditionError("embeddings must be standardized on a shared basis first")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise PreconditionError(f"embeddings differ in dimension: {a.shape} vs {b.shape}")
    if np.array_equal(a, b):
        return 0.0
    if metric == "euclidean":
        return float(np.sqrt(((a - b) ** 2).sum()))
    if metric == "cosine":
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0:
            return 1.0
        return float(np.clip(1.0 - a @ b / (na * nb), 0.0, 2.0))
    raise PreconditionError(f"unknown metric {metric!r}")


def distance_matrix(vectors, metric="cosine"):
    vectors = np.asarray(vectors, dtype=np.float64)
    n = len(vectors)
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            D[i, j] = D[j, i] = domain_distance(vectors[i], vectors[j], metric)
    return D


@dataclass
class KnowledgeGraph:
    domain_ids: list
    sample_counts: list
    edges: list  # (source, neighbour, distance)
    k: int = 5
    names: list = field(default_factory=list)

    def neighbours(self, i):
        return [j for s, j, _ in self.edges if s == i]

    def degree(self, i):
        """Number of distinct domains linked to ``i`` in either direction."""
        linked = {j for s, j, _ in self.edges if s == i} | {s for s, j, _ in self.edges if j == i}
        return len(linked)

    def to_dict(self):
        return {
            "k": self.k,
            "nodes": [{"domain_id": int(d), "sample_count": int(c), "degree": self.degree(d),
                       **({"name": self.names[idx]} if self.names else {})}
                      for idx, (d, c) in enumerate(zip(self.domain_ids, self.sample_counts))],
            "edges": [{"source": int(s), "target": int(t), "distance": float(w)} for s, t, w in self.edges],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_dot(self):
        lines = ["digraph domains {"]
        for idx, (d, c) in enumerate(zip(self.domain_ids, self.sample_counts)):
            label = self.names[idx] if self.names else str(d)
            lines.append(f'  {d} [label="{label}", sample_count={c}, degree={self.degree(d)}];')
        for s, t, w in self.edges:
            lines.append(f'  {s} -> {t} [weight="{w:.6f}", label="{w:.3f}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"


def knn_graph(D, k=5, domain_ids=None, sample_counts=None, names=None):
    """Connect each domain to its ``k`` closest others; ties go to the lower domain id."""
    D = np.asarray(D, dtype=np.float64)
    n = len(D)
    if D.shape != (n, n):
        raise PreconditionError("distance matrix must be square")
    if not np.allclose(D, D.T) or np.any(np.diag(D) != 0):
        raise PreconditionError("distance matrix must be symmetric with a zero diagonal")
    ids = list(range(n)) if domain_ids is None else [int(i) for i in domain_ids]
    counts = [0] * n if sample_counts is None else [int(c) for c in sample_counts]
    kk = min(k, n - 1)
    edges = []
    for i in range(n):
        others = [j for j in range(n) if j != i]
        others.sort(key=lambda j: (D[i, j], ids[j]))
        edges += [(ids[i], ids[j], float(D[i, j])) for j in others[:kk]]
    return KnowledgeGraph(ids, counts, edges, k, list(names or []))


def write_embeddings(path, embeddings, vectors, metadata=None):
    """CSV rows ``domain_id, v0, v1, ...`` plus a sibling ``.json`` metadata file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain_id"] + [f"v{i}" for i in range(vectors.shape[1])])
        for e, v in zip(embeddings, vectors):
            w.writerow([e.domain_id] + [repr(float(x)) for x in v])
    meta = {"domains": [{"domain_id": e.domain_id, "sample_count": e.sample_count} for e in embeddings],
            "dim": int(vectors.shape[1]), **(metadata or {})}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_embeddings(path):
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    ids = [int(r[0]) for r in rows]
    vectors = np.array([[float(x) for x in r[1:]] for r in rows])
    meta_path = path.with_suffix(".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return ids, vectors, meta
