"""Cross-domain accuracy, embedding-distance correlation, ablations and reports."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import losses as L
from .data import CorpusData
from .embedding import (
    DomainReducer,
    EmbeddingStandardizer,
    distance_matrix,
    embed_images,
    embedding_matrix,
    knn_graph,
    write_embeddings,
)
from .exceptions import ConfigurationError, NumericError, PreconditionError, UndefinedCorrelationError
from .model import NetworkSpec
from .msda import ClassifierNet, predict
from .training import TrainConfig, train_disentangler

logger = logging.getLogger(__name__)

TAGS = ("full", "no-gram", "no-mi")
EXPERIMENT_SCHEMA = 1


@dataclass
class ClassifierConfig:
    """Schedule for the per-domain classifiers behind the accuracy matrix."""

    epochs: int = 6
    batch_size: int = 32
    lr: float = 1e-3
    scale: str = "desk"


@dataclass
class ExperimentConfig:
    name: str = "mini"
    seeds: tuple = (0, 1, 2)
    train: TrainConfig = field(default_factory=TrainConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    metric: str = "cosine"
    gram_layers: str = "all"
    distance_space: str = "standardized"
    knn_k: int = 5
    schema_version: int = EXPERIMENT_SCHEMA

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        if isinstance(self.classifier, dict):
            self.classifier = ClassifierConfig(**self.classifier)
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.metric not in ("cosine", "euclidean"):
            raise ConfigurationError(f"unknown metric {self.metric!r}")
        if self.gram_layers not in ("all", "last"):
            raise ConfigurationError(f"gram_layers must be 'all' or 'last', got {self.gram_layers!r}")
        if self.distance_space not in ("standardized", "reduced"):
            raise ConfigurationError(f"unknown distance space {self.distance_space!r}")
        if self.schema_version != EXPERIMENT_SCHEMA:
            raise ConfigurationError(f"unsupported experiment schema {self.schema_version}")

    def to_dict(self):
        d = asdict(self)
        d["train"] = self.train.to_dict()
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc


# -- accuracy matrix ---------------------------------------------------------

def train_classifier(data, domain_ids, config, seed=0):
    """Supervised G + D_cs + C on the training split of ``domain_ids``."""
    X, y, _ = data.stack(list(domain_ids))
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    spec = NetworkSpec.for_scale(config.scale, int(y.max()) + 1, 2)
    net = ClassifierNet(spec, seed=seed)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    net.train()
    for _ in range(config.epochs):
        order = rng.permutation(len(X))
        for start in range(0, len(X), config.batch_size):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2:
                continue
            loss = F.cross_entropy(net.predict_logits(data.tensor(X[idx])), torch.from_numpy(y[idx]))
            if not torch.isfinite(loss):
                raise NumericError("classifier loss", float(loss.detach()))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    net.eval()
    return net


def cross_domain_matrix(data, config=None, domain_ids=None, seed=0):
    """``A[i, j]``: accuracy on the held-out split of j of a classifier trained on i.

    A cell whose training fails is NaN and the remaining cells still run.
    """
    config = config or ClassifierConfig()
    ids = list(data.domain_ids if domain_ids is None else domain_ids)
    if len(ids) < 2:
        raise PreconditionError("a cross-domain matrix needs at least two domains")
    A = np.full((len(ids), len(ids)), np.nan)
    for a, i in enumerate(ids):
        try:
            net = train_classifier(data, [i], config, seed=seed)
        except (NumericError, RuntimeError) as exc:
            logger.warning("training on domain %s failed: %s", i, exc)
            continue
        for b, j in enumerate(ids):
            X, y = data.labeled(j, "eval")
            A[a, b] = float((predict(net, data, X) == y).mean())
    return A


# -- correlation -------------------------------------------------------------

def pearson_cc(x, y):
    """Pearson correlation of two equal-length samples."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape or len(x) < 2:
        raise PreconditionError("need two samples of equal length >= 2")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = math.sqrt(xc @ xc)
    sy = math.sqrt(yc @ yc)
    if sx == 0 or sy == 0:
        raise UndefinedCorrelationError("correlation is undefined for a constant sample")
    return float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0))


def off_diagonal_pairs(A, D):
    """(accuracy, distance) for every cell i != j where the accuracy is valid."""
    A = np.asarray(A, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    if A.shape != D.shape or A.shape[0] != A.shape[1]:
        raise PreconditionError("accuracy and distance matrices must be square and aligned")
    mask = ~np.eye(len(A), dtype=bool) & np.isfinite(A)
    return A[mask], D[mask]


def diagonal_gap(A):
    """mean(diag) - mean(off-diagonal), ignoring invalid cells."""
    A = np.asarray(A, dtype=np.float64)
    off = ~np.eye(len(A), dtype=bool)
    return float(np.nanmean(np.diag(A)) - np.nanmean(A[off]))


# -- embedding ---------------------------------------------------------------

def embed_corpus(model, data, domain_ids=None, gram_layers="all", split="train"):
    ids = list(data.domain_ids if domain_ids is None else domain_ids)
    out = []
    for i in ids:
        X, _ = data.labeled(i, split)
        out.append(embed_images(model, data.tensor(X), i, gram_layers))
    return out


def standardize(embeddings, use_gram=True):
    """Fit a shared standardizer and store each domain's standardized vector on it."""
    std = EmbeddingStandardizer()
    Z = std.fit_transform(embedding_matrix(embeddings, use_gram))
    for e, z in zip(embeddings, Z):
        e.standardized = z
    return std, Z


@dataclass
class TransferReport:
    tag: str
    seed: int
    domain_ids: list
    accuracy: np.ndarray
    distances: np.ndarray
    pcc: float
    names: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ConfigurationError(f"unknown ablation tag {self.tag!r}; choose from {TAGS}")
        self.accuracy = np.asarray(self.accuracy, dtype=np.float64)
        self.distances = np.asarray(self.distances, dtype=np.float64)
        n = len(self.domain_ids)
        if self.accuracy.shape != (n, n) or self.distances.shape != (n, n):
            raise PreconditionError("matrices must be square over the report's domains")
        valid = self.accuracy[np.isfinite(self.accuracy)]
        if np.any((valid < 0) | (valid > 1)):
            raise PreconditionError("accuracies must lie in [0, 1]")

    @property
    def diagonal_gap(self):
        return diagonal_gap(self.accuracy)

    def summary(self):
        return {"tag": self.tag, "seed": self.seed, "pcc": self.pcc, "diagonal_gap": self.diagonal_gap,
                "domain_ids": [int(i) for i in self.domain_ids], "names": list(self.names), **self.metadata}


def matrix_csv(M, domain_ids):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row"] + [str(i) for i in domain_ids])
    for i, row in zip(domain_ids, M):
        w.writerow([str(i)] + ["nan" if not np.isfinite(v) else repr(float(v)) for v in row])
    return buf.getvalue()


def read_matrix_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    ids = [int(c) for c in rows[0][1:]]
    return ids, np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def training_config_for(tag, train):
    """The disentangler schedule an ablation tag trains with."""
    if tag == "no-mi":
        return replace(train, weights=replace(train.weights, w4=0.0))
    return train


def run_ablation(config, tag, data, seed, accuracy=None, model=None, domain_ids=None):
    """One PCC measurement: train (or reuse) the model, embed, measure distances.

    ``no-gram`` uses prototype-only embeddings, ``no-mi`` trains with w4 = 0;
    everything else, including the seed, is shared. Returns ``(report, model,
    embeddings)``.
    """
    ids = list(data.domain_ids if domain_ids is None else domain_ids)
    if accuracy is None:
        accuracy = cross_domain_matrix(data, config.classifier, ids, seed=seed)
    if model is None:
        train = replace(training_config_for(tag, config.train), seed=seed)
        X, y, d = data.stack(ids, labeled_ids=train.labeled_domain_ids)
        d = np.searchsorted(ids, d)
        trainer = train_disentangler(train, X, y, d, (data.channel_mean, data.channel_std),
                                     num_domains=len(ids))
        model = trainer.model
    embeddings = embed_corpus(model, data, ids, config.gram_layers)
    _, Z = standardize(embeddings, use_gram=(tag != "no-gram"))
    if config.distance_space == "reduced":
        Z = DomainReducer(random_state=seed).fit_transform(Z)
    D = distance_matrix(Z, config.metric)
    acc, dist = off_diagonal_pairs(accuracy, D)
    report = TransferReport(tag, seed, ids, accuracy, D, pearson_cc(acc, dist),
                            [data.name(i) for i in ids],
                            {"epochs": config.train.epochs, "classifier_epochs": config.classifier.epochs})
    return report, model, embeddings


def run_experiment(config, data, out_dir=None, tags=("full", "no-gram"), domain_ids=None):
    """All requested tags for every seed. The accuracy matrix and, where the
    training schedule matches, the trained model are shared across tags.

    Results go to ``{out_dir}/{name}/{tag}/{seed}/`` when ``out_dir`` is given.
    """
    ids = list(data.domain_ids if domain_ids is None else domain_ids)
    reports = []
    for seed in config.seeds:
        A = cross_domain_matrix(data, config.classifier, ids, seed=seed)
        models = {}
        for tag in tags:
            key = "no-mi" if tag == "no-mi" else "full"
            report, model, embeddings = run_ablation(config, tag, data, seed, A, models.get(key), ids)
            models[key] = model
            reports.append(report)
            if out_dir is not None:
                save_run(Path(out_dir) / config.name / tag / str(seed), report, embeddings, config)
    return reports


def save_run(run_dir, report, embeddings, config):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "accuracy.csv").write_text(matrix_csv(report.accuracy, report.domain_ids))
    (run_dir / "distances.csv").write_text(matrix_csv(report.distances, report.domain_ids))
    (run_dir / "report.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    (run_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    vectors = np.stack([e.standardized for e in embeddings])
    write_embeddings(run_dir / "embeddings.csv", embeddings, vectors, {"tag": report.tag, "seed": report.seed})
    graph = knn_graph(report.distances, config.knn_k, report.domain_ids,
                      [e.sample_count for e in embeddings], report.names)
    (run_dir / "graph.json").write_text(graph.to_json() + "\n")
    (run_dir / "graph.dot").write_text(graph.to_dot())


def load_run(run_dir):
    run_dir = Path(run_dir)
    summary = json.loads((run_dir / "report.json").read_text())
    ids, A = read_matrix_csv(run_dir / "accuracy.csv")
    _, D = read_matrix_csv(run_dir / "distances.csv")
    meta = {k: v for k, v in summary.items() if k not in ("tag", "seed", "pcc", "diagonal_gap", "domain_ids", "names")}
    return TransferReport(summary["tag"], summary["seed"], ids, A, D, summary["pcc"], summary["names"], meta)


# -- report ------------------------------------------------------------------

def _figure_bytes(fig):
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    return buf.getvalue()


def _plots(run_dir, report):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .embedding import read_embeddings

    figures = {}
    acc, dist = off_diagonal_pairs(report.accuracy, report.distances)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(dist, acc, s=14)
    slope, intercept = np.polyfit(dist, acc, 1)
    xs = np.linspace(dist.min(), dist.max(), 50)
    ax.plot(xs, slope * xs + intercept, color="tab:red")
    ax.set_xlabel("embedding distance")
    ax.set_ylabel("cross-domain accuracy")
    ax.set_title(f"{report.tag}, seed {report.seed}: rho = {report.pcc:.3f}")
    figures["accuracy_vs_distance.png"] = _figure_bytes(fig)
    plt.close(fig)

    ids, vectors, _ = read_embeddings(run_dir / "embeddings.csv")
    coords = DomainReducer(random_state=report.seed).fit_transform(vectors) if len(ids) > 2 else vectors[:, :2]
    labels = report.names or [str(i) for i in ids]
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(coords[:, 0], coords[:, 1], s=20)
    for (x, y), name in zip(coords, labels):
        ax.annotate(name, (x, y), fontsize=7)
    ax.set_title("domain embeddings")
    figures["embedding_scatter.png"] = _figure_bytes(fig)

    graph = json.loads((run_dir / "graph.json").read_text())
    pos = {i: c for i, c in zip(ids, coords)}
    for e in graph["edges"]:
        a, b = pos[e["source"]], pos[e["target"]]
        ax.plot([a[0], b[0]], [a[1], b[1]], color="0.7", lw=0.6, zorder=0)
    ax.set_title("5-nearest-neighbour domain graph")
    figures["knowledge_graph.png"] = _figure_bytes(fig)
    plt.close(fig)
    return figures


def _fmt(v):
    return "nan" if not np.isfinite(v) else f"{v:.3f}"


def report(root, out_path=None, plots=True):
    """Summarize every ``{experiment}/{tag}/{seed}/`` run under ``root`` as markdown.

    Plots are written beside each run. Returns the markdown text.
    """
    root = Path(root)
    run_dirs = sorted(p.parent for p in root.glob("**/report.json"))
    if not run_dirs:
        raise PreconditionError(f"no runs found under {root}")
    lines = ["# Domain embedding report", "", "| run | tag | seed | PCC | diag - off-diag |", "|---|---|---|---|---|"]
    details = []
    for run_dir in run_dirs:
        r = load_run(run_dir)
        rel = run_dir.relative_to(root).as_posix()
        lines.append(f"| {rel} | {r.tag} | {r.seed} | {r.pcc:.4f} | {r.diagonal_gap:.4f} |")
        details += ["", f"## {rel}", "", "Accuracy (rows: training domain, columns: evaluated domain)", ""]
        names = r.names or [str(i) for i in r.domain_ids]
        details.append("| | " + " | ".join(names) + " |")
        details.append("|---" * (len(names) + 1) + "|")
        for name, row in zip(names, r.accuracy):
            details.append(f"| {name} | " + " | ".join(_fmt(v) for v in row) + " |")
        if plots:
            for fname, data in _plots(run_dir, r).items():
                (run_dir / fname).write_bytes(data)
                details.append(f"\n![{fname}]({rel}/{fname})")
    text = "\n".join(lines + details) + "\n"
    if out_path is not None:
        Path(out_path).write_text(text)
    return text
