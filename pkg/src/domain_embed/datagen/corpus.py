"""Corpus layout: domain grid, manifest schema, on-disk image store, splits."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..exceptions import ConfigurationError, PreconditionError
from .backgrounds import TexturePatches
from .glyphs import glyph_source
from .render import BACKGROUNDED_MODES, DomainSpec, RenderMode, render_domain

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

DEFAULT_FOREGROUNDS = ("fine", "bold", "italic")
FULL_FOREGROUNDS = ("fine", "bold", "italic", "wide", "jagged", "compact")
DEFAULT_BACKGROUNDS = ("texture-a", "texture-b")
SCALE_COUNTS = {
    "desk": {"backgrounded": 500, "original": 250},
    "full": {"backgrounded": 40000, "original": 20000},
}


def default_config(scale="desk"):
    return {
        "schema_version": SCHEMA_VERSION,
        "foregrounds": list(DEFAULT_FOREGROUNDS if scale == "desk" else FULL_FOREGROUNDS),
        "backgrounds": list(DEFAULT_BACKGROUNDS),
        "modes": [m.value for m in RenderMode],
        "num_classes": 10,
        "counts": dict(SCALE_COUNTS[scale]),
        "write_png": True,
        "mask_threshold": 0,
    }


def _fg_name(entry):
    return entry if isinstance(entry, str) else entry["name"]


def domain_grid(foregrounds, backgrounds=DEFAULT_BACKGROUNDS, modes=tuple(RenderMode), num_classes=10):
    """Enumerate DomainSpecs: every (foreground, background, backgrounded mode), then Or per foreground."""
    modes = [RenderMode(m) for m in modes]
    specs = []
    for fg in foregrounds:
        for bg in backgrounds:
            for mode in BACKGROUNDED_MODES:
                if mode in modes:
                    specs.append(DomainSpec(len(specs), _fg_name(fg), bg, mode, num_classes))
        if RenderMode.Or in modes:
            specs.append(DomainSpec(len(specs), _fg_name(fg), None, RenderMode.Or, num_classes))
    return specs


@dataclass
class DomainEntry:
    spec: DomainSpec
    count: int
    shard_path: str

    def to_dict(self):
        return {
            "domain_id": self.spec.domain_id,
            "foreground_set": self.spec.foreground_set,
            "background_source": self.spec.background_source,
            "mode": self.spec.mode.value,
            "num_classes": self.spec.num_classes,
            "count": self.count,
            "shard_path": self.shard_path,
        }

    @classmethod
    def from_dict(cls, d):
        spec = DomainSpec(d["domain_id"], d["foreground_set"], d["background_source"], d["mode"], d["num_classes"])
        return cls(spec, int(d["count"]), d["shard_path"])


@dataclass
class DatasetManifest:
    domains: list
    seed: int
    schema_version: int = SCHEMA_VERSION
    channel_mean: list = field(default_factory=lambda: [0.5, 0.5, 0.5])
    channel_std: list = field(default_factory=lambda: [0.25, 0.25, 0.25])
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        ids = [e.spec.domain_id for e in self.domains]
        if ids != list(range(len(ids))):
            raise ConfigurationError(f"domain ids must be 0..N-1 in order, got {ids}")
        for e in self.domains:
            if e.count <= 0:
                raise ConfigurationError(f"domain {e.spec.domain_id} has non-positive count {e.count}")

    @property
    def num_domains(self):
        return len(self.domains)

    @property
    def num_classes(self):
        return max(e.spec.num_classes for e in self.domains)

    def entry(self, domain_id):
        if not 0 <= domain_id < len(self.domains):
            raise KeyError(f"domain {domain_id} not in manifest ({len(self.domains)} domains)")
        return self.domains[domain_id]

    def to_dict(self):
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "channel_mean": self.channel_mean,
            "channel_std": self.channel_std,
            "domains": [e.to_dict() for e in self.domains],
        }

    @classmethod
    def from_dict(cls, d, root=None):
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported manifest schema {d.get('schema_version')!r}")
        return cls(
            domains=[DomainEntry.from_dict(x) for x in d["domains"]],
            seed=int(d["seed"]),
            schema_version=d["schema_version"],
            channel_mean=list(d["channel_mean"]),
            channel_std=list(d["channel_std"]),
            root=Path(root) if root is not None else None,
        )

    def save(self, path):
        path = Path(path)
        try:
            path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        except OSError as exc:
            raise OSError(f"writing manifest {path}: {exc}") from exc

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except OSError as exc:
            raise OSError(f"reading manifest {path}: {exc}") from exc
        return cls.from_dict(data, root=path.parent)


def is_eval_example(seed, domain_id, index, eval_fraction=0.2):
    """Deterministic hash-based 80/20 split membership."""
    h = hashlib.blake2b(f"{seed}:{domain_id}:{index}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "big") / 2.0 ** 64 < eval_fraction


def split_indices(seed, domain_id, count, eval_fraction=0.2):
    flags = np.array([is_eval_example(seed, domain_id, i, eval_fraction) for i in range(count)], dtype=bool)
    return np.flatnonzero(~flags), np.flatnonzero(flags)


def _write_shard(shard_dir, images, labels, write_png):
    try:
        shard_dir.mkdir(parents=True, exist_ok=True)
        np.save(shard_dir / "images.npy", images)
        np.save(shard_dir / "labels.npy", labels)
        if write_png:
            png_dir = shard_dir / "png"
            png_dir.mkdir(exist_ok=True)
            for i, (img, lab) in enumerate(zip(images, labels)):
                Image.fromarray(img).save(png_dir / f"{i:06d}_{int(lab)}.png", optimize=False)
    except OSError as exc:
        raise OSError(f"writing shard {shard_dir}: {exc}") from exc


def build_corpus(config, out_dir, seed):
    """Render every domain of the configured grid to ``out_dir``; return the manifest.

    Writes ``manifest.json`` plus, per domain, ``images.npy``/``labels.npy``
    and (optionally) one PNG per image.
    """
    cfg = {**default_config(config.get("scale", "desk")), **config}
    if not cfg["foregrounds"]:
        raise ConfigurationError("config lists no foreground sets")
    out_dir = Path(out_dir)
    specs = domain_grid(cfg["foregrounds"], cfg["backgrounds"], cfg["modes"], cfg["num_classes"])
    sources = {_fg_name(fg): fg for fg in cfg["foregrounds"]}
    counts = cfg["counts"]

    entries = []
    sums = np.zeros(3)
    sq_sums = np.zeros(3)
    n_pixels = 0
    glyph_cache = {}
    for spec in specs:
        per_fg = counts.get(spec.foreground_set, counts)
        count = int(per_fg["original"] if spec.mode is RenderMode.Or else per_fg["backgrounded"])
        if spec.foreground_set not in glyph_cache:
            glyph_cache[spec.foreground_set] = glyph_source(sources[spec.foreground_set])
        patches = TexturePatches(spec.background_source) if spec.background_source else None
        images, labels = render_domain(spec, glyph_cache[spec.foreground_set], patches, count, seed,
                                       cfg["mask_threshold"])
        shard = f"domains/{spec.domain_id:03d}_{spec.name}"
        _write_shard(out_dir / shard, images, labels, cfg["write_png"])
        x = images.reshape(-1, 3).astype(np.float64) / 255.0
        sums += x.sum(0)
        sq_sums += (x ** 2).sum(0)
        n_pixels += len(x)
        entries.append(DomainEntry(spec, count, shard))
        logger.info("rendered domain %d (%s): %d images", spec.domain_id, spec.name, count)

    mean = sums / n_pixels
    std = np.sqrt(np.maximum(sq_sums / n_pixels - mean ** 2, 1e-12))
    manifest = DatasetManifest(entries, int(seed), channel_mean=[round(float(v), 8) for v in mean],
                               channel_std=[round(float(v), 8) for v in std], root=out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest


def load_domain(manifest, domain_id, split=None, eval_fraction=0.2):
    """Return (uint8 images N x 32 x 32 x 3, labels) for a domain, optionally one split."""
    entry = manifest.entry(domain_id)
    if manifest.root is None:
        raise PreconditionError("manifest has no root directory; load it from disk first")
    shard = Path(manifest.root) / entry.shard_path
    images = np.load(shard / "images.npy", mmap_mode="r")
    labels = np.load(shard / "labels.npy")
    if split is None:
        return np.asarray(images), labels
    train_idx, eval_idx = split_indices(manifest.seed, domain_id, entry.count, eval_fraction)
    idx = train_idx if split == "train" else eval_idx
    return np.asarray(images[idx]), labels[idx]
