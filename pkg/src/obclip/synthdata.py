"""Synthetic noisy image/text pairs and the retrieval-side metrics.

Each class ``k`` owns a latent vector ``z_k``. Image and text features are
fixed random linear read-outs of ``z_k`` plus independent Gaussian noise.
With probability ``false_positive_rate`` a pair's text is drawn from a
different class (a corrupted positive). Small ``num_classes`` makes in-batch
same-class negatives (false negatives) common.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .distance import DistanceKind, distance_matrix
from .rng import named_rng

DATASET_FORMAT = "obclip-dataset/1"


@dataclass(frozen=True)
class GeneratorConfig:
    num_classes: int = 16
    latent_dim: int = 8
    image_dim: int = 64
    text_dim: int = 64
    noise_std: float = 1.0
    false_positive_rate: float = 0.0
    out_of_domain: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if min(self.latent_dim, self.image_dim, self.text_dim) < 1:
            raise ValueError("feature and latent dims must be >= 1")
        if not self.noise_std >= 0:
            raise ValueError("noise_std must be >= 0")
        if not 0.0 <= self.false_positive_rate < 1.0:
            raise ValueError("false_positive_rate must lie in [0, 1)")

    @classmethod
    def from_dict(cls, raw: dict) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown generator keys: {sorted(unknown)}")
        return cls(**raw)


@dataclass(frozen=True)
class PairBatch:
    image: np.ndarray
    text: np.ndarray
    labels: np.ndarray
    text_labels: np.ndarray
    corrupted: np.ndarray

    def __len__(self) -> int:
        return self.labels.shape[0]

    def take(self, idx) -> "PairBatch":
        return PairBatch(self.image[idx], self.text[idx], self.labels[idx], self.text_labels[idx], self.corrupted[idx])


def _world(config: GeneratorConfig):
    """Class latents and the two read-out matrices, shared by every split."""
    rng = named_rng(config.seed, "synthdata", "latents")
    z = rng.standard_normal((config.num_classes, config.latent_dim))
    proj = named_rng(config.seed, "synthdata", "projection-ood" if config.out_of_domain else "projection")
    scale = 1.0 / math.sqrt(config.latent_dim)
    a_img = proj.standard_normal((config.image_dim, config.latent_dim)) * scale
    a_txt = proj.standard_normal((config.text_dim, config.latent_dim)) * scale
    return z, a_img, a_txt


def generate(config: GeneratorConfig, count: int, split: str = "train") -> PairBatch:
    """Draw ``count`` pairs; ``split`` names an independent sample stream over the same world."""
    if count < 1:
        raise ValueError("count must be >= 1")
    z, a_img, a_txt = _world(config)
    rng = named_rng(config.seed, "synthdata", "samples", split)
    k = config.num_classes
    labels = rng.integers(0, k, count)
    corrupted = rng.random(count) < config.false_positive_rate
    # uniform over the other k - 1 classes
    shift = rng.integers(1, k, count)
    text_labels = np.where(corrupted, (labels + shift) % k, labels)
    image = z[labels] @ a_img.T + config.noise_std * rng.standard_normal((count, config.image_dim))
    text = z[text_labels] @ a_txt.T + config.noise_std * rng.standard_normal((count, config.text_dim))
    return PairBatch(image, text, labels, text_labels, corrupted)


# --- dump / load ----------------------------------------------------------------

def dump(batch: PairBatch, config: GeneratorConfig, csv_path, sidecar_path=None) -> tuple[Path, Path]:
    """Write a columnar CSV (17 significant digits) and a JSON sidecar with the config."""
    csv_path = Path(csv_path)
    sidecar_path = Path(sidecar_path) if sidecar_path else csv_path.with_suffix(".json")
    header = ([f"img_{i}" for i in range(batch.image.shape[1])] + [f"txt_{i}" for i in range(batch.text.shape[1])]
              + ["label", "text_label", "corrupted"])
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(batch)):
            w.writerow([f"{v:.17g}" for v in batch.image[i]] + [f"{v:.17g}" for v in batch.text[i]]
                       + [int(batch.labels[i]), int(batch.text_labels[i]), int(batch.corrupted[i])])
    sidecar = {"format": DATASET_FORMAT, "count": len(batch), "generator": asdict(config)}
    sidecar_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return csv_path, sidecar_path


def load(csv_path, sidecar_path=None) -> tuple[PairBatch, GeneratorConfig]:
    csv_path = Path(csv_path)
    sidecar_path = Path(sidecar_path) if sidecar_path else csv_path.with_suffix(".json")
    meta = json.loads(sidecar_path.read_text())
    if meta.get("format") != DATASET_FORMAT:
        raise ValueError(f"{sidecar_path}: unsupported dataset format {meta.get('format')!r}")
    config = GeneratorConfig.from_dict(meta["generator"])
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    img_cols = [i for i, h in enumerate(header) if h.startswith("img_")]
    txt_cols = [i for i, h in enumerate(header) if h.startswith("txt_")]
    col = {h: i for i, h in enumerate(header)}
    data = np.array([[float(r[i]) for i in img_cols + txt_cols] for r in body]).reshape(len(body), -1)
    batch = PairBatch(
        image=data[:, :len(img_cols)],
        text=data[:, len(img_cols):],
        labels=np.array([int(r[col["label"]]) for r in body]),
        text_labels=np.array([int(r[col["text_label"]]) for r in body]),
        corrupted=np.array([r[col["corrupted"]] == "1" for r in body]),
    )
    return batch, config


# --- metrics --------------------------------------------------------------------

def similarity_matrix(kind, emb_img, emb_txt) -> np.ndarray:
    return distance_matrix(kind, np.asarray(getattr(emb_img, "data", emb_img)),
                           np.asarray(getattr(emb_txt, "data", emb_txt))).data


def _ranks(sim: np.ndarray) -> np.ndarray:
    """Rank of the diagonal entry in each row, larger similarity first, ties to the lower index."""
    diag = np.diag(sim)[:, None]
    better = np.sum(sim > diag, axis=1)
    lower_tie = np.sum(np.tril(sim == diag, k=-1), axis=1)
    return better + lower_tie


def recall_at_k(emb_img, emb_txt, kind, k: int = 1) -> tuple[float, float]:
    """Image-to-text and text-to-image recall@k for in-order pairs."""
    sim = similarity_matrix(kind, emb_img, emb_txt)
    b = sim.shape[0]
    if not 1 <= k <= b:
        raise ValueError(f"k={k} must lie in [1, {b}] candidates")
    return float(np.mean(_ranks(sim) < k)), float(np.mean(_ranks(sim.T) < k))


def _pair_values(kind, a, b, off_diagonal: bool) -> np.ndarray:
    d = -similarity_matrix(kind, a, b)
    if off_diagonal:
        return d[~np.eye(d.shape[0], dtype=bool)]
    return np.diag(d).copy()


def distance_histograms(batches: Iterable[tuple], kind, bins: int = 50, value_range=None) -> dict:
    """Raw (unscaled) distance samples for positive pairs and the three negative families.

    ``batches`` yields ``(emb_img, emb_txt)`` pairs with matching rows. Returns
    ``{series: {"values", "counts", "edges", "mean", "std"}}`` with shared bin edges.
    """
    series = {"pos": [], "neg": [], "img_neg": [], "txt_neg": []}
    for u, v in batches:
        if np.shape(getattr(u, "data", u))[0] < 2:
            raise ValueError("histograms need batches of at least 2 pairs")
        series["pos"].append(_pair_values(kind, u, v, False))
        series["neg"].append(_pair_values(kind, u, v, True))
        series["img_neg"].append(_pair_values(kind, u, u, True))
        series["txt_neg"].append(_pair_values(kind, v, v, True))
    values = {k: np.concatenate(v) for k, v in series.items()}
    if value_range is None:
        lo = min(float(v.min()) for v in values.values())
        hi = max(float(v.max()) for v in values.values())
        value_range = (lo, hi) if hi > lo else (lo - 0.5, hi + 0.5)
    edges = np.linspace(value_range[0], value_range[1], bins + 1)
    out = {}
    for name, v in values.items():
        counts, _ = np.histogram(v, bins=edges)
        out[name] = {"values": v, "counts": counts, "edges": edges,
                     "mean": float(np.mean(v)), "std": float(np.std(v))}
    return out


def _flat(x) -> np.ndarray:
    arr = np.asarray(getattr(x, "data", x), dtype=np.float64)
    return arr.reshape(arr.shape[0], -1)


def uniformity(x, t: float = 2.0, chunk: int = 2048) -> float:
    """``log mean_{i<j} exp(-t ||x_i - x_j||^2)`` over all distinct pairs."""
    x = _flat(x)
    n = x.shape[0]
    if n < 2:
        raise ValueError("uniformity needs at least 2 embeddings")
    sq = np.einsum("ij,ij->i", x, x)
    total = 0.0
    for s in range(0, n, chunk):
        blk = x[s:s + chunk]
        d2 = np.maximum(sq[s:s + chunk, None] + sq[None, :] - 2.0 * blk @ x.T, 0.0)
        rows = np.arange(s, s + blk.shape[0])[:, None]
        mask = np.arange(n)[None, :] > rows
        total += float(np.sum(np.exp(-t * d2) * mask))
    return math.log(total / (n * (n - 1) / 2))


def alignment(x, y) -> float:
    """Mean squared distance between matched rows of ``x`` and ``y``."""
    a, b = _flat(x), _flat(y)
    if a.shape != b.shape:
        raise ValueError(f"alignment needs matched batches, got {a.shape} and {b.shape}")
    return float(np.mean(np.sum((a - b) ** 2, axis=1)))


def uniformity_alignment(emb_img, emb_txt=None) -> tuple[float, float]:
    """Uniformity over every embedding and alignment of the positive pairs.

    With only one batch, alignment compares it with itself and is 0.
    """
    emb_txt = emb_img if emb_txt is None else emb_txt
    pool = np.concatenate([_flat(emb_img), _flat(emb_txt)]) if emb_txt is not emb_img else _flat(emb_img)
    return uniformity(pool), alignment(emb_img, emb_txt)


@dataclass
class SubsetResult:
    subset_size: int
    i2t_mean: float
    i2t_std: float
    t2i_mean: float
    t2i_std: float

    @property
    def mean(self) -> float:
        return 0.5 * (self.i2t_mean + self.t2i_mean)


def token_subset_eval(emb_img, emb_txt, subset_size: int, n_subsets: int = 5,
                      rng: Optional[np.random.Generator] = None, kind=DistanceKind.OBLIQUE_NEG_TRACE,
                      batch_size: Optional[int] = None) -> SubsetResult:
    """Recall@1 when only ``subset_size`` randomly chosen sub-spheres enter the distance.

    Embeddings are ``(N, m, n)``. Each subset is evaluated on consecutive
    galleries of ``batch_size`` pairs (all ``N`` at once by default).
    """
    u = np.asarray(getattr(emb_img, "data", emb_img))
    v = np.asarray(getattr(emb_txt, "data", emb_txt))
    m = u.shape[1]
    if not 1 <= subset_size <= m:
        raise ValueError(f"subset_size must lie in [1, {m}], got {subset_size}")
    if n_subsets < 1:
        raise ValueError("n_subsets must be >= 1")
    rng = rng or named_rng(0, "token-subset")
    bs = batch_size or u.shape[0]
    i2t, t2i = [], []
    for _ in range(n_subsets):
        cols = np.sort(rng.choice(m, subset_size, replace=False))
        a, b = [], []
        for s in range(0, u.shape[0] - bs + 1, bs):
            r = recall_at_k(u[s:s + bs, cols], v[s:s + bs, cols], kind, 1)
            a.append(r[0])
            b.append(r[1])
        i2t.append(np.mean(a))
        t2i.append(np.mean(b))
    return SubsetResult(subset_size, float(np.mean(i2t)), float(np.std(i2t)),
                        float(np.mean(t2i)), float(np.std(t2i)))


def false_negative_rate(batch: PairBatch) -> float:
    """Fraction of off-diagonal (negative) pairs whose image and text share a class."""
    same = batch.labels[:, None] == batch.text_labels[None, :]
    off = ~np.eye(len(batch), dtype=bool)
    return float(np.mean(same[off]))


def expected_false_negative_rate(num_classes: int) -> float:
    """Expected rate for independent uniform class draws: 1/K."""
    return 1.0 / num_classes


def batches_of(batch: PairBatch, size: int) -> Sequence[PairBatch]:
    return [batch.take(slice(s, s + size)) for s in range(0, len(batch) - size + 1, size)]
