"""Backward-pass storage and flop counts of the distance-matrix subgraph.

Storage is counted on the autodiff tape: the elements of arrays that the
tagged distance ops keep for their backward rule, excluding arrays that alias
the input embeddings (those belong to the encoder), plus the ``b x b`` output.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import astuple, dataclass, fields
from typing import Sequence

import numpy as np

from .autodiff import Graph, Tensor, backward, ops, retained_elements, tagged_flops
from .distance import DistanceKind, distance_matrix
from .rng import named_rng

TAG = "distance"
CSV_HEADER = ("kind", "b", "d", "m", "retained_scalars", "flops")


@dataclass(frozen=True)
class StorageReport:
    kind: str
    b: int
    d: int
    m: int
    retained_scalars: int
    flops: int


def _points(kind: DistanceKind, b: int, d: int, m: int, rng) -> np.ndarray:
    if kind.oblique:
        x = rng.standard_normal((b, m, d // m))
        return x / np.linalg.norm(x, axis=-1, keepdims=True)
    x = rng.standard_normal((b, d))
    if kind is DistanceKind.SPHERE_NEG_INNER:
        x /= np.linalg.norm(x, axis=-1, keepdims=True)
    return x


def measure_backward_storage(kind, b: int, d: int, m: int = 1, seed: int = 0) -> StorageReport:
    kind = DistanceKind.parse(kind)
    if b < 1 or d < 1 or m < 1:
        raise ValueError("b, d and m must be >= 1")
    if kind.oblique and d % m:
        raise ValueError(f"d={d} is not divisible by m={m}")
    if not kind.oblique and m != 1:
        raise ValueError(f"{kind.value} has no sub-spheres; use m=1")
    rng = named_rng(seed, "bench", kind.value, str(b), str(d), str(m))
    g = Graph()
    u = g.leaf(_points(kind, b, d, m, rng))
    v = g.leaf(_points(kind, b, d, m, rng))
    with g.tag(TAG):
        nd = distance_matrix(kind, u, v)
    weights = Tensor(rng.standard_normal((b, b)))
    backward(g, ops.sum(ops.mul(nd, weights)))
    return StorageReport(kind.value, b, d, m, retained_elements(g, TAG, include_outputs_of=(nd,)),
                         tagged_flops(g, TAG))


def exact_flops(kind, b: int, d: int, m: int = 1) -> int:
    """Forward multiply-add count of the distance-matrix ops, derived by hand."""
    kind = DistanceKind.parse(kind)
    if kind in (DistanceKind.SPHERE_NEG_INNER, DistanceKind.OBLIQUE_NEG_TRACE):
        return b * b * d
    if kind is DistanceKind.EUCLIDEAN_L2:
        return 2 * b * b * d + b * b
    return b * b * d + 2 * b * b * m + b * b


def parse_sweep(text: str) -> dict[str, list[int]]:
    """Parse ``"b=32 d=64,512 m=2,16"`` (tokens split on spaces or ';')."""
    out = {"b": [32], "d": [64, 128, 256, 512], "m": [2, 4, 8, 16]}
    for tok in text.replace(";", " ").split():
        key, sep, vals = tok.partition("=")
        if not sep or key not in out:
            raise ValueError(f"bad sweep token {tok!r}; expected b=..., d=..., m=...")
        try:
            out[key] = [int(x) for x in vals.split(",") if x]
        except ValueError:
            raise ValueError(f"bad sweep values in {tok!r}") from None
        if not out[key] or min(out[key]) < 1:
            raise ValueError(f"sweep values must be positive integers: {tok!r}")
    return out


def sweep(spec: dict[str, Sequence[int]], kinds=tuple(DistanceKind), seed: int = 0) -> list[StorageReport]:
    """All valid (kind, b, d, m) combinations; m is 1 for non-oblique kinds."""
    reports = []
    for kind in map(DistanceKind.parse, kinds):
        for b in spec["b"]:
            for d in spec["d"]:
                for m in (spec["m"] if kind.oblique else [1]):
                    if kind.oblique and d % m:
                        continue
                    reports.append(measure_backward_storage(kind, b, d, m, seed))
    return reports


def _fit(points: list[tuple[float, float]]) -> float:
    """Least-squares slope of log(count) against log(size)."""
    xs = np.log([p[0] for p in points])
    ys = np.log([p[1] for p in points])
    if np.ptp(xs) == 0:
        return math.nan
    return float(np.polyfit(xs, ys, 1)[0])


def fitted_exponents(reports: Sequence[StorageReport], field: str = "retained_scalars") -> dict:
    """Growth exponents of ``field`` in d (fixed kind, b, m) and in m (fixed kind, b, d).

    Returns ``{kind: {"d": slope, "m": slope}}`` averaged over the groups that vary.
    """
    groups_d: dict = {}
    groups_m: dict = {}
    for r in reports:
        val = getattr(r, field)
        groups_d.setdefault((r.kind, r.b, r.m), []).append((r.d, val))
        groups_m.setdefault((r.kind, r.b, r.d), []).append((r.m, val))
    out: dict = {}
    for axis, groups in (("d", groups_d), ("m", groups_m)):
        for (kind, *_), pts in groups.items():
            if len({p[0] for p in pts}) > 1:
                out.setdefault(kind, {}).setdefault(axis, []).append(_fit(pts))
    return {k: {a: float(np.mean(v)) for a, v in axes.items()} for k, axes in out.items()}


def report_table(reports: Sequence[StorageReport]) -> tuple[str, str]:
    """Return ``(csv_text, aligned_text)`` with one row per report plus fitted exponents."""
    if not reports:
        raise ValueError("no reports to tabulate")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in reports:
        w.writerow(astuple(r))
    rows = [CSV_HEADER] + [tuple(str(x) for x in astuple(r)) for r in reports]
    widths = [max(len(row[i]) for row in rows) for i in range(len(CSV_HEADER))]
    lines = ["  ".join(c.rjust(wd) for c, wd in zip(row, widths)) for row in rows]
    exps = fitted_exponents(reports)
    if exps:
        lines.append("")
        lines.append("fitted growth exponents of retained_scalars")
        for kind, axes in exps.items():
            parts = [f"{a}-exponent {v:.3f}" for a, v in sorted(axes.items())]
            lines.append(f"  {kind}: " + ", ".join(parts))
    return buf.getvalue(), "\n".join(lines) + "\n"


def read_reports(text: str) -> list[StorageReport]:
    reader = csv.reader(io.StringIO(text))
    header = tuple(next(reader))
    if header != CSV_HEADER:
        raise ValueError(f"unexpected header {header}")
    types = [f.type for f in fields(StorageReport)]
    return [StorageReport(row[0], *(int(x) for x in row[1:])) for row in reader if row and len(types)]
