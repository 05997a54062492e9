"""Seeded property suites for geometry, distances and the loss.

Each suite returns a :class:`SuiteResult` of named checks. The CLI ``props``
subcommand and the test-suite both drive these functions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import distance as dist
from .autodiff import Graph, Tensor, backward, finite_diff_gradient, ops, relative_error
from .distance import DistanceKind
from .geometry import (
    ObliquePoint,
    normalize_columns,
    project_oblique,
    project_sphere,
    reshape_to_oblique,
)
from .loss import TAU_MAX_DEFAULT, TemperatureParam, contrastive_loss, scaled_logits, symmetric_cross_entropy
from .rng import named_rng

TOL = 1e-9


@dataclass
class Check:
    name: str
    passed: bool
    count: int
    detail: str = ""
    value: float = math.nan


@dataclass
class SuiteResult:
    suite: str
    checks: list[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, passed, count: int, detail: str = "", value: float = math.nan) -> None:
        self.checks.append(Check(name, bool(passed), int(count), detail, float(value)))

    def summary(self) -> str:
        ok = sum(c.passed for c in self.checks)
        lines = [f"[{'PASS' if c.passed else 'FAIL'}] {self.suite}.{c.name} (n={c.count}) {c.detail}".rstrip()
                 for c in self.checks]
        lines.append(f"{self.suite}: {ok}/{len(self.checks)} checks passed")
        return "\n".join(lines)


def _rng(seed: int, name: str) -> np.random.Generator:
    return named_rng(seed, "props", name)


def random_oblique(rng: np.random.Generator, count: int, n: int, m: int) -> np.ndarray:
    """(count, m, n) batch with unit rows, i.e. ObliquePoint matrices transposed."""
    x = rng.standard_normal((count, m, n))
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


# --- geometry -------------------------------------------------------------------

def geometry_suite(seed: int = 0, samples: int = 100_000) -> SuiteResult:
    res = SuiteResult("geometry")
    rng = _rng(seed, "geometry")

    shapes = [(2, 2), (3, 4), (8, 4), (16, 2), (4, 8)]
    worst, idem_fail = 0.0, 0
    for i in range(samples):
        n, m = shapes[i % len(shapes)]
        x = rng.standard_normal((n, m)) * rng.uniform(0.01, 100.0)
        p = project_oblique(x)
        worst = max(worst, float(np.max(np.abs(np.einsum("ij,ij->j", p.mat, p.mat) - 1.0))))
        if not np.array_equal(project_oblique(p).mat, p.mat):
            idem_fail += 1
    res.add("oblique_column_norm", worst < TOL, samples, f"max deviation {worst:.2e}")
    res.add("oblique_idempotent_bitwise", idem_fail == 0, samples, f"failures {idem_fail}")

    dims = [2, 3, 8, 64]
    idem_fail, scale_worst, ob1_worst, norm_worst = 0, 0.0, 0.0, 0.0
    for i in range(samples):
        d = dims[i % len(dims)]
        v = rng.standard_normal(d)
        s = project_sphere(v)
        norm_worst = max(norm_worst, abs(float(np.linalg.norm(s.vec)) - 1.0))
        if not np.array_equal(project_sphere(s).vec, s.vec):
            idem_fail += 1
        if i % 10 == 0:
            alpha = float(np.exp(rng.uniform(-8, 8)))
            scale_worst = max(scale_worst, float(np.max(np.abs(project_sphere(alpha * v).vec - s.vec))))
            ob1_worst = max(ob1_worst, float(np.max(np.abs(reshape_to_oblique(v, d, 1).mat[:, 0] - s.vec))))
    res.add("sphere_norm", norm_worst < TOL, samples, f"max deviation {norm_worst:.2e}")
    res.add("sphere_idempotent_bitwise", idem_fail == 0, samples, f"failures {idem_fail}")
    res.add("scale_invariance", scale_worst < 1e-12, samples // 10, f"max abs diff {scale_worst:.2e}")
    res.add("ob_d1_matches_sphere", ob1_worst < 1e-12, samples // 10, f"max abs diff {ob1_worst:.2e}")
    return res


# --- distances ------------------------------------------------------------------

_KIND_SHAPES = {
    DistanceKind.SPHERE_NEG_INNER: (16, 1),
    DistanceKind.EUCLIDEAN_L2: (16, 1),
    DistanceKind.OBLIQUE_GEODESIC: (4, 4),
    DistanceKind.OBLIQUE_NEG_TRACE: (4, 4),
}


def _sample(kind: DistanceKind, rng, count: int) -> np.ndarray:
    n, m = _KIND_SHAPES[kind]
    if kind is DistanceKind.EUCLIDEAN_L2:
        return rng.standard_normal((count, n)) * rng.uniform(0.1, 10.0, (count, 1))
    if kind is DistanceKind.SPHERE_NEG_INNER:
        x = rng.standard_normal((count, n))
        return x / np.linalg.norm(x, axis=1, keepdims=True)
    # (count, n, m) matrices with unit columns
    return np.swapaxes(random_oblique(rng, count, n, m), 1, 2)


def load_negtrace_counterexample() -> dict:
    text = resources.files("obclip").joinpath("data/negtrace_counterexample.json").read_text()
    raw = json.loads(text)
    return {
        "shift": float(raw["shift"]),
        "points": [ObliquePoint(np.array(raw[k])) for k in ("x", "y", "z")],
    }


def _perturb(rng, x: np.ndarray, radius: float) -> np.ndarray:
    """Move each unit row of ``x`` (m, n) along a geodesic so the total product distance is <= radius."""
    m, n = x.shape
    angles = rng.standard_normal(m)
    angles *= rng.uniform(0.0, radius) / np.linalg.norm(angles)
    t = rng.standard_normal((m, n))
    t -= np.sum(t * x, axis=1, keepdims=True) * x
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    y = np.cos(angles)[:, None] * x + np.sin(angles)[:, None] * t
    return y / np.linalg.norm(y, axis=1, keepdims=True)


def relaxed_triangle_instances(seed: int, count: int = 1000, eps_pos: float = 0.1, n: int = 4, m: int = 4):
    """Quadruples (u1, v1, u2, v2) with three short geodesic sides, as (m, n) row-unit arrays.

    Yields the three constructed side lengths and the closing side d(u2, v1).
    """
    rng = _rng(seed, "relaxed-triangle")
    made = 0
    while made < count:
        u1 = random_oblique(rng, 1, n, m)[0]
        v1 = _perturb(rng, u1, eps_pos)
        v2 = _perturb(rng, u1, eps_pos)
        u2 = _perturb(rng, v2, eps_pos)
        pts = [ObliquePoint(a.T) for a in (u1, v1, u2, v2)]
        sides = (dist.geodesic(pts[0], pts[1]), dist.geodesic(pts[2], pts[3]), dist.geodesic(pts[0], pts[3]))
        if max(sides) > eps_pos:
            continue
        made += 1
        yield sides, dist.geodesic(pts[2], pts[1])


def distance_suite(seed: int = 0, samples: int = 100_000, eps_pos: float = 0.1,
                   relaxed_count: int = 1000) -> SuiteResult:
    res = SuiteResult("distance")
    rng = _rng(seed, "distance")
    for kind in DistanceKind:
        n, m = _KIND_SHAPES[kind]
        x, y, z = (_sample(kind, rng, samples) for _ in range(3))
        dxy, dyx = dist.pair_distances(kind, x, y), dist.pair_distances(kind, y, x)
        res.add(f"{kind.value}.symmetry_bitwise", np.array_equal(dxy, dyx), samples)

        lo, hi = dist.range_of(kind, n, m)
        out = int(np.sum((dxy < lo - TOL) | (dxy > hi + TOL)))
        res.add(f"{kind.value}.range", out == 0, samples,
                f"[{lo:.4g}, {hi:.4g}] observed [{dxy.min():.4g}, {dxy.max():.4g}]")

        # scalar functions agree with the vectorized form
        scalar = {DistanceKind.SPHERE_NEG_INNER: dist.neg_inner, DistanceKind.EUCLIDEAN_L2: dist.l2,
                  DistanceKind.OBLIQUE_GEODESIC: dist.geodesic, DistanceKind.OBLIQUE_NEG_TRACE: dist.neg_trace}[kind]
        k = min(samples, 1000)
        diff = max(abs(scalar(x[i], y[i]) - dxy[i]) for i in range(k))
        res.add(f"{kind.value}.scalar_matches_batch", diff < 1e-12, k, f"max abs diff {diff:.2e}")

        if kind.is_metric:
            dxz, dyz = dist.pair_distances(kind, x, z), dist.pair_distances(kind, y, z)
            bad = int(np.sum(dxz > dxy + dyz + TOL))
            # near-degenerate triples where y lies between x and z on a geodesic
            if kind is DistanceKind.EUCLIDEAN_L2:
                w = rng.uniform(0, 1, (samples, 1))
                mid = (1 - w) * x + w * z
            else:
                mid = normalize_columns(0.5 * (x + z) + 1e-3 * rng.standard_normal(x.shape))
            bad_mid = int(np.sum(dist.pair_distances(kind, x, z)
                                 > dist.pair_distances(kind, x, mid) + dist.pair_distances(kind, mid, z) + TOL))
            res.add(f"{kind.value}.triangle", bad == 0 and bad_mid == 0, 2 * samples,
                    f"violations {bad} random, {bad_mid} near-collinear")

    # geodesic supremum on antipodal pairs
    for m in (1, 4, 8):
        u = random_oblique(rng, 1000, 4, m)
        v = -u + 1e-6 * rng.standard_normal(u.shape)
        v /= np.linalg.norm(v, axis=-1, keepdims=True)
        d = dist.pair_distances(DistanceKind.OBLIQUE_GEODESIC, np.swapaxes(u, 1, 2), np.swapaxes(v, 1, 2))
        top = math.pi * math.sqrt(m)
        res.add(f"geodesic_antipodal_m{m}", d.max() > 0.95 * top and d.max() <= top + TOL, 1000,
                f"max {d.max():.6f} vs pi*sqrt(m) = {top:.6f}, pi*m = {math.pi * m:.6f}")

    ce = load_negtrace_counterexample()
    x, y, z = ce["points"]
    shifted = lambda a, b: dist.neg_trace(a, b) + ce["shift"]  # noqa: E731
    lhs, rhs = shifted(x, z), shifted(x, y) + shifted(y, z)
    res.add("neg_trace_shifted_counterexample", lhs > rhs + TOL, 1, f"d(x,z)={lhs:.6f} > {rhs:.6f}")

    worst = 0.0
    fails = 0
    for _, closing in relaxed_triangle_instances(seed, relaxed_count, eps_pos):
        worst = max(worst, closing)
        fails += closing > 3 * eps_pos + TOL
    res.add("geodesic_relaxed_triangle", fails == 0, relaxed_count,
            f"max closing side {worst:.4f} vs bound {3 * eps_pos:.4f}")

    # Ob(n, 1) reduction
    s = _sample(DistanceKind.SPHERE_NEG_INNER, rng, 10_000)
    t = _sample(DistanceKind.SPHERE_NEG_INNER, rng, 10_000)
    inner = dist.pair_distances(DistanceKind.SPHERE_NEG_INNER, s, t)
    tr = dist.pair_distances(DistanceKind.OBLIQUE_NEG_TRACE, s[:, :, None], t[:, :, None])
    geo = dist.pair_distances(DistanceKind.OBLIQUE_GEODESIC, s[:, :, None], t[:, :, None])
    red = max(float(np.max(np.abs(tr - inner))), float(np.max(np.abs(geo - np.arccos(np.clip(-inner, -1, 1))))))
    res.add("m1_reduction", red < 1e-12, 10_000, f"max abs diff {red:.2e}")
    return res


# --- loss -----------------------------------------------------------------------

def loop_contrastive_loss(neg_dist, tau: float) -> float:
    """Symmetric cross-entropy written term by term with plain Python floats."""
    a = [[float(v) for v in row] for row in np.asarray(neg_dist)]
    b = len(a)

    def ce(logits, target):
        top = max(logits)
        lse = top + math.log(math.fsum(math.exp(z - top) for z in logits))
        return lse - logits[target]

    rows = math.fsum(ce([tau * a[i][j] for j in range(b)], i) for i in range(b)) / b
    cols = math.fsum(ce([tau * a[j][i] for j in range(b)], i) for i in range(b)) / b
    return 0.5 * (rows + cols)


def loss_suite(seed: int = 0, instances: int = 100) -> SuiteResult:
    res = SuiteResult("loss")
    rng = _rng(seed, "loss")

    worst = 0.0
    for b in range(2, 9):
        for _ in range(instances):
            nd = rng.standard_normal((b, b)) * rng.uniform(0.1, 3.0)
            t = float(rng.choice([0.0, 2.64, rng.uniform(-2, 4)]))
            temp = TemperatureParam(t, learnable=False)
            worst = max(worst, abs(contrastive_loss(Tensor(nd), temp).value - loop_contrastive_loss(nd, temp.tau)))
    res.add("matches_loop_oracle", worst < 1e-12, 7 * instances, f"max abs diff {worst:.2e}")

    worst = 0.0
    for b in range(2, 9):
        nd = np.full((b, b), rng.standard_normal())
        worst = max(worst, abs(contrastive_loss(Tensor(nd), TemperatureParam(1.3, learnable=False)).value - math.log(b)))
    res.add("uniform_is_log_b", worst < 1e-12, 7, f"max abs diff {worst:.2e}")

    grads = []
    for _ in range(instances):
        nd = rng.standard_normal((6, 6))
        out = contrastive_loss(Tensor(nd), TemperatureParam(6.0, tau_max=100.0), graph=Graph())
        backward(out.t.graph, out.loss)
        grads.append(float(out.t.graph.grad(out.t)))
    res.add("clamp_blocks_t_gradient", all(g == 0.0 for g in grads), instances)

    worst = 0.0
    for _ in range(instances):
        b = int(rng.integers(2, 9))
        nd = rng.standard_normal((b, b))
        perm = rng.permutation(b)
        temp = TemperatureParam(float(rng.uniform(-1, 3)), learnable=False)
        a = contrastive_loss(Tensor(nd), temp).value
        p = contrastive_loss(Tensor(nd[np.ix_(perm, perm)]), temp).value
        worst = max(worst, abs(a - p))
    res.add("permutation_equivariance", worst < 1e-12, instances, f"max abs diff {worst:.2e}")

    lowest = min(contrastive_loss(Tensor(rng.standard_normal((5, 5)) + 4 * np.eye(5)),
                                  TemperatureParam(float(rng.uniform(0, 4)), learnable=False)).value
                 for _ in range(instances))
    res.add("nonnegative", lowest >= 0.0, instances, f"min loss {lowest:.3g}")
    return res


SUITES = {"geometry": geometry_suite, "distance": distance_suite, "loss": loss_suite}


def run_suite(name: str, seed: int = 0) -> SuiteResult:
    if name not in SUITES:
        raise KeyError(name)
    return SUITES[name](seed)


# --- gradients ------------------------------------------------------------------

def _grad_errors(fn, arrays: list[np.ndarray]) -> float:
    """Worst norm-wise relative error of d fn / d arrays[k] against central differences."""
    g = Graph()
    leaves = [g.leaf(a) for a in arrays]
    backward(g, fn(*leaves))
    worst = 0.0
    for k, a in enumerate(arrays):
        def f(x, k=k):
            args = [Tensor(b) for b in arrays]
            args[k] = Tensor(x)
            return fn(*args).item()
        worst = max(worst, relative_error(g.grad(leaves[k]), finite_diff_gradient(f, a)))
    return worst


def _near_arccos_endpoint(u: np.ndarray, v: np.ndarray, margin: float = 1e-4) -> bool:
    cos = np.einsum("imn,jmn->ijm", u, v)
    return bool(np.any(np.abs(cos) > 1 - margin))


def gradcheck_suite(seed: int = 0, trials: int = 100, tol: float = 1e-5) -> SuiteResult:
    """Finite-difference checks for every distance and for encoder -> head -> distance -> loss."""
    from .encoder import MLPEncoderConfig, encode_mlp, head_single, init_mlp

    res = SuiteResult("gradcheck")
    rng = _rng(seed, "gradcheck")
    b, n, m = 3, 3, 2
    for kind in DistanceKind:
        weights = Tensor(rng.standard_normal((b, b)))

        def fn(u, v, kind=kind, w=weights):
            return ops.sum(ops.mul(dist.distance_matrix(kind, u, v), w))

        worst, done, skipped = 0.0, 0, 0
        while done < trials:
            if kind.oblique:
                u, v = random_oblique(rng, b, n, m), random_oblique(rng, b, n, m)
                if kind is DistanceKind.OBLIQUE_GEODESIC and _near_arccos_endpoint(u, v):
                    skipped += 1
                    continue
            else:
                u, v = rng.standard_normal((b, n * m)), rng.standard_normal((b, n * m))
                if kind is DistanceKind.SPHERE_NEG_INNER:
                    u /= np.linalg.norm(u, axis=1, keepdims=True)
                    v /= np.linalg.norm(v, axis=1, keepdims=True)
            worst = max(worst, _grad_errors(fn, [u, v]))
            done += 1
        res.add(f"{kind.value}.distance", worst < tol, trials, f"max rel err {worst:.2e}, skipped {skipped}", worst)

    cfg = MLPEncoderConfig(input_dim=3, hidden_dims=[3], output_dim=n * m, activation="gelu")
    for kind in DistanceKind:
        worst, done, skipped = 0.0, 0, 0
        while done < trials:
            xi, xt = rng.standard_normal((b, 3)), rng.standard_normal((b, 3))
            pi, pt = init_mlp(cfg, rng), init_mlp(cfg, rng)
            heads = [rng.standard_normal((n * m, n * m)) / math.sqrt(n * m) for _ in range(2)]
            names = sorted(pi)
            k = len(names)

            def embed(x, params, w, kind=kind):
                h = encode_mlp(cfg, params, x)
                if kind.oblique:
                    return head_single(h, w, n, m)
                y = ops.matmul(h, w)
                return ops.l2_normalize(y, axis=-1) if kind is DistanceKind.SPHERE_NEG_INNER else y

            def towers(arrays, kind=kind, names=names):
                u = embed(xi, dict(zip(names, arrays[:k])), arrays[2 * k], kind)
                v = embed(xt, dict(zip(names, arrays[k:2 * k])), arrays[2 * k + 1], kind)
                return u, v

            def fn(*arrays, kind=kind):
                u, v = towers(arrays)
                logits = scaled_logits(dist.distance_matrix(kind, u, v), arrays[-1], TAU_MAX_DEFAULT)
                return symmetric_cross_entropy(logits)

            arrays = [pi[key] for key in names] + [pt[key] for key in names] + heads
            arrays.append(np.array(rng.uniform(-1.0, 2.0)))
            if kind is DistanceKind.OBLIQUE_GEODESIC:
                u, v = towers([Tensor(a) for a in arrays])
                if _near_arccos_endpoint(u.data, v.data):
                    skipped += 1
                    continue
            worst = max(worst, _grad_errors(fn, arrays))
            done += 1
        res.add(f"{kind.value}.pipeline", worst < tol, trials, f"max rel err {worst:.2e}, skipped {skipped}", worst)
    return res


SUITES["gradcheck"] = gradcheck_suite
