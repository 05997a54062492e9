"""Training loop, temperature logging and the ablation grid runner."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import Graph, NonFiniteError, Tensor, backward
from .distance import distance_matrix
from .encoder import TowerSpec, TwoTower, constant_params, save_checkpoint
from .loss import TemperatureParam, contrastive_loss, default_tau_max
from .rng import named_rng
from .synthdata import GeneratorConfig, PairBatch, batches_of, generate, recall_at_k

LOG_HEADER = ("step", "loss", "t", "tau", "pos_dist", "neg_dist", "recall1_i2t", "recall1_t2i")
GRID_HEADER = ("name", "kind", "head", "n", "m", "t0", "learnable", "steps", "status", "recall1_i2t",
               "recall1_t2i", "final_tau", "convergence_step", "pos_dist", "neg_dist", "error")


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, record: dict, cause: str):
        self.step = step
        self.record = record
        super().__init__(f"training diverged at step {step}: {cause}; last state {record}")


# --- configuration --------------------------------------------------------------

@dataclass
class TemperatureSettings:
    t0: float = 0.0
    learnable: bool = True
    # None picks 100, or 100 / m for multi-token heads
    tau_max: Optional[float] = None


@dataclass
class OptimizerSettings:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.02
    warmup_steps: int = 200
    cosine: bool = True
    clip_norm: float = 1.0
    # the log-temperature gets lr * temperature_lr_scale
    temperature_lr_scale: float = 100.0


@dataclass
class ExperimentConfig:
    name: str = "run"
    model: TowerSpec = field(default_factory=TowerSpec)
    temperature: TemperatureSettings = field(default_factory=TemperatureSettings)
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    batch_size: int = 64
    steps: int = 2000
    eval_period: int = 100
    eval_size: int = 64
    eval_batches: int = 8
    train_size: int = 16384
    data: GeneratorConfig = field(default_factory=GeneratorConfig)
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.steps < 0 or self.eval_period < 1 or self.eval_size < 2 or self.eval_batches < 1:
            raise ConfigError("steps must be >= 0, eval_period >= 1, eval_size >= 2, eval_batches >= 1")
        if self.train_size < self.batch_size:
            raise ConfigError("train_size must be >= batch_size")
        if (self.data.image_dim, self.data.text_dim) != (self.model.image_dim, self.model.text_dim):
            raise ConfigError("model.image_dim/text_dim must match data.image_dim/text_dim")

    @property
    def tau_max(self) -> float:
        if self.temperature.tau_max is not None:
            return float(self.temperature.tau_max)
        return default_tau_max(self.model.m, multi_token=self.model.head == "multi")

    @property
    def steps_per_epoch(self) -> int:
        return self.train_size // self.batch_size

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_NESTED = {"model": TowerSpec, "temperature": TemperatureSettings, "optimizer": OptimizerSettings,
           "data": GeneratorConfig}


def _strict(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    return raw


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build a config, rejecting unknown keys at every level."""
    _strict(ExperimentConfig, raw, "config")
    kwargs = dict(raw)
    try:
        for key, cls in _NESTED.items():
            if key in kwargs:
                kwargs[key] = cls(**_strict(cls, kwargs[key], key))
        return ExperimentConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(raw)


def dump_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n")


# --- log ------------------------------------------------------------------------

@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    steps_per_epoch: int = 1

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=np.float64)

    @property
    def tau(self) -> np.ndarray:
        return self.column("tau")

    def last_eval(self) -> Optional[dict]:
        for r in reversed(self.records):
            if not math.isnan(r["recall1_i2t"]):
                return r
        return None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_HEADER)
            for r in self.records:
                w.writerow([r["step"]] + [_fmt(r[k]) for k in LOG_HEADER[1:]])

    @classmethod
    def from_csv(cls, path, steps_per_epoch: int = 1) -> "TrainLog":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != LOG_HEADER:
                raise ValueError(f"{path}: unexpected header {header}")
            records = []
            for row in reader:
                rec = {"step": int(row[0])}
                rec.update({k: float(v) if v else math.nan for k, v in zip(LOG_HEADER[1:], row[1:])})
                records.append(rec)
        return cls(records, steps_per_epoch)


def _fmt(v: float) -> str:
    return "" if isinstance(v, float) and math.isnan(v) else f"{v:.17g}"


def convergence_step(log, window: Optional[int] = None, threshold: float = 0.02) -> Optional[int]:
    """First step after which tau never moves by more than ``threshold`` (relative) over ``window`` steps.

    ``log`` is a :class:`TrainLog` or a sequence of tau values. ``window``
    defaults to one synthetic epoch; logs shorter than that use their full length.
    """
    if isinstance(log, TrainLog):
        tau = log.tau
        window = window or log.steps_per_epoch
        steps = [r["step"] for r in log.records]
    else:
        tau = np.asarray(log, dtype=np.float64)
        steps = list(range(len(tau)))
    if tau.size == 0:
        raise ValueError("log is empty")
    window = min(window or 1, tau.size - 1)
    if window < 1:
        return steps[0]
    ok = np.abs(tau[window:] - tau[:-window]) < threshold * tau[:-window]
    bad = np.flatnonzero(~ok)
    start = 0 if bad.size == 0 else int(bad[-1]) + 1
    return steps[start] if start < ok.size else None


# --- optimizer ------------------------------------------------------------------

def learning_rate(step: int, total: int, opt: OptimizerSettings) -> float:
    if opt.warmup_steps and step < opt.warmup_steps:
        return opt.lr * (step + 1) / opt.warmup_steps
    if not opt.cosine:
        return opt.lr
    span = max(total - opt.warmup_steps, 1)
    progress = min((step - opt.warmup_steps) / span, 1.0)
    return 0.5 * opt.lr * (1.0 + math.cos(math.pi * progress))


def clip_by_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Scale every gradient by ``min(1, max_norm / global_norm)``; returns the pre-clip norm."""
    norm = math.sqrt(math.fsum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def decays(name: str) -> bool:
    """Weight decay applies to weight matrices only (not biases, gains, embeddings or t)."""
    return name.rsplit(".", 1)[-1].startswith("W")


class AdamW:
    def __init__(self, params: dict, opt: OptimizerSettings):
        self.opt = opt
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.count = 0

    def step(self, params: dict, grads: dict, lr: float, lr_scale: Optional[dict] = None) -> dict:
        o = self.opt
        self.count += 1
        c1 = 1.0 - o.beta1 ** self.count
        c2 = 1.0 - o.beta2 ** self.count
        new = {}
        for k, p in params.items():
            g = grads[k]
            self.m[k] = o.beta1 * self.m[k] + (1 - o.beta1) * g
            self.v[k] = o.beta2 * self.v[k] + (1 - o.beta2) * g * g
            step_lr = lr * (lr_scale or {}).get(k, 1.0)
            upd = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + o.eps)
            if decays(k):
                upd = upd + o.weight_decay * p
            new[k] = p - step_lr * upd
        return new


# --- training -------------------------------------------------------------------

@dataclass
class TrainResult:
    config: ExperimentConfig
    log: TrainLog
    params: dict
    t: float
    tau: float
    recall: tuple
    pos_dist: float
    neg_dist: float

    def checkpoint_arrays(self) -> dict:
        return {**self.params, "t": np.array(self.t)}

    def save_checkpoint(self, path) -> None:
        save_checkpoint(path, self.checkpoint_arrays(), {"config": self.config.to_dict(), "tau": self.tau})


def eval_set(config: ExperimentConfig) -> PairBatch:
    clean = dataclasses.replace(config.data, false_positive_rate=0.0)
    return generate(clean, config.eval_size * config.eval_batches, split="eval")


def embed_batch(model: TwoTower, params: dict, batch: PairBatch, chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Embeddings of a whole batch with frozen parameters."""
    consts = constant_params(params)
    us, vs = [], []
    for s in range(0, len(batch), chunk):
        u, v = model.embed(consts, batch.image[s:s + chunk], batch.text[s:s + chunk])
        us.append(u.data)
        vs.append(v.data)
    return np.concatenate(us), np.concatenate(vs)


def evaluate(model: TwoTower, params: dict, batch: PairBatch, gallery: int) -> tuple[float, float]:
    """Mean recall@1 over consecutive galleries of ``gallery`` pairs."""
    u, v = embed_batch(model, params, batch)
    scores = [recall_at_k(u[s:s + gallery], v[s:s + gallery], model.spec.kind, 1)
              for s in range(0, len(batch) - gallery + 1, gallery)]
    return float(np.mean([r[0] for r in scores])), float(np.mean([r[1] for r in scores]))


def train(config: ExperimentConfig, data: Optional[PairBatch] = None,
          held_out: Optional[PairBatch] = None) -> TrainResult:
    """Run one experiment; deterministic for a fixed config.

    ``data`` and ``held_out`` replace the generated training pairs and the clean
    evaluation split; ``data`` must hold exactly ``config.train_size`` pairs.
    """
    model = TwoTower(config.model)
    params = model.init_params(config.seed)
    t = float(config.temperature.t0)
    learnable = config.temperature.learnable
    tau_max = config.tau_max
    log = TrainLog([], config.steps_per_epoch)
    if config.steps == 0:
        return TrainResult(config, log, params, t, min(math.exp(t), tau_max), (math.nan, math.nan), math.nan, math.nan)

    if data is None:
        data = generate(config.data, config.train_size, split="train")
    elif len(data) != config.train_size:
        raise ConfigError(f"got {len(data)} training pairs, config expects {config.train_size}")
    if held_out is None:
        held_out = eval_set(config)
    order_rng = named_rng(config.seed, "trainer", "batches")
    optim = AdamW({**params, "t": np.array(t)}, config.optimizer)
    lr_scale = {"t": config.optimizer.temperature_lr_scale}
    spe = config.steps_per_epoch
    order = None
    out = None
    for step in range(config.steps):
        if step % spe == 0:
            order = order_rng.permutation(config.train_size)
        idx = order[(step % spe) * config.batch_size:(step % spe + 1) * config.batch_size]
        batch = data.take(idx)

        record = {"step": step, "t": t, "tau": min(math.exp(t), tau_max)}
        graph = Graph()
        leaves = {k: graph.leaf(v) for k, v in params.items()}
        try:
            u, v = model.embed(leaves, batch.image, batch.text)
            nd = distance_matrix(config.model.kind, u, v)
            out = contrastive_loss(nd, TemperatureParam(t, tau_max, learnable))
            if not math.isfinite(out.value):
                raise NonFiniteError("loss is not finite")
            backward(graph, out.loss)
        except (NonFiniteError, FloatingPointError, ValueError) as exc:
            raise TrainingDiverged(step, record, str(exc)) from exc

        grads = {k: graph.grad(leaf) for k, leaf in leaves.items()}
        grads["t"] = np.asarray(graph.grad(out.t)) if learnable else np.zeros(())
        grads, _ = clip_by_global_norm(grads, config.optimizer.clip_norm)
        lr = learning_rate(step, config.steps, config.optimizer)
        updated = optim.step({**params, "t": np.array(t)}, grads, lr, lr_scale)
        if learnable:
            t = float(updated.pop("t"))
        else:
            updated.pop("t")
        params = updated

        record.update(loss=out.value, pos_dist=out.mean_pos_dist, neg_dist=out.mean_neg_dist,
                      recall1_i2t=math.nan, recall1_t2i=math.nan)
        if (step + 1) % config.eval_period == 0 or step == config.steps - 1:
            record["recall1_i2t"], record["recall1_t2i"] = evaluate(model, params, held_out, config.eval_size)
        log.records.append(record)

    final = log.records[-1]
    return TrainResult(config, log, params, t, min(math.exp(t), tau_max),
                       (final["recall1_i2t"], final["recall1_t2i"]), final["pos_dist"], final["neg_dist"])


# --- grid -----------------------------------------------------------------------

def summarize(result: TrainResult) -> dict:
    c = result.config
    conv = convergence_step(result.log) if len(result.log) else None
    return {
        "name": c.name, "kind": c.model.kind, "head": c.model.head, "n": c.model.n, "m": c.model.m,
        "t0": c.temperature.t0, "learnable": c.temperature.learnable, "steps": c.steps, "status": "ok",
        "recall1_i2t": result.recall[0], "recall1_t2i": result.recall[1], "final_tau": result.tau,
        "convergence_step": conv, "pos_dist": result.pos_dist, "neg_dist": result.neg_dist, "error": "",
    }


def _failed_row(config: ExperimentConfig, exc: Exception) -> dict:
    row = {k: None for k in GRID_HEADER}
    row.update(name=config.name, kind=config.model.kind, head=config.model.head, n=config.model.n,
               m=config.model.m, t0=config.temperature.t0, learnable=config.temperature.learnable,
               steps=config.steps, status="failed", error=f"{type(exc).__name__}: {exc}")
    return row


def run_one(config: ExperimentConfig) -> dict:
    try:
        return summarize(train(config))
    except Exception as exc:  # one bad cell must not stop the grid
        return _failed_row(config, exc)


def run_grid(configs: Sequence[ExperimentConfig], jobs: int = 1) -> list[dict]:
    """One summary row per config, in the given order."""
    if not configs:
        raise ValueError("grid needs at least one config")
    if jobs <= 1:
        return [run_one(c) for c in configs]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run_one, configs))


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return _fmt(v)
    return str(v)


def write_grid_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GRID_HEADER)
        for r in rows:
            w.writerow([_cell(r[k]) for k in GRID_HEADER])


_INT_COLS = {"n", "m", "steps", "convergence_step"}
_FLOAT_COLS = {"t0", "recall1_i2t", "recall1_t2i", "final_tau", "pos_dist", "neg_dist"}


def read_grid_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != GRID_HEADER:
            raise ValueError(f"{path}: unexpected header")
        rows = []
        for raw in reader:
            row = {}
            for k, v in raw.items():
                if k in _INT_COLS:
                    row[k] = int(v) if v else None
                elif k in _FLOAT_COLS:
                    row[k] = float(v) if v else None
                elif k == "learnable":
                    row[k] = v == "true"
                else:
                    row[k] = v
            rows.append(row)
        return rows
