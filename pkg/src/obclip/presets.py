"""Ready-made experiment configs for the desk-scale reproductions."""

from __future__ import annotations

import dataclasses

from .encoder import TowerSpec
from .synthdata import GeneratorConfig
from .trainer import ExperimentConfig, TemperatureSettings

# every reproduction trains on the same noisy pairs: 16 classes, 20% corrupted positives
DESK_DATA = GeneratorConfig(num_classes=16, latent_dim=8, image_dim=64, text_dim=64, noise_std=1.0,
                            false_positive_rate=0.2, seed=0)

# (kind, n, m) with l = n * m = 32 held fixed
TOPOLOGIES = {
    "sphere_neg_inner": (32, 1),
    "euclidean_l2": (32, 1),
    "oblique_geodesic": (8, 4),
    "oblique_neg_trace": (8, 4),
}


def desk(name: str, kind: str, t0: float = 0.0, learnable: bool = True, seed: int = 0, **model) -> ExperimentConfig:
    n, m = model.pop("n", None), model.pop("m", None)
    if n is None:
        n, m = TOPOLOGIES[kind]
    return ExperimentConfig(
        name=name,
        model=TowerSpec(kind=kind, n=n, m=m, **model),
        temperature=TemperatureSettings(t0=t0, learnable=learnable),
        data=DESK_DATA,
        seed=seed,
    )


def fixed_tau_grid(seed: int = 0) -> list[ExperimentConfig]:
    """The four topology/distance pairings with tau frozen at exp(0) = 1."""
    return [desk(f"fixed-tau-{kind}", kind, 0.0, False, seed) for kind in TOPOLOGIES]


def temperature_runs(seed: int = 0) -> list[ExperimentConfig]:
    """Learnable tau: sphere from two initial values and the oblique negative trace."""
    return [
        desk("temperature-sphere-t0", "sphere_neg_inner", 0.0, True, seed),
        desk("temperature-sphere-t2.64", "sphere_neg_inner", 2.64, True, seed),
        desk("temperature-negtrace-t0", "oblique_neg_trace", 0.0, True, seed),
    ]


# a 16-dim latent cannot fit on a single 8-dim sub-sphere, so the tokens have to share it
MULTI_DATA = dataclasses.replace(DESK_DATA, latent_dim=16)


def multi_token_run(seed: int = 0) -> ExperimentConfig:
    """Multi(8, 4): four [CLS] tokens, one sub-sphere each, mini-transformer towers."""
    cfg = desk("multi-8x4", "oblique_neg_trace", 0.0, True, seed, n=8, m=4, head="multi", encoder="transformer")
    return cfg.replace(data=MULTI_DATA, eval_period=500)


def smoke(steps: int = 50) -> ExperimentConfig:
    cfg = desk("smoke", "oblique_neg_trace")
    return cfg.replace(steps=steps, batch_size=8, train_size=256, eval_size=8, eval_batches=2, eval_period=25)


def catalogue(seed: int = 0) -> dict[str, list[ExperimentConfig]]:
    """Config groups as shipped under ``configs/<group>/<name>.json``."""
    return {
        "fixed-tau": fixed_tau_grid(seed),
        "temperature": temperature_runs(seed),
        "multi-token": [multi_token_run(seed)],
        "smoke": [smoke()],
    }
