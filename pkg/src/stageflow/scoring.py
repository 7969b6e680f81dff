"""Deployment evaluation scores: survival, velocity tracking, feet air time,
plus the z-score normalization used for learning curves."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ScoreError


@dataclass
class Episode:
    """One evaluated episode. Per-step arrays all have length ``survived``."""
    survived: int
    command_vel: np.ndarray   # (T, 2) commanded planar velocity
    local_vel: np.ndarray     # (T, 2) actual planar velocity
    air_time: np.ndarray      # (T,) swing-foot air time, seconds
    swing: np.ndarray         # (T,) 0/1 swing-phase flag
    command_norm: np.ndarray  # (T,) norm of the commanded velocity


@dataclass
class EvalBatch:
    episodes: list
    horizon: int

    def __post_init__(self):
        if not self.episodes:
            raise ScoreError("EMPTY_BATCH", "need at least one episode")
        for ep in self.episodes:
            if not 1 <= ep.survived <= self.horizon:
                raise ScoreError(
                    "BAD_EPISODE", f"survived {ep.survived} outside [1, {self.horizon}]"
                )


@dataclass
class ScoreTriple:
    survival: float
    tracking: float
    air_time: float

    def to_dict(self):
        return {
            "survival_score": self.survival,
            "lin_vel_tracking_score": self.tracking,
            "feet_air_time_score": self.air_time,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def survival_score(batch: EvalBatch) -> float:
    """Mean fractional episode length."""
    return float(np.mean([ep.survived / batch.horizon for ep in batch.episodes]))


def lin_vel_tracking_score(batch: EvalBatch, sigma: float = 0.1) -> float:
    """Per-step exp(-||v_cmd - v_loc||^2 / (2 sigma^2)), summed over the steps
    survived and normalized by the horizon, averaged over episodes."""
    if sigma <= 0:
        raise ScoreError("BAD_SIGMA", "sigma must be positive")
    acc = 0.0
    for ep in batch.episodes:
        diff = ep.command_vel - ep.local_vel
        e = (diff * diff).sum(axis=-1)
        acc += float(np.exp(-e / (2.0 * sigma * sigma)).sum()) / batch.horizon
    return acc / len(batch.episodes)


def feet_air_time_score(batch: EvalBatch, lift_thresh: float = 0.2,
                        vel_thresh: float = 0.05) -> float:
    """Mean over time (per episode length) and episodes of
    1[command_norm > vel_thresh] * (air_time - lift_thresh) * swing.
    Follows the formula as written; it may leave [0, 1]."""
    if lift_thresh < 0:
        raise ScoreError("BAD_SIGMA", "lift threshold must be >= 0")
    acc = 0.0
    for ep in batch.episodes:
        r = (ep.command_norm > vel_thresh) * (ep.air_time - lift_thresh) * ep.swing
        acc += float(r.sum()) / ep.survived
    return acc / len(batch.episodes)


def score_triple(batch: EvalBatch, sigma: float = 0.1, lift_thresh: float = 0.2,
                 vel_thresh: float = 0.05) -> ScoreTriple:
    return ScoreTriple(
        survival=survival_score(batch),
        tracking=lin_vel_tracking_score(batch, sigma),
        air_time=feet_air_time_score(batch, lift_thresh, vel_thresh),
    )


def zscore_normalize(series) -> np.ndarray:
    """(x - mean) / population std. Rejects constant or too-short series."""
    x = np.asarray(series, dtype=np.float64)
    if x.size < 2:
        raise ScoreError("ZERO_VARIANCE", "series must have at least 2 points")
    std = x.std()
    if std == 0.0:
        raise ScoreError("ZERO_VARIANCE", "series has zero variance")
    return (x - x.mean()) / std


# -- trace I/O ----------------------------------------------------------------

def batch_from_trace(path, horizon: int | None = None) -> EvalBatch:
    """Build an EvalBatch from a binding-trace JSON-lines file (one episode).

    Uses command / local_vel / feet_air_time / foot_contact / command_norm
    bindings recorded by the environment.
    """
    from .env import read_trace

    steps = read_trace(path)
    if not steps:
        raise ScoreError("BAD_EPISODE", f"empty trace {path}")
    cmd, loc, air, swing, cnorm = [], [], [], [], []
    for bindings in steps:
        c = np.asarray(bindings["command"].tolist())
        v = np.asarray(bindings["local_vel"].tolist())
        cmd.append(c[:2])
        loc.append(v[:2])
        at = np.asarray(bindings["feet_air_time"].tolist())
        contact = np.asarray(bindings["foot_contact"].tolist())
        i = int(np.argmax(at))  # the swing foot is the one accumulating air time
        air.append(at[i])
        swing.append(1.0 - contact[i])
        cnorm.append(float(bindings["command_norm"].tolist()))
    T = len(steps)
    ep = Episode(
        survived=T,
        command_vel=np.array(cmd),
        local_vel=np.array(loc),
        air_time=np.array(air),
        swing=np.array(swing),
        command_norm=np.array(cnorm),
    )
    return EvalBatch(episodes=[ep], horizon=horizon or T)
