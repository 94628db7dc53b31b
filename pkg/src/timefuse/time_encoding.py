"""Timestep encoders: fixed sinusoidal, learned table, Time2Vec-style.

All encoders map a non-negative timestep to a dense vector of width
``d_model``. The ``zero`` method returns all-zero vectors and exists as the
text-only ablation knob (it zeroes the time matrix downstream).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import IO, Sequence

import numpy as np

from .corpus import Granularity

TIME_METHODS = ("sinpe", "learnpe", "time2vec", "zero")


@dataclass(frozen=True)
class TimeEncoderConfig:
    method: str = "sinpe"
    d_model: int = 64
    max_position: int = 2048  # learnpe table capacity
    granularity: Granularity = Granularity.DAILY

    def __post_init__(self):
        if self.method not in TIME_METHODS:
            raise ValueError(f"unknown time encoding method {self.method!r}")
        if self.d_model <= 0 or self.d_model % 2 != 0:
            raise ValueError("d_model must be a positive even integer")
        if self.max_position < 1:
            raise ValueError("max_position must be >= 1")


@dataclass
class Time2VecParams:
    """First component linear in the timestep, the rest sinusoidal."""

    omega: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        if self.omega.shape != self.phi.shape or self.omega.ndim != 1:
            raise ValueError("omega and phi must be 1-d arrays of equal length")


def sinpe(i: int, d_model: int) -> np.ndarray:
    """Sinusoidal encoding: even dims sin(i / 10000^(2j/d)), odd dims cos."""
    if i < 0:
        raise ValueError("timestep must be non-negative")
    if d_model % 2 != 0:
        raise ValueError("d_model must be even")
    j = np.arange(d_model // 2, dtype=np.float64)
    angle = float(i) / np.power(10000.0, 2.0 * j / d_model)
    out = np.empty(d_model, dtype=np.float64)
    out[0::2] = np.sin(angle)
    out[1::2] = np.cos(angle)
    return out


def learnpe(i: int, table: np.ndarray) -> np.ndarray:
    """Row lookup with clamp-to-last-row for timesteps past the table."""
    if i < 0:
        raise ValueError("timestep must be non-negative")
    return table[min(i, table.shape[0] - 1)].copy()


def time2vec(tau: float, params: Time2VecParams) -> np.ndarray:
    inner = params.omega * float(tau) + params.phi
    out = np.sin(inner)
    out[0] = inner[0]
    return out


def init_time2vec(d_model: int, rng: np.random.Generator) -> Time2VecParams:
    # Periodic frequencies span daily-to-decade cycles; the first (linear)
    # component progresses slowly so it does not drown the periodic terms.
    log_lo, log_hi = math.log(1.0 / 3650.0), math.log(1.0)
    freq = np.exp(rng.uniform(log_lo, log_hi, size=d_model))
    omega = 2.0 * math.pi * freq
    omega[0] = 1.0 / 3650.0
    phi = rng.uniform(0.0, 2.0 * math.pi, size=d_model)
    phi[0] = 0.0
    return Time2VecParams(omega=omega, phi=phi)


class TimeEncoder:
    """Uniform facade over the four methods, with parameter access for
    training. ``sinpe`` and ``zero`` are parameter-free."""

    def __init__(self, config: TimeEncoderConfig, rng: np.random.Generator | None = None):
        self.config = config
        self.table: np.ndarray | None = None
        self.t2v: Time2VecParams | None = None
        if config.method == "learnpe":
            rng = rng or np.random.default_rng(0)
            self.table = rng.normal(0.0, 0.02, size=(config.max_position, config.d_model))
        elif config.method == "time2vec":
            rng = rng or np.random.default_rng(0)
            self.t2v = init_time2vec(config.d_model, rng)

    def encode(self, step: int) -> np.ndarray:
        method = self.config.method
        if method == "sinpe":
            return sinpe(step, self.config.d_model)
        if method == "learnpe":
            return learnpe(step, self.table)
        if method == "time2vec":
            return time2vec(step, self.t2v)
        return np.zeros(self.config.d_model, dtype=np.float64)

    def parameters(self) -> dict[str, np.ndarray]:
        if self.config.method == "learnpe":
            return {"table": self.table}
        if self.config.method == "time2vec":
            return {"omega": self.t2v.omega, "phi": self.t2v.phi}
        return {}

    def backward(self, step: int, d_te: np.ndarray, grads: dict[str, np.ndarray]) -> None:
        """Accumulate the gradient of the encoding at ``step`` into ``grads``
        (keys as in :meth:`parameters`)."""
        method = self.config.method
        if method == "learnpe":
            row = min(step, self.table.shape[0] - 1)
            grads["table"][row] += d_te
        elif method == "time2vec":
            tau = float(step)
            inner = self.t2v.omega * tau + self.t2v.phi
            slope = np.cos(inner)
            slope[0] = 1.0
            grads["omega"] += d_te * slope * tau
            grads["phi"] += d_te * slope


def probe_similarity(model, doc, offsets: Sequence[int], epoch) -> list[tuple[int, float]]:
    """Cosine between the fused embedding at the document's own date and at
    the same date shifted ``offset`` days, for each offset.

    ``model`` is a fusion model exposing ``embed_at(doc, step)`` and a
    ``time_config`` with the working granularity.
    """
    from datetime import timedelta

    from .corpus import timestep as to_step

    g = model.time_config.granularity
    anchor_step = to_step(doc.timestamp, epoch, g)
    anchor = model.embed_at(doc, anchor_step)
    series = []
    for off in offsets:
        if off < 0:
            raise ValueError("offsets must be non-negative")
        step = to_step(doc.timestamp + timedelta(days=int(off)), epoch, g)
        emb = model.embed_at(doc, step)
        denom = float(np.linalg.norm(anchor) * np.linalg.norm(emb))
        series.append((int(off), float(anchor @ emb) / denom))
    return series


def write_probe_csv(series: Sequence[tuple[int, float]], handle: IO[str]) -> None:
    handle.write("offset,cosine\n")
    for off, cos in series:
        handle.write(f"{off},{cos:.12g}\n")
