"""Simulation of demand truth, PMU clock errors and time-stamped streams.

Within one GPS re-synchronization interval of length T seconds a PMU
reports M samples, at t * T/(M-1) seconds past the sync instant for
t = 0..M-1.  Magnitude readings carry relative Gaussian noise; angle
readings carry Gaussian noise plus the clock-error phase

    d(t) = beta + alpha * T/(M-1) * t

with offset beta (GPS error) and skew alpha (local-oscillator drift),
both constant within an interval.  De-synchronization never touches the
magnitude channel.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .powerflow import GridState

# purpose tags for per-(run, purpose, ...) RNG stream derivation
RNG_DEMAND = 0
RNG_CLOCK = 1
RNG_PMU = 2

STREAM_COLUMNS = ("k", "t", "bus", "v_meas", "theta_meas")


class StreamFormatError(ValueError):
    """A measurement CSV or scenario file violates its schema."""


def derive_rng(master_seed: int, *key: int) -> np.random.Generator:
    """Independent generator for one (purpose, run index, ...) combination.

    Streams derived from the same master seed but different keys never
    share state, so parallel Monte-Carlo workers can draw without
    coordination and results do not depend on scheduling.
    """
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=tuple(key)))


@dataclass(frozen=True)
class MeasurementConfig:
    """Noise and timing parameters of one measurement scenario.

    sigma_p / sigma_q are relative demand standard deviations, eta their
    per-bus correlation; sigma_pmu_v is relative, sigma_pmu_theta,
    sigma_alpha and sigma_beta are absolute (radians; alpha in radians
    per second so the skew contributes alpha * T at the interval end).
    """

    sigma_p: float = 0.5
    sigma_q: float = 0.5
    eta: float = 0.5
    sigma_pmu_v: float = 1e-3
    sigma_pmu_theta: float = 1e-3
    sigma_alpha: float = 1e-2
    sigma_beta: float = 2e-4
    T: float = 1.0
    M: int = 30

    def __post_init__(self):
        for name in ("sigma_p", "sigma_q", "sigma_pmu_v", "sigma_pmu_theta",
                     "sigma_alpha", "sigma_beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if self.M < 2:
            raise ValueError("M must be at least 2")
        if self.T <= 0:
            raise ValueError("T must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "MeasurementConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise StreamFormatError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**data)


def load_scenario(path) -> MeasurementConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise StreamFormatError(f"invalid scenario JSON: {exc}") from exc
    return MeasurementConfig.from_dict(data)


def save_scenario(cfg: MeasurementConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2)
        fh.write("\n")


@dataclass(frozen=True)
class ClockError:
    """Skew (rad/s) and offset (rad) of one PMU clock."""

    alpha: float
    beta: float


@dataclass(frozen=True)
class Placement:
    """Ordered PMU bus ids (1-based, distinct)."""

    pmu_buses: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "pmu_buses", tuple(int(b) for b in self.pmu_buses))
        if len(set(self.pmu_buses)) != len(self.pmu_buses):
            raise ValueError(f"duplicate PMU buses in {self.pmu_buses}")
        if any(b < 1 for b in self.pmu_buses):
            raise ValueError("bus ids are 1-based")

    @property
    def m(self) -> int:
        return len(self.pmu_buses)


@dataclass(frozen=True)
class PmuFrame:
    """One reporting instant: interval k, sample t, readings at the PMU buses."""

    k: int
    t: int
    v_meas: np.ndarray
    theta_meas: np.ndarray

    def __post_init__(self):
        for name in ("v_meas", "theta_meas"):
            a = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=float))
            a.flags.writeable = False
            object.__setattr__(self, name, a)


def tau(k: int, t: int, T: float, M: int) -> float:
    """Absolute time of sample t in interval k: k*T + T*t/(M-1)."""
    if not 0 <= t <= M - 1:
        raise ValueError(f"sample index t={t} outside 0..{M - 1}")
    return k * T + T * t / (M - 1)


def draw_demand_truth(p_nom: np.ndarray, q_nom: np.ndarray, cfg: MeasurementConfig,
                      rng: np.random.Generator):
    """One correlated Gaussian demand realization around the nominal values.

    Per bus, the (p, q) pair has standard deviations sigma_p*|p|,
    sigma_q*|q| and correlation eta; buses are independent.
    """
    p_nom = np.asarray(p_nom, dtype=float)
    q_nom = np.asarray(q_nom, dtype=float)
    z1 = rng.standard_normal(p_nom.shape)
    z2 = rng.standard_normal(q_nom.shape)
    wp = cfg.sigma_p * np.abs(p_nom) * z1
    wq = cfg.sigma_q * np.abs(q_nom) * (cfg.eta * z1 + np.sqrt(1.0 - cfg.eta**2) * z2)
    return p_nom + wp, q_nom + wq


def draw_clock(cfg: MeasurementConfig, m: int, rng: np.random.Generator) -> list[ClockError]:
    """Independent clock errors for m PMUs: alpha ~ N(0, sigma_alpha^2), beta likewise."""
    alphas = cfg.sigma_alpha * rng.standard_normal(m)
    betas = cfg.sigma_beta * rng.standard_normal(m)
    return [ClockError(alpha=float(a), beta=float(b)) for a, b in zip(alphas, betas)]


def desync_phase(clock: ClockError, t: int, cfg: MeasurementConfig) -> float:
    """Angle error at sample t: beta + alpha * T/(M-1) * t."""
    if not 0 <= t <= cfg.M - 1:
        raise ValueError(f"sample index t={t} outside 0..{cfg.M - 1}")
    return clock.beta + clock.alpha * cfg.T / (cfg.M - 1) * t


def simulate_pmu_stream(
    true_state: GridState,
    placement: Placement,
    clocks: list[ClockError],
    cfg: MeasurementConfig,
    k: int,
    rng: np.random.Generator,
    v_ref: np.ndarray | None = None,
) -> list[PmuFrame]:
    """The M frames of interval k for one truth and one clock realization.

    Magnitude noise scales with the a-priori nominal magnitudes ``v_ref``
    (defaulting to the true ones), matching the measurement covariance
    the estimator assumes.  Noise draws are independent across samples,
    buses and channels; the clock phase is added to the angle channel
    only.
    """
    if len(clocks) != placement.m:
        raise ValueError("one ClockError per PMU required")
    idx = np.asarray([b - 1 for b in placement.pmu_buses])
    v_true = true_state.v[idx]
    th_true = true_state.theta[idx]
    v_scale = (true_state.v if v_ref is None else np.asarray(v_ref, dtype=float))[idx]
    alphas = np.array([c.alpha for c in clocks])
    betas = np.array([c.beta for c in clocks])
    frames = []
    for t in range(cfg.M):
        zv = rng.standard_normal(placement.m)
        zth = rng.standard_normal(placement.m)
        d = betas + alphas * cfg.T / (cfg.M - 1) * t
        frames.append(
            PmuFrame(
                k=k,
                t=t,
                v_meas=v_true + cfg.sigma_pmu_v * np.abs(v_scale) * zv,
                theta_meas=th_true + cfg.sigma_pmu_theta * zth + d,
            )
        )
    return frames


def write_stream_csv(frames: list[PmuFrame], placement: Placement, path) -> None:
    """Export frames as rows (k, t, bus, v_meas, theta_meas)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STREAM_COLUMNS)
        for fr in frames:
            for j, bus in enumerate(placement.pmu_buses):
                w.writerow([fr.k, fr.t, bus, repr(float(fr.v_meas[j])), repr(float(fr.theta_meas[j]))])


def read_stream_csv(path) -> tuple[list[PmuFrame], Placement]:
    """Parse a stream CSV back into frames plus the placement it encodes."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != STREAM_COLUMNS:
            raise StreamFormatError(f"line 1: expected header {','.join(STREAM_COLUMNS)}")
        groups: dict[tuple[int, int], list[tuple[int, float, float]]] = {}
        order: list[tuple[int, int]] = []
        for ln, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                k, t, bus = int(row[0]), int(row[1]), int(row[2])
                v, th = float(row[3]), float(row[4])
            except (ValueError, IndexError) as exc:
                raise StreamFormatError(f"line {ln}: malformed row {row!r}") from exc
            key = (k, t)
            if key not in groups:
                groups[key] = []
                order.append(key)
            groups[key].append((bus, v, th))

    if not order:
        raise StreamFormatError("stream contains no measurement rows")
    buses = tuple(b for b, _, _ in groups[order[0]])
    placement = Placement(pmu_buses=buses)
    frames = []
    for key in order:
        rows = groups[key]
        if tuple(b for b, _, _ in rows) != buses:
            raise StreamFormatError(f"frame k={key[0]}, t={key[1]}: inconsistent bus set")
        frames.append(
            PmuFrame(
                k=key[0],
                t=key[1],
                v_meas=np.array([v for _, v, _ in rows]),
                theta_meas=np.array([th for _, _, th in rows]),
            )
        )
    return frames, placement


def evolve_clock(clock: ClockError, cfg: MeasurementConfig, mode: str,
                 rng: np.random.Generator) -> ClockError:
    """Clock state entering the next interval.

    ``resync_reset`` draws a fresh (alpha, beta) pair, matching a filter
    that re-initializes at each sync instant; ``resync_integrate`` keeps
    the skew and accumulates it into the offset: beta <- beta + alpha*T.
    """
    if mode == "resync_reset":
        return draw_clock(cfg, 1, rng)[0]
    if mode == "resync_integrate":
        return replace(clock, beta=clock.beta + clock.alpha * cfg.T)
    raise ValueError(f"unknown resync mode {mode!r}")
