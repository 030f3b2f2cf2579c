"""Holding-time densities, samplers and grid convolutions."""

from __future__ import annotations

import logging
from functools import lru_cache
from typing import Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import stats
from scipy.integrate import cumulative_trapezoid, trapezoid

from .errors import IncompleteModelError, ResolutionError, UnsupportedFamilyError
from .models import CegGraph, HoldingFamily, HoldingTimeSpec, TimedPath

logger = logging.getLogger(__name__)

# Allowed gap between the expected mass of a convolution and its grid integral.
MASS_TOLERANCE = 1e-3


def frozen(spec: HoldingTimeSpec):
    """scipy.stats frozen distribution of the law used for sampling."""
    p = spec.params
    if spec.family is HoldingFamily.EXPONENTIAL:
        scale = 1.0 / p[0] if spec.convention == "rate" else p[0]
        return stats.expon(scale=scale)
    if spec.family is HoldingFamily.NORMAL:
        mu, sd = p
        return stats.truncnorm(a=(0.0 - mu) / sd, b=np.inf, loc=mu, scale=sd)
    if spec.family is HoldingFamily.WEIBULL:
        shape, scale = p if spec.convention == "shape_scale" else p[::-1]
        return stats.weibull_min(c=shape, scale=scale)
    raise UnsupportedFamilyError(
        f"no closed-form law for family '{spec.family.value}'"
    )


def _knots(spec: HoldingTimeSpec) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(spec.params, dtype=float)
    return p[0::2], p[1::2]


def density(spec: HoldingTimeSpec, t):
    """Density of ``spec`` at ``t`` (scalar or array) under its convention."""
    arr = np.asarray(t, dtype=float)
    if spec.family is HoldingFamily.EMPIRICAL_GRID:
        ts, fs = _knots(spec)
        out = np.interp(arr, ts, fs, left=0.0, right=0.0)
    elif spec.family is HoldingFamily.NORMAL and spec.convention == "mean_sd":
        mu, sd = spec.params
        out = np.where(arr >= 0, stats.norm.pdf(arr, loc=mu, scale=sd), 0.0)
    elif spec.family in (
        HoldingFamily.EXPONENTIAL,
        HoldingFamily.NORMAL,
        HoldingFamily.WEIBULL,
    ):
        out = frozen(spec).pdf(arr)
    else:
        raise UnsupportedFamilyError(f"unsupported family '{spec.family}'")
    return float(out) if np.ndim(out) == 0 else out


def cdf(spec: HoldingTimeSpec, t):
    arr = np.asarray(t, dtype=float)
    if spec.family is HoldingFamily.EMPIRICAL_GRID:
        ts, fs = _knots(spec)
        cum = np.concatenate([[0.0], cumulative_trapezoid(fs, ts)])
        # exact for piecewise-linear densities
        idx = np.clip(np.searchsorted(ts, arr, side="right") - 1, 0, len(ts) - 2)
        dt = np.clip(arr - ts[idx], 0.0, ts[idx + 1] - ts[idx])
        slope = (fs[idx + 1] - fs[idx]) / (ts[idx + 1] - ts[idx])
        out = np.where(
            arr < ts[0], 0.0, cum[idx] + fs[idx] * dt + 0.5 * slope * dt * dt
        )
    elif spec.family is HoldingFamily.NORMAL and spec.convention == "mean_sd":
        mu, sd = spec.params
        base = stats.norm.cdf(0.0, loc=mu, scale=sd)
        out = np.where(
            arr >= 0, stats.norm.cdf(arr, loc=mu, scale=sd) - base, 0.0
        )
    else:
        out = frozen(spec).cdf(arr)
    return float(out) if np.ndim(out) == 0 else out


def total_mass(spec: HoldingTimeSpec) -> float:
    """Mass of the evaluated density on [0, inf)."""
    if spec.family is HoldingFamily.NORMAL and spec.convention == "mean_sd":
        mu, sd = spec.params
        return float(stats.norm.sf(0.0, loc=mu, scale=sd))
    return 1.0


def mean(spec: HoldingTimeSpec) -> float:
    """Mean of the sampled law (normals are sampled truncated at 0)."""
    if spec.family is HoldingFamily.EMPIRICAL_GRID:
        ts, fs = _knots(spec)
        return float(trapezoid(ts * fs, ts))
    return float(frozen(spec).mean())


def sample(spec: HoldingTimeSpec, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``size`` holding times using the caller's random stream."""
    if spec.family is HoldingFamily.EMPIRICAL_GRID:
        ts, fs = _knots(spec)
        fine = np.linspace(ts[0], ts[-1], 4097)
        cum = cdf(spec, fine)
        u = rng.uniform(0.0, cum[-1], size=size)
        return np.interp(u, cum, fine)
    return np.asarray(frozen(spec).rvs(size=size, random_state=rng), dtype=float)


class DensityGrid(BaseModel):
    """Density values on the uniform grid 0, dt, 2dt, ..., tmax."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    dt: float = Field(..., gt=0)
    tmax: float = Field(..., gt=0)
    values: np.ndarray

    @field_validator("values")
    @classmethod
    def nonnegative(cls, v: np.ndarray) -> np.ndarray:
        v = np.clip(np.asarray(v, dtype=float), 0.0, None)
        v.setflags(write=False)
        return v

    @property
    def support(self) -> np.ndarray:
        return np.arange(len(self.values)) * self.dt

    def value_at(self, t: float) -> float:
        return float(np.interp(t, self.support, self.values, right=0.0))

    def integral(self) -> float:
        return float(trapezoid(self.values, dx=self.dt))

    def mean(self) -> float:
        return float(trapezoid(self.support * self.values, dx=self.dt))

    def cdf_at(self, t: float) -> float:
        cum = np.concatenate([[0.0], cumulative_trapezoid(self.values, dx=self.dt)])
        return float(np.interp(t, self.support, cum))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t": self.support, "density": self.values})


def _grid_points(dt: float, tmax: float) -> int:
    return int(round(tmax / dt)) + 1


def grid_of(spec: HoldingTimeSpec, dt: float = 0.01, tmax: float = 200.0) -> DensityGrid:
    """Evaluate a single density on the grid, normalised to the sampled law.

    Untruncated normals lose their negative mass at 0; the grid divides it
    back out so sums of holding times follow what ``sample`` draws.
    """
    t = np.arange(_grid_points(dt, tmax)) * dt
    values = np.asarray(density(spec, t), dtype=float) / total_mass(spec)
    if not np.isfinite(values[0]):
        # Integrable pole at 0 (weibull shape < 1): use the first cell's mass.
        values[0] = max(0.0, 2.0 * cdf(spec, dt) / dt - values[1])
    return DensityGrid(dt=dt, tmax=tmax, values=values)


def _check_mass(grid: DensityGrid, expected: float, what: str) -> None:
    deficit = expected - grid.integral()
    if deficit > MASS_TOLERANCE:
        raise ResolutionError(
            f"{what}: grid holds {grid.integral():.6f} of expected mass "
            f"{expected:.6f}; increase grid_tmax (now {grid.tmax}) "
            f"or decrease grid_dt (now {grid.dt})"
        )


@lru_cache(maxsize=256)
def _convolve_cached(
    specs: tuple[HoldingTimeSpec, ...], dt: float, tmax: float
) -> DensityGrid:
    n = _grid_points(dt, tmax)
    f = grid_of(specs[0], dt, tmax).values
    for spec in specs[1:]:
        g = grid_of(spec, dt, tmax).values
        conv = np.convolve(f, g)[:n]
        # Trapezoid weights: half weight on both interval ends.
        f = np.clip(dt * (conv - 0.5 * (f[0] * g + g[0] * f)), 0.0, None)
    grid = DensityGrid(dt=dt, tmax=tmax, values=f)
    _check_mass(grid, 1.0, f"convolution of {len(specs)} densities")
    return grid


def convolve(
    specs: Sequence[HoldingTimeSpec], dt: float = 0.01, tmax: float = 200.0
) -> DensityGrid:
    """Density of the sum of independent holding times, on the grid.

    Raises:
        ResolutionError: if the grid loses more than 1e-3 of the mass.
    """
    if not specs:
        raise ValueError("convolve needs at least one holding spec")
    logger.debug(f"Convolving {len(specs)} densities on dt={dt}, tmax={tmax}")
    return _convolve_cached(tuple(specs), float(dt), float(tmax))


def sum_density(
    specs: Sequence[HoldingTimeSpec], t: float, dt: float = 0.01, tmax: float = 200.0
) -> float:
    """Density of the summed holding time at ``t``.

    A single spec is evaluated in closed form; longer routes are read off
    the convolved grid by linear interpolation.  Both follow the sampled
    law, so untruncated normals are renormalised here.
    """
    if len(specs) == 1:
        return density(specs[0], t) / total_mass(specs[0])
    return convolve(specs, dt, tmax).value_at(t)


def joint_timed_path_probability(graph: CegGraph, path: TimedPath) -> float:
    """Product of transition probabilities and holding densities along a path.

    Untimed positions and steps with an unknown holding time contribute their
    transition probability only.
    """
    value = 1.0
    for step in path.steps:
        edge = graph.edge(step.edge)
        value *= edge.probability
        if step.holding is None or not graph.is_timed(step.position):
            continue
        if edge.holding is None:
            raise IncompleteModelError(
                f"edge {edge.id} leaves timed position {step.position} "
                "but has no holding-time spec"
            )
        value *= density(edge.holding, step.holding)
    return value


class MixtureHolding(BaseModel):
    """Weighted mixture of holding specs for merged parallel edges."""

    model_config = ConfigDict(frozen=True)

    components: tuple[tuple[float, HoldingTimeSpec], ...]

    @field_validator("components")
    @classmethod
    def normalised(cls, v):
        total = sum(w for w, _ in v)
        if total <= 0:
            raise ValueError("mixture weights must have positive sum")
        return tuple((w / total, s) for w, s in v)

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for w, _ in self.components])

    def density(self, t):
        return sum(w * density(s, t) for w, s in self.components)

    def mean(self) -> float:
        return float(sum(w * mean(s) for w, s in self.components))

    def sample(self, size: int, rng: np.random.Generator) -> np.ndarray:
        which = rng.choice(len(self.components), size=size, p=self.weights)
        out = np.empty(size)
        for i, (_, spec) in enumerate(self.components):
            mask = which == i
            if mask.any():
                out[mask] = sample(spec, int(mask.sum()), rng)
        return out

    def to_dict(self) -> dict:
        return {
            "family": "mixture",
            "components": [
                {
                    "weight": w,
                    "family": s.family.value,
                    "params": list(s.params),
                    "convention": s.convention,
                }
                for w, s in self.components
            ],
        }
