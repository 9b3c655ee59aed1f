"""Randomized target-function families for refinement episodes.

Each family draws a random superposition of localized features from a seeded
generator.  Static problems use wider features spread over most of the unit
square; advecting problems use narrower features kept away from the seams so
a sharp profile transports through the periodic domain.

All callables accept numpy arrays and broadcast.  Sampling order is fixed
(term count, then each parameter vector in declaration order) so a given
generator state always yields the same function.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass
class TargetFn:
    """A sampled target with its parameters, evaluable on arrays."""

    family: str
    params: dict
    fn: Callable = field(repr=False)

    def __call__(self, x, y):
        return self.fn(x, y)

    def advected(self, velocity, t: float) -> "TargetFn":
        """The target rigidly transported for time t on the periodic square."""
        vx, vy = velocity
        base = self.fn

        def shifted(x, y, _vx=vx, _vy=vy, _t=t):
            return base(np.mod(x - _vx * _t, 1.0), np.mod(y - _vy * _t, 1.0))

        params = dict(self.params)
        params["advected_by"] = [vx * t, vy * t]
        return TargetFn(self.family, params, shifted)


def _uniform(rng, lo, hi, n=None):
    return rng.uniform(lo, hi, n)


def sample_bumps(rng: np.random.Generator, mode: str = "static") -> TargetFn:
    """Sum of isotropic Gaussian bumps exp(-((x-cx)^2 + (y-cy)^2) / w)."""
    if mode == "static":
        c_lo, c_hi, w_lo, w_hi, n_hi = 0.2, 0.9, 0.05, 0.2, 6
    elif mode == "advection":
        c_lo, c_hi, w_lo, w_hi, n_hi = 0.3, 0.7, 0.005, 0.05, 4
    else:
        raise ValueError(f"unknown mode {mode!r}")
    n = int(rng.integers(1, n_hi + 1))
    cx = _uniform(rng, c_lo, c_hi, n)
    cy = _uniform(rng, c_lo, c_hi, n)
    w = _uniform(rng, w_lo, w_hi, n)

    def fn(x, y, cx=cx, cy=cy, w=w):
        x = np.asarray(x, dtype=np.float64)[..., None]
        y = np.asarray(y, dtype=np.float64)[..., None]
        return np.sum(np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / w), axis=-1)

    return TargetFn("bumps", {"cx": cx.tolist(), "cy": cy.tolist(), "w": w.tolist()}, fn)


def sample_circles(rng: np.random.Generator, mode: str = "static") -> TargetFn:
    """Sum of Gaussian ridges along circles of radius r around (cx, cy)."""
    if mode == "static":
        c_lo, c_hi, r_lo, r_hi, w_lo, w_hi, n_hi = 0.2, 0.8, 0.05, 0.2, 0.1, 1.0, 6
    elif mode == "advection":
        c_lo, c_hi, r_lo, r_hi, w_lo, w_hi, n_hi = 0.3, 0.7, 0.05, 0.2, 0.03, 0.05, 4
    else:
        raise ValueError(f"unknown mode {mode!r}")
    n = int(rng.integers(1, n_hi + 1))
    cx = _uniform(rng, c_lo, c_hi, n)
    cy = _uniform(rng, c_lo, c_hi, n)
    r = _uniform(rng, r_lo, r_hi, n)
    w = _uniform(rng, w_lo, w_hi, n)

    def fn(x, y, cx=cx, cy=cy, r=r, w=w):
        x = np.asarray(x, dtype=np.float64)[..., None]
        y = np.asarray(y, dtype=np.float64)[..., None]
        d = np.sqrt((x - cx) ** 2 + (y - cy) ** 2)
        return np.sum(np.exp(-((d - r) ** 2) / w), axis=-1)

    return TargetFn("circles",
                    {"cx": cx.tolist(), "cy": cy.tolist(), "r": r.tolist(), "w": w.tolist()},
                    fn)


def sample_steps(rng: np.random.Generator, mode: str = "static") -> TargetFn:
    """Sum of sharp fronts 1 + tanh(100 (o_i - (x + y tan(theta)))).

    All fronts share a single orientation theta; only the offsets differ.
    Static problems only.
    """
    if mode != "static":
        raise ValueError("steps targets are static-only")
    n = int(rng.integers(1, 7))
    o = _uniform(rng, 0.0, 1.0, n)
    theta = float(_uniform(rng, 0.0, np.pi / 2))
    tn = np.tan(theta)

    def fn(x, y, o=o, tn=tn):
        x = np.asarray(x, dtype=np.float64)[..., None]
        y = np.asarray(y, dtype=np.float64)[..., None]
        return np.sum(1.0 + np.tanh(100.0 * (o - (x + y * tn))), axis=-1)

    return TargetFn("steps", {"o": o.tolist(), "theta": theta}, fn)


def sample_steps2(rng: np.random.Generator, mode: str = "static",
                  rotation_fix: bool = False) -> TargetFn:
    """Sum of fronts with per-term orientations about the square's center.

    The signed coordinate of term i is
        s_i = (x - 0.5) cos(theta_i) - (y - 0.5) cos(theta_i)
    and the field is 0.5 * sum_i (1 + tanh(100 (s_i - o_i))).  With
    rotation_fix=True the second factor uses sin(theta_i) instead, making
    s_i a true rotation of the x coordinate.
    """
    if mode != "static":
        raise ValueError("steps2 targets are static-only")
    n = int(rng.integers(1, 7))
    o = _uniform(rng, 0.0, 1.0, n)
    theta = _uniform(rng, 0.0, np.pi / 2, n)
    ct = np.cos(theta)
    st = np.sin(theta) if rotation_fix else np.cos(theta)

    def fn(x, y, o=o, ct=ct, st=st):
        x = np.asarray(x, dtype=np.float64)[..., None]
        y = np.asarray(y, dtype=np.float64)[..., None]
        s = (x - 0.5) * ct - (y - 0.5) * st
        return 0.5 * np.sum(1.0 + np.tanh(100.0 * (s - o)), axis=-1)

    return TargetFn("steps2",
                    {"o": o.tolist(), "theta": theta.tolist(), "rotation_fix": rotation_fix},
                    fn)


FAMILIES = {
    "bumps": sample_bumps,
    "circles": sample_circles,
    "steps": sample_steps,
    "steps2": sample_steps2,
}

ADVECTION_FAMILIES = ("bumps", "circles")


def sample_target(family: str, rng: np.random.Generator, mode: str = "static",
                  **opts) -> TargetFn:
    try:
        sampler = FAMILIES[family]
    except KeyError:
        raise ValueError(f"unknown target family {family!r}; "
                         f"choose from {sorted(FAMILIES)}") from None
    if mode == "advection" and family not in ADVECTION_FAMILIES:
        raise ValueError(f"family {family!r} has no advection variant")
    return sampler(rng, mode, **opts)
