"""Noise schedules, forward noising and drift parameterisations.

Positions follow a variance-exploding schedule, sigma_X(t) = t * sigma_max_X.
Element embeddings follow a cosine schedule,
E_t = cos(pi t/2) E_0 + sigma_max_E sin(pi t/2) eps_E.

Drifts are expressed in the sampler's convention
M_{t-dt} = M_t - dt * mu + sqrt(dt) * g * eps, i.e. ``mu`` is dM/dt of the
reverse-time process: mu = f - g^2 * score (SDE) or f - g^2 * score / 2
(probability flow), with f the forward drift, g^2 = d(sigma^2)/dt - 2 f sigma^2
and score = -eps_hat / sigma(t).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .geometry import min_image_vectors, wrap_into_cell
from .material import MaterialSample

HALF_PI = 0.5 * math.pi


@dataclass(frozen=True)
class ScheduleConfig:
    sigma_max_X: float = 1.7
    sigma_max_E: float = 1.5
    # tan(pi t / 2) diverges at t = 1; drifts are evaluated at min(t, t_max)
    t_max: float = 1.0 - 1e-4

    def __post_init__(self):
        if self.sigma_max_X <= 0 or self.sigma_max_E <= 0:
            raise ValueError("sigma_max values must be positive")


@dataclass
class NoisedState:
    sample: MaterialSample
    t: float
    eps_X: np.ndarray
    eps_E: np.ndarray


def sigma_X(t, cfg: ScheduleConfig = ScheduleConfig()):
    return np.asarray(t, dtype=float) * cfg.sigma_max_X


def sigma_E(t, cfg: ScheduleConfig = ScheduleConfig()):
    return np.sin(HALF_PI * np.asarray(t, dtype=float)) * cfg.sigma_max_E


def _check_time(t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > 1) or not np.all(np.isfinite(t)):
        raise ValueError(f"time must lie in [0, 1], got {t}")
    return t


def sde_noise(sample: MaterialSample, t: float, rng, cfg: ScheduleConfig = ScheduleConfig()) -> NoisedState:
    t = float(_check_time(t))
    rng = np.random.default_rng(rng)
    eps_X = rng.standard_normal(sample.positions.shape)
    eps_E = rng.standard_normal(sample.elements.shape)
    if t == 0.0:
        return NoisedState(sample.copy(), t, eps_X, eps_E)
    pos = wrap_into_cell(sample.cell, sample.positions + sigma_X(t, cfg) * eps_X)
    elem = math.cos(HALF_PI * t) * sample.elements + sigma_E(t, cfg) * eps_E
    return NoisedState(MaterialSample(sample.cell, pos, elem, False, dict(sample.props)), t, eps_X, eps_E)


def ode_targets(m0: MaterialSample, m1: MaterialSample, t: float):
    """Straight-line path from ``m0`` (t=0) to ``m1`` (t=1).

    Returns ``(M_t, mu_X, mu_E)`` with the position drift taken along the
    minimum-image displacement.
    """
    t = float(_check_time(t))
    mu_X = min_image_vectors(m0.cell, m1.positions - m0.positions) if m0.n_atoms else np.zeros((0, 3))
    mu_E = m1.elements - m0.elements
    if t == 0.0 or not m0.n_atoms:
        pos = m0.positions.copy()
    else:
        pos = wrap_into_cell(m0.cell, m0.positions + t * mu_X)
    elem = m0.elements + t * mu_E
    decoded = t == 0.0 and m0.decoded
    return MaterialSample(m0.cell, pos, elem, decoded, dict(m0.props)), mu_X, mu_E


def drift_coefficients(t, cfg: ScheduleConfig = ScheduleConfig(), probability_flow: bool = False):
    """Per-time coefficients ``(c_X, c_self, c_noise, g_X, g_E)``.

    mu_X = c_X * eps_X_hat and mu_E = c_self * E_t + c_noise * eps_E_hat;
    g_X, g_E are the diffusion coefficients (zero for probability flow).
    """
    t = np.minimum(_check_time(t), cfg.t_max)
    tan = np.tan(HALF_PI * t)
    cos = np.cos(HALF_PI * t)
    # sigma_X = t s: g^2 = 2 t s^2, so g^2 * eps / sigma = 2 s eps
    c_X = 2.0 * cfg.sigma_max_X
    # cosine schedule: f = -(pi/2) tan, g^2 = pi s^2 tan, so g^2 / sigma_E = pi s / cos
    c_self = -HALF_PI * tan
    c_noise = math.pi * cfg.sigma_max_E / cos
    g_X = cfg.sigma_max_X * np.sqrt(2.0 * t)
    g_E = cfg.sigma_max_E * np.sqrt(math.pi * tan)
    if probability_flow:
        return 0.5 * c_X, c_self, 0.5 * c_noise, 0.0 * g_X, 0.0 * g_E
    return c_X + 0.0 * t, c_self, c_noise, g_X, g_E


def _apply(eps_X, eps_E, E_t, coefs):
    c_X, c_self, c_noise, g_X, g_E = coefs
    if torch.is_tensor(eps_X) or torch.is_tensor(eps_E):
        c_X, c_self, c_noise = (torch.as_tensor(np.asarray(c, dtype=float)) for c in (c_X, c_self, c_noise))
        E_t = torch.as_tensor(np.asarray(E_t, dtype=float)) if not torch.is_tensor(E_t) else E_t
    return c_X * eps_X, c_self * E_t + c_noise * eps_E, g_X, g_E


def sde_drift(eps_X, eps_E, E_t, t, cfg: ScheduleConfig = ScheduleConfig()):
    """Reverse-SDE drift ``(mu_X, mu_E, g_X, g_E)`` from predicted noises.

    ``t`` may be a scalar or an array broadcastable against the inputs.
    """
    return _apply(eps_X, eps_E, E_t, drift_coefficients(t, cfg, probability_flow=False))


def pf_ode_drift(eps_X, eps_E, E_t, t, cfg: ScheduleConfig = ScheduleConfig()):
    """Probability-flow drift: score terms halved, no diffusion."""
    return _apply(eps_X, eps_E, E_t, drift_coefficients(t, cfg, probability_flow=True))


def prior_sample(cell, n_a: int, d_E: int, mode: str, rng, cfg: ScheduleConfig = ScheduleConfig()) -> MaterialSample:
    """Noise sample M_1: uniform positions; N(0,1) (ODE) or N(0, sigma_max_E^2) (SDE) elements."""
    if n_a < 0:
        raise ValueError("atom count must be non-negative")
    rng = np.random.default_rng(rng)
    pos = rng.random((n_a, 3)) @ cell.lattice
    std = 1.0 if mode.lower() == "ode" else cfg.sigma_max_E
    elem = std * rng.standard_normal((n_a, d_E))
    return MaterialSample(cell, wrap_into_cell(cell, pos) if n_a else pos, elem, False)
