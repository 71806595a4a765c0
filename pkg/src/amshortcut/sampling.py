"""Reverse-time samplers: Euler-Maruyama SDE, deterministic ODE / PF-ODE,
and the few-step shortcut sampler.

All samplers walk the uniform grid t_k = 1 - k / n_s with exactly one
denoiser call per step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .diffusion import ScheduleConfig, pf_ode_drift, prior_sample, sde_drift
from .geometry import wrap_into_cell
from .material import MaterialSample, PropertySet, decode_elements, ghost_quota, strip_ghost_atoms
from .seeding import stream

SAMPLER_MODES = ("ode", "sde", "pf-ode", "shortcut")
# below this many steps the SDE sampler integrates the probability-flow ODE
PF_SWITCH_STEPS = 10


@dataclass
class SamplerConfig:
    n_s: int = 128
    mode: str = "sde"
    seed: int = 0
    batch_size: int = 16

    def __post_init__(self):
        if int(self.n_s) != self.n_s or self.n_s < 1:
            raise ValueError("n_s must be an integer >= 1")
        self.mode = self.mode.lower()
        if self.mode not in SAMPLER_MODES:
            raise ValueError(f"unknown sampler mode {self.mode!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @property
    def stochastic(self) -> bool:
        return self.mode == "sde" and self.n_s > PF_SWITCH_STEPS


def time_grid(n_s: int) -> np.ndarray:
    return 1.0 - np.arange(n_s + 1) / n_s


def em_update(x, mu, g, dt, rng):
    """x - dt * mu + sqrt(dt) * g * eps with a fresh eps unless g is zero."""
    x = x - dt * np.asarray(mu)
    g = np.asarray(g, dtype=float)
    if np.any(g != 0):
        x = x + math.sqrt(dt) * g * rng.standard_normal(x.shape)
    return x


def euler_maruyama_step(sample: MaterialSample, drift, diffusion, dt: float, rng) -> MaterialSample:
    """One step M_{t-dt} = M_t - dt * mu + sqrt(dt) * g * eps.

    ``drift`` is ``(mu_X, mu_E)``, ``diffusion`` is ``(g_X, g_E)``.
    Positions are wrapped back into the cell, elements are not.
    """
    if not dt > 0:
        raise ValueError("step size must be positive")
    rng = np.random.default_rng(rng)
    pos = em_update(sample.positions, drift[0], diffusion[0], dt, rng)
    elem = em_update(sample.elements, drift[1], diffusion[1], dt, rng)
    pos = wrap_into_cell(sample.cell, pos) if sample.n_atoms else pos
    return MaterialSample(sample.cell, pos, elem, False, dict(sample.props))


def integrate(X, E, drift_fn, n_s: int, rng, wrap=None):
    """Generic reverse-time loop on arrays ``X`` (N, 3) and ``E`` (N, d).

    ``drift_fn(X, E, t, dt)`` returns ``(mu_X, mu_E, g_X, g_E)``. Used with
    learned denoisers and with closed-form scores alike.
    """
    h = 1.0 / n_s
    for k, t in enumerate(time_grid(n_s)[:-1]):
        mu_X, mu_E, g_X, g_E = drift_fn(X, E, float(t), h)
        X = em_update(X, mu_X, g_X, h, rng)
        E = em_update(E, mu_E, g_E, h, rng)
        if wrap is not None:
            X = wrap(X)
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(E))):
            raise FloatingPointError(f"non-finite state after sampling step {k}")
    return X, E


def _to_numpy(x):
    return x.detach().numpy() if torch.is_tensor(x) else np.asarray(x)


def _check_model(model, mode):
    if mode == "ode" and model.output != "drift":
        raise ValueError("ODE sampling needs a drift-output denoiser")
    if mode != "ode" and model.output != "noise":
        raise ValueError(f"{mode} sampling needs a noise-output denoiser")
    if mode == "shortcut" and not model.step_size_conditioned:
        raise ValueError("shortcut sampling needs a step-size-conditioned denoiser")


def _batched_drift(model, cfg: SamplerConfig, cells, props, rngs, sched):
    """Drift callback over a batch of trajectories stacked along the atom axis."""
    counts = [n for _, n in cells]
    B = len(cells)

    def drift(X, E, t, h):
        samples, start = [], 0
        for (cell, n) in cells:
            samples.append(MaterialSample(cell, X[start:start + n], E[start:start + n], False))
            start += n
        tt = np.full(B, t)
        if cfg.mode == "shortcut":
            dt = np.full(B, h)
        else:
            dt = np.zeros(B) if model.step_size_conditioned else None
        null_rngs = [np.random.default_rng(int(r.integers(0, 2**63 - 1))) for r in rngs]
        with torch.no_grad():
            out = model(samples, props, tt, dt, null_rngs)
        eps_X, eps_E = _to_numpy(out.pos_component), _to_numpy(out.elem_component)
        if cfg.mode == "ode":
            return eps_X, eps_E, 0.0, 0.0
        t_nodes = np.full((sum(counts), 1), t)
        fn = sde_drift if cfg.stochastic else pf_ode_drift
        mu_X, mu_E, g_X, g_E = fn(eps_X, eps_E, E, t_nodes, sched)
        return mu_X, mu_E, g_X, g_E

    return drift


class _PerTargetNoise:
    """Routes fresh noise for each trajectory slice to that trajectory's own generator."""

    def __init__(self, rngs, counts):
        self.rngs = rngs
        self.counts = counts

    def standard_normal(self, shape):
        width = shape[1:]
        return np.concatenate([r.standard_normal((n,) + tuple(width)) for r, n in zip(self.rngs, self.counts)])


def _run_batch(model, cfg, cell, n_a, props, rngs, sched):
    mode = "ode" if cfg.mode == "ode" else "sde"
    priors = [prior_sample(cell, n_a, model.cfg.d_E, mode, r, sched) for r in rngs]
    X = np.concatenate([p.positions for p in priors])
    E = np.concatenate([p.elements for p in priors])
    counts = [n_a] * len(rngs)
    drift = _batched_drift(model, cfg, [(cell, n_a)] * len(rngs), props, rngs, sched)
    X, E = integrate(X, E, drift, cfg.n_s, _PerTargetNoise(rngs, counts),
                     wrap=lambda x: wrap_into_cell(cell, x) if len(x) else x)
    out, start = [], 0
    for n in counts:
        s = MaterialSample(cell, X[start:start + n], decode_elements(E[start:start + n]), True)
        out.append(strip_ghost_atoms(s))
        start += n
    return out


def generate_batch(model, cell, rho_max: float, targets, cfg: SamplerConfig,
                   sched: ScheduleConfig = ScheduleConfig()):
    """One decoded, ghost-free sample per target PropertySet.

    Trajectory ``i`` draws all of its randomness from ``stream(seed,
    "sample", i)``, so outputs do not depend on how targets are batched
    together beyond floating-point summation order.
    """
    _check_model(model, cfg.mode)
    targets = list(targets)
    n_a = ghost_quota(cell, rho_max)
    results = []
    for lo in range(0, len(targets), cfg.batch_size):
        chunk = targets[lo:lo + cfg.batch_size]
        rngs = [stream(cfg.seed, "sample", lo + i) for i in range(len(chunk))]
        try:
            results.extend(_run_batch(model, cfg, cell, n_a, chunk, rngs, sched))
        except FloatingPointError as exc:
            raise FloatingPointError(f"targets {lo}..{lo + len(chunk) - 1}: {exc}") from exc
    return results


def generate(model, cell, rho_max: float, props: PropertySet, cfg: SamplerConfig,
             sched: ScheduleConfig = ScheduleConfig()) -> MaterialSample:
    return generate_batch(model, cell, rho_max, [props], cfg, sched)[0]


def write_manifest(path, targets, names) -> None:
    """Tab-separated frame index and target property values (``null`` if unavailable)."""
    with open(path, "w") as fh:
        fh.write("frame\t" + "\t".join(names) + "\n")
        for i, p in enumerate(targets):
            vals = [repr(float(v)) if a else "null" for v, a in zip(p.values, p.available)]
            fh.write(f"{i}\t" + "\t".join(vals) + "\n")
