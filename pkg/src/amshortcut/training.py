"""Losses (ODE, SDE, shortcut self-consistency) and the training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch

from . import autodiff as ad
from .diffusion import ScheduleConfig, ode_targets, pf_ode_drift, prior_sample, sde_noise
from .geometry import wrap_into_cell
from .material import MaterialSample
from .seeding import child_seeds, stream

log = logging.getLogger(__name__)

MODES = ("ode", "sde", "shortcut")


@dataclass
class TrainConfig:
    mode: str = "sde"
    elem_weight: float = 0.5
    shortcut_fraction: float = 0.25
    n_base: int = 128
    batch_size: int = 8
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    steps: int = 1000
    seed: int = 0
    checkpoint_every: int = 0
    grad_clip: float = 0.0
    divergence_threshold: float = 1e6

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown training mode {self.mode!r}")
        if not 0.0 <= self.shortcut_fraction <= 1.0:
            raise ValueError("shortcut_fraction must lie in [0, 1]")
        if self.n_base < 2 or self.n_base & (self.n_base - 1):
            raise ValueError("n_base must be a power of two >= 2")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be positive and steps non-negative")


@dataclass(frozen=True)
class ShortcutDraw:
    level: int
    dt: float
    t: float


class TrainingDiverged(RuntimeError):
    def __init__(self, step, loss, params):
        super().__init__(f"training diverged at step {step} (loss {loss}); parameters reset to last checkpoint")
        self.step = step
        self.params = params


def draw_shortcut(n_base: int, rng) -> ShortcutDraw:
    """Dyadic step size 2^m / n_base and a time on the 2*dt grid in (0, 1]."""
    levels = int(round(math.log2(n_base)))
    while True:
        m = int(rng.integers(0, levels + 1))
        dt = 2.0**m / n_base
        n_slots = int(math.floor(1.0 / (2.0 * dt) + 1e-9))
        if n_slots < 1:
            continue
        j = int(rng.integers(1, n_slots + 1))
        return ShortcutDraw(m, dt, 2.0 * dt * j)


def _per_atom_sq(a, b):
    """Mean over atoms of squared row norms."""
    if a.shape[0] == 0:
        return torch.zeros((), dtype=ad.DTYPE)
    return ad.scale(ad.mse(a, b), a.shape[1])


def _dt_zero(model, B):
    return np.zeros(B) if model.step_size_conditioned else None


def _node_values(values, counts):
    return np.repeat(np.asarray(values, dtype=float), counts)[:, None]


def loss_ode(model, samples, props, rng, elem_weight: float = 0.5, t=None):
    """L2 regression of the straight-line drift."""
    B = len(samples)
    t = rng.random(B) if t is None else np.asarray(t, dtype=float)
    noised, mu_X, mu_E = [], [], []
    for b, s in enumerate(samples):
        m1 = prior_sample(s.cell, s.n_atoms, s.d_E, "ode", rng)
        m_t, mx, me = ode_targets(s, m1, float(t[b]))
        noised.append(m_t)
        mu_X.append(mx)
        mu_E.append(me)
    out = model(noised, props, t, _dt_zero(model, B), child_seeds(rng, B))
    return _per_atom_sq(out.pos_component, ad.tensor(np.concatenate(mu_X))) + elem_weight * _per_atom_sq(
        out.elem_component, ad.tensor(np.concatenate(mu_E))
    )


def noise_batch(samples, t, rng, sched: ScheduleConfig = ScheduleConfig()):
    return [sde_noise(s, float(tb), rng, sched) for s, tb in zip(samples, t)]


def loss_sde(model, samples, props, rng, elem_weight: float = 0.5, t=None, states=None,
             sched: ScheduleConfig = ScheduleConfig()):
    """L2 regression of the drawn position and element noises."""
    B = len(samples)
    if states is None:
        t = rng.random(B) if t is None else np.asarray(t, dtype=float)
        states = noise_batch(samples, t, rng, sched)
    t = np.array([st.t for st in states])
    out = model([st.sample for st in states], props, t, _dt_zero(model, B), child_seeds(rng, B))
    eps_X = ad.tensor(np.concatenate([st.eps_X for st in states]))
    eps_E = ad.tensor(np.concatenate([st.eps_E for st in states]))
    return _per_atom_sq(out.pos_component, eps_X) + elem_weight * _per_atom_sq(out.elem_component, eps_E)


def shortcut_velocity(model, samples, props, t, dt, rngs, sched: ScheduleConfig = ScheduleConfig()):
    """Average velocity ``(u_X, u_E)`` predicted for a step of size ``dt`` ending at ``t - dt``."""
    out = model(samples, props, t, dt, rngs)
    counts = [s.n_atoms for s in samples]
    E_t = ad.tensor(np.concatenate([s.elements for s in samples]))
    u_X, u_E, _, _ = pf_ode_drift(out.pos_component, out.elem_component, E_t, _node_values(t, counts), sched)
    return u_X, u_E


def _euler_samples(samples, u_X, u_E, dt, counts):
    out = []
    ux = torch.split(u_X.detach(), counts)
    ue = torch.split(u_E.detach(), counts)
    for s, x, e, h in zip(samples, ux, ue, dt):
        pos = s.positions - h * x.numpy()
        pos = wrap_into_cell(s.cell, pos) if s.n_atoms else pos
        out.append(MaterialSample(s.cell, pos, s.elements - h * e.numpy(), False, dict(s.props)))
    return out


def shortcut_target(model, samples, props, t, dt, rng, sched: ScheduleConfig = ScheduleConfig()):
    """Mean of two consecutive ``dt`` shortcuts along the probability-flow ODE."""
    B = len(samples)
    counts = [s.n_atoms for s in samples]
    t = np.asarray(t, dtype=float)
    dt = np.asarray(dt, dtype=float)
    with torch.no_grad():
        u1X, u1E = shortcut_velocity(model, samples, props, t, dt, child_seeds(rng, B), sched)
        mid = _euler_samples(samples, u1X, u1E, dt, counts)
        u2X, u2E = shortcut_velocity(model, mid, props, t - dt, dt, child_seeds(rng, B), sched)
    return ad.stop_gradient(0.5 * (u1X + u2X)), ad.stop_gradient(0.5 * (u1E + u2E))


def loss_shortcut(model, samples, props, t, dt, rng, sched: ScheduleConfig = ScheduleConfig(), target_model=None):
    """Self-consistency: one 2*dt shortcut should match two dt shortcuts.

    ``samples`` are the noised states M_t. ``target_model`` (default
    ``model``) evaluates the stop-gradient target.
    """
    if not model.step_size_conditioned:
        raise ValueError("shortcut loss needs a step-size-conditioned denoiser")
    t = np.asarray(t, dtype=float)
    dt = np.asarray(dt, dtype=float)
    if np.any(t - 2 * dt < -1e-12):
        raise ValueError("shortcut draw needs t - 2 dt >= 0")
    tX, tE = shortcut_target(target_model or model, samples, props, t, dt, rng, sched)
    uX, uE = shortcut_velocity(model, samples, props, t, 2 * dt, child_seeds(rng, len(samples)), sched)
    return _per_atom_sq(uX, tX) + _per_atom_sq(uE, tE)


def _batch(dataset, idx):
    return [dataset[i][0] for i in idx], [dataset[i][1] for i in idx]


def train_step_loss(model, dataset, cfg: TrainConfig, step: int, sched: ScheduleConfig = ScheduleConfig()):
    """Loss for one optimisation step; returns ``(total, loss_main, loss_sc or None)``."""
    rng = stream(cfg.seed, "train-step", step)
    idx = rng.choice(len(dataset), size=min(cfg.batch_size, len(dataset)), replace=False)
    samples, props = _batch(dataset, idx)
    if cfg.mode == "ode":
        loss = loss_ode(model, samples, props, rng, cfg.elem_weight)
        return loss, loss, None
    use_sc = cfg.mode == "shortcut" and stream(cfg.seed, "sc-select", step).random() < cfg.shortcut_fraction
    if not use_sc:
        loss = loss_sde(model, samples, props, rng, cfg.elem_weight, sched=sched)
        return loss, loss, None
    draws = [draw_shortcut(cfg.n_base, rng) for _ in samples]
    t = np.array([d.t for d in draws])
    dt = np.array([d.dt for d in draws])
    states = noise_batch(samples, t, rng, sched)
    l_main = loss_sde(model, samples, props, rng, cfg.elem_weight, states=states, sched=sched)
    l_sc = loss_shortcut(model, [st.sample for st in states], props, t, dt, rng, sched)
    return l_main + l_sc, l_main, l_sc


def train(dataset, cfg: TrainConfig, model, sched: ScheduleConfig = ScheduleConfig(),
          log_path=None, checkpoint_path=None, progress_every: int = 0):
    """Adam on the configured loss. Returns ``(params, log_records)``.

    Log records are ``(step, loss_main, loss_sc, wallclock_s)`` with
    ``loss_sc`` NaN on batches without a shortcut term.
    """
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    if cfg.mode == "shortcut" and not model.step_size_conditioned:
        raise ValueError("shortcut training needs a step-size-conditioned denoiser")
    if cfg.mode == "ode" and model.output != "drift":
        raise ValueError("ODE training needs a drift-output denoiser")
    if cfg.mode != "ode" and model.output != "noise":
        raise ValueError("SDE/shortcut training needs a noise-output denoiser")
    params = model.params
    meta = {"denoiser": model.cfg.to_dict(), "schedule": asdict(sched)}
    opt = torch.optim.Adam(params.values(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    records = []
    last_good = params.copy()
    fh = open(log_path, "a") if log_path else None
    if fh is not None and fh.tell() == 0:
        fh.write("step,loss_sde,loss_sc,wallclock_s\n")
    start = time.perf_counter()
    try:
        for step in range(cfg.steps):
            opt.zero_grad()
            total, l_main, l_sc = train_step_loss(model, dataset, cfg, step, sched)
            value = float(total.detach())
            if not math.isfinite(value) or value > cfg.divergence_threshold:
                params.load_flat(last_good.flatten())
                if checkpoint_path:
                    ad.save_checkpoint(checkpoint_path, params, {**meta, "step": step})
                raise TrainingDiverged(step, value, params)
            total.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params.values(), cfg.grad_clip)
            opt.step()
            rec = (step, float(l_main.detach()), float(l_sc.detach()) if l_sc is not None else float("nan"),
                   time.perf_counter() - start)
            records.append(rec)
            if fh is not None:
                fh.write(f"{rec[0]},{rec[1]!r},{rec[2]!r},{rec[3]:.3f}\n")
            if progress_every and step % progress_every == 0:
                log.info("step %d loss %.5f sc %.5f", step, rec[1], rec[2])
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                last_good = params.copy()
                if checkpoint_path:
                    ad.save_checkpoint(checkpoint_path, params, {**meta, "step": step + 1})
    finally:
        if fh is not None:
            fh.close()
    if checkpoint_path:
        ad.save_checkpoint(checkpoint_path, params, {**meta, "step": cfg.steps})
    return params, records


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
