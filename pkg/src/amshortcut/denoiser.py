"""Flexible material denoiser: property embeddings with a random null
fallback and an E(n)-equivariant message-passing backbone under periodic
boundary conditions.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import autodiff as ad
from .geometry import build_neighbor_graph


@dataclass
class DenoiserConfig:
    d_E: int
    n_p: int
    layers: int = 4
    channels: int = 8
    hidden: int = 128
    prop_dim: int = 16
    cutoff: float = 6.5
    n_norm: float = 40.0
    step_size_conditioned: bool = False
    # "noise" (material SDE / shortcut) or "drift" (material ODE)
    output: str = "noise"
    # noise outputs express the element noise through the noised input:
    # eps_E = (sin(pi t/2) E_t + cos(pi t/2) head) / sigma_max_E
    elem_skip: bool = True
    sigma_max_E: float = 1.5
    prop_names: tuple = ()
    prop_mean: tuple = ()
    prop_std: tuple = ()

    def __post_init__(self):
        if min(self.layers, self.channels, self.hidden, self.prop_dim, self.d_E) < 1 or self.n_p < 0:
            raise ValueError("denoiser dimensions must be positive")
        if self.output not in ("noise", "drift"):
            raise ValueError(f"unknown output kind {self.output!r}")
        if not self.prop_names:
            self.prop_names = tuple(f"p{i}" for i in range(self.n_p))
        if not self.prop_mean:
            self.prop_mean = (0.0,) * self.n_p
        if not self.prop_std:
            self.prop_std = (1.0,) * self.n_p
        self.prop_names = tuple(self.prop_names)
        self.prop_mean = tuple(float(v) for v in self.prop_mean)
        self.prop_std = tuple(float(v) for v in self.prop_std)
        if not (len(self.prop_names) == len(self.prop_mean) == len(self.prop_std) == self.n_p):
            raise ValueError("property names/normalisation must have n_p entries")

    @property
    def input_dim(self) -> int:
        return 1 + self.d_E + self.n_p * self.prop_dim + int(self.step_size_conditioned)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("prop_names", "prop_mean", "prop_std"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**d)


@dataclass
class DenoiserOutput:
    """Concatenated per-atom outputs for a batch of samples."""

    pos_component: torch.Tensor
    elem_component: torch.Tensor
    counts: list = field(default_factory=list)

    def split(self):
        pos = torch.split(self.pos_component, self.counts)
        elem = torch.split(self.elem_component, self.counts)
        return [DenoiserOutput(p, e, [len(p)]) for p, e in zip(pos, elem)]


def edge_attribute(d, r_cut):
    """tanh(|d|^2 / r_cut^2) * 2 - 1 for displacement(s) ``d``."""
    d = np.asarray(d, dtype=float)
    r2 = np.sum(d * d, axis=-1)
    return np.tanh(r2 / r_cut**2) * 2.0 - 1.0


def smooth_cutoff(r, r_cut):
    """2 tanh(1 - min(r, r_cut)/r_cut)^2, zero beyond the cutoff."""
    r = np.asarray(r, dtype=float)
    return 2.0 * np.tanh(1.0 - np.minimum(r, r_cut) / r_cut) ** 2


def _linear_init(rng, fan_in, fan_out):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, (fan_in, fan_out)), rng.uniform(-bound, bound, fan_out)


def init_params(cfg: DenoiserConfig, rng) -> ad.ParamStore:
    rng = np.random.default_rng(rng)
    p = ad.ParamStore()
    dh, k = cfg.hidden, cfg.channels

    def linear(name, fan_in, fan_out, zero=False):
        w, b = _linear_init(rng, fan_in, fan_out)
        if zero:
            w, b = np.zeros_like(w), np.zeros_like(b)
        p.add(f"{name}.w", w)
        p.add(f"{name}.b", b)

    def mlp(name, fan_in, fan_out, zero_last=False):
        linear(f"{name}.l1", fan_in, dh)
        p.add(f"{name}.ln.g", np.ones(dh))
        p.add(f"{name}.ln.b", np.zeros(dh))
        linear(f"{name}.l2", dh, fan_out, zero=zero_last)

    for i in range(cfg.n_p):
        w, b = _linear_init(rng, 1, cfg.prop_dim)
        p.add(f"prop{i}.w", w[0])
        p.add(f"prop{i}.b", b)
    linear("embed", cfg.input_dim, dh)
    for l in range(cfg.layers):
        mlp(f"layer{l}.edge", 2 * dh + 1, dh)
        linear(f"layer{l}.att", dh, 1)
        mlp(f"layer{l}.node", 2 * dh, dh)
        mlp(f"layer{l}.coord", 2 * dh + 1, k * k, zero_last=True)
    linear("readout", dh, cfg.d_E)
    return p


def _linear(params, name, x):
    return ad.add(ad.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def _mlp(params, name, x):
    h = _linear(params, f"{name}.l1", x)
    h = ad.silu(ad.layer_norm(h, params[f"{name}.ln.g"], params[f"{name}.ln.b"]))
    return _linear(params, f"{name}.l2", h)


def embed_property(value, index: int, params, cfg: DenoiserConfig, rng):
    """LayerNorm(Linear(value)) when ``value`` is available, else a fresh N(0, 1) draw."""
    if value is None:
        return ad.tensor(np.random.default_rng(rng).standard_normal(cfg.prop_dim))
    z = (float(value) - cfg.prop_mean[index]) / cfg.prop_std[index]
    h = ad.add(ad.scale(params[f"prop{index}.w"], z), params[f"prop{index}.b"])
    return ad.layer_norm(h)


class Denoiser:
    """Callable ``(samples, props, t, dt, rngs) -> DenoiserOutput``.

    ``t`` and ``dt`` hold one value per sample. ``rngs`` supplies one
    generator per sample for the null property embeddings.
    """

    def __init__(self, cfg: DenoiserConfig, params: ad.ParamStore | None = None, seed=0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)

    @property
    def step_size_conditioned(self) -> bool:
        return self.cfg.step_size_conditioned

    @property
    def output(self) -> str:
        return self.cfg.output

    def with_params(self, params) -> "Denoiser":
        return Denoiser(self.cfg, params)

    def __call__(self, samples, props, t, dt=None, rngs=None) -> DenoiserOutput:
        return forward(self.params, self.cfg, samples, props, t, dt, rngs)


def _graph_arrays(samples, cutoff):
    src, dst, d0, counts = [], [], [], []
    base = 0
    for s in samples:
        g = build_neighbor_graph(s.cell, s.positions, cutoff)
        src.append(g.src + base)
        dst.append(g.dst + base)
        d0.append(s.positions[g.src] - s.positions[g.dst] - g.offsets)
        counts.append(s.n_atoms)
        base += s.n_atoms
    return np.concatenate(src), np.concatenate(dst), np.concatenate(d0).reshape(-1, 3), counts


def forward(params, cfg: DenoiserConfig, samples, props, t, dt=None, rngs=None) -> DenoiserOutput:
    if cfg.step_size_conditioned and dt is None:
        raise ValueError("step-size-conditioned denoiser called without dt")
    if not cfg.step_size_conditioned and dt is not None:
        raise ValueError("denoiser is not step-size conditioned but dt was given")
    B = len(samples)
    t = np.broadcast_to(np.asarray(t, dtype=float), (B,))
    if rngs is None:
        rngs = [np.random.default_rng(0) for _ in range(B)]
    src, dst, d0, counts = _graph_arrays(samples, cfg.cutoff)
    N = sum(counts)
    node_graph = np.repeat(np.arange(B), counts)

    cols = [ad.tensor(t[node_graph][:, None]), ad.tensor(np.concatenate([s.elements for s in samples]).reshape(N, cfg.d_E))]
    for i in range(cfg.n_p):
        per_graph = []
        for b in range(B):
            ps = props[b]
            per_graph.append(embed_property(ps.values[i] if ps.available[i] else None, i, params, cfg, rngs[b]))
        cols.append(ad.row_gather(torch.stack(per_graph), node_graph))
    if cfg.step_size_conditioned:
        dt = np.broadcast_to(np.asarray(dt, dtype=float), (B,))
        cols.append(ad.tensor(dt[node_graph][:, None]))
    H = _linear(params, "embed", ad.concat(cols))

    dist0 = np.linalg.norm(d0, axis=1)
    e = ad.tensor(edge_attribute(d0, cfg.cutoff)[:, None])
    fcut = ad.tensor(smooth_cutoff(dist0, cfg.cutoff)[:, None])
    d0_t = ad.tensor(d0)
    k = cfg.channels
    shift = torch.zeros((N, k, 3), dtype=ad.DTYPE)
    for l in range(cfg.layers):
        name = f"layer{l}"
        m = _mlp(params, f"{name}.edge", ad.concat([ad.row_gather(H, src), ad.row_gather(H, dst), e]))
        alpha = ad.sigmoid(_linear(params, f"{name}.att", m))
        msg = ad.scale(m, alpha * fcut / cfg.n_norm)
        H = ad.add(H, _mlp(params, f"{name}.node", ad.concat([H, ad.scatter_sum(msg, src, N)])))
        phi = _mlp(params, f"{name}.coord", ad.concat([ad.row_gather(H, src), ad.row_gather(H, dst), e]))
        phi = phi.reshape(-1, k, k)
        d = ad.add(d0_t[:, None, :], ad.row_gather(shift, src) - ad.row_gather(shift, dst))
        upd = ad.scale(ad.matmul(phi, d), 1.0 / cfg.n_norm)
        shift = ad.add(shift, ad.scatter_sum(upd, src, N))

    pos = -shift[:, 0, :]
    elem = _linear(params, "readout", H)
    if cfg.output == "noise" and cfg.elem_skip:
        E_t = ad.tensor(np.concatenate([s.elements for s in samples]).reshape(N, cfg.d_E))
        tn = t[node_graph][:, None]
        elem = (ad.tensor(np.sin(0.5 * np.pi * tn)) * E_t + ad.tensor(np.cos(0.5 * np.pi * tn)) * elem) / cfg.sigma_max_E
    if not (torch.isfinite(pos).all() and torch.isfinite(elem).all()):
        raise FloatingPointError("denoiser produced non-finite outputs")
    return DenoiserOutput(pos, elem, counts)
