import numpy as np
import pytest
import torch

from amshortcut import autodiff as ad
from amshortcut.denoiser import DenoiserConfig, edge_attribute, embed_property, init_params, smooth_cutoff
from amshortcut.geometry import Cell, wrap_into_cell
from amshortcut.material import MaterialSample, PropertySet

from conftest import props_for, random_sample, randomize, small_model


def run(model, samples, t=0.4, dt=None, seed=0, props=None):
    B = len(samples)
    props = props if props is not None else props_for(model.cfg.n_p, B)
    rngs = [np.random.default_rng(seed + b) for b in range(B)]
    if model.step_size_conditioned and dt is None:
        dt = np.full(B, 0.125)
    with torch.no_grad():
        return model(samples, props, np.full(B, t), dt, rngs)


def test_edge_attribute_values():
    assert edge_attribute(np.zeros(3), 6.5) == -1.0
    assert edge_attribute([6.5, 0, 0], 6.5) == pytest.approx(0.5231883119, abs=1e-9)
    assert edge_attribute([6.5 / np.sqrt(2), 0, 0], 6.5) == pytest.approx(-0.0757657, abs=1e-6)
    d = np.random.default_rng(0).uniform(-8, 8, (100, 3))
    e = edge_attribute(d, 6.5)
    assert np.all(e >= -1) and np.all(e < 1)


def test_smooth_cutoff_values():
    assert smooth_cutoff(6.5, 6.5) == 0.0
    assert smooth_cutoff(13.0, 6.5) == 0.0
    assert smooth_cutoff(0.0, 6.5) == pytest.approx(2 * np.tanh(1.0) ** 2)
    assert smooth_cutoff(0.0, 6.5) == pytest.approx(1.1600513, abs=1e-7)
    r = np.linspace(0, 7, 200)
    assert np.all(np.diff(smooth_cutoff(r, 6.5)) <= 0)


def test_output_shapes(rng):
    m = small_model()
    out = run(m, [random_sample(rng, 8)])
    assert out.pos_component.shape == (8, 3)
    assert out.elem_component.shape == (8, 3)
    assert out.counts == [8]


def test_batch_split_matches_single_calls(rng):
    m = randomize(small_model(), rng)
    samples = [random_sample(rng, n) for n in (5, 9, 7)]
    batch = run(m, samples).split()
    for b, s in enumerate(samples):
        single = run(m, [s], seed=b)
        assert torch.allclose(batch[b].pos_component, single.pos_component, atol=1e-12)
        assert torch.allclose(batch[b].elem_component, single.elem_component, atol=1e-12)


def test_zero_init_gives_zero_positions(rng):
    out = run(small_model(), [random_sample(rng, 8)])
    assert torch.all(out.pos_component == 0)


def test_isolated_atoms(rng):
    m = randomize(small_model(cutoff=1.0), rng)
    cell = Cell.cubic(10.0)
    pos = np.array([[1.0, 1, 1], [5, 5, 5], [1, 5, 8]])
    s = MaterialSample(cell, pos, np.eye(3), True)
    out = run(m, [s])
    assert torch.all(out.pos_component == 0)
    # elements come from the embedded input alone: moving isolated atoms changes nothing
    s2 = MaterialSample(cell, pos + np.array([[0.5, 0, 0], [0, 0.5, 0], [0, 0, 0.5]]), np.eye(3), True)
    assert torch.equal(run(m, [s2]).elem_component, out.elem_component)


def test_dt_flag_mismatch_rejected(rng):
    s = [random_sample(rng, 4)]
    with pytest.raises(ValueError):
        small_model(sc=False)(s, props_for(2, 1), [0.5], dt=[0.1])
    with pytest.raises(ValueError):
        small_model(sc=True)(s, props_for(2, 1), [0.5], dt=None)


def test_null_embedding_statistics():
    cfg = DenoiserConfig(d_E=3, n_p=1, prop_dim=8)
    params = init_params(cfg, 0)
    rng = np.random.default_rng(5)
    draws = np.stack([embed_property(None, 0, params, cfg, rng).numpy() for _ in range(10_000)])
    assert np.all(np.abs(draws.mean(0)) < 0.05)
    assert np.all(np.abs(draws.var(0) - 1) < 0.05)
    a = embed_property(None, 0, params, cfg, rng)
    b = embed_property(None, 0, params, cfg, rng)
    assert not torch.equal(a, b)


def test_available_embedding_deterministic():
    cfg = DenoiserConfig(d_E=3, n_p=2, prop_dim=8)
    params = init_params(cfg, 0)
    a = embed_property(0.3, 1, params, cfg, None)
    b = embed_property(0.3, 1, params, cfg, np.random.default_rng(9))
    assert torch.equal(a, b)
    # layer norm without affine: zero mean, unit variance up to eps
    assert float(a.detach().mean()) == pytest.approx(0.0, abs=1e-12)
    assert float(a.detach().var(unbiased=False)) == pytest.approx(1.0, abs=1e-3)


def test_null_embedding_redrawn_each_call(rng):
    m = randomize(small_model(), rng)
    s = [random_sample(rng, 6)]
    absent = [PropertySet.empty(2)]
    with torch.no_grad():
        a = m(s, absent, [0.5], None, [np.random.default_rng(1)])
        b = m(s, absent, [0.5], None, [np.random.default_rng(2)])
    assert not torch.equal(a.elem_component, b.elem_component)


def test_elem_skip_reduces_to_input_at_t1(rng):
    m = randomize(small_model(), rng)
    s = random_sample(rng, 6, decoded=False)
    out = run(m, [s], t=1.0)
    assert np.allclose(out.elem_component.numpy(), s.elements / m.cfg.sigma_max_E, atol=1e-12)


def test_config_round_trip():
    cfg = DenoiserConfig(d_E=3, n_p=2, prop_names=("density", "frac_A"), prop_mean=(0.03, 0.5), prop_std=(0.01, 0.1))
    assert DenoiserConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        DenoiserConfig(d_E=3, n_p=2, layers=0)
    with pytest.raises(ValueError):
        DenoiserConfig(d_E=3, n_p=1, output="velocity")


# ---------------------------------------------------------------------------
# symmetry (acceptance criterion 2 repeats these at full scale)


def cubic_rotations():
    mats = []
    for perm in ([0, 1, 2], [1, 2, 0], [2, 0, 1], [1, 0, 2], [0, 2, 1], [2, 1, 0]):
        for signs in np.array(np.meshgrid([1, -1], [1, -1], [1, -1])).T.reshape(-1, 3):
            R = np.zeros((3, 3))
            R[np.arange(3), perm] = signs
            mats.append(R)
    return mats


def test_permutation_equivariance_exact(rng):
    m = randomize(small_model(sc=True), rng)
    for _ in range(5):
        s = random_sample(rng, 16)
        perm = rng.permutation(16)
        sp = MaterialSample(s.cell, s.positions[perm], s.elements[perm], True)
        a, b = run(m, [s]), run(m, [sp])
        assert torch.equal(a.pos_component[perm], b.pos_component)
        assert torch.equal(a.elem_component[perm], b.elem_component)


def test_translation_invariance(rng):
    m = randomize(small_model(), rng)
    for _ in range(5):
        s = random_sample(rng, 16)
        v = rng.uniform(-20, 20, 3)
        st = MaterialSample(s.cell, wrap_into_cell(s.cell, s.positions + v), s.elements, True)
        a, b = run(m, [s]), run(m, [st])
        assert torch.allclose(a.pos_component, b.pos_component, atol=1e-9, rtol=0)
        assert torch.allclose(a.elem_component, b.elem_component, atol=1e-9, rtol=0)


def test_cubic_point_group_equivariance(rng):
    m = randomize(small_model(), rng)
    rots = cubic_rotations()
    assert len(rots) == 48
    s = random_sample(rng, 16)
    a = run(m, [s])
    for R in rots:
        sr = MaterialSample(s.cell, wrap_into_cell(s.cell, s.positions @ R.T), s.elements, True)
        b = run(m, [sr])
        assert np.allclose(a.pos_component.numpy() @ R.T, b.pos_component.numpy(), atol=1e-9, rtol=0)
        assert torch.allclose(a.elem_component, b.elem_component, atol=1e-9, rtol=0)


def test_forward_gradient_matches_finite_differences(rng):
    m = small_model(sc=True, hidden=6, layers=2)
    randomize(m, rng, 0.2)
    s = random_sample(rng, 8, decoded=False)
    target = rng.standard_normal((8, 3))

    def f(params):
        out = m.with_params(params)([s], props_for(2, 1), [0.6], [0.25], [np.random.default_rng(0)])
        return ad.mse(out.pos_component, ad.tensor(target)) + ad.mse(out.elem_component, ad.tensor(target))

    idx = np.random.default_rng(0).choice(m.params.size, 150, replace=False)
    assert ad.grad_check(f, m.params, indices=idx) < 1e-4
