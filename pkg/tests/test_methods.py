from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corrective_unlearning import tensor as T
from corrective_unlearning.data import POISON, GenConfig, ManipulationSpec, build_affected_sets, generate_dataset, manipulate, sample_forget_set
from corrective_unlearning.evaluation import clean_label_accuracy
from corrective_unlearning.methods import (
    BADT,
    CF,
    EU,
    METHODS,
    SCRUB,
    SSD,
    MethodConfig,
    badt_unlearn,
    catastrophic_forget,
    exact_unlearn,
    fim_diag,
    run_method,
    scrub_forget_step,
    scrub_unlearn,
    ssd_dampen,
    ssd_unlearn,
    train_original,
)
from corrective_unlearning.models import Arch, build_model, flatten_params
from corrective_unlearning.selftest import brute_force_fim, relative_errors
from corrective_unlearning.training import OptimState, TrainConfig, distill_loss, forward_backward

ARCH = Arch(kind="mlp", hidden=(32,))
HYPER = TrainConfig(total_steps=300, batch_size=32)


@pytest.fixture(scope="module")
def setup():
    ds = generate_dataset(GenConfig(n_train=800, n_val=200, n_test=200), 0)
    md = manipulate(ds, ManipulationSpec(POISON, 40, seed=1))
    mo = train_original(md, ARCH, HYPER, seed=5)
    return md, mo


def same_params(a, b):
    return list(a.params) == list(b.params) and all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


def snapshot(model):
    return {k: v.copy() for k, v in model.params.items()}


def test_method_config_validation():
    with pytest.raises(ValueError):
        MethodConfig("XYZ")
    with pytest.raises(ValueError):
        MethodConfig(SCRUB, steps=10, scrub_forget_steps=20)
    with pytest.raises(ValueError):
        MethodConfig(SSD, ssd_alpha=0.0)
    cfg = MethodConfig(CF)
    assert cfg.steps == 1000 and cfg.scrub_forget_steps == 200 and cfg.scrub_lr == 0.0025
    assert MethodConfig(SSD, ssd_alpha=5, ssd_gamma=2).hyperparams() == {"ssd_alpha": 5, "ssd_gamma": 2}


def test_eu_empty_forget_set_reproduces_original(setup):
    md, mo = setup
    assert md.forget_idx.size == 0
    res = exact_unlearn(md, ARCH, HYPER, seed=5)
    assert same_params(res.model, mo)
    assert res.wall_time_seconds >= 0


def test_eu_full_forget_set_retained_size(setup):
    md, _ = setup
    res = exact_unlearn(sample_forget_set(md, 1.0, 0), ARCH, HYPER.replace(total_steps=5), seed=5)
    assert res.diagnostics["retained"] == len(md.train) - 40


def test_eu_needs_retained_data(setup):
    md, _ = setup
    everything = md.__class__(**{**md.__dict__, "in_forget_set": np.ones(len(md.train), dtype=bool)})
    with pytest.raises(ValueError):
        exact_unlearn(everything, ARCH, HYPER, seed=0)


@pytest.mark.parametrize("method", [CF, BADT, SCRUB])
def test_zero_steps_is_identity(setup, method):
    md, mo = setup
    mdf = sample_forget_set(md, 0.5, 2)
    cfg = MethodConfig(method, steps=0, scrub_forget_steps=0)
    res = run_method(method, mo, mdf, cfg, HYPER)
    assert same_params(res.model, mo)
    assert res.model is not mo


@pytest.mark.parametrize("method", METHODS)
def test_methods_are_deterministic_and_pure(setup, method):
    md, mo = setup
    mdf = sample_forget_set(md, 0.5, 3)
    before, flags = snapshot(mo), mdf.in_forget_set.copy()
    hyper = HYPER.replace(total_steps=30) if method == EU else HYPER
    cfg = MethodConfig(method, steps=20, scrub_forget_steps=5, seed=7)
    a = run_method(method, mo, mdf, cfg, hyper, ARCH, train_seed=1)
    b = run_method(method, mo, mdf, cfg, hyper, ARCH, train_seed=1)
    assert same_params(a.model, b.model)
    assert all(before[k].tobytes() == mo.params[k].tobytes() for k in before)
    assert np.array_equal(flags, mdf.in_forget_set)


def test_cf_lowers_retained_loss(setup):
    md, mo = setup
    mdf = sample_forget_set(md, 0.5, 4)
    keep = mdf.retain_split()
    res = catastrophic_forget(mo, mdf, MethodConfig(CF, steps=200, seed=1), HYPER)
    before, _ = forward_backward(mo, keep.x, keep.y)
    after, _ = forward_backward(res.model, keep.x, keep.y)
    assert after <= before


def test_cf_with_empty_forget_set_keeps_utility(setup):
    md, mo = setup
    aff = build_affected_sets(md)
    res = catastrophic_forget(mo, md, MethodConfig(CF, steps=200, seed=1), HYPER)
    assert abs(clean_label_accuracy(res.model, aff.utility_test) - clean_label_accuracy(mo, aff.utility_test)) <= 0.02


def test_fim_zero_gradient_coordinate():
    arch = Arch(kind="mlp", input_shape=(1, 1, 4), hidden=(3,), num_classes=2)
    model = build_model(arch, 0)
    x = np.random.default_rng(0).normal(size=(6, 1, 1, 4))
    x[..., 2] = 0.0  # weights fed by this input never get gradient
    fim = fim_diag(model, x, np.array([0, 1, 0, 1, 1, 0]))
    _, index = flatten_params(model)
    for h in range(3):
        assert fim[index.flat_index("fc0.weight", 2 * 3 + h)] == 0.0
    assert np.all(fim >= 0)


def test_fim_single_sample_is_squared_gradient():
    arch = Arch(kind="mlp", input_shape=(1, 2, 2), hidden=(4,), num_classes=3)
    model = build_model(arch, 1)
    x = np.random.default_rng(1).normal(size=(1, 1, 2, 2))
    _, g = forward_backward(model, x, [2])
    v = flatten_params(model)[1].flatten(g)
    np.testing.assert_allclose(fim_diag(model, x, [2]), v * v, rtol=1e-12, atol=0)


@pytest.mark.parametrize("arch", [
    Arch(kind="mlp", input_shape=(1, 2, 3), hidden=(5,), num_classes=3),
    Arch(kind="cnn", input_shape=(1, 4, 4), channels=(2,), hidden=(), num_classes=3),
])
def test_fim_matches_brute_force(arch):
    model = build_model(arch, 2)
    assert model.num_params <= 60
    rng = np.random.default_rng(2)
    x = rng.normal(size=(13,) + arch.input_shape)
    y = rng.integers(0, 3, size=13)
    fast = fim_diag(model, x, y, chunk=5)
    slow = brute_force_fim(model, x, y)
    assert np.max(relative_errors(fast, slow)) <= 1e-10


def test_fim_empty():
    model = build_model(ARCH, 0)
    with pytest.raises(ValueError):
        fim_diag(model, np.zeros((0, 1, 16, 16)), [])


def test_ssd_examples():
    p = np.array([1.0, -2.0, 3.0])
    d = np.array([1.0, 1.0, 1.0])
    out, sel = ssd_dampen(p, d, np.array([0.5, 0.2, 1.0]), alpha=1.0, gamma=1.0)
    assert not sel.any() and out.tobytes() == p.tobytes()
    out, sel = ssd_dampen(p, d, np.array([10.0, 0.0, 0.0]), alpha=1.0, gamma=1.0)
    assert sel.tolist() == [True, False, False]
    assert out[0] == pytest.approx(0.1, abs=1e-16)
    assert out[1:].tobytes() == p[1:].tobytes()
    out, sel = ssd_dampen(p, d, np.array([2.0, 0.0, 0.0]), alpha=1.0, gamma=5.0)
    assert sel[0] and out.tobytes() == p.tobytes()


# magnitudes kept away from underflow so beta * w stays representable
finite = st.one_of(st.just(0.0), st.floats(1e-8, 1e3), st.floats(-1e3, -1e-8))
positive = st.one_of(st.just(0.0), st.floats(1e-8, 1e3))


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.tuples(finite, positive, positive), min_size=1, max_size=30),
    st.floats(1e-3, 1e3),
    st.floats(1e-3, 1e3),
)
def test_ssd_dampening_properties(rows, alpha, gamma):
    p, d, f = (np.array(c, dtype=float) for c in zip(*rows))
    out, sel = ssd_dampen(p, d, f, alpha, gamma)
    assert out[~sel].tobytes() == p[~sel].tobytes()
    assert np.all(np.abs(out) <= np.abs(p))
    assert np.all(f[sel] > alpha * d[sel])
    nz = sel & (p != 0) & (d > 0)
    beta = out[nz] / p[nz]
    assert np.all((beta > 0) & (beta <= 1))


def test_ssd_unlearn_end_to_end(setup):
    md, mo = setup
    mdf = sample_forget_set(md, 0.5, 1)
    huge = ssd_unlearn(mo, mdf, MethodConfig(SSD, ssd_alpha=1e12, ssd_gamma=1.0))
    assert huge.diagnostics["selected"] == 0 and same_params(huge.model, mo)
    res = ssd_unlearn(mo, mdf, MethodConfig(SSD, ssd_alpha=1.0, ssd_gamma=1.0))
    assert res.diagnostics["selected"] > 0
    d = fim_diag(mo, md.train.x, md.train.y)
    cached = ssd_unlearn(mo, mdf, MethodConfig(SSD, ssd_alpha=1.0, ssd_gamma=1.0), train_importance=(d, 100.0))
    assert same_params(cached.model, res.model)
    assert cached.wall_time_seconds >= 100.0
    with pytest.raises(ValueError):
        ssd_unlearn(mo, md, MethodConfig(SSD))


def test_badt_initial_loss_is_finite_and_nonnegative(setup):
    md, mo = setup
    teacher = build_model(mo.arch, 3)
    x = md.train.x[:16]
    from corrective_unlearning.models import predict

    for t in (teacher, mo):
        loss, _ = forward_backward(mo, x, md.train.y[:16], distill_loss(predict(t, x)[0]))
        assert np.isfinite(loss) and loss >= 0
    with pytest.raises(ValueError):
        badt_unlearn(mo, md, MethodConfig(BADT), HYPER)


def test_scrub_forget_step_ascends(setup):
    md, mo = setup
    student = mo.copy()
    idx = sample_forget_set(md, 0.5, 0).forget_idx[:8]
    x, y = md.train.x[idx], md.train.y[idx]
    state = OptimState.for_params(student.params, TrainConfig(learning_rate=1e-4, momentum=0.0, total_steps=1, schedule="constant"))
    before = scrub_forget_step(student, x, y, state)
    after, _ = forward_backward(student, x, y)
    assert after > before


def test_scrub_without_forgetting_keeps_utility(setup):
    md, mo = setup
    mdf = sample_forget_set(md, 0.5, 0)
    aff = build_affected_sets(md)
    res = scrub_unlearn(mo, mdf, MethodConfig(SCRUB, steps=100, scrub_forget_steps=0, scrub_alpha=0.0), HYPER)
    assert abs(clean_label_accuracy(res.model, aff.utility_test) - clean_label_accuracy(mo, aff.utility_test)) <= 0.02


def test_scrub_forget_phase_changes_forget_predictions(setup):
    md, mo = setup
    mdf = sample_forget_set(md, 1.0, 0)
    fs = mdf.forget_split()
    res = scrub_unlearn(mo, mdf, MethodConfig(SCRUB, steps=60, scrub_forget_steps=60, scrub_alpha=0.1, scrub_lr=0.05), HYPER)
    before, _ = forward_backward(mo, fs.x, fs.y)
    after, _ = forward_backward(res.model, fs.x, fs.y)
    assert after > before


def test_run_method_unknown(setup):
    md, mo = setup
    with pytest.raises(ValueError):
        run_method("nope", mo, md, MethodConfig(CF), HYPER)


def test_kl_helper_consistency():
    s = np.random.default_rng(0).normal(size=(3, 4))
    t = np.random.default_rng(1).normal(size=(3, 4))
    assert T.kl_distill(T.Tensor(s), t).item() == pytest.approx(T.kl_distill_loss(s, t), rel=1e-14)
