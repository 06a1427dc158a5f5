import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pimrl import tensor as T
from pimrl.macro_net import macro_step
from pimrl.micro_net import micro_rollout
from pimrl.scheduler import (MACRO_AFTER_MICRO, MACRO_FREE, RolloutDiverged, ScheduleConfig, build_model,
                             combined_step, emission_indices, evaluation_axis, model_from_spec, pimrl_cycle,
                             rollout)
from pimrl.solvers import make_case

GS = make_case("gs2d", n=16)


def gs_model(seed=0, physics=True):
    return build_model("gs2d", 2, 2, GS.dx, GS.params, 0.5, physics=physics, seed=seed)


def identity_model():
    m = gs_model(physics=False)
    m.micro.zero_pi_block()
    m.macro.zero_decoder()
    return m


def field(seed=0, n=16):
    return np.random.default_rng(seed).normal(size=(2, n, n))


def test_config_validation():
    with pytest.raises(ValueError):
        ScheduleConfig(k=0, dt_micro=0.1)
    with pytest.raises(ValueError):
        ScheduleConfig(k=2.5, dt_micro=0.1)
    with pytest.raises(ValueError):
        ScheduleConfig(k=3, dt_micro=0.1, n_corrected=0, n_free=0)
    with pytest.raises(ValueError):
        ScheduleConfig(k=3, dt_micro=0.1, micro_only=True, macro_only=True)
    c = ScheduleConfig(k=15, dt_micro=0.01)
    assert c.dt_macro == pytest.approx(0.15) and c.zeta == 1 / 15 < 1


def test_identity_combined_step():
    m = identity_model()
    cfg = ScheduleConfig(k=3, dt_micro=0.5)
    u = field()
    out, _ = combined_step(T.DiffTensor(u), m.macro.init_state((16, 16)), m, cfg)
    np.testing.assert_array_equal(out.values, u)


def test_first_emission_time_kdv_spacing():
    m = identity_model()
    cfg = ScheduleConfig(k=15, dt_micro=0.01, n_corrected=1, n_free=0)
    rec = rollout(field(), 1, m, cfg)
    assert rec.times[0] == pytest.approx(0.30)
    assert rec.provenance == [MACRO_AFTER_MICRO]


def test_no_connect_changes_output_only_with_active_micro():
    cfg = ScheduleConfig(k=3, dt_micro=0.5)
    nc = ScheduleConfig(k=3, dt_micro=0.5, no_connect=True)
    m = gs_model(seed=1)
    for p in m.micro.params.values():
        p.values = p.values * 20
    u = field(1)
    a, _ = combined_step(T.DiffTensor(u), m.macro.init_state((16, 16)), m, cfg)
    b, _ = combined_step(T.DiffTensor(u), m.macro.init_state((16, 16)), m, nc)
    assert np.abs(a.values - b.values).max() > 1e-8
    m0 = gs_model(seed=1, physics=False)
    m0.micro.zero_pi_block()
    a, _ = combined_step(T.DiffTensor(u), m0.macro.init_state((16, 16)), m0, cfg)
    b, _ = combined_step(T.DiffTensor(u), m0.macro.init_state((16, 16)), m0, nc)
    np.testing.assert_array_equal(a.values, b.values)


@pytest.mark.parametrize("nc,nf,expected", [(0, 3, [1, 2, 3]), (1, 0, [2]), (2, 4, [2, 4, 5, 6, 7, 8])])
def test_cycle_bookkeeping(nc, nf, expected):
    m = identity_model()
    cfg = ScheduleConfig(k=2, dt_micro=0.5, n_corrected=nc, n_free=nf)
    rec, u, s, idx = pimrl_cycle(T.DiffTensor(field()), m.macro.init_state((16, 16)), m, cfg)
    assert rec.indices == expected
    assert idx == expected[-1]
    assert rec.provenance == [MACRO_AFTER_MICRO] * nc + [MACRO_FREE] * nf


def test_default_cycle_ends_at_2n():
    cfg = ScheduleConfig(k=15, dt_micro=0.01)
    offs, span = cfg.cycle_offsets()
    assert span == 8 and offs[:2] == [2, 4] and offs[-1] == 8


def test_micro_only_reproduces_micro_rollout():
    m = gs_model(seed=2)
    cfg = ScheduleConfig(k=3, dt_micro=0.5, micro_only=True)
    u = 0.5 + 0.1 * field(2)
    rec = rollout(u, 4, m, cfg)
    ref = micro_rollout(u, m.micro, 12)
    for j, f in enumerate(rec.frames):
        np.testing.assert_array_equal(f.values, ref[3 * j + 2].values)
    assert rec.indices == [1, 2, 3, 4]


def test_macro_only_reproduces_macro_chain():
    m = gs_model(seed=3)
    cfg = ScheduleConfig(k=3, dt_micro=0.5, macro_only=True)
    u0 = field(3)
    rec = rollout(u0, 5, m, cfg)
    u, s = T.DiffTensor(u0), m.macro.init_state((16, 16))
    for f in rec.frames:
        u, s = macro_step(u, s, m.macro)
        np.testing.assert_array_equal(f.values, u.values)


def test_state_persists_across_cycles():
    m = gs_model(seed=4)
    cfg = ScheduleConfig(k=2, dt_micro=0.5, n_corrected=1, n_free=1)
    u0 = 0.5 + 0.1 * field(4)
    rec = rollout(u0, 4, m, cfg)
    u, s = T.DiffTensor(u0), m.macro.init_state((16, 16))
    for j in range(2):
        u, s = combined_step(u, s, m, cfg)
        np.testing.assert_array_equal(rec.frames[2 * j].values, u.values)
        u, s = macro_step(u, s, m.macro)
        np.testing.assert_array_equal(rec.frames[2 * j + 1].values, u.values)


configs = st.tuples(st.integers(0, 4), st.integers(0, 5), st.integers(1, 6)).filter(lambda c: c[0] + c[1] > 0)


@given(configs, st.integers(1, 30))
def test_identity_rollout_and_truncation(c, horizon):
    nc, nf, k = c
    m = identity_model()
    cfg = ScheduleConfig(k=k, dt_micro=0.5, n_corrected=nc, n_free=nf)
    u0 = field(horizon, n=8)
    rec = rollout(u0, horizon, m, cfg)
    assert len(rec.frames) == horizon
    assert rec.indices == emission_indices(cfg, horizon)
    assert all(np.array_equal(f.values, u0) for f in rec.frames)
    assert all(b > a for a, b in zip(rec.indices, rec.indices[1:]))
    adv = [2 if p == MACRO_AFTER_MICRO else 1 for p in rec.provenance]
    assert sum(adv) == rec.indices[-1]


def test_rollout_rejects_zero_horizon():
    with pytest.raises(ValueError):
        rollout(field(), 0, identity_model(), ScheduleConfig(k=2, dt_micro=0.5))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_labelled():
    m = gs_model(seed=5)
    for p in m.micro.params.values():
        p.values = p.values + 5.0
    with pytest.raises(RolloutDiverged) as ei:
        rollout(np.full((2, 16, 16), 10.0), 6, m, ScheduleConfig(k=15, dt_micro=0.5))
    assert ei.value.phase == MACRO_AFTER_MICRO


def test_evaluation_axis_within_truth():
    cfg = ScheduleConfig(k=15, dt_micro=0.5)
    ax = evaluation_axis(cfg, 20)
    assert ax == [2, 4, 5, 6, 7, 8, 10, 12, 13, 14, 15, 16, 18]
    assert max(evaluation_axis(cfg, 201)) <= 200


def test_state_dict_roundtrip_and_spec_rebuild():
    m = gs_model(seed=6)
    sd = m.state_dict()
    m2 = model_from_spec(m.spec)
    m2.load_state_dict(sd)
    for n, v in m2.state_dict().items():
        np.testing.assert_array_equal(v, sd[n])
    with pytest.raises(KeyError):
        m2.load_state_dict({})


def test_reset_flag_restarts_state_per_cycle():
    m = gs_model(seed=8)
    u0 = 0.5 + 0.1 * field(8)
    cfg = ScheduleConfig(k=2, dt_micro=0.5, n_corrected=1, n_free=1, reset_state_each_cycle=True)
    rec = rollout(u0, 4, m, cfg)
    u = T.DiffTensor(u0)
    for j in range(2):
        s = m.macro.init_state((16, 16))
        u, s = combined_step(u, s, m, cfg)
        np.testing.assert_array_equal(rec.frames[2 * j].values, u.values)
        u, s = macro_step(u, s, m.macro)
        np.testing.assert_array_equal(rec.frames[2 * j + 1].values, u.values)
    kept = rollout(u0, 4, m, ScheduleConfig(k=2, dt_micro=0.5, n_corrected=1, n_free=1))
    assert np.abs(kept.frames[3].values - rec.frames[3].values).max() > 1e-10
