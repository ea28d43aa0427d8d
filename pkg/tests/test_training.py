import numpy as np
import pytest

from dreamfore import autodiff as ad
from dreamfore import training
from dreamfore.model import init_model
from dreamfore.training import (AgentMismatchError, RolloutAborted, TrainingFailed, closed_loop_step,
                                dream_loss, dream_rollout, fit, open_loop_losses, open_loop_step, prepare)
from checks import composed_gradient_check
from conftest import tiny_config


@pytest.fixture(scope="module")
def setup():
    from dreamfore.synthetic import generate_synthetic
    cfg = tiny_config()
    scenarios = generate_synthetic(0, 4)
    return cfg, scenarios, prepare(scenarios, cfg)


def _params(cfg, seed=0):
    return init_model(cfg, 60, np.random.default_rng(seed))


@pytest.mark.parametrize("seed", range(10))
def test_composed_dream_gradient(seed):
    ok, worst = composed_gradient_check(seed, tiny_config(H=2))
    assert ok, worst


def test_dream_gradient_reaches_every_module(setup):
    cfg, _, samples = setup
    params = _params(cfg)
    before = params.copy()
    out = closed_loop_step(samples[:2], params, ad.Adam(params, lr=1e-3), cfg)
    assert out["aborted"] == [] and np.isfinite(out["dream"]) and out["grad_norm"] > 0
    for prefix in ("enc.", "rssm.gru.", "rssm.pred.", "kin.", "plan.traj."):
        names = [k for k in params if k.startswith(prefix)]
        assert any(np.abs(params[k].grad).max() > 0 for k in names), prefix
        assert any(not np.array_equal(params[k].data, before[k].data) for k in names), prefix


def test_rollout_shapes_and_mask(setup):
    cfg, _, samples = setup
    params = _params(cfg)
    with ad.no_record():
        r = dream_rollout(samples[:3], params, cfg, H=5)
    assert len(r.states) == len(r.commands) == len(r.latents) == 6
    assert len(r.plans) == 5 and len(r.substates) == 5 * cfg.substeps
    assert r.positions().shape == (3, cfg.model.n_max, 5 * cfg.substeps, 2)
    for z in r.latents:
        np.testing.assert_array_equal(z.mask, r.latents[0].mask)
        assert np.all(z.embeddings.data[~z.mask] == 0)
    with pytest.raises(ValueError):
        dream_rollout(samples[:1], params, cfg, H=61)


def test_rollout_substeps_at_coarse_dt(setup):
    _, scenarios, _ = setup
    cfg = tiny_config(dt=0.5, H=3, T=1.0)
    samples = prepare(scenarios[:1], cfg)
    with ad.no_record():
        r = dream_rollout(samples, _params(cfg), cfg)
    assert len(r.substates) == 15
    np.testing.assert_allclose(r.substates[4].x.data, r.states[1].x.data)


def test_rank_selects_other_plans(setup):
    cfg, _, samples = setup
    params = _params(cfg)
    with ad.no_record():
        plans = [dream_rollout(samples[:1], params, cfg, H=1, rank=k).plans[0].data for k in range(3)]
    assert not np.allclose(plans[0], plans[1]) or not np.allclose(plans[0], plans[2])


def test_loss_decomposition(setup):
    cfg, _, samples = setup
    cfg = cfg.replace(weights={"rssm": 0.3, "target": 2.0, "traj": 0.7, "score": 1.5, "kin": 0.1})
    params = _params(cfg)
    with ad.no_record():
        parts = {k: v.item() for k, v in open_loop_losses(samples[:2], params, cfg).items()}
    out = open_loop_step(samples[:2], params, ad.Adam(params, lr=1e-3), cfg)
    expected = sum(getattr(cfg.weights, k) * parts[k] for k in parts)
    assert abs(out["total"] - expected) <= 1e-12 * max(1.0, abs(expected))
    for k in parts:
        assert out[k] == parts[k]


def test_zero_weights_leave_params_unchanged(setup):
    cfg, _, samples = setup
    cfg = cfg.replace(weights={k: 0.0 for k in ("rssm", "target", "traj", "score", "kin", "dream")})
    params = _params(cfg)
    before = params.copy()
    opt = ad.Adam(params, lr=1e-2)
    open_loop_step(samples[:2], params, opt, cfg)
    closed_loop_step(samples[:2], params, opt, cfg)
    for k in params:
        np.testing.assert_array_equal(params[k].data, before[k].data)


def test_dream_loss_value_against_loop(setup):
    cfg, _, samples = setup
    params = _params(cfg)
    with ad.no_record():
        r = dream_rollout(samples[:2], params, cfg)
        loss = dream_loss(r, samples[:2]).item()
    total, n = 0.0, 0
    for b, s in enumerate(samples[:2]):
        for a in np.flatnonzero(s.eval_mask):
            n += 1
            for k in range(cfg.H + 1):
                pred = np.array([r.states[k].x.data[b, a], r.states[k].y.data[b, a],
                                 r.commands[k].accel.data[b, a], r.commands[k].turn_rate.data[b, a]])
                gt = np.concatenate([s.gt_states[a, k * s.substeps, :2], s.gt_cmd[a, k]])
                d = pred - gt
                l1 = np.abs(d).sum()
                total += 0.5 * d @ d if l1 < 1 else l1 - 0.5
    assert loss == pytest.approx(total / n, rel=1e-12)


def test_agent_mismatch(setup):
    cfg, _, samples = setup
    with ad.no_record():
        r = dream_rollout(samples[:1], _params(cfg), cfg, H=1)
    r.agent_ids[0] = list(reversed(r.agent_ids[0]))
    with pytest.raises(AgentMismatchError):
        dream_loss(r, samples[:1])


def _nan_after(monkeypatch, calls: int):
    real = training.predict_transition
    count = {"n": 0}

    def flaky(h, mask, params, mc, agent_ids=None):
        # only dreamed transitions carry agent ids; teacher-forced ones stay clean
        if agent_ids is not None:
            count["n"] += 1
        if agent_ids is not None and count["n"] >= calls:
            raise ad.NonFiniteError("injected overflow")
        return real(h, mask, params, mc, agent_ids=agent_ids)

    monkeypatch.setattr(training, "predict_transition", flaky)


def test_abort_reports_step(setup, monkeypatch):
    cfg, _, samples = setup
    _nan_after(monkeypatch, 3)
    with pytest.raises(RolloutAborted) as err:
        with ad.no_record():
            dream_rollout(samples[:2], _params(cfg), cfg)
    assert err.value.step == 3 and err.value.scenario_ids == [s.id for s in samples[:2]]


def test_abort_fraction_fails_training(setup, monkeypatch):
    cfg, scenarios, samples = setup
    _nan_after(monkeypatch, 1)
    with pytest.raises(TrainingFailed, match="aborted"):
        fit(scenarios, cfg.replace(epochs=1), samples=samples)


def test_fit_is_deterministic(setup, tmp_path):
    cfg, scenarios, samples = setup
    a = fit(scenarios, cfg, log_path=tmp_path / "a.csv", samples=samples)
    b = fit(scenarios, cfg, samples=prepare(scenarios, cfg))
    for ra, rb in zip(a.history, b.history):
        assert {k: v for k, v in ra.items() if k != "wall_time"} == {k: v for k, v in rb.items() if k != "wall_time"}
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0].startswith("epoch,total") and len(lines) == cfg.epochs + 1


def test_warmup_epochs_skip_dreaming(setup):
    cfg, scenarios, samples = setup
    res = fit(scenarios, cfg.replace(epochs=2, warmup_epochs=1), samples=samples)
    assert np.isnan(res.history[0]["dream"]) and np.isfinite(res.history[1]["dream"])


def test_no_scenarios():
    with pytest.raises(ValueError):
        fit([], tiny_config())
