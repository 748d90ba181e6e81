import csv
import io
import math

import numpy as np
import pytest

from vireid.data import synth_generate
from vireid.errors import ContractError, TrainingDiverged
from vireid.numerics import Tensor
from vireid.training import (
    FROZEN_WHEN_ME_OFF,
    STEP_COLUMNS,
    OptimizerState,
    Schedule,
    TrainConfig,
    adamw_step,
    init_state,
    load_state,
    lr_at,
    read_checkpoint,
    steps_per_epoch,
    steps_to_csv,
    train,
)


def tiny(**kw):
    base = dict(img_h=16, img_w=16, patch=4, stride=4, dim=8, depth=1, heads=2, mlp_ratio=2, q=2, k=2,
                epochs=2, decay_epochs=(1,), seed=3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    return synth_generate(4, 2, 16, 16, seed=1, patch=4)


# -- optimizer -------------------------------------------------------------------------
def test_zero_grad_zero_decay_leaves_params(rng):
    p = {"w": Tensor(rng.standard_normal(5))}
    before = p["w"].data.copy()
    adamw_step(p, {"w": np.zeros(5)}, OptimizerState(lr=0.1, weight_decay=0.0))
    np.testing.assert_array_equal(p["w"].data, before)


def test_first_step_is_signed_lr(rng):
    g = rng.standard_normal(6) * 3
    p = {"w": Tensor(np.zeros(6))}
    adamw_step(p, {"w": g}, OptimizerState(lr=0.01, weight_decay=0.0))
    # bias-corrected moments equal g and g^2 after one step
    np.testing.assert_allclose(p["w"].data, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    np.testing.assert_allclose(p["w"].data, -0.01 * np.sign(g), rtol=1e-7)


def test_weight_decay_is_decoupled():
    p = {"w": Tensor(np.array([2.0]))}
    adamw_step(p, {"w": np.array([0.0])}, OptimizerState(lr=0.1, weight_decay=0.5))
    assert p["w"].data[0] == 2.0 - 0.1 * 0.5 * 2.0


def test_adamw_matches_reference_over_steps(rng):
    w0 = rng.standard_normal(4)
    grads = rng.standard_normal((5, 4))
    p = {"w": Tensor(w0.copy())}
    state = OptimizerState(lr=0.003, weight_decay=5e-4)
    for g in grads:
        adamw_step(p, {"w": g}, state)
    # scalar reference
    w, m, v = w0.copy(), np.zeros(4), np.zeros(4)
    for t, g in enumerate(grads, start=1):
        w = w - 0.003 * 5e-4 * w
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.003 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p["w"].data, w, rtol=1e-13)
    assert state.step == 5


def test_adamw_defaults():
    s = OptimizerState()
    assert (s.weight_decay, s.beta1, s.beta2, s.eps) == (5e-4, 0.9, 0.999, 1e-8)


def test_adamw_shape_mismatch():
    with pytest.raises(ContractError):
        adamw_step({"w": Tensor(np.zeros(3))}, {"w": np.zeros(4)}, OptimizerState())


def test_adamw_skips_missing_grads():
    p = {"a": Tensor(np.ones(2)), "b": Tensor(np.ones(2))}
    adamw_step(p, {"a": np.ones(2)}, OptimizerState(lr=0.1))
    np.testing.assert_array_equal(p["b"].data, 1.0)


# -- schedule ------------------------------------------------------------------------------
@pytest.mark.parametrize("epoch, lr", [(0, 1e-3), (14, 1e-3), (15, 1e-4), (29, 1e-4), (30, 1e-5), (69, 1e-5)])
def test_long_schedule(epoch, lr):
    assert lr_at(epoch, Schedule.full_scale()) == pytest.approx(lr, rel=1e-12)


@pytest.mark.parametrize("epoch, lr", [(0, 1e-3), (9, 1e-3), (10, 1e-4), (20, 1e-5)])
def test_toy_schedule(epoch, lr):
    assert lr_at(epoch, Schedule()) == pytest.approx(lr, rel=1e-12)


@pytest.mark.parametrize("decays, total", [((5, 5), 10), ((5, 3), 10), ((10,), 10)])
def test_schedule_validation(decays, total):
    with pytest.raises(ContractError):
        Schedule(1e-3, 0.1, decays, total)


def test_lr_outside_run():
    with pytest.raises(ContractError):
        lr_at(30, Schedule())


# -- config ------------------------------------------------------------------------------------
def test_config_round_trip():
    cfg = tiny(lam=2.5, phi_mode="fully_connected")
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_config_rejects_mae_without_me():
    with pytest.raises(ContractError):
        TrainConfig(use_me=False, extra="mae")
    TrainConfig(use_me=False, extra="none")


def test_config_rejects_unknown_keys():
    with pytest.raises(ContractError):
        TrainConfig.from_dict({"lamda": 1.0})


def test_steps_per_epoch():
    # batches of Q*K = 64 images, last partial batch counted
    assert steps_per_epoch(512, TrainConfig().batch_spec) == 8
    assert steps_per_epoch(513, TrainConfig().batch_spec) == 9
    assert steps_per_epoch(480, TrainConfig().batch_spec) == 8


# -- training runs --------------------------------------------------------------------------------
def test_zero_epochs_checkpoint_is_initialization(tiny_data, tmp_path):
    cfg = tiny(epochs=0, decay_epochs=())
    res = train(cfg, tiny_data, out_dir=tmp_path)
    assert res.steps == [] and [p.name for p in res.checkpoints] == ["ckpt_epoch0"]
    fresh = init_state(cfg, tiny_data)
    _, tensors = read_checkpoint(tmp_path / "ckpt_epoch0")
    for name, p in fresh.all_parameters().items():
        np.testing.assert_array_equal(tensors[f"param/{name}"], p.data)


def test_training_is_deterministic(tiny_data, tmp_path):
    a = train(tiny(), tiny_data, out_dir=tmp_path / "a")
    b = train(tiny(), tiny_data, out_dir=tmp_path / "b")
    assert a.final_loss == b.final_loss
    assert (tmp_path / "a" / "steps.csv").read_bytes() == (tmp_path / "b" / "steps.csv").read_bytes()
    for name in ("ckpt_epoch0", "ckpt_epoch1", "ckpt_epoch2"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_different_seed_changes_run(tiny_data):
    assert train(tiny(seed=1), tiny_data).final_loss != train(tiny(seed=2), tiny_data).final_loss


def test_resume_replays_remaining_steps(tiny_data, tmp_path):
    full = train(tiny(epochs=3, decay_epochs=(1,)), tiny_data, out_dir=tmp_path / "full")
    resumed = train(tiny(epochs=3, decay_epochs=(1,)), tiny_data, out_dir=tmp_path / "resumed",
                    resume_from=tmp_path / "full" / "ckpt_epoch1")
    per_epoch = steps_per_epoch(len(tiny_data), tiny().batch_spec)
    assert resumed.steps == full.steps[per_epoch:]
    assert (tmp_path / "resumed" / "ckpt_epoch3").read_bytes() == (tmp_path / "full" / "ckpt_epoch3").read_bytes()


def test_resume_rejects_changed_config(tiny_data, tmp_path):
    train(tiny(), tiny_data, out_dir=tmp_path)
    with pytest.raises(ContractError):
        train(tiny(lam=1.0), tiny_data, resume_from=tmp_path / "ckpt_epoch1")


def test_zero_learning_rate_freezes_parameters(tiny_data):
    cfg = tiny(base_lr=0.0)
    before = {k: p.data.copy() for k, p in init_state(cfg, tiny_data).all_parameters().items()}
    res = train(cfg, tiny_data)
    for name, p in res.state.all_parameters().items():
        np.testing.assert_array_equal(p.data, before[name])


def test_modality_embeddings_stay_zero_when_disabled(tiny_data):
    res = train(tiny(use_me=False, extra="none"), tiny_data)
    params = res.state.all_parameters()
    for name in FROZEN_WHEN_ME_OFF:
        assert not params[name].data.any()
    assert all(r["L_MAC"] == 0.0 and r["L_MAID"] == 0.0 for r in res.steps)


def test_modality_embeddings_learn_when_enabled(tiny_data):
    res = train(tiny(), tiny_data)
    assert res.state.all_parameters()["me_vis"].data.any()


def test_step_log_layout(tiny_data, tmp_path):
    res = train(tiny(), tiny_data, out_dir=tmp_path)
    rows = list(csv.reader(io.StringIO((tmp_path / "steps.csv").read_text())))
    assert tuple(rows[0]) == STEP_COLUMNS
    assert len(rows) - 1 == 2 * steps_per_epoch(len(tiny_data), tiny().batch_spec)
    assert [float(r[2]) for r in rows[1:]] == [r["lr"] for r in res.steps]
    assert {float(r[2]) for r in rows[1:]} == {1e-3, 1e-3 * 0.1}
    for r in res.steps:
        assert math.isfinite(r["grad_norm"]) and r["grad_norm"] > 0
    assert steps_to_csv(res.steps) == (tmp_path / "steps.csv").read_text()


def test_clipping_bounds_update(tiny_data):
    res = train(tiny(clip_norm=1e-3, epochs=1, decay_epochs=()), tiny_data)
    assert res.steps and all(r["grad_norm"] > 1e-3 for r in res.steps)


def test_divergence_writes_snapshot(tiny_data, tmp_path):
    cfg = tiny()
    train(cfg, tiny_data, out_dir=tmp_path / "ok")
    # corrupt one weight in the epoch-1 checkpoint, then resume from it
    state = load_state(tmp_path / "ok" / "ckpt_epoch1")
    state.model.classifier_w.data[0, 0] = np.inf
    from vireid.training import save_checkpoint

    save_checkpoint(state, tmp_path / "bad")
    with pytest.raises(TrainingDiverged) as info:
        train(cfg, tiny_data, out_dir=tmp_path / "run", resume_from=tmp_path / "bad")
    snap = info.value.snapshot
    assert snap["step"] == state.step and "L_ID" in snap["components"]
    assert (tmp_path / "run" / "diverged.json").exists()


def test_training_requires_train_split(tiny_data):
    with pytest.raises(ContractError):
        train(tiny(), tiny_data.subset(np.arange(len(tiny_data)), split="test"))


@pytest.mark.slow
def test_loss_decreases_on_default_toy_config(toy_runs):
    # median total over the last 10% of steps below the first 10%, every seed of the full config
    for seed, steps in toy_runs.steps("BASE+ME+MAC+MAID").items():
        n = max(1, len(steps) // 10)
        first = np.median([r["total"] for r in steps[:n]])
        last = np.median([r["total"] for r in steps[-n:]])
        assert last < first, seed
