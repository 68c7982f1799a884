from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmcn.errors import CheckpointFormatError, ContractError
from dmcn.model import ModelConfig, build_model, forward, identity_init
from dmcn.tensor import GradTape, Tensor, grad_check
from dmcn.training import (
    History,
    OptimizerState,
    TrainConfig,
    adam_step,
    dumps_checkpoint,
    l1_loss,
    load_checkpoint,
    loads_checkpoint,
    lr_at,
    make_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    train,
)

TINY = ModelConfig(channels=4, blocks_per_stage=1, seed=2)


def _data(n=6, size=8, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.random((n, 1, size, size)).astype(np.float32)
    y = np.clip(x + 0.1 * rng.standard_normal(x.shape), 0, 1).astype(np.float32)
    return x, y


def test_l1_value():
    pred = Tensor(np.array([[1.0, -2.0], [0.5, 0.0]]))
    target = Tensor(np.zeros((2, 2)))
    assert l1_loss(pred, target).item() == pytest.approx(3.5 / 4)


def test_l1_zero_residual_gradient_is_zero():
    x = Tensor(np.ones((2, 3)))
    with GradTape() as tape:
        loss = l1_loss(x, x)
    (g,) = tape.gradient(loss, [x])
    assert loss.item() == 0 and not g.any()


def test_l1_shape_mismatch():
    with pytest.raises(ContractError):
        l1_loss(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))


def test_l1_finite_difference(rng):
    pred = rng.uniform(-1, 1, (2, 1, 4, 4))
    target = pred + rng.choice([-1, 1], pred.shape) * rng.uniform(0.1, 0.5, pred.shape)
    assert grad_check(lambda p: l1_loss(p, Tensor(target, np.float64)), [Tensor(pred, np.float64)]) <= 1e-4


def test_lr_schedule():
    cfg = TrainConfig(epochs=30)
    assert lr_at(0, cfg) == 5e-4 and lr_at(9, cfg) == 5e-4
    assert lr_at(10, cfg) == pytest.approx(5e-5)
    assert lr_at(20, cfg) == pytest.approx(5e-6)
    with pytest.raises(ContractError):
        lr_at(-1, cfg)


@pytest.mark.parametrize(
    "kw", [dict(beta1=1.0), dict(beta2=0.0), dict(lr0=0.0), dict(batch_size=0), dict(decay_factor=1.5)]
)
def test_train_config_validation(kw):
    with pytest.raises(ContractError):
        TrainConfig(epochs=1, **kw)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000), lr=st.floats(1e-5, 1e-2))
def test_first_adam_step_moves_each_weight_by_lr(seed, lr):
    rng = np.random.default_rng(seed)
    theta = {"w": Tensor(rng.standard_normal(20), np.float64)}
    grads = {"w": rng.uniform(0.1, 1.0, 20) * rng.choice([-1, 1], 20)}
    cfg = TrainConfig(epochs=1, weight_decay=0.0)
    new, state = adam_step(theta, grads, OptimizerState.zeros_like(theta), lr, cfg)
    moved = theta["w"].data - new["w"].data
    np.testing.assert_allclose(np.abs(moved), lr, rtol=1e-6)
    assert np.all(np.sign(moved) == np.sign(grads["w"]))
    assert state.t == 1


def test_adam_does_not_mutate_inputs():
    theta = {"w": Tensor(np.ones(3))}
    state = OptimizerState.zeros_like(theta)
    adam_step(theta, {"w": np.ones(3)}, state, 1e-3, TrainConfig(epochs=1))
    assert state.t == 0 and not state.m["w"].any()
    assert np.array_equal(theta["w"].data, np.ones(3))


def test_adam_rejects_wrong_gradient_shape():
    theta = {"w": Tensor(np.ones(3))}
    with pytest.raises(ContractError):
        adam_step(theta, {"w": np.ones(4)}, OptimizerState.zeros_like(theta), 1e-3, TrainConfig(epochs=1))


def test_identity_model_on_identity_data_has_zero_loss():
    model = identity_init(build_model(TINY))
    x, _ = _data()
    history, _ = train(model, x, x, TrainConfig(epochs=2, batch_size=4, weight_decay=0.0))
    assert all(r.loss == 0.0 for r in history.epochs)


def test_train_records_one_row_per_epoch():
    model = build_model(TINY)
    x, y = _data(n=5)
    history, state = train(model, x, y, TrainConfig(epochs=3, batch_size=2))
    assert [r.epoch for r in history.epochs] == [0, 1, 2]
    assert len(history.step_losses) == 9 and state.t == 9
    assert history.to_csv().splitlines()[0] == "epoch,lr,loss"


def test_train_rejects_empty():
    with pytest.raises(ContractError):
        train(build_model(TINY), np.zeros((0, 1, 8, 8)), np.zeros((0, 1, 8, 8)), TrainConfig(epochs=1))


def test_training_is_reproducible():
    x, y = _data()
    cfg = TrainConfig(epochs=3, batch_size=4, seed=9)
    runs = []
    for _ in range(2):
        model = build_model(TINY)
        history, _ = train(model, x, y, cfg)
        runs.append((history.to_csv(), dumps_checkpoint(make_checkpoint(model))))
    assert runs[0] == runs[1]


def test_resume_is_bit_identical(tmp_path):
    x, y = _data()
    cfg = TrainConfig(epochs=4, batch_size=4, seed=1)
    straight = build_model(TINY)
    h_full, s_full = train(straight, x, y, cfg)

    half = build_model(TINY)
    h, s = train(half, x, y, replace(cfg, epochs=2))
    save_checkpoint(tmp_path / "c.dmcn", make_checkpoint(half, s, 2, h, cfg))
    ck = load_checkpoint(tmp_path / "c.dmcn")
    resumed = model_from_checkpoint(ck)
    h2, s2 = train(resumed, x, y, cfg, state=ck.optimizer, history=ck.history, start_epoch=ck.epoch)

    assert h2.to_csv() == h_full.to_csv()
    for k in straight.params:
        assert np.array_equal(straight.params[k].data, resumed.params[k].data)
        assert np.array_equal(s_full.m[k], s2.m[k]) and np.array_equal(s_full.v[k], s2.v[k])


def test_checkpoint_round_trip(tmp_path):
    model = build_model(TINY)
    x, y = _data()
    cfg = TrainConfig(epochs=1, batch_size=3)
    history, state = train(model, x, y, cfg)
    ck = make_checkpoint(model, state, 1, history, cfg)
    save_checkpoint(tmp_path / "m.dmcn", ck)
    back = load_checkpoint(tmp_path / "m.dmcn")
    assert back.model_config == TINY and back.train_config == cfg and back.epoch == 1
    assert back.history == history and back.optimizer.t == state.t
    for k, v in ck.params.items():
        assert np.array_equal(back.params[k], v)
    again = model_from_checkpoint(back)
    assert np.array_equal(forward(again, Tensor(x)).data, forward(model, Tensor(x)).data)
    assert dumps_checkpoint(back) == dumps_checkpoint(ck)


def test_checkpoint_without_optimizer():
    ck = make_checkpoint(build_model(TINY))
    assert loads_checkpoint(dumps_checkpoint(ck)).optimizer is None


@pytest.mark.parametrize("cut", [3, 10, 200, -1])
def test_truncated_checkpoint_reports_offset(cut):
    buf = dumps_checkpoint(make_checkpoint(build_model(TINY)))
    with pytest.raises(CheckpointFormatError) as info:
        loads_checkpoint(buf[:cut])
    assert "byte offset" in str(info.value)
    assert 0 <= info.value.offset <= len(buf[:cut])


def test_bad_magic_and_trailing_bytes():
    buf = dumps_checkpoint(make_checkpoint(build_model(TINY)))
    with pytest.raises(CheckpointFormatError, match="magic"):
        loads_checkpoint(b"XXXX" + buf[4:])
    with pytest.raises(CheckpointFormatError, match="trailing"):
        loads_checkpoint(buf + b"\0")


def test_checkpoint_config_mismatch_names_tensor():
    buf = dumps_checkpoint(make_checkpoint(build_model(TINY)))
    with pytest.raises(ContractError, match="conv00.weight"):
        loads_checkpoint(buf, expected=replace(TINY, channels=8))


def test_single_step_reduces_loss_on_most_batches():
    cfg = TrainConfig(epochs=1, lr0=1e-4, batch_size=4, weight_decay=0.0)
    wins = 0
    trials = 20
    for seed in range(trials):
        model = build_model(replace(TINY, seed=seed))
        x, y = _data(n=4, seed=seed)
        before = l1_loss(forward(model, Tensor(x)), Tensor(y)).item()
        train(model, x, y, cfg)
        after = l1_loss(forward(model, Tensor(x)), Tensor(y)).item()
        wins += after < before
    assert wins >= 0.95 * trials


def test_history_csv_uses_exact_floats():
    from dmcn.training import EpochRecord

    h = History([EpochRecord(0, 5e-4, 0.1 + 0.2)])
    assert h.to_csv().splitlines()[1] == "0,0.0005,0.30000000000000004"
