import math

import numpy as np
import pytest

from fundusfuse import data, training
from fundusfuse import tensor as T
from fundusfuse.fusion import HybridModel, ModelConfig
from fundusfuse.tensor import ContractError, NonFiniteError, Tensor
from fundusfuse.training import (OptimizerState, SchedulerState, TrainConfig, adam_step,
                                 bce_loss, clip_grad_norm, cosine_lr, global_norm)


def with_grads(*arrays):
    ps = [Tensor(np.zeros_like(a, dtype=np.float32), requires_grad=True) for a in arrays]
    for p, a in zip(ps, arrays):
        p.grad = np.asarray(a, dtype=np.float32)
    return ps


@pytest.fixture(scope="module")
def tiny_splits(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    data.generate_fixture(root, per_class=5, seed=2, size=8)
    return data.load_dataset(root, size=8)


# --------------------------------------------------------------------- loss


def test_bce_examples():
    assert float(bce_loss(Tensor([0.5]), [1]).data) == pytest.approx(math.log(2), abs=1e-6)
    assert float(bce_loss(Tensor([0.9, 0.2]), [1, 0]).data) == pytest.approx(0.16425, abs=1e-5)
    perfect = float(bce_loss(Tensor([1.0, 0.0]), [1, 0]).data)
    assert 0.0 <= perfect <= -math.log(1 - 1e-7) + 1e-7


def test_bce_rejects_bad_labels():
    with pytest.raises(ContractError):
        bce_loss(Tensor([0.5]), [2])


def test_bce_gradient():
    p = Tensor([0.3, 0.8, 0.6])
    assert T.grad_check(lambda t: bce_loss(t, [1, 0, 1]), p, h=1e-4) < 1e-3


# ----------------------------------------------------------------- clipping


def test_clip_examples():
    ps = with_grads([2.0])
    assert clip_grad_norm(ps, 1.0) == 0.5
    assert global_norm(ps) == pytest.approx(1.0)
    ps = with_grads([0.3])
    assert clip_grad_norm(ps, 1.0) == 1.0 and ps[0].grad[0] == np.float32(0.3)
    ps = with_grads([3.0], [0.0, 4.0])
    assert global_norm(ps) == 5.0
    assert clip_grad_norm(ps, 1.0) == pytest.approx(0.2)


def test_clip_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        clip_grad_norm(with_grads([np.inf]), 1.0)


# -------------------------------------------------------------------- adam


def test_adam_first_step_moves_by_lr():
    p = with_grads(np.full(4, 0.7), np.full(3, -2.0))
    before = [q.data.copy() for q in p]
    state = OptimizerState.for_params(p)
    adam_step(p, state, 1e-3)
    np.testing.assert_allclose(p[0].data - before[0], -1e-3, rtol=1e-4)
    np.testing.assert_allclose(p[1].data - before[1], 1e-3, rtol=1e-4)


def test_adam_scalar_hand_computation():
    (p,) = with_grads([0.5])
    p.data[...] = 1.0
    state = OptimizerState.for_params([p])
    adam_step([p], state, 0.1)
    p.grad = np.array([-0.25], dtype=np.float32)
    adam_step([p], state, 0.1)
    m = 0.9 * 0.05 + 0.1 * -0.25
    v = 0.999 * 0.00025 + 0.001 * 0.0625
    m_hat, v_hat = m / (1 - 0.81), v / (1 - 0.999 ** 2)
    expected = (1.0 - 0.1) - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert p.data[0] == pytest.approx(expected, rel=1e-5)


def test_adam_zero_gradient_is_noop():
    p = with_grads(np.zeros(3))
    p[0].data[...] = [1.0, -2.0, 3.0]
    state = OptimizerState.for_params(p)
    adam_step(p, state, 5e-4, 0.0)
    np.testing.assert_array_equal(p[0].data, [1.0, -2.0, 3.0])
    assert state.t == 1


def test_decoupled_decay_only():
    p = with_grads(np.zeros(2))
    p[0].data[...] = 1.0
    adam_step(p, OptimizerState.for_params(p), 5e-4, 1e-4)
    np.testing.assert_array_equal(p[0].data, np.float32(1.0 - 5e-8))


# ---------------------------------------------------------------- schedule


def test_cosine_examples():
    s = SchedulerState(5e-4, 0.0, 50)
    assert cosine_lr(0, s) == 5e-4
    assert cosine_lr(50, s) == 0.0
    assert cosine_lr(25, s) == pytest.approx(2.5e-4, abs=1e-15)
    assert cosine_lr(80, s) == 0.0
    assert cosine_lr(50, SchedulerState(5e-4, 1e-6, 50)) == 1e-6


def test_cosine_is_monotone():
    s = SchedulerState(5e-4, 1e-5, 37)
    lrs = [cosine_lr(t, s) for t in range(40)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_train_config_validation():
    with pytest.raises(T.ConfigurationError):
        TrainConfig(lr=-1).validate()
    with pytest.raises(T.ConfigurationError):
        TrainConfig(scheduler="linear").validate()


# -------------------------------------------------------------------- loop


def small_model(seed=0):
    return HybridModel(ModelConfig.preset("gradcheck"), seed)


def test_one_epoch_step_accounting(tiny_splits):
    train, test = tiny_splits
    res = training.train(small_model(), train, test, TrainConfig(epochs=1, batch_size=4))
    assert len(res.log.steps) == math.ceil(len(train) / 4)
    assert len(res.log.epochs) == 1


def test_clipped_norm_and_lr_logged(tiny_splits):
    train, test = tiny_splits
    res = training.train(small_model(), train, test, TrainConfig(epochs=3, batch_size=4))
    assert all(s.clipped_norm <= 1.0 + 1e-6 for s in res.log.steps)
    assert [e.lr for e in res.log.epochs] == [cosine_lr(t, SchedulerState(5e-4, 0, 3)) for t in range(3)]


def test_step_scheduler_and_max_steps(tiny_splits):
    train, test = tiny_splits
    cfg = TrainConfig(epochs=5, batch_size=4, scheduler="step", max_steps=4)
    res = training.train(small_model(), train, test, cfg)
    assert len(res.log.steps) == 4
    assert res.log.steps[0].lr == 5e-4 and res.log.steps[1].lr < 5e-4


def test_training_is_deterministic(tiny_splits, tmp_path):
    train, test = tiny_splits
    cfg = TrainConfig(epochs=2, batch_size=4)
    aug = data.AugmentationConfig()
    for run in ("a", "b"):
        training.train(small_model(), train, test, cfg, aug, out_dir=tmp_path / run)
    for name in ("training_log.csv", "checkpoint.json", "checkpoint.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_checkpoint_roundtrip_and_strict_improvement(tiny_splits, tmp_path):
    train, test = tiny_splits
    res = training.train(small_model(), train, test, TrainConfig(epochs=3, batch_size=4),
                         out_dir=tmp_path)
    accs = [e.test_acc for e in res.log.epochs]
    assert res.best_epoch == int(np.argmax(accs))  # argmax keeps the first of ties
    model, manifest = training.load_checkpoint(tmp_path)
    assert manifest["epoch"] == res.best_epoch and manifest["format_version"] == "1"
    _, acc, _ = training.evaluate(model, test, 4)
    assert acc == manifest["test_accuracy"]
    header = (tmp_path / "training_log.csv").read_text().splitlines()[0]
    assert header == "epoch,lr,train_loss,train_acc,test_loss,test_acc"


def test_non_finite_loss_aborts(tiny_splits):
    train, test = tiny_splits
    model = small_model()
    model.head.fc2.bias.data[...] = np.nan
    with pytest.raises(NonFiniteError, match="epoch 0"):
        training.train(model, train, test, TrainConfig(epochs=1, batch_size=4))


def test_evaluate_uses_file_order_for_train_splits(tiny_splits):
    train, _ = tiny_splits
    model = small_model().eval()
    _, acc, probs = training.evaluate(model, train, 4)
    direct = model.predict_proba(train.images())
    np.testing.assert_allclose(probs, direct, atol=1e-6)
    assert acc == float(np.mean((direct >= 0.5) == train.labels()))
