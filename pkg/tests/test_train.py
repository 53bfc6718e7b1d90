import json
import math
from dataclasses import replace

import numpy as np
import pytest

from nisnn.data import SplitPlan, loso_splits, synth_generate
from nisnn.errors import ConfigError, ContractError, NumericError
from nisnn.gradcheck import check_gradients
from nisnn.model import NetworkSpec, build_cnn, build_snn
from nisnn.tensor import Tensor
from nisnn.train import (
    OptimizerState,
    TrainConfig,
    accuracy,
    adam_step,
    ce_loss,
    evaluate,
    model_inputs,
    one_hot,
    predict,
    run_loso,
    train_loop,
)

TINY = NetworkSpec(channels=4, pieces=8, steps=8, classifier_kernel=(3, 3), hidden=6, attention="global", d=2)


@pytest.fixture(scope="module")
def tiny_data():
    return synth_generate(3, n_subjects=3, trials_per_subject=12, channels=4, samples=64)


def test_ce_loss_closed_forms():
    assert ce_loss(Tensor(np.zeros((3, 2))), one_hot([0, 1, 1])).item() == pytest.approx(math.log(2), abs=1e-6)
    assert ce_loss(Tensor([[20.0, 0.0], [0.0, 20.0]]), one_hot([0, 1])).item() < 1e-3


def test_ce_loss_rejects_soft_labels():
    with pytest.raises(ContractError):
        ce_loss(Tensor(np.zeros((1, 2))), np.array([[0.5, 0.5]]))


def test_ce_loss_finite_differences(rng):
    err = check_gradients(lambda z: ce_loss(z, one_hot([1, 0, 1])), [rng.standard_normal((3, 2))])
    assert err < 1e-3


def test_accuracy_examples():
    assert accuracy([0, 1, 1], [0, 1, 1]) == 1.0
    assert accuracy([1, 0], [0, 1]) == 0.0
    assert accuracy([0, 1, 1, 0], [0, 1, 1, 1]) == 0.75
    with pytest.raises(ContractError):
        accuracy([], [])


def test_prediction_ties_go_to_class_zero():
    assert predict(np.array([[1.0, 1.0]])).tolist() == [0]


def test_adam_zero_grad_keeps_parameters():
    p = Tensor(np.array([1.0, -2.0], np.float32), requires_grad=True)
    p.grad = np.zeros(2, np.float32)
    adam_step({"p": p}, OptimizerState(), TrainConfig())
    assert p.data.tolist() == [1.0, -2.0]


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([1.0, 1.0, 1.0], np.float32), requires_grad=True)
    p.grad = np.array([3.0, -0.01, 1e3], np.float32)
    adam_step({"p": p}, OptimizerState(), TrainConfig(lr=1e-3))
    np.testing.assert_allclose(p.data, [1 - 1e-3, 1 + 1e-3, 1 - 1e-3], rtol=1e-5)


def test_adam_names_bad_parameter():
    p = Tensor(np.ones(2, np.float32), requires_grad=True)
    p.grad = np.array([np.nan, 0.0], np.float32)
    with pytest.raises(NumericError, match="fc1.weight"):
        adam_step({"fc1.weight": p}, OptimizerState(), TrainConfig())


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainConfig(schedule="warmup")
    assert TrainConfig(epochs=3).phases(NetworkSpec()) == [("cnn", 3), ("snn", 3)]
    assert TrainConfig(schedule="direct", epochs=2).phases(NetworkSpec()) == [("snn", 2)]


def test_history_and_checkpoint(tmp_path, tiny_data):
    split = loso_splits(tiny_data.manifest)[0]
    cfg = TrainConfig(epochs=2, pretrain_epochs=1, batch_size=8, lr=3e-3)
    model, history = train_loop(TINY, tiny_data, split, cfg, tmp_path)
    assert [(h["phase"], h["epoch"]) for h in history] == [("cnn", 1), ("snn", 1), ("snn", 2)]
    assert model.family == "snn"
    lines = (tmp_path / "history.jsonl").read_text().splitlines()
    assert [json.loads(line) for line in lines] == history
    assert (tmp_path / "checkpoint.ckpt").is_file()


def test_training_is_deterministic(tmp_path, tiny_data):
    split = loso_splits(tiny_data.manifest)[1]
    cfg = TrainConfig(epochs=1, batch_size=8)
    train_loop(TINY, tiny_data, split, cfg, tmp_path / "a")
    train_loop(TINY, tiny_data, split, cfg, tmp_path / "b")
    for name in ("checkpoint.ckpt", "history.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_resume_is_bitwise(tmp_path, tiny_data):
    split = loso_splits(tiny_data.manifest)[2]
    cfg = TrainConfig(epochs=2, batch_size=8)
    train_loop(TINY, tiny_data, split, cfg, tmp_path / "full")
    for stop in (1, 2, 3):
        part = tmp_path / f"part{stop}"
        train_loop(TINY, tiny_data, split, cfg, part, stop_after=stop)
        train_loop(TINY, tiny_data, split, cfg, part, resume=part / "checkpoint.ckpt")
        for name in ("checkpoint.ckpt", "history.jsonl"):
            assert (part / name).read_bytes() == (tmp_path / "full" / name).read_bytes(), (stop, name)


def test_first_epoch_lowers_loss_on_fixed_batch(tiny_data):
    split = loso_splits(tiny_data.manifest)[0]
    probe = np.asarray(split.train[:16])
    x = Tensor(model_inputs(tiny_data, probe, TINY))
    y = one_hot(tiny_data.labels[probe])

    def loss(model):
        model.eval()
        return ce_loss(model(x), y).item()

    before = loss(build_cnn(TINY, seed=0))
    cfg = TrainConfig(epochs=1, batch_size=8, lr=3e-3, schedule="direct")
    model, _ = train_loop(replace(TINY, family="cnn"), tiny_data, split, cfg)
    assert loss(model) < before


def test_overlapping_split_rejected(tiny_data):
    with pytest.raises(ContractError):
        train_loop(TINY, tiny_data, SplitPlan("S01", (0, 1, 2), (2, 3)), TrainConfig(epochs=1))


def test_held_out_trials_never_batched(tiny_data, monkeypatch):
    import nisnn.train as train_mod

    seen = set()
    real = train_mod.model_inputs

    def audit(dataset, indices, spec):
        seen.update(int(i) for i in np.atleast_1d(indices))
        return real(dataset, indices, spec)

    split = loso_splits(tiny_data.manifest)[0]
    monkeypatch.setattr(train_mod, "model_inputs", audit)
    monkeypatch.setattr(train_mod, "evaluate", lambda *a, **k: train_mod.EvalResult(0.0, [[0, 0], [0, 0]]))
    train_loop(TINY, tiny_data, split, TrainConfig(epochs=1, batch_size=8))
    assert seen and not seen & set(split.test)


def test_evaluate_confusion_and_order_independence(tiny_data):
    model = build_snn(TINY)
    idx = list(range(len(tiny_data.labels)))
    a = evaluate(model, tiny_data, idx, batch_size=5)
    b = evaluate(model, tiny_data, idx[::-1], batch_size=7)
    assert a.total == len(idx) and a.confusion == b.confusion and a.accuracy == b.accuracy


def test_random_model_near_chance():
    ds = synth_generate(11, n_subjects=2, trials_per_subject=100, channels=4, samples=64, difficulty=1.0)
    accs = [evaluate(build_cnn(TINY, seed=s), ds, range(200)).accuracy for s in range(3)]
    assert abs(np.mean(accs) - 0.5) <= 0.1


def test_run_loso_summary(tmp_path, tiny_data):
    cfg = TrainConfig(epochs=1, batch_size=8)
    summary = run_loso(TINY, tiny_data, cfg, tmp_path, workers=3)
    assert sorted(summary["accuracy"]) == ["S01", "S02", "S03"]
    assert summary["mean_accuracy"] == pytest.approx(np.mean(list(summary["accuracy"].values())))
    assert json.loads((tmp_path / "summary.json").read_text()) == summary
    serial = run_loso(TINY, tiny_data, cfg, tmp_path / "serial", workers=1)
    assert serial == summary
    for s in ("S01", "S02", "S03"):
        assert (tmp_path / s / "checkpoint.ckpt").read_bytes() == (tmp_path / "serial" / s / "checkpoint.ckpt").read_bytes()
    with pytest.raises(ConfigError):
        run_loso(TINY, tiny_data, cfg, subjects=["S09"])
