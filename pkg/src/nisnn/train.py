"""Cross-entropy training with Adam, LOSO orchestration and checkpoint/resume."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset, SplitPlan, loso_splits, segment
from .errors import ConfigError, ContractError, NumericError
from .model import Network, NetworkSpec, build_cnn, build_snn, load_model, save_model, transfer_weights_cnn_to_snn
from .tensor import Tensor

log = logging.getLogger(__name__)

SCHEDULES = ("direct", "cnn-pretrain-then-snn")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 20
    pretrain_epochs: int | None = None  # defaults to ``epochs``
    batch_size: int = 64
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    schedule: str = "cnn-pretrain-then-snn"

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.lr <= 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("lr, epochs and batch_size must be positive")
        if self.pretrain_epochs is not None and self.pretrain_epochs <= 0:
            raise ConfigError("pretrain_epochs must be positive")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")

    def phases(self, spec: NetworkSpec) -> list[tuple[str, int]]:
        if self.schedule == "direct":
            return [(spec.family, self.epochs)]
        return [("cnn", self.pretrain_epochs or self.epochs), ("snn", self.epochs)]


# -- loss, metric, optimizer ----------------------------------------------------


def one_hot(labels, classes: int = 2) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, classes), dtype=np.float32)
    out[np.arange(labels.size), labels] = 1.0
    return out


def ce_loss(logits: Tensor, targets) -> Tensor:
    """Mean over the batch of -sum(y * log softmax(logits)), log clamped at 1e-12."""
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    if y.shape != logits.shape:
        raise ContractError(f"targets {y.shape} do not match logits {logits.shape}")
    if not (np.isin(y, (0, 1)).all() and np.all(y.sum(axis=-1) == 1)):
        raise ContractError("targets must be one-hot rows")
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("logits contain non-finite values")
    p = T.softmax_lastdim(logits)
    nll = T.mul(T.log(T.clamp_min(p, 1e-12)), Tensor(y, dtype=logits.dtype))
    return T.scale(T.sum_(nll), -1.0 / logits.shape[0])


def predict(logits) -> np.ndarray:
    """argmax over classes; np.argmax returns the first maximum, so ties go to class 0."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=-1)


def accuracy(predictions, labels) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ContractError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    if predictions.size == 0:
        raise ContractError("accuracy of an empty set is undefined")
    return float(np.mean(predictions == labels))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Tensor], state: OptimizerState, cfg: TrainConfig) -> None:
    """Bias-corrected Adam on every parameter that has a grad."""
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    b1, b2 = cfg.betas
    t = state.step
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad.astype(np.float32)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = (b1 * m + (1 - b1) * g).astype(np.float32)
        v = (b2 * v + (1 - b2) * g * g).astype(np.float32)
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p.data = (p.data - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(p.data.dtype)


# -- batching -------------------------------------------------------------------


def model_inputs(dataset: Dataset, indices, spec: NetworkSpec) -> np.ndarray:
    return segment(dataset.signals[np.asarray(indices, dtype=np.int64)], spec.pieces, spec.steps)


def _epoch_order(seed: int, phase: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, phase, epoch]).permutation(n)


@dataclass
class EvalResult:
    accuracy: float
    confusion: list[list[int]]  # rows: true label, columns: predicted label

    @property
    def total(self) -> int:
        return int(sum(map(sum, self.confusion)))


def evaluate(model: Network, dataset: Dataset, indices, batch_size: int = 64) -> EvalResult:
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise ContractError("evaluation set is empty")
    classes = model.spec.classes
    confusion = np.zeros((classes, classes), dtype=np.int64)
    model.eval()
    with T.no_grad():
        for start in range(0, indices.size, batch_size):
            idx = indices[start : start + batch_size]
            pred = predict(model(Tensor(model_inputs(dataset, idx, model.spec))))
            np.add.at(confusion, (dataset.labels[idx], pred), 1)
    return EvalResult(float(np.trace(confusion)) / indices.size, confusion.tolist())


# -- training loop --------------------------------------------------------------


def _new_model(family: str, spec: NetworkSpec, seed: int) -> Network:
    return build_cnn(spec, seed) if family == "cnn" else build_snn(spec, seed)


def _save(path: Path, model: Network, opt: OptimizerState, meta: dict) -> None:
    extra = {}
    for name in model.state_dict():
        if name in opt.m:
            extra[f"opt.m.{name}"] = opt.m[name]
            extra[f"opt.v.{name}"] = opt.v[name]
    save_model(path, model, extra, dict(meta, opt_step=opt.step))


def _restore_optimizer(extra: dict[str, np.ndarray], step: int) -> OptimizerState:
    state = OptimizerState(step=step)
    for key, value in extra.items():
        if key.startswith("opt.m."):
            state.m[key[6:]] = value
        elif key.startswith("opt.v."):
            state.v[key[6:]] = value
    return state


def _write_history(path: Path, history: list[dict]) -> None:
    text = "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in history)
    path.write_text(text, encoding="utf-8", newline="\n")


def train_loop(
    spec: NetworkSpec,
    dataset: Dataset,
    split: SplitPlan,
    cfg: TrainConfig,
    out_dir=None,
    resume=None,
    stop_after: int | None = None,
) -> tuple[Network, list[dict]]:
    """Train on ``split.train``, report accuracy on ``split.test`` after every epoch.

    Under the pretrain schedule the CNN is trained first, its weights are moved
    into a fresh SNN, and the SNN is trained.  A checkpoint (parameters,
    optimizer moments, progress) is rewritten after each epoch when ``out_dir``
    is given; ``resume`` continues from such a checkpoint.  ``stop_after`` ends
    the run after that many epochs in total (used to test resumption).
    """
    train_idx = np.asarray(split.train, dtype=np.int64)
    test_idx = np.asarray(split.test, dtype=np.int64)
    if set(train_idx.tolist()) & set(test_idx.tolist()):
        raise ContractError("train and test sets overlap")
    phases = cfg.phases(spec)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    history: list[dict] = []
    phase_idx, done = 0, 0
    model = None
    opt = OptimizerState()
    if resume is not None:
        model, extra, meta = load_model(resume, cfg.seed)
        phase_idx, done = meta["phase_index"], meta["epochs_done"]
        history = list(meta.get("history", []))
        opt = _restore_optimizer(extra, meta["opt_step"])

    epochs_run = 0
    while phase_idx < len(phases):
        family, n_epochs = phases[phase_idx]
        if model is None:
            model = _new_model(family, spec, cfg.seed)
        elif done >= n_epochs:
            phase_idx, done = phase_idx + 1, 0
            if phase_idx < len(phases):
                nxt = _new_model(phases[phase_idx][0], spec, cfg.seed)
                if model.family == "cnn" and nxt.family == "snn":
                    transfer_weights_cnn_to_snn(model, nxt)
                model, opt = nxt, OptimizerState()
            continue
        params = dict(model.named_parameters())
        for epoch in range(done, n_epochs):
            if stop_after is not None and epochs_run >= stop_after:
                return model, history
            model.train()
            order = train_idx[_epoch_order(cfg.seed, phase_idx, epoch, train_idx.size)]
            total = 0.0
            for start in range(0, order.size, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                x = Tensor(model_inputs(dataset, idx, spec))
                loss = ce_loss(model(x), one_hot(dataset.labels[idx], spec.classes))
                model.zero_grad()
                loss.backward()
                adam_step(params, opt, cfg)
                total += loss.item() * idx.size
            result = evaluate(model, dataset, test_idx, cfg.batch_size)
            rec = {
                "phase": family,
                "epoch": epoch + 1,
                "train_loss": total / order.size,
                "test_accuracy": result.accuracy,
                "held_out": split.held_out,
            }
            history.append(rec)
            log.info("%s %s epoch %d loss %.4f acc %.4f", split.held_out, family, epoch + 1, rec["train_loss"], rec["test_accuracy"])
            done, epochs_run = epoch + 1, epochs_run + 1
            if out is not None:
                meta = {"phase_index": phase_idx, "epochs_done": done, "history": history, "train": _cfg_dict(cfg)}
                _save(out / "checkpoint.ckpt", model, opt, meta)
                _write_history(out / "history.jsonl", history)
    return model, history


def _cfg_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["betas"] = list(cfg.betas)
    return d


def run_loso(
    spec: NetworkSpec,
    dataset: Dataset,
    cfg: TrainConfig,
    out_dir=None,
    subjects: list[str] | None = None,
    workers: int = 1,
) -> dict:
    """Train/test one split per held-out subject; results merged by subject id."""
    plans = loso_splits(dataset.manifest)
    if subjects is not None:
        unknown = set(subjects) - {p.held_out for p in plans}
        if unknown:
            raise ConfigError(f"unknown subjects: {sorted(unknown)}")
        plans = [p for p in plans if p.held_out in subjects]

    def run(plan: SplitPlan):
        sub = None if out_dir is None else Path(out_dir) / plan.held_out
        model, history = train_loop(spec, dataset, plan, cfg, sub)
        result = evaluate(model, dataset, plan.test, cfg.batch_size)
        return plan.held_out, result, history

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, plans))
    else:
        results = [run(p) for p in plans]
    results.sort(key=lambda r: r[0])
    summary = {
        "accuracy": {s: r.accuracy for s, r, _ in results},
        "confusion": {s: r.confusion for s, r, _ in results},
        "mean_accuracy": float(np.mean([r.accuracy for _, r, _ in results])),
    }
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary
