"""Cross-entropy training with AdamW, best-on-validation selection, metrics."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import InternalError, InvalidArgumentError, ConfigError
from .model import ModelConfig, forward_batch, init_params, iter_batches, stack_features
from .tensor import Tensor

log = logging.getLogger(__name__)

# Named sub-streams derived from a run seed.
STREAM_INIT, STREAM_SHUFFLE, STREAM_GUMBEL, STREAM_EVAL = 10, 11, 12, 13


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2
    seed: int = 0
    patience: int = 10
    clip_norm: float | None = 5.0
    eval_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError(f"betas must lie in [0, 1), got {self.betas}")
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 0:
            raise ConfigError("batch_size and epochs must be >= 1, patience >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


# -- loss -----------------------------------------------------------------

def cross_entropy(logits, labels) -> Tensor:
    """Mean of -log softmax(logits)[label] over the batch (log-sum-exp form)."""
    logits = T.as_tensor(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    if logits.ndim == 1:
        logits = T.reshape(logits, (1,) + logits.shape)
    if labels.shape[0] != logits.shape[0]:
        raise InvalidArgumentError(f"{labels.shape[0]} labels for {logits.shape[0]} logit rows")
    picked = T.log_softmax(logits, axis=-1)[np.arange(labels.shape[0]), labels]
    return -T.mean(picked)


# -- optimizer ------------------------------------------------------------

@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamWState,
               lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 1e-2) -> tuple[dict[str, np.ndarray], AdamWState]:
    """One AdamW update on plain arrays; returns new arrays and the advanced state.

    Weight decay shrinks the weights directly (``w -= lr * wd * w``) and never
    enters the moment estimates.
    """
    b1, b2 = betas
    step = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(w)
        if g.shape != w.shape:
            raise InternalError(f"gradient for {name!r} has shape {g.shape}, parameter {w.shape}")
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        w = w - lr * weight_decay * w
        w = w - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_params[name], new_m[name], new_v[name] = w, m, v
    return new_params, AdamWState(step, new_m, new_v)


class AdamW:
    """Stateful wrapper that updates a ``dict[str, Tensor]`` in place of its arrays."""

    def __init__(self, params: dict[str, Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
        self.params = params
        self.hyper = dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        self.state = AdamWState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        values = {k: p.data for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        updated, self.state = adamw_step(values, grads, self.state, **self.hyper)
        for k, p in self.params.items():
            p.data = updated[k]


def clip_grad_norm(params: Mapping[str, Tensor], max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values() if p.grad is not None)))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


# -- metrics --------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    acc: float
    precision: float
    recall: float
    f1: float
    confusion: tuple[int, int, int, int]  # tp, fp, fn, tn with class 1 (fake) as positive

    @classmethod
    def from_confusion(cls, tp: int, fp: int, fn: int, tn: int) -> "Metrics":
        total = tp + fp + fn + tn
        if total == 0:
            raise InvalidArgumentError("metrics over zero predictions")

        def prf(hit, false_pos, miss):
            p = hit / (hit + false_pos) if hit + false_pos else 0.0
            r = hit / (hit + miss) if hit + miss else 0.0
            f = 2 * p * r / (p + r) if p + r else 0.0
            return p, r, f

        p1, r1, f1 = prf(tp, fp, fn)
        p0, r0, f0 = prf(tn, fn, fp)
        return cls(acc=(tp + tn) / total, precision=(p0 + p1) / 2, recall=(r0 + r1) / 2,
                   f1=(f0 + f1) / 2, confusion=(tp, fp, fn, tn))

    @classmethod
    def from_predictions(cls, labels, preds) -> "Metrics":
        labels = np.asarray(labels)
        preds = np.asarray(preds)
        tp = int(np.sum((preds == 1) & (labels == 1)))
        fp = int(np.sum((preds == 1) & (labels == 0)))
        fn = int(np.sum((preds == 0) & (labels == 1)))
        tn = int(np.sum((preds == 0) & (labels == 0)))
        return cls.from_confusion(tp, fp, fn, tn)


def predict(params: dict, records: Sequence, config: ModelConfig, seed: int = 0,
            batch_size: int = 256) -> np.ndarray:
    """Argmax predictions in evaluation mode with Gumbel draws from ``seed``."""
    rng = np.random.default_rng([seed, STREAM_EVAL])
    preds = []
    for sl in iter_batches(len(records), batch_size):
        logits, _ = forward_batch(stack_features(records[sl], config), params, config, rng, training=False)
        preds.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(preds)


def evaluate(params: dict, records: Sequence, config: ModelConfig, seed: int = 0) -> Metrics:
    if not records:
        raise InvalidArgumentError("cannot evaluate on an empty record list")
    preds = predict(params, records, config, seed)
    return Metrics.from_predictions([r.label for r in records], preds)


# -- training loop --------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val: Metrics


def snapshot(params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(p.data.copy(), requires_grad=True) for k, p in params.items()}


def train(train_records: Sequence, val_records: Sequence, model_config: ModelConfig,
          train_config: TrainConfig, params: dict[str, Tensor] | None = None):
    """Mini-batch AdamW training; returns ``(best params, history)``.

    The best epoch is the one with the highest validation accuracy (earliest
    on ties); training stops once ``patience`` epochs pass without a new best.
    """
    if not train_records or not val_records:
        raise InvalidArgumentError("train and validation splits must be non-empty")
    tc = train_config
    if params is None:
        params = init_params(model_config, np.random.default_rng([tc.seed, STREAM_INIT]))
    shuffle_rng = np.random.default_rng([tc.seed, STREAM_SHUFFLE])
    gumbel_rng = np.random.default_rng([tc.seed, STREAM_GUMBEL])
    opt = AdamW(params, lr=tc.lr, betas=tc.betas, eps=tc.eps, weight_decay=tc.weight_decay)

    features = stack_features(train_records, model_config)
    labels = np.array([r.label for r in train_records], dtype=np.intp)
    n = len(train_records)

    history: list[EpochLog] = []
    best, best_acc, since_best = snapshot(params), -1.0, 0
    for epoch in range(1, tc.epochs + 1):
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        for sl in iter_batches(n, tc.batch_size):
            idx = order[sl]
            batch = {k: v[idx] for k, v in features.items()}
            opt.zero_grad()
            logits, _ = forward_batch(batch, params, model_config, gumbel_rng, training=True)
            loss = cross_entropy(logits, labels[idx])
            loss.backward()
            if tc.clip_norm is not None:
                clip_grad_norm(params, tc.clip_norm)
            opt.step()
            loss_sum += loss.item() * len(idx)
        val = evaluate(params, val_records, model_config, tc.eval_seed)
        history.append(EpochLog(epoch, loss_sum / n, val))
        log.debug("epoch %d loss %.4f val acc %.4f", epoch, loss_sum / n, val.acc)
        if val.acc > best_acc:
            best, best_acc, since_best = snapshot(params), val.acc, 0
        else:
            since_best += 1
        if since_best >= tc.patience:
            break
    opt.zero_grad()
    return best, history


def best_epoch(history: Sequence[EpochLog]) -> EpochLog:
    return max(history, key=lambda e: (e.val.acc, -e.epoch))


def history_rows(history: Sequence[EpochLog]) -> list[list[str]]:
    rows = [["epoch", "train_loss", "val_acc", "val_f1", "val_pre", "val_rec"]]
    for e in history:
        rows.append([str(e.epoch), f"{e.train_loss:.6f}", f"{e.val.acc:.6f}", f"{e.val.f1:.6f}",
                     f"{e.val.precision:.6f}", f"{e.val.recall:.6f}"])
    return rows


# -- checkpoints ----------------------------------------------------------

def params_to_json(params: Mapping[str, Tensor], meta: dict | None = None) -> str:
    doc = {"meta": meta or {}, "params": {k: {"shape": list(p.shape), "values": p.data.reshape(-1).tolist()}
                                          for k, p in params.items()}}
    return json.dumps(doc, sort_keys=False, separators=(",", ":")) + "\n"


def params_from_json(text: str) -> tuple[dict[str, Tensor], dict]:
    doc = json.loads(text)
    params = {k: Tensor(np.array(v["values"], dtype=np.float64).reshape(v["shape"]), requires_grad=True)
              for k, v in doc["params"].items()}
    return params, doc.get("meta", {})
