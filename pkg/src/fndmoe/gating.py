"""Two-pass feature selection over the pairwise cross-attention vectors.

Pass one scores every pair vector with a small self-attention scorer and
keeps the ``k`` highest-scoring ones. Pass two perturbs the log-score of each
survivor with Gumbel noise and squashes it through a tempered sigmoid; a
survivor stays in the final set when its gate reaches the threshold.

All functions accept either one sample (``(M, d)`` vectors) or a batch
(``(B, M, d)``). Randomness always comes from an explicit
``numpy.random.Generator``.
"""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, InvalidArgumentError
from .tensor import Tensor

GATE_MODES = ("sigmoid", "softmax", "gumbel", "topk", "topk+gumbel")
UNIFORM_EPS = 1e-12
ALPHA_FLOOR = 1e-12


@dataclass(frozen=True)
class GateConfig:
    """Gate settings. ``k=None`` resolves to ``ceil(M / 2)``."""

    k: int | None = None
    tau: float = 1.0
    mode: str = "topk+gumbel"
    straight_through: bool = True
    threshold: float = 0.5
    fallback_keep_best: bool = True

    def __post_init__(self):
        if self.mode not in GATE_MODES:
            raise ConfigError(f"unknown gate mode {self.mode!r}; expected one of {GATE_MODES}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.k is not None and self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")

    def resolve_k(self, m: int) -> int:
        """Number of vectors the first pass keeps for ``m`` candidates."""
        if self.mode in ("gumbel", "sigmoid", "softmax"):
            return m
        k = math.ceil(m / 2) if self.k is None else self.k
        if not 1 <= k <= m:
            raise ConfigError(f"k={k} outside [1, {m}]")
        return k


@dataclass
class GateTrace:
    """What the gate did to one sample; every array has length M."""

    alphas: np.ndarray
    topk_indices: np.ndarray
    gumbels: np.ndarray
    z: np.ndarray
    mask: np.ndarray
    logits: np.ndarray | None = None
    clamped: int = 0

    def to_csv(self, pair_labels, sample_id: str = "") -> str:
        """One row per pair: sample, pair, alpha, g, z, kept."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["sample", "pair", "alpha", "g", "z", "kept"])
        for i, label in enumerate(pair_labels):
            writer.writerow(
                [sample_id, label, repr(float(self.alphas[i])), repr(float(self.gumbels[i])),
                 repr(float(self.z[i])), int(bool(self.mask[i]))]
            )
        return buf.getvalue()


@dataclass
class GateTraceBatch:
    """Batched counterpart of :class:`GateTrace` (leading axis = sample)."""

    alphas: np.ndarray
    topk_indices: np.ndarray
    gumbels: np.ndarray
    z: np.ndarray
    mask: np.ndarray
    logits: np.ndarray
    clamped: int = 0

    def __len__(self) -> int:
        return self.alphas.shape[0]

    def __getitem__(self, i: int) -> GateTrace:
        return GateTrace(
            alphas=self.alphas[i], topk_indices=self.topk_indices[i], gumbels=self.gumbels[i],
            z=self.z[i], mask=self.mask[i], logits=self.logits[i], clamped=self.clamped,
        )


class Selection(NamedTuple):
    rows: Tensor  # (B, k, d), already multiplied by their gate weight
    key_mask: np.ndarray  # (B, k) rows visible to the fusion layer
    trace: GateTraceBatch


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise InvalidArgumentError(f"expected (M, d) or (B, M, d) vectors, got shape {x.shape}")
    return x, False


def score_logits(pair_vectors, params: dict) -> Tensor:
    """Per-vector score: one single-head self-attention pass, residual, linear head."""
    x, single = _batched(T.as_tensor(pair_vectors))
    if x.shape[1] == 0:
        raise InvalidArgumentError("cannot score an empty set of vectors")
    q = x @ params["scorer.wq"]
    k = x @ params["scorer.wk"]
    v = x @ params["scorer.wv"]
    h = x + T.scaled_dot_product_attention(q, k, v)
    logits = T.reshape(h @ params["scorer.w"], x.shape[:2]) + params["scorer.b"]
    return T.reshape(logits, (x.shape[1],)) if single else logits


def score_features(pair_vectors, params: dict) -> Tensor:
    """Softmax of the score logits over all M vectors (differentiable)."""
    return T.softmax(score_logits(pair_vectors, params), axis=-1)


def select_top_k(alphas, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries, ties to the lower index, sorted ascending."""
    a = np.asarray(alphas.data if isinstance(alphas, Tensor) else alphas, dtype=np.float64)
    m = a.shape[-1]
    if not 1 <= k <= m:
        raise InvalidArgumentError(f"k={k} outside [1, {m}]")
    order = np.argsort(-a, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    """Standard Gumbel draws ``-log(-log U)`` with U clamped away from 0 and 1."""
    if isinstance(shape, int):
        if shape < 1:
            raise InvalidArgumentError(f"count must be >= 1, got {shape}")
        shape = (shape,)
    u = np.clip(rng.random(shape), UNIFORM_EPS, 1.0 - UNIFORM_EPS)
    return -np.log(-np.log(u))


def gumbel_sigmoid(alphas, g, tau: float, warnings: Counter | None = None) -> Tensor:
    """z = sigmoid((log alpha + g) / tau); the Gumbel draw is a constant."""
    if not tau > 0:
        raise InvalidArgumentError(f"tau must be positive, got {tau}")
    alphas = T.as_tensor(alphas)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != alphas.shape:
        raise InvalidArgumentError(f"gumbel draws {g.shape} do not match alphas {alphas.shape}")
    low = int(np.count_nonzero(alphas.data <= ALPHA_FLOOR))
    if low and warnings is not None:
        warnings["alpha_clamped"] += low
    logs = T.log(T.clamp_min(alphas, ALPHA_FLOOR))
    return T.sigmoid((logs + g) * (1.0 / tau))


def hard_mask(z: np.ndarray, threshold: float = 0.5, fallback_keep_best: bool = True) -> np.ndarray:
    """Threshold test ``z >= threshold`` with the keep-the-best fallback for empty rows."""
    z = np.asarray(z)
    mask = z >= threshold
    if fallback_keep_best:
        empty = ~mask.any(axis=-1)
        if np.any(empty):
            best = np.argmax(z, axis=-1)
            if mask.ndim == 1:
                mask[best] = True
            else:
                rows = np.nonzero(empty)[0]
                mask[rows, best[rows]] = True
    return mask


def _gate_rows(rows: Tensor, z: Tensor, config: GateConfig, training: bool):
    """Apply gate values to (B, k, d) rows; returns (weighted rows, key mask, hard mask)."""
    hard = hard_mask(z.data, config.threshold, config.fallback_keep_best)
    if not training:
        return rows, hard, hard
    if config.straight_through:
        weight = z + T.stop_gradient(hard.astype(np.float64) - z.data)
        return rows * T.reshape(weight, weight.shape + (1,)), hard, hard
    return rows * T.reshape(z, z.shape + (1,)), np.ones(hard.shape, dtype=bool), hard


def apply_final_selection(vectors, z, config: GateConfig, training: bool = False):
    """Final-set selection for one sample.

    Evaluation keeps the rows whose gate clears the threshold. Training keeps
    all rows scaled by their gate, or, with ``straight_through``, the hard
    0/1 rows whose gradient follows the soft gate.
    """
    vectors, z = T.as_tensor(vectors), T.as_tensor(z)
    rows, key_mask, hard = _gate_rows(T.reshape(vectors, (1,) + vectors.shape),
                                      T.reshape(z, (1,) + z.shape), config, training)
    rows = T.reshape(rows, vectors.shape)
    keep = np.nonzero(key_mask[0])[0]
    if len(keep) < vectors.shape[0]:
        rows = T.take(rows, keep, axis=0)
    return rows, hard[0]


def two_pass_select_batch(pair_vectors, config: GateConfig, params: dict, rng: np.random.Generator | None,
                          training: bool = False, gumbels: np.ndarray | None = None) -> Selection:
    """Score, keep the top k, Gumbel-gate the survivors (batched).

    ``gumbels`` (B, M) overrides the draws from ``rng``; gradient checks use
    it to freeze the noise.
    """
    x, _ = _batched(T.as_tensor(pair_vectors))
    b, m, _d = x.shape
    k = config.resolve_k(m)
    logits = score_logits(x, params)
    alphas = T.softmax(logits, axis=-1)
    warnings: Counter = Counter()
    mode = config.mode

    if mode in ("sigmoid", "softmax"):
        gate = T.sigmoid(logits) if mode == "sigmoid" else alphas
        rows = x * T.reshape(gate, (b, m, 1))
        idx = np.tile(np.arange(m), (b, 1))
        trace = GateTraceBatch(alphas.data, idx, np.zeros((b, m)), gate.data.copy(),
                               np.ones((b, m), dtype=bool), logits.data)
        return Selection(rows, np.ones((b, m), dtype=bool), trace)

    idx = select_top_k(alphas.data, k)
    rows = T.gather_rows(x, idx)
    z_full = np.zeros((b, m))
    mask_full = np.zeros((b, m), dtype=bool)
    batch = np.arange(b)[:, None]

    if mode == "topk":
        z_full[batch, idx] = 1.0
        mask_full[batch, idx] = True
        trace = GateTraceBatch(alphas.data, idx, np.zeros((b, m)), z_full, mask_full, logits.data)
        return Selection(rows, np.ones((b, k), dtype=bool), trace)

    if gumbels is None:
        if rng is None:
            raise InvalidArgumentError("a random generator is required for Gumbel gating")
        gumbels = sample_gumbel((b, m), rng)
    gumbels = np.asarray(gumbels, dtype=np.float64).reshape(b, m)
    z = gumbel_sigmoid(T.gather_rows(alphas, idx), gumbels[batch, idx], config.tau, warnings)
    rows, key_mask, hard = _gate_rows(rows, z, config, training)
    z_full[batch, idx] = z.data
    mask_full[batch, idx] = hard
    trace = GateTraceBatch(alphas.data, idx, gumbels, z_full, mask_full, logits.data, warnings["alpha_clamped"])
    return Selection(rows, key_mask, trace)


def two_pass_select(pair_vectors, config: GateConfig, params: dict, rng: np.random.Generator | None,
                    training: bool = False, gumbels: np.ndarray | None = None):
    """Single-sample selection: returns ``(selected (m, d), GateTrace)``.

    In evaluation the returned rows are exactly the final set; in training
    they are the gated rows the fusion layer sees.
    """
    x = T.as_tensor(pair_vectors)
    if x.ndim != 2:
        raise InvalidArgumentError(f"expected (M, d) vectors, got shape {x.shape}")
    sel = two_pass_select_batch(T.reshape(x, (1,) + x.shape), config, params, rng, training,
                                None if gumbels is None else np.asarray(gumbels).reshape(1, -1))
    rows = T.reshape(sel.rows, sel.rows.shape[1:])
    keep = np.nonzero(sel.key_mask[0])[0]
    if len(keep) < rows.shape[0]:
        rows = T.take(rows, keep, axis=0)
    return rows, sel.trace[0]


@dataclass
class RetentionStats:
    """Running per-pair sums for the gate dump."""

    m: int
    count: int = 0
    alpha_sum: np.ndarray = field(default=None)
    z_sum: np.ndarray = field(default=None)
    kept: np.ndarray = field(default=None)

    def __post_init__(self):
        self.alpha_sum = np.zeros(self.m)
        self.z_sum = np.zeros(self.m)
        self.kept = np.zeros(self.m, dtype=np.int64)

    def add(self, trace: GateTraceBatch | GateTrace) -> None:
        alphas = np.atleast_2d(trace.alphas)
        self.count += alphas.shape[0]
        self.alpha_sum += alphas.sum(axis=0)
        self.z_sum += np.atleast_2d(trace.z).sum(axis=0)
        self.kept += np.atleast_2d(trace.mask).sum(axis=0)

    def rows(self, labels) -> list[tuple[str, float, float, float]]:
        if self.count == 0:
            raise InvalidArgumentError("no samples recorded")
        n = float(self.count)
        return [(label, self.alpha_sum[i] / n, self.z_sum[i] / n, self.kept[i] / n) for i, label in enumerate(labels)]
