"""End-to-end fusion model: encoders, pairwise cross-attention, gate, classifier.

Parameters live in a plain ``dict[str, Tensor]`` so the optimizer, the
gradient checker and the JSON checkpoint code can treat them uniformly.
Every forward function is read-only on the parameters.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, InternalError, InvalidArgumentError
from .gating import GateConfig, GateTrace, GateTraceBatch, RetentionStats, two_pass_select_batch
from .tensor import Tensor

DEFAULT_MODALITIES = ("text", "audio_vgg", "audio_w2v", "image", "video")
CLS_INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    modalities: tuple[str, ...] = DEFAULT_MODALITIES
    tokens_per_modality: int = 4
    input_dims: tuple[int, ...] = (16, 16, 16, 16, 16)
    d_model: int = 32
    heads: int = 2
    gate: GateConfig = field(default_factory=GateConfig)
    classifier_classes: int = 2
    ffn_mult: int = 2
    fusion_layers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(self.modalities))
        dims = self.input_dims
        if isinstance(dims, Mapping):
            dims = tuple(dims[name] for name in self.modalities)
        elif isinstance(dims, int):
            dims = (dims,) * len(self.modalities)
        object.__setattr__(self, "input_dims", tuple(int(d) for d in dims))
        if len(self.modalities) < 1 or len(set(self.modalities)) != len(self.modalities):
            raise ConfigError(f"modalities must be distinct and non-empty: {self.modalities}")
        if len(self.input_dims) != len(self.modalities):
            raise ConfigError("input_dims must give one size per modality")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.tokens_per_modality < 1 or self.fusion_layers < 1:
            raise ConfigError("tokens_per_modality and fusion_layers must be >= 1")
        if self.classifier_classes != 2:
            raise ConfigError("only binary classification is supported")
        self.gate.resolve_k(self.num_pairs)

    @property
    def n(self) -> int:
        return len(self.modalities)

    @property
    def num_pairs(self) -> int:
        # A single modality feeds its pooled encoding straight to the fusion layer.
        return 1 if self.n == 1 else self.n * (self.n - 1) // 2

    def pairs(self) -> list[tuple[int, int]]:
        return list(combinations(range(self.n), 2))

    def pair_labels(self) -> list[str]:
        if self.n == 1:
            return [self.modalities[0]]
        return [f"{self.modalities[i]}→{self.modalities[j]}" for i, j in self.pairs()]

    def restrict(self, subset: Sequence[str]) -> "ModelConfig":
        """Same settings over a subset of the modalities (in this config's order)."""
        unknown = set(subset) - set(self.modalities)
        if unknown:
            raise ConfigError(f"unknown modalities {sorted(unknown)}")
        if not subset:
            raise ConfigError("a modality subset needs at least one member")
        keep = [i for i, name in enumerate(self.modalities) if name in subset]
        gate = self.gate
        m = 1 if len(keep) == 1 else len(keep) * (len(keep) - 1) // 2
        if gate.k is not None and gate.k > m:
            gate = replace(gate, k=m)
        return replace(self, modalities=tuple(self.modalities[i] for i in keep),
                       input_dims=tuple(self.input_dims[i] for i in keep), gate=gate)

    def to_dict(self) -> dict:
        return {
            "modalities": list(self.modalities), "tokens_per_modality": self.tokens_per_modality,
            "input_dims": list(self.input_dims), "d_model": self.d_model, "heads": self.heads,
            "gate": vars(self.gate).copy(), "classifier_classes": self.classifier_classes,
            "ffn_mult": self.ffn_mult, "fusion_layers": self.fusion_layers,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        gate = GateConfig(**d.pop("gate", {}))
        return cls(gate=gate, **d)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every learnable tensor, in a fixed order."""
    d, f = config.d_model, config.d_model * config.ffn_mult
    shapes: dict[str, tuple[int, ...]] = {}
    for name, dim in zip(config.modalities, config.input_dims):
        shapes[f"enc.{name}.w1"] = (dim, d)
        shapes[f"enc.{name}.b1"] = (d,)
        shapes[f"enc.{name}.w2"] = (d, d)
        shapes[f"enc.{name}.b2"] = (d,)
    for w in ("wq", "wk", "wv", "wo"):
        shapes[f"xattn.{w}"] = (d, d)
    for w in ("wq", "wk", "wv"):
        shapes[f"scorer.{w}"] = (d, d)
    shapes["scorer.w"] = (d, 1)
    shapes["scorer.b"] = (1,)
    shapes["cls"] = (d,)
    for layer in range(config.fusion_layers):
        p = f"fuse{layer}."
        for w in ("wq", "wk", "wv", "wo"):
            shapes[p + w] = (d, d)
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        shapes[p + "ffn.w1"] = (d, f)
        shapes[p + "ffn.b1"] = (f,)
        shapes[p + "ffn.w2"] = (f, d)
        shapes[p + "ffn.b2"] = (d,)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
    shapes["clf.w"] = (d, config.classifier_classes)
    shapes["clf.b"] = (config.classifier_classes,)
    return shapes


def param_count(config: ModelConfig) -> int:
    """Closed-form number of scalars in :func:`init_params`."""
    d, f, c = config.d_model, config.d_model * config.ffn_mult, config.classifier_classes
    encoders = sum(dim * d + d + d * d + d for dim in config.input_dims)
    cross = 4 * d * d
    scorer = 3 * d * d + d + 1
    fusion = config.fusion_layers * (4 * d * d + 2 * d * f + f + d + 4 * d)
    return encoders + cross + scorer + d + fusion + d * c + c


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit/zero layer norms, N(0, 0.02) CLS."""
    params = {}
    for name, shape in param_shapes(config).items():
        if name == "cls":
            value = rng.normal(0.0, CLS_INIT_STD, size=shape)
        elif name.endswith(".g") and ".ln" in name:
            value = np.ones(shape)
        elif len(shape) == 1:
            value = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(value, requires_grad=True)
    return params


# -- building blocks -------------------------------------------------------

def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, length, d = x.shape
    x = T.reshape(x, tuple(lead) + (length, heads, d // heads))
    nd = x.ndim
    return T.swapaxes(x, nd - 3, nd - 2)


def _merge_heads(x: Tensor) -> Tensor:
    nd = x.ndim
    x = T.swapaxes(x, nd - 3, nd - 2)
    *lead, length, heads, dh = x.shape
    return T.reshape(x, tuple(lead) + (length, heads * dh))


def multi_head_attention(q_in: Tensor, kv_in: Tensor, params: dict, prefix: str, heads: int,
                         key_mask: np.ndarray | None = None) -> Tensor:
    """Standard multi-head attention; ``key_mask`` is (..., Lk) bools."""
    q = _split_heads(q_in @ params[prefix + "wq"], heads)
    k = _split_heads(kv_in @ params[prefix + "wk"], heads)
    v = _split_heads(kv_in @ params[prefix + "wv"], heads)
    mask = None
    if key_mask is not None:
        mask = np.asarray(key_mask, dtype=bool)[..., None, None, :]
    return _merge_heads(T.scaled_dot_product_attention(q, k, v, mask)) @ params[prefix + "wo"]


def encode_batch(features: Mapping[str, np.ndarray], params: dict, config: ModelConfig) -> list[Tensor]:
    """Tokenwise two-layer perceptron per modality: (B, T, in) -> (B, T, d)."""
    out = []
    for name, dim in zip(config.modalities, config.input_dims):
        x = T.as_tensor(features[name])
        if x.shape[-1] != dim:
            raise DataError(f"modality {name!r}: expected feature dim {dim}, got {x.shape[-1]}")
        p = f"enc.{name}."
        h = T.relu(x @ params[p + "w1"] + params[p + "b1"])
        out.append(h @ params[p + "w2"] + params[p + "b2"])
    return out


def encode_modalities(record, params: dict, config: ModelConfig) -> list[Tensor]:
    """Encode one :class:`~fndmoe.data.FeatureRecord` into N (tokens, d) matrices."""
    for name in config.modalities:
        if name not in record.features:
            raise DataError(f"record {record.id!r} is missing modality {name!r}")
    encoded = encode_batch({n: record.features[n][None] for n in config.modalities}, params, config)
    return [T.reshape(e, e.shape[1:]) for e in encoded]


def pairwise_cross_attention_batch(encoded: Sequence[Tensor], params: dict, config: ModelConfig) -> Tensor:
    """(B, M, d) pair vectors: modality i queries modality j for every i < j, mean-pooled."""
    if len(encoded) < 2:
        raise InvalidArgumentError("pairwise cross-attention needs at least two modalities")
    stacked = T.stack(encoded, axis=1)  # (B, N, T, d)
    pairs = list(combinations(range(len(encoded)), 2))
    qi = np.array([i for i, _ in pairs])
    kj = np.array([j for _, j in pairs])
    attended = multi_head_attention(T.take(stacked, qi, axis=1), T.take(stacked, kj, axis=1),
                                    params, "xattn.", config.heads)
    return T.mean(attended, axis=2)


def pairwise_cross_attention(encoded: Sequence, params: dict, config: ModelConfig) -> Tensor:
    """Single-sample version over N (tokens, d) matrices -> (M, d).

    Token counts may differ between modalities here.
    """
    encoded = [T.as_tensor(e) for e in encoded]
    if len(encoded) < 2:
        raise InvalidArgumentError("pairwise cross-attention needs at least two modalities")
    out = []
    for i, j in combinations(range(len(encoded)), 2):
        att = multi_head_attention(encoded[i], encoded[j], params, "xattn.", config.heads)
        out.append(T.mean(att, axis=0))
    return T.stack(out, axis=0)


def pair_vectors_batch(features: Mapping[str, np.ndarray], params: dict, config: ModelConfig) -> Tensor:
    encoded = encode_batch(features, params, config)
    if config.n == 1:
        return T.mean(encoded[0], axis=1, keepdims=True)
    return pairwise_cross_attention_batch(encoded, params, config)


def fuse_and_classify_batch(rows: Tensor, params: dict, config: ModelConfig,
                            key_mask: np.ndarray | None = None) -> Tensor:
    """CLS + rows through post-norm encoder layer(s); classifier on the CLS output.

    ``rows`` is (B, m, d); ``key_mask`` (B, m) hides rows that are not part
    of the selected set, which is equivalent to removing them because only
    the CLS position is read out.
    """
    b, m, d = rows.shape
    if m == 0:
        raise InternalError("empty feature set reached the classifier")
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if not np.all(key_mask.any(axis=-1)):
            raise InternalError("a sample reached the classifier with no selected features")
        key_mask = np.concatenate([np.ones((b, 1), dtype=bool), key_mask], axis=1)
    cls = T.reshape(params["cls"], (1, 1, d)) * np.ones((b, 1, 1))
    x = T.concat([cls, rows], axis=1)
    for layer in range(config.fusion_layers):
        p = f"fuse{layer}."
        last = layer == config.fusion_layers - 1
        # Only the CLS slot is read after the last layer, so it alone needs queries.
        q_in = x[:, :1] if last else x
        attn = multi_head_attention(q_in, x, params, p, config.heads, key_mask)
        h = T.layer_norm(q_in + attn, params[p + "ln1.g"], params[p + "ln1.b"])
        ff = T.relu(h @ params[p + "ffn.w1"] + params[p + "ffn.b1"]) @ params[p + "ffn.w2"] + params[p + "ffn.b2"]
        x = T.layer_norm(h + ff, params[p + "ln2.g"], params[p + "ln2.b"])
    cls_out = T.reshape(x[:, :1], (b, d))
    return cls_out @ params["clf.w"] + params["clf.b"]


def fuse_and_classify(selected, params: dict, config: ModelConfig) -> Tensor:
    """Logits (2,) for one selected feature set of shape (m, d)."""
    selected = T.as_tensor(selected)
    if selected.ndim != 2 or selected.shape[0] == 0:
        raise InternalError(f"fuse_and_classify needs a non-empty (m, d) set, got shape {selected.shape}")
    logits = fuse_and_classify_batch(T.reshape(selected, (1,) + selected.shape), params, config)
    return T.reshape(logits, (config.classifier_classes,))


def _single_modality_selection(pairs: Tensor):
    b = pairs.shape[0]
    ones = np.ones((b, 1))
    trace = GateTraceBatch(ones, np.zeros((b, 1), dtype=np.intp), np.zeros((b, 1)), ones.copy(),
                           np.ones((b, 1), dtype=bool), np.zeros((b, 1)))
    return pairs, np.ones((b, 1), dtype=bool), trace


def forward_batch(features: Mapping[str, np.ndarray], params: dict, config: ModelConfig,
                  rng: np.random.Generator | None, training: bool = False,
                  gumbels: np.ndarray | None = None) -> tuple[Tensor, GateTraceBatch]:
    """Logits (B, 2) and the gate trace for a batch of stacked features."""
    pairs = pair_vectors_batch(features, params, config)
    if config.n == 1:
        rows, key_mask, trace = _single_modality_selection(pairs)
    else:
        rows, key_mask, trace = two_pass_select_batch(pairs, config.gate, params, rng, training, gumbels)
    return fuse_and_classify_batch(rows, params, config, key_mask), trace


def stack_features(records: Sequence, config: ModelConfig) -> dict[str, np.ndarray]:
    """Stack per-record token matrices into (B, T, dim) arrays, validating shapes."""
    out = {}
    for name, dim in zip(config.modalities, config.input_dims):
        mats = []
        for rec in records:
            if name not in rec.features:
                raise DataError(f"record {rec.id!r} is missing modality {name!r}")
            mat = rec.features[name]
            if mat.shape != (config.tokens_per_modality, dim):
                raise DataError(f"record {rec.id!r} modality {name!r}: shape {mat.shape}, "
                                f"expected {(config.tokens_per_modality, dim)}")
            mats.append(mat)
        out[name] = np.stack(mats)
    return out


def forward(record, params: dict, config: ModelConfig, rng: np.random.Generator | None,
            mode: str = "eval", gumbels: np.ndarray | None = None) -> tuple[Tensor, GateTrace]:
    """Logits (2,) and gate trace for one record; ``mode`` is 'train' or 'eval'."""
    if mode not in ("train", "eval"):
        raise InvalidArgumentError(f"mode must be 'train' or 'eval', got {mode!r}")
    features = stack_features([record], config)
    logits, trace = forward_batch(features, params, config, rng, mode == "train",
                                  None if gumbels is None else np.asarray(gumbels).reshape(1, -1))
    return T.reshape(logits, (config.classifier_classes,)), trace[0]


def iter_batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield slice(start, min(n, start + batch_size))


def gate_dump(records: Sequence, params: dict, config: ModelConfig, rng: np.random.Generator,
              batch_size: int = 256) -> list[tuple[str, float, float, float]]:
    """Per-pair (label, mean alpha, mean z, retention frequency) in evaluation mode."""
    if not records:
        raise InvalidArgumentError("gate dump over an empty record slice")
    stats = RetentionStats(config.num_pairs)
    for sl in iter_batches(len(records), batch_size):
        _, trace = forward_batch(stack_features(records[sl], config), params, config, rng, training=False)
        stats.add(trace)
    return stats.rows(config.pair_labels())


def gate_dump_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["pair", "mean_alpha", "mean_z", "retention_freq"])
    for label, a, z, r in rows:
        writer.writerow([label, f"{a:.6f}", f"{z:.6f}", f"{r:.6f}"])
    return buf.getvalue()
