"""Transformer graph encoder over connectivity matrices.

The NxN connectivity matrix is the initial node-feature matrix (one row
per region, d_model = N). Each layer applies multi-head self-attention
with post-projection layer norm, then a two-layer feed-forward block with
its own layer norm; both blocks are purely post-norm, with no residual
connections. The final node features are flattened row-major into a
single graph-level feature row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffkernel as dk
from .connectome import ConnectivityMatrix
from .diffkernel import Value


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 116
    d_head: int | None = None  # defaults to d_model // n_heads
    ffn_hidden: int = 256
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.n_layers < 1 or self.n_heads < 1:
            raise ValueError("EncoderConfig needs at least one layer and one head")
        if self.d_model < 1 or self.ffn_hidden < 1:
            raise ValueError("EncoderConfig widths must be positive")
        if self.ln_eps <= 0:
            raise ValueError("EncoderConfig ln_eps must be positive")
        if self.d_head is not None and self.d_head < 1:
            raise ValueError("EncoderConfig d_head must be positive")

    @property
    def head_width(self) -> int:
        return self.d_head if self.d_head is not None else max(1, self.d_model // self.n_heads)


class EncoderParams:
    """All learnable encoder weights, keyed by dotted name."""

    def __init__(self, config: EncoderConfig, values: dict[str, Value]):
        self.config = config
        self.values = values

    def __getitem__(self, name: str) -> Value:
        return self.values[name]

    def all_values(self) -> list[Value]:
        return list(self.values.values())


class AttentionMaps:
    """Row-stochastic attention matrices indexed by (layer, head)."""

    def __init__(self) -> None:
        self._maps: dict[tuple[int, int], np.ndarray] = {}

    def put(self, layer: int, head: int, scores: np.ndarray) -> None:
        sums = scores.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-9 or scores.min() < 0:
            raise ValueError(f"attention map ({layer},{head}) is not row-stochastic")
        self._maps[(layer, head)] = scores

    def get(self, layer: int, head: int) -> np.ndarray:
        return self._maps[(layer, head)]

    def keys(self):
        return sorted(self._maps.keys())

    def stack(self) -> np.ndarray:
        """All maps as one (n_maps, N, N) array in (layer, head) order."""
        return np.stack([self._maps[k] for k in self.keys()])

    def __len__(self) -> int:
        return len(self._maps)


@dataclass(frozen=True)
class AugmentInjection:
    """Feature-mixing instruction: before layer `layer_index`, move the
    subject's features a fraction `gamma` of the way toward
    `partner_features` (another subject's features at the same depth)."""

    layer_index: int
    partner_features: Value
    gamma: float

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")


def init_encoder(config: EncoderConfig, seed: int) -> EncoderParams:
    """Uniform Xavier initialization for weight matrices; layer-norm gains 1,
    offsets and biases 0. Deterministic given the seed."""
    rng = np.random.default_rng(seed)
    values: dict[str, Value] = {}

    def xavier(name: str, fan_in: int, fan_out: int) -> None:
        a = math.sqrt(6.0 / (fan_in + fan_out))
        values[name] = Value(rng.uniform(-a, a, size=(fan_in, fan_out)))

    d, dk_, h = config.d_model, config.head_width, config.n_heads
    for layer in range(config.n_layers):
        p = f"layer{layer}"
        for head in range(h):
            xavier(f"{p}.head{head}.WQ", d, dk_)
            xavier(f"{p}.head{head}.WK", d, dk_)
            xavier(f"{p}.head{head}.WV", d, dk_)
        xavier(f"{p}.W", h * dk_, d)
        values[f"{p}.ln1.g"] = Value(np.ones((1, d)))
        values[f"{p}.ln1.b"] = Value(np.zeros((1, d)))
        xavier(f"{p}.W1", d, config.ffn_hidden)
        values[f"{p}.b1"] = Value(np.zeros((1, config.ffn_hidden)))
        xavier(f"{p}.W2", config.ffn_hidden, d)
        values[f"{p}.b2"] = Value(np.zeros((1, d)))
        values[f"{p}.ln2.g"] = Value(np.ones((1, d)))
        values[f"{p}.ln2.b"] = Value(np.zeros((1, d)))
    return EncoderParams(config, values)


def attention_head(z: Value, wq: Value, wk: Value, wv: Value) -> tuple[Value, Value]:
    """Single attention head: returns (weighted value projection, score matrix)."""
    d_head = wq.shape[1]
    q = dk.matmul(z, wq)
    k = dk.matmul(z, wk)
    scores = dk.row_softmax(dk.matmul(q, dk.transpose(k)), scale=1.0 / math.sqrt(d_head))
    out = dk.matmul(scores, dk.matmul(z, wv))
    return out, scores


def multi_head_layer(z: Value, params: EncoderParams, layer: int,
                     maps: AttentionMaps | None = None) -> Value:
    """Concatenate all head outputs, project back to d_model, layer-normalize."""
    cfg = params.config
    p = f"layer{layer}"
    heads = []
    for head in range(cfg.n_heads):
        out, scores = attention_head(
            z, params[f"{p}.head{head}.WQ"], params[f"{p}.head{head}.WK"],
            params[f"{p}.head{head}.WV"])
        if maps is not None:
            maps.put(layer, head, scores.data)
        heads.append(out)
    projected = dk.matmul(dk.concat_cols(heads), params[f"{p}.W"])
    return dk.row_layer_norm(projected, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"], cfg.ln_eps)


def feed_forward(z: Value, params: EncoderParams, layer: int) -> Value:
    cfg = params.config
    p = f"layer{layer}"
    hidden = dk.relu(dk.affine(z, params[f"{p}.W1"], params[f"{p}.b1"]))
    out = dk.affine(hidden, params[f"{p}.W2"], params[f"{p}.b2"])
    return dk.row_layer_norm(out, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"], cfg.ln_eps)


def _mix(own: Value, partner: Value, gamma: float) -> Value:
    # exact endpoints: gamma 0 keeps the subject, gamma 1 becomes the partner
    if gamma == 0.0:
        return own
    if gamma == 1.0:
        return partner
    return dk.add(dk.scale(own, 1.0 - gamma), dk.scale(partner, gamma))


def encode(
    x: ConnectivityMatrix | np.ndarray | Value,
    params: EncoderParams,
    injection: AugmentInjection | None = None,
    capture: list[Value] | None = None,
) -> tuple[Value, AttentionMaps]:
    """Run the full encoder; returns the flattened graph feature and all
    attention maps.

    If `injection` is given, the features entering layer `injection.layer_index`
    are first blended toward the partner features. If `capture` is a list, the
    unblended input features of every layer are appended to it (these are what
    a partner subject contributes at each depth).
    """
    if isinstance(x, ConnectivityMatrix):
        z = Value(x.values)
    elif isinstance(x, Value):
        z = x
    else:
        z = Value(np.asarray(x))
    cfg = params.config
    if z.shape != (cfg.d_model, cfg.d_model):
        raise ValueError(
            f"encoder expects a {cfg.d_model}x{cfg.d_model} input, got {z.shape}")
    if injection is not None and not 0 <= injection.layer_index < cfg.n_layers:
        raise ValueError(f"injection layer {injection.layer_index} out of range")
    maps = AttentionMaps()
    for layer in range(cfg.n_layers):
        if capture is not None:
            capture.append(z)
        if injection is not None and injection.layer_index == layer:
            z = _mix(z, injection.partner_features, injection.gamma)
        z = multi_head_layer(z, params, layer, maps)
        z = feed_forward(z, params, layer)
    return dk.flatten(z), maps
