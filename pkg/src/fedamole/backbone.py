"""Small frozen decoder-only transformer with adapter hooks on Q and V.

Pre-norm blocks (RMSNorm), causal multi-head attention, a GeLU feed-forward
and learned absolute position embeddings. No biases. Every weight is a
non-trainable :class:`~fedamole.numcore.Parameter`; fine-tuning happens
only through the adapters passed to :func:`forward`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Mapping, NamedTuple

import numpy as np

from . import numcore as nc
from .errors import ConfigError
from .numcore import Parameter, Tensor

__all__ = [
    "BackboneConfig",
    "Backbone",
    "InjectionPoint",
    "ForwardResult",
    "Adapter",
    "init_backbone",
    "injection_points",
    "parameter_count",
    "forward",
    "checksum",
]


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int = 64
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 64
    max_seq_len: int = 64
    seed: int = 0

    def validate(self) -> None:
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", key=f"backbone.{name}")
        if self.d_model % self.n_heads:
            raise ConfigError("must be divisible by n_heads", key="backbone.d_model")


class InjectionPoint(NamedTuple):
    """Where an adapter replaces a linear projection: ``(layer, "q"|"v")``."""

    layer: int
    kind: str

    def __str__(self) -> str:
        return f"layer{self.layer}.{self.kind}"

    @classmethod
    def parse(cls, text: str) -> InjectionPoint:
        layer, kind = text.split(".")
        return cls(int(layer.removeprefix("layer")), kind)


def injection_points(cfg: BackboneConfig) -> list[InjectionPoint]:
    return [InjectionPoint(layer, kind) for layer in range(cfg.n_layers) for kind in ("q", "v")]


@dataclass
class Layer:
    attn_norm: Parameter
    wq: Parameter
    wk: Parameter
    wv: Parameter
    wo: Parameter
    ffn_norm: Parameter
    w_up: Parameter
    w_down: Parameter


@dataclass
class Backbone:
    config: BackboneConfig
    token_embedding: Parameter
    position_embedding: Parameter
    layers: list[Layer]
    final_norm: Parameter
    head: Parameter
    points: list[InjectionPoint] = field(default_factory=list)

    def parameters(self) -> list[Parameter]:
        params = [self.token_embedding, self.position_embedding]
        for layer in self.layers:
            params.extend(vars(layer).values())
        params.extend([self.final_norm, self.head])
        return params

    def projection(self, point: InjectionPoint) -> Parameter:
        """The frozen weight ``W`` (``[d_out, d_in]``) at an injection point."""
        layer = self.layers[point.layer]
        return layer.wq if point.kind == "q" else layer.wv


def init_backbone(cfg: BackboneConfig) -> Backbone:
    """Deterministically initialise a frozen backbone from ``cfg.seed``."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 0xBAC4B0])
    d, ff, V = cfg.d_model, cfg.d_ff, cfg.vocab_size

    def frozen(shape, std):
        return Parameter(rng.normal(0.0, std, size=shape), trainable=False)

    def ones(n):
        return Parameter(np.ones(n), trainable=False)

    tok = frozen((V, d), 1.0)
    pos = frozen((cfg.max_seq_len, d), 0.5)
    layers = [
        Layer(
            attn_norm=ones(d),
            wq=frozen((d, d), d**-0.5),
            wk=frozen((d, d), d**-0.5),
            wv=frozen((d, d), d**-0.5),
            wo=frozen((d, d), d**-0.5),
            ffn_norm=ones(d),
            w_up=frozen((ff, d), d**-0.5),
            w_down=frozen((d, ff), ff**-0.5),
        )
        for _ in range(cfg.n_layers)
    ]
    head = frozen((V, d), d**-0.5)
    return Backbone(cfg, tok, pos, layers, ones(d), head, injection_points(cfg))


def parameter_count(cfg: BackboneConfig) -> int:
    """Closed-form number of scalars in a backbone built from ``cfg``."""
    d, ff, V, T = cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.max_seq_len
    per_layer = 4 * d * d + 2 * d * ff + 2 * d
    return V * d + T * d + cfg.n_layers * per_layer + d + V * d


def checksum(backbone: Backbone) -> str:
    h = hashlib.sha256()
    for p in backbone.parameters():
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


Adapter = Callable[[Tensor, Parameter], Tensor]
"""Maps the hidden state ``h`` (``[T, d]``) and frozen ``W`` to the output ``y``."""


class ForwardResult(NamedTuple):
    logits: Tensor
    hidden: dict[InjectionPoint, Tensor]


def _linear(x: Tensor, w: Parameter) -> Tensor:
    return nc.matmul(x, nc.transpose(w))


def forward(
    backbone: Backbone,
    tokens,
    adapters: Mapping[InjectionPoint, Adapter] | None = None,
) -> ForwardResult:
    """Run the causal LM on one token sequence.

    Args:
        backbone: frozen model.
        tokens: ``T`` token ids, ``T <= max_seq_len``.
        adapters: optional callbacks keyed by injection point. Points without
            one use the plain projection ``h @ W.T``.

    Returns:
        ``[T, V]`` logits and, for every injection point, the hidden state
        fed into that projection.
    """
    cfg = backbone.config
    tokens = np.asarray(tokens, dtype=np.int64)
    T = tokens.shape[0]
    if T < 1 or T > cfg.max_seq_len:
        raise ValueError(f"sequence length {T} outside [1, {cfg.max_seq_len}]")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError("token id outside the vocabulary")
    adapters = adapters or {}
    H = cfg.n_heads
    dh = cfg.d_model // H
    causal = np.tril(np.ones((T, T), dtype=bool))
    hidden: dict[InjectionPoint, Tensor] = {}

    x = nc.embedding(backbone.token_embedding, tokens) + nc.embedding(
        backbone.position_embedding, np.arange(T)
    )
    for index, layer in enumerate(backbone.layers):
        h = nc.rms_norm(x, layer.attn_norm)
        projected = {}
        for kind, w in (("q", layer.wq), ("v", layer.wv)):
            point = InjectionPoint(index, kind)
            hidden[point] = h
            adapter = adapters.get(point)
            projected[kind] = adapter(h, w) if adapter is not None else _linear(h, w)
        k = _linear(h, layer.wk)
        heads = []
        for head in range(H):
            lo, hi = head * dh, (head + 1) * dh
            qh = nc.columns(projected["q"], lo, hi)
            kh = nc.columns(k, lo, hi)
            vh = nc.columns(projected["v"], lo, hi)
            scores = nc.matmul(qh, nc.transpose(kh)) * (dh**-0.5)
            heads.append(nc.matmul(nc.softmax_rows(scores, causal), vh))
        attn = heads[0] if H == 1 else nc.concat_columns(heads)
        x = x + _linear(attn, layer.wo)
        h2 = nc.rms_norm(x, layer.ffn_norm)
        x = x + _linear(nc.gelu(_linear(h2, layer.w_up)), layer.w_down)
    logits = _linear(nc.rms_norm(x, backbone.final_norm), backbone.head)
    return ForwardResult(logits, hidden)
