"""Heterogeneous mixture-of-LoRA-experts adapter.

One :class:`HMoLEModuleState` replaces one frozen projection ``W``. Its
router is a token projection ``W^t`` of shape ``[r, d]``: tokens and experts
are compared in the rank-``r`` space, so the router never depends on how
many experts a client holds and can be averaged across clients as-is.

The vanilla MoLE router (a ``[N_total, d]`` linear layer, masked to the
assigned experts) is kept for the router ablation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numcore as nc
from .errors import ConfigError
from .numcore import Parameter, Tensor

__all__ = [
    "LoRAExpert",
    "SharedExpert",
    "TokenProjection",
    "VanillaRouter",
    "HMoLEModuleState",
    "RoutingDecision",
    "ModuleOutput",
    "LoadBalanceStats",
    "EmbeddingSums",
    "ModuleAdapter",
    "top_k_mask",
    "route_token",
    "hmole_forward",
    "vanilla_mole_forward",
    "load_balance_stats",
    "load_balance_loss",
    "collect_embedding_sums",
]


def _lora_a(rng: np.random.Generator, rank: int, d_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(d_in)
    return rng.uniform(-bound, bound, size=(rank, d_in))


@dataclass
class LoRAExpert:
    """Domain expert ``B @ A`` with ``A: [r, d_in]`` and ``B: [d_out, r]``."""

    expert_id: int
    A: Parameter
    B: Parameter
    scaling: float = 1.0

    @classmethod
    def create(cls, expert_id, d_in, d_out, rank, scaling, rng) -> LoRAExpert:
        # B starts at zero so a fresh expert contributes nothing.
        return cls(expert_id, Parameter(_lora_a(rng, rank, d_in)), Parameter(np.zeros((d_out, rank))), scaling)

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    def delta(self, h: Tensor) -> Tensor:
        return nc.matmul(nc.matmul(h, self.A.T), self.B.T) * self.scaling

    def parameters(self) -> list[Parameter]:
        return [self.A, self.B]


@dataclass
class SharedExpert:
    A: Parameter
    B: Parameter
    scaling: float = 1.0

    @classmethod
    def create(cls, d_in, d_out, rank, scaling, rng) -> SharedExpert:
        return cls(Parameter(_lora_a(rng, rank, d_in)), Parameter(np.zeros((d_out, rank))), scaling)

    def delta(self, h: Tensor) -> Tensor:
        return nc.matmul(nc.matmul(h, self.A.T), self.B.T) * self.scaling

    def parameters(self) -> list[Parameter]:
        return [self.A, self.B]


@dataclass
class TokenProjection:
    W: Parameter  # [r, d]

    @classmethod
    def create(cls, d_in, rank, rng) -> TokenProjection:
        return cls(Parameter(rng.normal(0.0, d_in**-0.5, size=(rank, d_in))))


@dataclass
class VanillaRouter:
    """Linear router over the whole expert pool (``[N_total, d]``)."""

    W: Parameter

    @classmethod
    def create(cls, n_total, d_in, rng) -> VanillaRouter:
        return cls(Parameter(rng.normal(0.0, d_in**-0.5, size=(n_total, d_in))))


@dataclass
class HMoLEModuleState:
    """A client's adapter for one injection point.

    Exactly one of ``projection`` (HMoLE routing) and ``router`` (vanilla
    MoLE routing) is set. ``experts`` is kept sorted by expert id.
    """

    module_id: str
    experts: list[LoRAExpert]
    top_k: int
    projection: TokenProjection | None = None
    shared: SharedExpert | None = None
    router: VanillaRouter | None = None
    dropout: float = 0.0

    def __post_init__(self):
        self.experts = sorted(self.experts, key=lambda e: e.expert_id)
        ids = self.expert_ids
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate expert ids {ids}", key="hmole.experts")
        if (self.projection is None) == (self.router is None):
            raise ConfigError("set exactly one of projection and router", key="hmole.router")
        if self.top_k < 1:
            raise ConfigError("must be >= 1", key="hmole.k_e")

    @property
    def expert_ids(self) -> list[int]:
        return [e.expert_id for e in self.experts]

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        if self.shared is not None:
            params += self.shared.parameters()
        if self.projection is not None:
            params.append(self.projection.W)
        if self.router is not None:
            params.append(self.router.W)
        for expert in self.experts:
            params += expert.parameters()
        return params

    def check_routable(self) -> None:
        if len(self.experts) < self.top_k:
            raise ConfigError(
                f"module {self.module_id} has {len(self.experts)} experts, needs >= k_e={self.top_k}",
                key="hmole.k_e",
            )


@dataclass
class RoutingDecision:
    expert_ids: list[int]
    probs: np.ndarray
    selected: tuple[int, ...]


@dataclass
class ModuleOutput:
    """Everything one adapter call produces for ``T`` tokens.

    ``probs`` and ``selected`` are ``[T, E]`` with columns in expert-id order.
    ``token_embeddings`` is ``None`` for the vanilla router.
    """

    y: Tensor
    probs: Tensor
    selected: np.ndarray
    token_embeddings: Tensor | None
    expert_embeddings: list[Tensor]


def top_k_mask(probs: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the ``k`` largest entries per row; ties go to the lower column."""
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    mask = np.zeros(probs.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask


def _as_rows(h) -> Tensor:
    h = h if isinstance(h, Tensor) else Tensor(h)
    return nc.reshape(h, (1, -1)) if h.data.ndim == 1 else h


def _combine(state, W, h, probs, expert_embeddings, token_embeddings, rng) -> ModuleOutput:
    selected = top_k_mask(probs.data, state.top_k)
    y = nc.matmul(h, nc.transpose(W))
    if state.shared is not None:
        y = y + state.shared.delta(h)
    gate = nc.mul(probs, selected.astype(np.float64))
    h_in = h
    if state.dropout > 0.0 and rng is not None:
        h_in = nc.dropout(h, state.dropout, rng)
    for col, expert in enumerate(state.experts):
        if not selected[:, col].any():
            continue
        a_out = expert_embeddings[col] if h_in is h else nc.matmul(h_in, expert.A.T)
        feature = nc.matmul(a_out, expert.B.T) * expert.scaling
        y = y + nc.mul(nc.columns(gate, col, col + 1), feature)
    return ModuleOutput(y, probs, selected, token_embeddings, expert_embeddings)


def hmole_forward(
    state: HMoLEModuleState, W, h, rng: np.random.Generator | None = None
) -> ModuleOutput:
    """Adapter output ``y = W h + B^s A^s h + sum_{j in top-k} p_j B_j A_j h``.

    Routing probabilities come from scaled dot products between the token
    embedding ``W^t h`` and each expert embedding ``A_j h``, divided by
    ``sqrt(d)``. The selected probabilities are used as-is, without
    renormalising over the top-k subset.

    Args:
        state: the module; vanilla-router states are delegated to
            :func:`vanilla_mole_forward`.
        W: frozen projection ``[d_out, d]``.
        h: hidden states ``[T, d]`` (a single ``[d]`` vector is accepted).
        rng: dropout stream; dropout is skipped when ``None``.
    """
    if state.router is not None:
        return vanilla_mole_forward(state, W, h, rng)
    state.check_routable()
    h = _as_rows(h)
    W = W if isinstance(W, Tensor) else Tensor(W)
    d = h.shape[1]
    token_emb = nc.matmul(h, state.projection.W.T)
    expert_emb = [nc.matmul(h, expert.A.T) for expert in state.experts]
    logits = nc.concat_columns([nc.sum_rows(nc.mul(token_emb, e)) for e in expert_emb])
    probs = nc.softmax_rows(logits * (1.0 / np.sqrt(d)))
    return _combine(state, W, h, probs, expert_emb, token_emb, rng)


def vanilla_mole_forward(
    state: HMoLEModuleState, W, h, rng: np.random.Generator | None = None
) -> ModuleOutput:
    """MoLE routing with a fixed-width router restricted to the assigned experts.

    Router logits for unassigned experts are masked out before the softmax,
    so the probabilities over assigned experts sum to one.
    """
    state.check_routable()
    h = _as_rows(h)
    W = W if isinstance(W, Tensor) else Tensor(W)
    n_total = state.router.W.shape[0]
    ids = state.expert_ids
    if ids and max(ids) >= n_total:
        raise ConfigError(f"expert id {max(ids)} outside router width {n_total}", key="hmole.e_total")
    assigned = np.zeros(n_total, dtype=bool)
    assigned[ids] = True
    full = nc.softmax_rows(nc.matmul(h, state.router.W.T), assigned[None, :])
    pick = np.zeros((n_total, len(ids)))
    pick[ids, np.arange(len(ids))] = 1.0
    probs = nc.matmul(full, Tensor(pick))
    expert_emb = [nc.matmul(h, expert.A.T) for expert in state.experts]
    return _combine(state, W, h, probs, expert_emb, None, rng)


def route_token(state: HMoLEModuleState, h) -> RoutingDecision:
    """Routing probabilities and the selected experts for a single token."""
    h = np.asarray(h.data if isinstance(h, Tensor) else h, dtype=np.float64).reshape(1, -1)
    out = hmole_forward(state, np.zeros((1, h.shape[1])), h)
    probs = out.probs.data[0]
    ids = state.expert_ids
    selected = tuple(ids[c] for c in np.argsort(-probs, kind="stable")[: state.top_k])
    return RoutingDecision(ids, probs.copy(), selected)


@dataclass
class LoadBalanceStats:
    """Per-module routing statistics over a batch of tokens.

    ``f_bar`` (argmax fractions) is a constant; ``p_bar`` (mean
    probabilities, ``[1, E]``) stays differentiable.
    """

    f_bar: np.ndarray
    p_bar: Tensor

    @property
    def n_experts(self) -> int:
        return len(self.f_bar)


def load_balance_stats(output: ModuleOutput) -> LoadBalanceStats:
    probs = output.probs
    T, E = probs.shape
    if T == 0:
        raise ValueError("load-balance statistics need at least one token")
    winners = np.argmax(probs.data, axis=1)
    f_bar = np.bincount(winners, minlength=E) / T
    return LoadBalanceStats(f_bar, nc.mean_rows(probs))


def load_balance_loss(stats: Mapping[str, LoadBalanceStats]) -> Tensor:
    """Sum over modules of ``|E| * sum_j f_bar_j * p_bar_j``."""
    if not stats:
        raise ValueError("load_balance_loss needs at least one module")
    loss = None
    for s in stats.values():
        p_bar = s.p_bar if isinstance(s.p_bar, Tensor) else Tensor(np.atleast_2d(s.p_bar))
        term = nc.total(nc.mul(p_bar, np.atleast_2d(s.f_bar))) * float(s.n_experts)
        loss = term if loss is None else loss + term
    return loss


@dataclass
class EmbeddingSums:
    """Running sums of token and expert embeddings for exact means.

    For vanilla-router modules ``token_sum`` accumulates the raw hidden
    state and ``expert_sums`` stays empty.
    """

    token_sum: np.ndarray
    expert_sums: dict[int, np.ndarray] = field(default_factory=dict)
    count: int = 0

    def __add__(self, other: EmbeddingSums) -> EmbeddingSums:
        experts = dict(self.expert_sums)
        for key, value in other.expert_sums.items():
            experts[key] = experts[key] + value if key in experts else value.copy()
        return EmbeddingSums(self.token_sum + other.token_sum, experts, self.count + other.count)

    def token_mean(self) -> np.ndarray:
        if self.count == 0:
            raise ValueError("no tokens collected")
        return self.token_sum / self.count

    def expert_means(self) -> dict[int, np.ndarray]:
        if self.count == 0:
            raise ValueError("no tokens collected")
        return {key: value / self.count for key, value in self.expert_sums.items()}


def collect_embedding_sums(state: HMoLEModuleState, hidden) -> EmbeddingSums:
    """Sum ``W^t h`` and every ``A_j h`` over the rows of ``hidden`` (``[T, d]``)."""
    h = np.atleast_2d(np.asarray(hidden.data if isinstance(hidden, Tensor) else hidden, dtype=np.float64))
    if h.shape[0] == 0:
        raise ValueError("collect_embedding_sums needs at least one token")
    if state.projection is None:
        return EmbeddingSums(h.sum(axis=0), {}, h.shape[0])
    token_sum = (h @ state.projection.W.data.T).sum(axis=0)
    experts = {e.expert_id: (h @ e.A.data.T).sum(axis=0) for e in state.experts}
    return EmbeddingSums(token_sum, experts, h.shape[0])


class ModuleAdapter:
    """Backbone adapter callback that remembers its last :class:`ModuleOutput`."""

    def __init__(self, state: HMoLEModuleState, rng: np.random.Generator | None = None):
        self.state = state
        self.rng = rng
        self.last: ModuleOutput | None = None

    def __call__(self, h: Tensor, W) -> Tensor:
        self.last = hmole_forward(self.state, W, h, self.rng)
        return self.last.y


def adapters_for(states: Mapping, rng: np.random.Generator | None = None) -> dict:
    return {point: ModuleAdapter(state, rng) for point, state in states.items()}


def all_parameters(states: Sequence[HMoLEModuleState]) -> list[Parameter]:
    return [p for s in states for p in s.parameters()]
