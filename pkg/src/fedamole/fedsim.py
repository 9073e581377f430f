"""Round-based federated fine-tuning simulator.

One round: the server broadcasts the shared expert, token projection and
each client's assigned domain experts; clients fine-tune locally, compute
embeddings on their embedding set and upload; the server averages
parameters and embeddings, evaluates every client's model and solves the
next expert assignment.

Modes:

``fedamole``   HMoLE modules with embedding-driven assignment.
``fedit``      one LoRA adapter per module shared by every client.
``fedit_ft``   ``fedit`` plus a final local fine-tuning pass.
``ablate-h``   vanilla fixed-width MoLE router instead of the token projection.
``ablate-s``   no shared expert.
``ablate-r``   round-1 assignment kept for every round.
``random``     a fresh random feasible assignment each round.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numcore as nc
from .backbone import Backbone, InjectionPoint, forward, init_backbone
from .config import ExperimentConfig
from .data import (
    ClientData,
    Example,
    generate_corpus,
    partition_dirichlet,
    partition_iid,
    partition_task_skew,
    sample_embedding_set,
)
from .errors import ConfigError, ProtocolError
from .evalkit import MetricLog, MetricRecord, exact_match_accuracy, rouge_l
from .hmole import (
    HMoLEModuleState,
    LoRAExpert,
    ModuleAdapter,
    SharedExpert,
    TokenProjection,
    VanillaRouter,
    collect_embedding_sums,
    load_balance_loss,
    load_balance_stats,
)
from .privacy import DPConfig, privatize
from .rsea import (
    AssignmentProblem,
    assignment_from_plan,
    audit_assignment,
    check_feasible,
    plan_from_assignment,
    relevance,
    selection_probabilities,
    solve_assignment,
)

__all__ = [
    "RoundPlan",
    "AssignmentSettings",
    "GlobalModule",
    "ServerState",
    "ClientState",
    "ModuleUpdate",
    "UpdatePackage",
    "assignment_settings",
    "initial_assignment",
    "audit_plan",
    "build_modules",
    "local_finetune",
    "compute_client_embeddings",
    "make_package",
    "aggregate",
    "evaluate_client",
    "greedy_decode",
    "Federation",
    "run_round",
    "run_training",
]

log = logging.getLogger(__name__)

RoundPlan = dict[str, dict[int, list[int]]]
"""Per module id: client id -> sorted expert ids for the round."""

Emit = Callable[[dict], None]


@dataclass(frozen=True)
class AssignmentSettings:
    n_clients: int
    e_total: int
    k_e: int
    k_c: int
    b: int


def assignment_settings(cfg: ExperimentConfig, mode: str) -> AssignmentSettings:
    """Assignment sizes for ``mode``; the FedIT modes use one expert on every client."""
    C = cfg.federation.n_clients
    if mode in ("fedit", "fedit_ft"):
        return AssignmentSettings(C, 1, 1, C, 1)
    h = cfg.hmole
    return AssignmentSettings(C, h.e_total, h.k_e, h.k_c, h.b)


def initial_assignment(settings: AssignmentSettings, module_ids: Sequence[str]) -> RoundPlan:
    """Deal experts to clients cyclically until each expert has ``k_c`` clients.

    Cyclic dealing keeps client loads within one of each other, which
    satisfies ``[k_e, b]`` whenever the problem is feasible.
    """
    s = settings
    check_feasible(s.n_clients, s.e_total, s.k_e, s.k_c, s.b)
    D = np.zeros((s.n_clients, s.e_total), dtype=np.int8)
    cursor = 0
    for j in range(s.e_total):
        for _ in range(s.k_c):
            D[cursor % s.n_clients, j] = 1
            cursor += 1
    problems = audit_assignment(D, s.k_e, s.k_c, s.b)
    if problems:
        raise ProtocolError(f"round-robin assignment violates constraints: {problems}")
    return plan_from_assignment({m: D for m in module_ids})


def audit_plan(plan: RoundPlan, settings: AssignmentSettings) -> list[str]:
    issues = []
    for module, assignment in plan.items():
        D = assignment_from_plan(assignment, settings.n_clients, settings.e_total)
        issues += [f"{module}: {p}" for p in audit_assignment(D, settings.k_e, settings.k_c, settings.b)]
    return issues


@dataclass
class GlobalModule:
    """Server copy of one injection point's trainable state (plain arrays)."""

    module_id: str
    experts: dict[int, dict[str, np.ndarray]]
    shared: dict[str, np.ndarray] | None = None
    projection: np.ndarray | None = None
    router: np.ndarray | None = None
    expert_embeddings: dict[int, np.ndarray] = field(default_factory=dict)
    client_embeddings: dict[int, np.ndarray] = field(default_factory=dict)


@dataclass
class ServerState:
    modules: dict[str, GlobalModule]
    plan: RoundPlan
    settings: AssignmentSettings
    assignments: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class ClientState:
    client_id: int
    data: ClientData
    modules: dict[InjectionPoint, HMoLEModuleState] = field(default_factory=dict)
    optimizer: nc.AdamState | None = None


@dataclass
class ModuleUpdate:
    experts: dict[int, dict[str, np.ndarray]]
    shared: dict[str, np.ndarray] | None = None
    projection: np.ndarray | None = None
    router: np.ndarray | None = None
    token_embedding: np.ndarray | None = None
    expert_embeddings: dict[int, np.ndarray] = field(default_factory=dict)


@dataclass
class UpdatePackage:
    client_id: int
    modules: dict[str, ModuleUpdate]
    losses: list[float] = field(default_factory=list)


def _init_global_modules(backbone: Backbone, cfg: ExperimentConfig, mode: str, settings: AssignmentSettings, seed: int):
    h = cfg.hmole
    rng = np.random.default_rng([seed, 0x6E0])
    d = backbone.config.d_model
    modules = {}
    for point in backbone.points:
        d_out = backbone.projection(point).shape[0]
        experts = {}
        for j in range(settings.e_total):
            e = LoRAExpert.create(j, d, d_out, h.rank, h.scaling, rng)
            experts[j] = {"A": e.A.data, "B": e.B.data}
        gm = GlobalModule(str(point), experts)
        if mode not in ("fedit", "fedit_ft", "ablate-s"):
            s = SharedExpert.create(d, d_out, h.rank, h.scaling, rng)
            gm.shared = {"A": s.A.data, "B": s.B.data}
        if mode == "ablate-h":
            gm.router = VanillaRouter.create(settings.e_total, d, rng).W.data
        else:
            gm.projection = TokenProjection.create(d, h.rank, rng).W.data
        modules[str(point)] = gm
    return modules


def build_modules(
    server: ServerState, backbone: Backbone, client_id: int, cfg: ExperimentConfig, mode: str
) -> dict[InjectionPoint, HMoLEModuleState]:
    """Fresh trainable copies of the global state for one client's assignment."""
    h = cfg.hmole
    top_k = 1 if mode in ("fedit", "fedit_ft") else h.k_e
    states = {}
    for point in backbone.points:
        gm = server.modules[str(point)]
        ids = server.plan[str(point)][client_id]
        experts = [
            LoRAExpert(j, nc.Parameter(gm.experts[j]["A"].copy()), nc.Parameter(gm.experts[j]["B"].copy()), h.scaling)
            for j in ids
        ]
        shared = None
        if gm.shared is not None:
            shared = SharedExpert(nc.Parameter(gm.shared["A"].copy()), nc.Parameter(gm.shared["B"].copy()), h.scaling)
        states[point] = HMoLEModuleState(
            module_id=str(point),
            experts=experts,
            top_k=top_k,
            projection=TokenProjection(nc.Parameter(gm.projection.copy())) if gm.projection is not None else None,
            shared=shared,
            router=VanillaRouter(nc.Parameter(gm.router.copy())) if gm.router is not None else None,
            dropout=h.dropout,
        )
    return states


def _all_params(client: ClientState) -> list[nc.Parameter]:
    return [p for state in client.modules.values() for p in state.parameters()]


def sequence_loss(
    backbone: Backbone,
    modules: Mapping[InjectionPoint, HMoLEModuleState],
    example: Example,
    beta: float,
    rng: np.random.Generator | None = None,
) -> tuple[nc.Tensor, nc.Tensor]:
    """``(total, nll)`` for one sequence: response-token NLL plus ``beta`` times load balance."""
    adapters = {point: ModuleAdapter(state, rng) for point, state in modules.items()}
    tokens = example.tokens
    logits = forward(backbone, tokens[:-1], adapters).logits
    nll = nc.nll_token_loss(logits, tokens[1:], example.loss_mask())
    if beta == 0.0 or not adapters:
        return nll, nll
    stats = {str(point): load_balance_stats(a.last) for point, a in adapters.items()}
    return nll + load_balance_loss(stats) * beta, nll


def local_finetune(
    client: ClientState,
    backbone: Backbone,
    steps: int,
    lr: float,
    beta: float,
    rng: np.random.Generator,
) -> list[float]:
    """``steps`` Adam updates on single training sequences; returns the NLL per step.

    Optimizer moments are reset here because the client's expert set, and
    so its parameter list, can change every round.
    """
    if not client.data.train:
        raise ValueError(f"client {client.client_id} has an empty training set")
    params = _all_params(client)
    client.optimizer = nc.AdamState(lr=lr)
    losses = []
    for _ in range(steps):
        example = client.data.train[int(rng.integers(len(client.data.train)))]
        with nc.Tape() as tape:
            loss, nll = sequence_loss(backbone, client.modules, example, beta, rng)
        nc.backward(loss, tape)
        nc.adam_step(params, client.optimizer)
        losses.append(float(nll.data))
    return losses


@dataclass
class ClientEmbeddings:
    token: np.ndarray
    experts: dict[int, np.ndarray]


def compute_client_embeddings(client: ClientState, backbone: Backbone) -> dict[str, ClientEmbeddings]:
    """Exact token-level means of ``W^t h`` and each ``A_j h`` over the embedding set.

    Modules with a vanilla router report the mean hidden state instead and
    no expert embeddings.
    """
    if not client.data.embedding:
        raise ValueError(f"client {client.client_id} has an empty embedding set")
    totals = {}
    adapters = {point: ModuleAdapter(state) for point, state in client.modules.items()}
    for example in client.data.embedding:
        hidden = forward(backbone, example.tokens, adapters).hidden
        for point, state in client.modules.items():
            sums = collect_embedding_sums(state, hidden[point])
            key = str(point)
            totals[key] = sums if key not in totals else totals[key] + sums
    return {key: ClientEmbeddings(s.token_mean(), s.expert_means()) for key, s in totals.items()}


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


def make_package(
    client: ClientState,
    embeddings: Mapping[str, ClientEmbeddings] | None,
    dp: DPConfig,
    rng: np.random.Generator,
    losses: Sequence[float] = (),
) -> UpdatePackage:
    """Collect fine-tuned parameters and (optionally privatized) embeddings."""
    modules = {}
    for point, state in client.modules.items():
        key = str(point)
        update = ModuleUpdate(experts={e.expert_id: {"A": e.A.data.copy(), "B": e.B.data.copy()} for e in state.experts})
        if state.shared is not None:
            update.shared = {"A": state.shared.A.data.copy(), "B": state.shared.B.data.copy()}
        if state.projection is not None:
            update.projection = state.projection.W.data.copy()
        if state.router is not None:
            update.router = state.router.W.data.copy()
        if embeddings is not None:
            emb = embeddings[key]
            if dp.enabled:
                update.token_embedding = privatize(_unit(emb.token), dp, rng)
                update.expert_embeddings = {j: privatize(_unit(v), dp, rng) for j, v in sorted(emb.experts.items())}
            else:
                update.token_embedding = emb.token
                update.expert_embeddings = dict(emb.experts)
        modules[key] = update
    return UpdatePackage(client.client_id, modules, list(losses))


def _mean(arrays: Sequence[np.ndarray]) -> np.ndarray:
    return np.mean(np.stack(arrays), axis=0)


def aggregate(server: ServerState, packages: Sequence[UpdatePackage]) -> None:
    """Average uploads into the server state.

    Domain experts are averaged over the clients that trained them, the
    shared expert, token projection and router over all clients, and
    expert embeddings over each expert's clients.

    Raises:
        ProtocolError: a client's package is missing, or an expert shows up
            in a package other than those of its assigned clients.
    """
    by_client = {p.client_id: p for p in packages}
    expected = set(range(server.settings.n_clients))
    if set(by_client) != expected or len(packages) != len(expected):
        missing = sorted(expected - set(by_client))
        raise ProtocolError(f"expected one package per client; missing {missing}")
    for key, gm in server.modules.items():
        owners: dict[int, list[int]] = {}
        for client, experts in server.plan[key].items():
            for j in experts:
                owners.setdefault(j, []).append(client)
        updates = {c: by_client[c].modules.get(key) for c in sorted(by_client)}
        if any(u is None for u in updates.values()):
            raise ProtocolError(f"module {key} missing from a package")
        for client, update in updates.items():
            if sorted(update.experts) != sorted(server.plan[key][client]):
                raise ProtocolError(f"client {client} uploaded experts {sorted(update.experts)} for {key}, assigned {server.plan[key][client]}")
        for j, clients in owners.items():
            for name in ("A", "B"):
                gm.experts[j][name] = _mean([updates[c].experts[j][name] for c in clients])
        ordered = list(updates.values())
        if gm.shared is not None:
            if any(u.shared is None for u in ordered):
                raise ProtocolError(f"shared expert missing for {key}")
            gm.shared = {name: _mean([u.shared[name] for u in ordered]) for name in ("A", "B")}
        if gm.projection is not None:
            gm.projection = _mean([u.projection for u in ordered])
        if gm.router is not None:
            gm.router = _mean([u.router for u in ordered])
        if all(u.token_embedding is not None for u in ordered):
            gm.client_embeddings = {c: u.token_embedding for c, u in updates.items()}
            if gm.router is not None:
                gm.expert_embeddings = {j: gm.router[j].copy() for j in sorted(gm.experts)}
            else:
                gm.expert_embeddings = {
                    j: _mean([updates[c].expert_embeddings[j] for c in clients]) for j, clients in sorted(owners.items())
                }


def greedy_decode(
    backbone: Backbone, modules: Mapping[InjectionPoint, HMoLEModuleState], prompt: Sequence[int], n_tokens: int
) -> list[int]:
    adapters = {point: ModuleAdapter(state) for point, state in modules.items()}
    tokens = list(prompt)
    out = []
    for _ in range(n_tokens):
        logits = forward(backbone, tokens, adapters).logits.data
        nxt = int(np.argmax(logits[-1]))
        out.append(nxt)
        tokens.append(nxt)
    return out


def evaluate_client(
    backbone: Backbone,
    modules: Mapping[InjectionPoint, HMoLEModuleState],
    examples: Sequence[Example],
    metric: str = "exact_match",
) -> float:
    """Exact-match accuracy (or mean ROUGE-L) of greedy responses on ``examples``."""
    if not examples:
        raise ValueError("no evaluation examples")
    preds = [greedy_decode(backbone, modules, ex.instruction, len(ex.response)) for ex in examples]
    refs = [list(ex.response) for ex in examples]
    if metric == "rouge_l":
        return float(np.mean([rouge_l(p, r) for p, r in zip(preds, refs)]))
    return exact_match_accuracy(preds, refs)


def _partition(cfg: ExperimentConfig, corpus: list[Example], seed: int) -> list[ClientData]:
    d, C = cfg.data, cfg.federation.n_clients
    if d.partition == "task_skew":
        return partition_task_skew(corpus, C, seed)
    if d.partition == "dirichlet":
        return partition_dirichlet(corpus, C, d.alpha, seed, min_train=max(10, 2 * cfg.hmole.k_e))
    return partition_iid(corpus, C, seed)


class Federation:
    """Server, clients and frozen backbone for one (config, mode, seed) run.

    Args:
        cfg: validated experiment configuration.
        mode: one of :data:`fedamole.config.MODES`; defaults to
            ``cfg.federation.mode``.
        seed: run seed; drives the partition, expert initialisation and
            every client's sampling stream.
        emit: optional callback receiving event dicts.
        clients_data: override the generated partition (one entry per client).
    """

    def __init__(
        self,
        cfg: ExperimentConfig,
        mode: str | None = None,
        seed: int = 0,
        emit: Emit | None = None,
        clients_data: Sequence[ClientData] | None = None,
    ):
        cfg.validate()
        self.cfg = cfg
        self.mode = mode or cfg.federation.mode
        if self.mode not in ("fedamole", "fedit", "fedit_ft", "ablate-h", "ablate-s", "ablate-r", "random"):
            raise ConfigError(f"unknown mode {self.mode!r}", key="federation.mode")
        self.seed = seed
        self.emit = emit or (lambda event: None)
        self.backbone = init_backbone(cfg.backbone)
        self.settings = assignment_settings(cfg, self.mode)
        if clients_data is None:
            corpus = generate_corpus(cfg.data.corpus(cfg.backbone.vocab_size))
            clients_data = _partition(cfg, corpus, seed)
        if len(clients_data) != cfg.federation.n_clients:
            raise ConfigError("client data count differs from federation.n_clients", key="federation.n_clients")
        self.clients = []
        for i, data in enumerate(clients_data):
            rng = np.random.default_rng([seed, i, 0xE3])
            n = min(cfg.data.embedding_set_size, len(data.train))
            data.embedding = sample_embedding_set(data.train, n, rng)
            self.clients.append(ClientState(i, data))
        module_ids = [str(p) for p in self.backbone.points]
        self.server = ServerState(
            _init_global_modules(self.backbone, cfg, self.mode, self.settings, seed),
            initial_assignment(self.settings, module_ids),
            self.settings,
        )
        self.round = 0
        self.log = MetricLog()

    @property
    def uses_rsea(self) -> bool:
        return self.mode in ("fedamole", "ablate-h", "ablate-s")

    def client_rng(self, client_id: int, round_index: int, purpose: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, client_id, round_index, purpose])

    def round_lr(self, round_index: int) -> float:
        f = self.cfg.federation
        return f.lr * f.lr_decay ** (round_index - 1)

    def client_update(self, client: ClientState, round_index: int) -> UpdatePackage:
        """Steps 2 to 4 of a round for one client."""
        client.modules = build_modules(self.server, self.backbone, client.client_id, self.cfg, self.mode)
        losses = local_finetune(
            client,
            self.backbone,
            self.cfg.federation.local_steps,
            self.round_lr(round_index),
            self.cfg.hmole.beta,
            self.client_rng(client.client_id, round_index, 1),
        )
        embeddings = compute_client_embeddings(client, self.backbone) if self.uses_rsea else None
        return make_package(client, embeddings, self.cfg.privacy, self.client_rng(client.client_id, round_index, 2), losses)

    def evaluate(self, client: ClientState) -> float:
        modules = build_modules(self.server, self.backbone, client.client_id, self.cfg, self.mode)
        return evaluate_client(self.backbone, modules, client.data.test, self.cfg.data.metric)

    def next_plan(self, round_index: int) -> RoundPlan:
        s = self.settings
        if self.mode in ("fedit", "fedit_ft", "ablate-r"):
            return self.server.plan
        plan: RoundPlan = {}
        for key, gm in self.server.modules.items():
            if self.mode == "random":
                rng = np.random.default_rng([self.seed, round_index, 0xA5])
                P = rng.random((s.n_clients, s.e_total))
            else:
                tokens = np.stack([gm.client_embeddings[c] for c in range(s.n_clients)])
                experts = np.stack([gm.expert_embeddings[j] for j in range(s.e_total)])
                P = selection_probabilities(relevance(tokens, experts, self.backbone.config.d_model))
            D = solve_assignment(AssignmentProblem(P, s.k_e, s.k_c, s.b))
            self.server.assignments[key] = D
            plan.update(plan_from_assignment({key: D}))
            if self.uses_rsea:
                self.emit({"event": "rsea", "round": round_index, "module": key, "probs": P.round(6).tolist(), "assignment": D.tolist()})
        return plan

    def run_round(self) -> MetricRecord:
        """Run one full round and return its metric record."""
        self.round += 1
        t = self.round
        issues = audit_plan(self.server.plan, self.settings)
        if issues:
            raise ProtocolError(f"round {t} plan violates constraints: {issues}")
        self.emit({"event": "round_start", "round": t, "plan": _plan_json(self.server.plan)})
        packages = [self.client_update(client, t) for client in self.clients]
        aggregate(self.server, packages)
        last = t == self.cfg.federation.rounds
        if self.mode == "fedit_ft" and last:
            self._final_personal_finetune(t)
            accs = [evaluate_client(self.backbone, c.modules, c.data.test, self.cfg.data.metric) for c in self.clients]
        else:
            accs = [self.evaluate(client) for client in self.clients]
        losses = [float(np.mean(p.losses)) if p.losses else float("nan") for p in packages]
        sizes = [sum(len(self.server.plan[k][c.client_id]) for k in self.server.plan) for c in self.clients]
        record = MetricRecord(t, accs, {"loss": losses, "experts_assigned": sizes, "plan": _plan_json(self.server.plan)})
        for c in self.clients:
            self.emit({"event": "client", "round": t, "client": c.client_id, "loss": losses[c.client_id], "acc": accs[c.client_id], "experts": {k: v[c.client_id] for k, v in self.server.plan.items()}})
        self.log.append(record)
        self.server.plan = self.next_plan(t)
        self.emit({"event": "round_end", "round": t, "mta": record.mta})
        log.info("mode=%s seed=%d round=%d mta=%.4f", self.mode, self.seed, t, record.mta)
        return record

    def _final_personal_finetune(self, round_index: int) -> None:
        for client in self.clients:
            client.modules = build_modules(self.server, self.backbone, client.client_id, self.cfg, self.mode)
            local_finetune(
                client,
                self.backbone,
                self.cfg.federation.local_steps,
                self.round_lr(round_index),
                self.cfg.hmole.beta,
                self.client_rng(client.client_id, round_index, 3),
            )

    def run(self) -> MetricLog:
        while self.round < self.cfg.federation.rounds:
            self.run_round()
        return self.log


def _plan_json(plan: RoundPlan) -> dict:
    return {k: {str(c): list(map(int, v)) for c, v in m.items()} for k, m in plan.items()}


def run_round(federation: Federation) -> MetricRecord:
    return federation.run_round()


def run_training(cfg: ExperimentConfig, mode: str | None = None, seed: int = 0, emit: Emit | None = None) -> MetricLog:
    """Run ``cfg.federation.rounds`` rounds and return the metric log."""
    return Federation(cfg, mode, seed, emit).run()
