"""Synthetic instruction/response corpus and non-IID client partitions.

Each domain owns a first-order Markov chain over instruction tokens and a
private permutation that maps the last instruction token to the response
label. Token ids ``[0, n_labels)`` are response labels; the rest of the
vocabulary is instruction text.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError

__all__ = [
    "CorpusConfig",
    "Example",
    "ClientData",
    "DomainSpec",
    "domain_specs",
    "generate_corpus",
    "split_client",
    "partition_dirichlet",
    "partition_task_skew",
    "partition_iid",
    "sample_embedding_set",
    "save_jsonl",
    "load_jsonl",
]


@dataclass(frozen=True)
class CorpusConfig:
    vocab_size: int = 64
    n_domains: int = 4
    seqs_per_domain: int = 200
    instruction_len: int = 8
    response_len: int = 2
    n_labels: int = 4
    seed: int = 0

    def validate(self, max_seq_len: int | None = None) -> None:
        for name in ("n_domains", "seqs_per_domain", "instruction_len", "response_len"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", key=f"data.{name}")
        if self.n_labels < 2:
            raise ConfigError("must be >= 2", key="data.n_labels")
        if self.vocab_size - self.n_labels < 2:
            raise ConfigError("leaves fewer than 2 instruction tokens", key="data.n_labels")
        if max_seq_len is not None and self.instruction_len + self.response_len > max_seq_len:
            raise ConfigError("instruction + response exceeds backbone.max_seq_len", key="data.instruction_len")


@dataclass(frozen=True)
class Example:
    instruction: tuple[int, ...]
    response: tuple[int, ...]
    domain: int

    @property
    def tokens(self) -> np.ndarray:
        return np.array(self.instruction + self.response, dtype=np.int64)

    def loss_mask(self) -> np.ndarray:
        """Mask over next-token targets ``tokens[1:]``: True on response tokens."""
        mask = np.zeros(len(self.instruction) + len(self.response) - 1, dtype=bool)
        mask[len(self.instruction) - 1 :] = True
        return mask


@dataclass
class ClientData:
    train: list[Example]
    val: list[Example]
    test: list[Example]
    embedding: list[Example] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train) + len(self.val) + len(self.test)


@dataclass(frozen=True)
class DomainSpec:
    transition: np.ndarray  # [n_instr, n_instr], rows sum to 1
    label_map: np.ndarray  # [n_labels] permutation


def domain_specs(cfg: CorpusConfig) -> list[DomainSpec]:
    """Per-domain Markov chains and response rules.

    Each row puts half its mass on a domain-specific successor (drawn from a
    random permutation) and spreads the rest with a Dirichlet(0.5) draw.
    """
    n_instr = cfg.vocab_size - cfg.n_labels
    specs = []
    for k in range(cfg.n_domains):
        rng = np.random.default_rng([cfg.seed, k, 0xD0])
        successor = rng.permutation(n_instr)
        noise = rng.dirichlet(np.full(n_instr, 0.5), size=n_instr)
        transition = 0.5 * noise
        transition[np.arange(n_instr), successor] += 0.5
        specs.append(DomainSpec(transition, rng.permutation(cfg.n_labels)))
    return specs


def _response(spec: DomainSpec, domain: int, instruction: Sequence[int], cfg: CorpusConfig) -> tuple[int, ...]:
    first = int(spec.label_map[(instruction[-1] - cfg.n_labels) % cfg.n_labels])
    return tuple((first + t * (domain + 1)) % cfg.n_labels for t in range(cfg.response_len))


def generate_corpus(cfg: CorpusConfig) -> list[Example]:
    cfg.validate()
    n_instr = cfg.vocab_size - cfg.n_labels
    corpus = []
    for k, spec in enumerate(domain_specs(cfg)):
        rng = np.random.default_rng([cfg.seed, k, 0xC0])
        cumulative = np.cumsum(spec.transition, axis=1)
        for _ in range(cfg.seqs_per_domain):
            state = int(rng.integers(n_instr))
            states = [state]
            for u in rng.random(cfg.instruction_len - 1):
                state = min(int(np.searchsorted(cumulative[state], u, side="right")), n_instr - 1)
                states.append(state)
            instruction = tuple(s + cfg.n_labels for s in states)
            corpus.append(Example(instruction, _response(spec, k, instruction, cfg), k))
    return corpus


def split_client(examples: Sequence[Example], rng: np.random.Generator) -> ClientData:
    """Shuffle and split 80/10/10 into train/val/test (val and test get >= 1 when n >= 3)."""
    order = rng.permutation(len(examples))
    items = [examples[i] for i in order]
    n = len(items)
    n_test = max(1, int(round(0.1 * n))) if n >= 3 else 0
    n_val = max(1, int(round(0.1 * n))) if n >= 3 else 0
    n_train = n - n_val - n_test
    return ClientData(items[:n_train], items[n_train : n_train + n_val], items[n_train + n_val :])


def _check_min(clients: list[ClientData], min_train: int) -> bool:
    return all(len(c.train) >= min_train for c in clients)


def partition_dirichlet(
    corpus: Sequence[Example],
    n_clients: int,
    alpha: float,
    seed: int,
    min_train: int = 10,
    max_attempts: int = 10,
) -> list[ClientData]:
    """Label-skewed partition: each domain is spread by ``Dirichlet(alpha)``.

    Raises:
        ValueError: if ``alpha <= 0``, or some client still has fewer than
            ``min_train`` training examples after ``max_attempts`` draws.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    domains = sorted({ex.domain for ex in corpus})
    for attempt in range(max_attempts):
        rng = np.random.default_rng([seed, attempt, 0xD1])
        shards: list[list[Example]] = [[] for _ in range(n_clients)]
        for k in domains:
            members = [ex for ex in corpus if ex.domain == k]
            order = rng.permutation(len(members))
            props = rng.dirichlet(np.full(n_clients, alpha))
            cuts = (np.cumsum(props)[:-1] * len(members)).astype(int)
            for client, part in enumerate(np.split(order, cuts)):
                shards[client].extend(members[i] for i in part)
        clients = [split_client(shard, rng) for shard in shards]
        if _check_min(clients, min_train):
            return clients
    raise ValueError(f"a client received fewer than {min_train} training examples after {max_attempts} attempts")


def partition_task_skew(corpus: Sequence[Example], n_clients: int, seed: int) -> list[ClientData]:
    """Client ``i`` receives every example of domain ``i``."""
    n_domains = len({ex.domain for ex in corpus})
    if n_domains < n_clients:
        raise ValueError(f"task skew needs >= {n_clients} domains, corpus has {n_domains}")
    rng = np.random.default_rng([seed, 0xD2])
    return [split_client([ex for ex in corpus if ex.domain == i], rng) for i in range(n_clients)]


def partition_iid(corpus: Sequence[Example], n_clients: int, seed: int) -> list[ClientData]:
    rng = np.random.default_rng([seed, 0xD3])
    order = rng.permutation(len(corpus))
    return [split_client([corpus[i] for i in part], rng) for part in np.array_split(order, n_clients)]


def sample_embedding_set(train: Sequence[Example], n: int, rng: np.random.Generator) -> list[Example]:
    """Uniform sample of ``n`` training examples without replacement."""
    if n > len(train):
        raise ValueError(f"embedding set of {n} requested from {len(train)} training examples")
    if n < 1:
        raise ValueError("embedding set must hold at least one example")
    picked = np.sort(rng.choice(len(train), size=n, replace=False))
    return [train[i] for i in picked]


def save_jsonl(examples: Iterable[Example], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps({"instruction": list(ex.instruction), "response": list(ex.response), "domain": ex.domain}))
            fh.write("\n")


def load_jsonl(path: str | Path) -> list[Example]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                out.append(Example(tuple(row["instruction"]), tuple(row["response"]), int(row["domain"])))
    return out
