"""Domain model: transactions, per-shard fragments, accounts and versions.

A transaction is a conditional multi-account transfer.  Before execution it
is split into one fragment per referenced account; each fragment runs on the
shard that stores its account and carries every condition on that account
plus the net balance update.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping


class ShardSimError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ShardSimError):
    """Invalid run configuration."""


class WorkloadError(ShardSimError):
    """Malformed transaction or unsatisfiable generator parameters."""


class ProtocolViolation(ShardSimError):
    """An internal state-machine invariant was broken; always a bug."""


COMPARATORS = (">=", "<=", "==")


@dataclass(frozen=True, order=True)
class TxId:
    """Globally ordered transaction identifier.

    Ordering is lexicographic on (timestamp, origin node, per-node counter);
    the two trailing fields break ties between transactions stamped at the
    same simulated millisecond.
    """

    ts: int
    node: int
    seq: int

    def __str__(self) -> str:
        return f"{self.ts}-{self.node}-{self.seq}"

    @classmethod
    def parse(cls, text: str) -> "TxId":
        ts, node, seq = text.split("-")
        return cls(int(ts), int(node), int(seq))

    def to_json(self) -> dict:
        return {"ts": self.ts, "node": self.node, "seq": self.seq}

    @classmethod
    def from_json(cls, doc: Mapping) -> "TxId":
        return cls(int(doc["ts"]), int(doc["node"]), int(doc["seq"]))


# Accounts are referenced by bare name; the home shard is always derived
# through a partition function so that it can be recomputed for any shard
# count.
AccountId = str

Partition = Callable[[AccountId], int]


def partition_account(name: AccountId, shard_count: int) -> int:
    """Home shard of an account: stable across runs, platforms and processes."""
    return zlib.crc32(name.encode("utf-8")) % shard_count


def make_partition(shard_count: int) -> Partition:
    return lambda name: partition_account(name, shard_count)


def as_partition(partition: Partition | Mapping[AccountId, int]) -> Partition:
    """Accept either a callable or an explicit account->shard mapping."""
    if callable(partition):
        return partition
    return partition.__getitem__


@dataclass(frozen=True)
class ShardConfig:
    """Run-wide configuration.

    ``delta1`` bounds message delay, ``delta2`` is the lowest-id gossip
    period, ``delta3`` the per-decision consensus delay, and ``c`` the clock
    skew constant (retained for the liveness bound; the single simulated
    clock has zero skew).
    """

    shards: int
    delta1: int = 5
    delta2: int = 50
    delta3: int = 30
    c: int = 1
    delta_min: int = 1
    pipeline_depth: int = 8
    nodes_per_shard: int = 4
    byzantine_per_shard: int = 1
    seed: int = 0
    horizon_ms: int = 60_000_000
    protocol: str = "lockless"
    lock_timeout_ms: int | None = None

    def validate(self) -> "ShardConfig":
        if self.shards < 1:
            raise ConfigError("shard count must be >= 1")
        if self.delta1 <= 0 or self.delta2 <= 0:
            raise ConfigError("delta1 and delta2 must be positive")
        if self.delta3 < 0 or self.c < 0:
            raise ConfigError("delta3 and c must be non-negative")
        if not (1 <= self.delta_min <= self.delta1):
            raise ConfigError("delta_min must lie in [1, delta1]")
        if self.pipeline_depth < 1:
            raise ConfigError("pipeline_depth must be >= 1")
        if self.nodes_per_shard <= 3 * self.byzantine_per_shard:
            raise ConfigError(
                "need nodes_per_shard > 3 * byzantine_per_shard in every shard"
            )
        if self.protocol not in ("lockless", "locked", "nolock"):
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        return self

    @property
    def lock_timeout(self) -> int:
        """Deadlock timeout for the lock baseline: 10 decision delays."""
        if self.lock_timeout_ms is not None:
            return self.lock_timeout_ms
        return 10 * self.delta3 if self.delta3 > 0 else 10 * self.delta1

    def leader_of(self, tx: TxId) -> int:
        """Leader shard of a transaction, re-mapped to this shard count."""
        return tx.node % self.shards

    def to_json(self) -> dict:
        return {
            "shards": self.shards,
            "delta1": self.delta1,
            "delta2": self.delta2,
            "delta3": self.delta3,
            "c": self.c,
            "delta_min": self.delta_min,
            "pipeline_depth": self.pipeline_depth,
            "nodes_per_shard": self.nodes_per_shard,
            "byzantine_per_shard": self.byzantine_per_shard,
            "seed": self.seed,
            "horizon_ms": self.horizon_ms,
            "protocol": self.protocol,
            "lock_timeout_ms": self.lock_timeout_ms,
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "ShardConfig":
        known = {f: doc[f] for f in cls.__dataclass_fields__ if f in doc}
        return cls(**known).validate()


@dataclass
class VersionedObject:
    """An account owned by its home shard: current balance plus a version
    counter that advances by exactly one on every released write."""

    id: AccountId
    balance: int
    version: int = 0


@dataclass(frozen=True)
class Condition:
    """Pure comparison of one account's balance against a threshold."""

    acct: AccountId
    cmp: str
    amount: int

    def holds(self, balance: int) -> bool:
        if self.cmp == ">=":
            return balance >= self.amount
        if self.cmp == "<=":
            return balance <= self.amount
        if self.cmp == "==":
            return balance == self.amount
        raise WorkloadError(f"unknown comparator {self.cmp!r}")

    def to_json(self) -> dict:
        return {"acct": self.acct, "cmp": self.cmp, "amt": self.amount}

    @classmethod
    def from_json(cls, doc: Mapping) -> "Condition":
        return cls(doc["acct"], doc["cmp"], int(doc["amt"]))


def evaluate_condition(cond: Condition, obj: VersionedObject) -> bool:
    if cond.acct != obj.id:
        raise ProtocolViolation(
            f"condition on {cond.acct!r} evaluated against object {obj.id!r}"
        )
    return cond.holds(obj.balance)


@dataclass(frozen=True)
class Update:
    """Signed balance change; negative withdraws, positive deposits."""

    acct: AccountId
    delta: int

    def to_json(self) -> dict:
        return {"acct": self.acct, "delta": self.delta}

    @classmethod
    def from_json(cls, doc: Mapping) -> "Update":
        return cls(doc["acct"], int(doc["delta"]))


@dataclass(frozen=True)
class Transaction:
    id: TxId
    leader: int
    conditions: tuple[Condition, ...]
    updates: tuple[Update, ...]

    def accounts(self) -> tuple[AccountId, ...]:
        """Referenced accounts in first-reference order."""
        seen: dict[AccountId, None] = {}
        for c in self.conditions:
            seen.setdefault(c.acct)
        for u in self.updates:
            seen.setdefault(u.acct)
        return tuple(seen)

    def net_delta(self) -> int:
        return sum(u.delta for u in self.updates)

    def to_json(self) -> dict:
        return {
            "id": self.id.to_json(),
            "leader": self.leader,
            "conditions": [c.to_json() for c in self.conditions],
            "updates": [u.to_json() for u in self.updates],
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "Transaction":
        return cls(
            id=TxId.from_json(doc["id"]),
            leader=int(doc["leader"]),
            conditions=tuple(Condition.from_json(c) for c in doc["conditions"]),
            updates=tuple(Update.from_json(u) for u in doc["updates"]),
        )


@dataclass(frozen=True)
class Subtransaction:
    """Fragment of a transaction executing on one shard against one account."""

    parent: TxId
    shard: int
    obj: AccountId
    conditions: tuple[Condition, ...]
    update: Update | None

    @property
    def writes(self) -> bool:
        return self.update is not None

    @property
    def delta(self) -> int:
        return self.update.delta if self.update else 0


def split(tx: Transaction, partition: Partition | Mapping[AccountId, int]) -> list[Subtransaction]:
    """Split a transaction into one fragment per referenced account.

    Each fragment carries every condition on its account, in original order,
    and the summed net update; a zero net movement is dropped so that the
    fragment is a pure read.  Fragment order follows first reference, which
    keeps dispatch order deterministic.
    """
    where = as_partition(partition)
    accounts = tx.accounts()
    if not accounts:
        raise WorkloadError(f"transaction {tx.id} references no accounts")
    by_acct_conds: dict[AccountId, list[Condition]] = {a: [] for a in accounts}
    for c in tx.conditions:
        by_acct_conds[c.acct].append(c)
    by_acct_delta: dict[AccountId, int] = {a: 0 for a in accounts}
    for u in tx.updates:
        by_acct_delta[u.acct] += u.delta
    out = []
    for acct in accounts:
        delta = by_acct_delta[acct]
        shard = where(acct)
        sub = Subtransaction(
            parent=tx.id,
            shard=shard,
            obj=acct,
            conditions=tuple(by_acct_conds[acct]),
            update=Update(acct, delta) if delta != 0 else None,
        )
        if where(sub.obj) != sub.shard:
            raise ProtocolViolation("partition function is not stable")
        out.append(sub)
    return out


def destination_shards(subtxs: Iterable[Subtransaction]) -> tuple[int, ...]:
    """Distinct destination shards, in fragment order."""
    seen: dict[int, None] = {}
    for s in subtxs:
        seen.setdefault(s.shard)
    return tuple(seen)


def dump_transactions(txs: Iterable[Transaction], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tx in txs:
            fh.write(json.dumps(tx.to_json(), sort_keys=True) + "\n")


def load_transactions(path) -> list[Transaction]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(Transaction.from_json(json.loads(line)))
    return out


def dump_accounts(balances: Mapping[AccountId, int], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for name, balance in balances.items():
            fh.write(json.dumps({"acct": name, "balance": balance}) + "\n")


def load_accounts(path) -> dict[AccountId, int]:
    out: dict[AccountId, int] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                doc = json.loads(line)
                out[doc["acct"]] = int(doc["balance"])
    return out
