"""Deterministic discrete-event harness for the shard protocols.

Events execute in (fire time, sequence) order off a single heap, so a given
(seed, config, workload, protocol) tuple always produces the same trace.
Message delivery is delayed by a seeded uniform draw in (delta_min, delta1];
every protocol decision a shard makes applies delta3 later, standing in for
the intra-shard consensus round.
"""

from __future__ import annotations

import heapq
import json
import random
from dataclasses import dataclass, field

from .messages import Envelope, Message, MsgKind
from .model import (
    AccountId,
    ProtocolViolation,
    ShardConfig,
    ShardSimError,
    Transaction,
    TxId,
    VersionedObject,
    as_partition,
    make_partition,
)


class SimulationStalled(ShardSimError):
    """The run passed its horizon with work still pending: a liveness bug."""


@dataclass
class RunReport:
    protocol: str
    shard_count: int
    seed: int
    tx_total: int
    committed: int
    discarded: int
    restarts_total: int
    rollbacks_total: int
    sim_duration_ms: int
    throughput: float
    avg_exec_time_ms: float
    per_tx: list[dict]
    final_balances: dict[str, int]
    final_versions: dict[str, int]
    chains: dict[str, list[dict]]

    def to_json(self) -> dict:
        return {
            "protocol": self.protocol,
            "shard_count": self.shard_count,
            "seed": self.seed,
            "tx_total": self.tx_total,
            "committed": self.committed,
            "discarded": self.discarded,
            "restarts_total": self.restarts_total,
            "rollbacks_total": self.rollbacks_total,
            "sim_duration_ms": self.sim_duration_ms,
            "throughput": self.throughput,
            "avg_exec_time_ms": self.avg_exec_time_ms,
            "per_tx": self.per_tx,
            "final_balances": self.final_balances,
            "final_versions": self.final_versions,
            "chains": self.chains,
        }

    def to_json_str(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


class _Ctx:
    """Capability handed to shard handlers for one event."""

    __slots__ = ("sim", "src")

    def __init__(self, sim: "Simulator", src: int):
        self.sim = sim
        self.src = src

    @property
    def now(self) -> int:
        return self.sim.now

    def send(self, dst: int, msg: Message) -> None:
        self.sim.send(self.src, dst, msg)

    def request_dispatch_check(self, shard: int) -> None:
        self.sim.schedule(self.sim.now + self.sim.cfg.delta3, ("check", shard))

    def after(self, delay: int, token) -> None:
        self.sim.schedule(self.sim.now + delay, ("timer", self.src, token))

    def tx_finished(self) -> None:
        self.sim.finished += 1

    def tx_unfinished(self) -> None:
        self.sim.finished -= 1


# Message kinds consumed by the leader role; the rest go to the destination
# role.  Gossip is fanned out to both.
_LEADER_KINDS = frozenset(
    {
        MsgKind.CLIENT_SUBMIT,
        MsgKind.COMMIT_VOTE,
        MsgKind.ABORT_VOTE,
        MsgKind.COMMITTED,
        MsgKind.RESTART_VOTE,
        MsgKind.ABORTED,
        MsgKind.RELEASED,
        MsgKind.RESTARTED,
        MsgKind.FORCE_ROLLBACK,
        MsgKind.ROLLBACKED,
    }
)


class Simulator:
    def __init__(
        self,
        cfg: ShardConfig,
        balances: dict[AccountId, int],
        txs: list[Transaction],
        partition=None,
        trace: bool = False,
    ):
        from . import baselines
        from .destination import DestShard
        from .leader import LeaderShard

        cfg.validate()
        self.cfg = cfg
        self.partition = as_partition(partition) if partition is not None else make_partition(cfg.shards)
        self.txs = sorted(txs, key=lambda t: t.id)
        self.balances = dict(balances)
        self.rng = random.Random(cfg.seed)
        self.now = 0
        self._seq = 0
        self._heap: list[tuple[int, int, tuple]] = []
        self.finished = 0
        self.trace_enabled = trace
        self.trace: list[dict] = []
        self.gossip = cfg.protocol == "lockless"

        stores: list[dict[AccountId, VersionedObject]] = [{} for _ in range(cfg.shards)]
        for name, bal in balances.items():
            stores[self.partition(name)][name] = VersionedObject(id=name, balance=bal)

        leader_cls, dest_cls = {
            "lockless": (LeaderShard, DestShard),
            "locked": (baselines.LockedLeader, baselines.LockedDest),
            "nolock": (baselines.NoLockLeader, baselines.NoLockDest),
        }[cfg.protocol]
        self.leaders = [leader_cls(i, cfg, self.partition) for i in range(cfg.shards)]
        self.dests = [dest_cls(i, cfg, stores[i]) for i in range(cfg.shards)]

    # -- scheduling --------------------------------------------------------

    def schedule(self, at: int, action: tuple) -> None:
        if at < self.now:
            raise ProtocolViolation("event scheduled in the past")
        self._seq += 1
        heapq.heappush(self._heap, (at, self._seq, action))

    def send(self, src: int, dst: int, msg: Message) -> None:
        assert msg.kind in MsgKind  # vocabulary closure
        if self.cfg.delta_min == self.cfg.delta1:
            delay = self.cfg.delta1
        else:
            delay = self.rng.randint(self.cfg.delta_min + 1, self.cfg.delta1)
        env = Envelope(src=src, dst=dst, send_time=self.now, deliver_time=self.now + delay, msg=msg)
        self.schedule(env.deliver_time, ("deliver", env))

    # -- run loop ----------------------------------------------------------

    def run(self) -> RunReport:
        for tx in self.txs:
            self.schedule(tx.id.ts, ("arrive", tx))
        if self.gossip:
            for shard in range(self.cfg.shards):
                self.schedule(0, ("gossip", shard))

        total = len(self.txs)
        while self._heap:
            if self.finished >= total and not self._has_pending_work():
                break
            at, _, action = heapq.heappop(self._heap)
            self.now = at
            if self.now > self.cfg.horizon_ms:
                raise SimulationStalled(self._stall_report())
            tag = action[0]
            if tag == "deliver":
                env: Envelope = action[1]
                if not 0 < env.deliver_time - env.send_time <= self.cfg.delta1:
                    raise ProtocolViolation("delivery outside the delay bound")
                if self.trace_enabled:
                    self.trace.append(env.trace_json())
                self.schedule(self.now + self.cfg.delta3, ("process", env))
            elif tag == "process":
                self._process(action[1])
            elif tag == "arrive":
                tx: Transaction = action[1]
                leader = self.cfg.leader_of(tx.id)
                self.leaders[leader].on_submit(tx, _Ctx(self, leader))
            elif tag == "gossip":
                shard = action[1]
                if self.finished < total:
                    lowest = self.leaders[shard].on_gossip_timer(_Ctx(self, shard))
                    # The shard knows its own pool without a network hop.
                    self.dests[shard].note_lowest(shard, self.now, lowest)
                    self.schedule(self.now + self.cfg.delta2, ("gossip", shard))
            elif tag == "check":
                shard = action[1]
                self.leaders[shard].on_dispatch_check(_Ctx(self, shard))
            elif tag == "timer":
                _, shard, token = action
                self.dests[shard].on_timer(token, _Ctx(self, shard))
            else:  # pragma: no cover
                raise ProtocolViolation(f"unknown event {tag}")

        if self.finished != total:
            raise SimulationStalled(self._stall_report())
        for dest in self.dests:
            dest.assert_quiescent()
        return self._report()

    def _has_pending_work(self) -> bool:
        return any(item[2][0] != "gossip" for item in self._heap)

    def _process(self, env: Envelope) -> None:
        kind = env.msg.kind
        ctx = _Ctx(self, env.dst)
        if kind == MsgKind.LOWEST_ID_GOSSIP:
            self.dests[env.dst].handle(env, ctx)
            self.leaders[env.dst].record_gossip(env)
        elif kind in _LEADER_KINDS:
            self.leaders[env.dst].handle(env, ctx)
        else:
            self.dests[env.dst].handle(env, ctx)

    def _stall_report(self) -> str:
        pending = [
            f"shard {l.shard_id}: pool={len(l.pool)} in_flight={sorted(map(str, l.in_flight))}"
            for l in self.leaders
            if l.pool or l.in_flight
        ]
        return (
            f"no quiescence by t={self.now}ms "
            f"({self.finished}/{len(self.txs)} transactions finished); "+ "; ".join(pending)
        )

    # -- results -----------------------------------------------------------

    def final_balances(self) -> dict[AccountId, int]:
        out: dict[AccountId, int] = {}
        for dest in self.dests:
            for name, (balance, _) in dest.snapshot_balances().items():
                out[name] = balance
        return dict(sorted(out.items()))

    def final_versions(self) -> dict[AccountId, int]:
        out: dict[AccountId, int] = {}
        for dest in self.dests:
            for name, (_, version) in dest.snapshot_balances().items():
                out[name] = version
        return dict(sorted(out.items()))

    def chain_records(self) -> dict[str, list[dict]]:
        return {str(d.shard_id): d.chain_json() for d in self.dests}

    def lifecycles(self) -> dict[TxId, object]:
        out = {}
        for leader in self.leaders:
            out.update(leader.lifecycle)
        return out

    def _report(self) -> RunReport:
        lives = self.lifecycles()
        per_tx = [lives[txid].to_json(txid) for txid in sorted(lives)]
        committed = sum(1 for r in per_tx if r["outcome"] == "committed")
        discarded = sum(1 for r in per_tx if r["outcome"] == "discarded")
        if committed + discarded != len(self.txs):
            raise ProtocolViolation("transactions lost or duplicated at quiescence")
        duration = max((r["finished_at"] for r in per_tx), default=0)
        exec_times = [
            r["commit_time"] - r["submitted_at"] for r in per_tx if r["outcome"] == "committed"
        ]
        return RunReport(
            protocol=self.cfg.protocol,
            shard_count=self.cfg.shards,
            seed=self.cfg.seed,
            tx_total=len(self.txs),
            committed=committed,
            discarded=discarded,
            restarts_total=sum(r["restarts"] for r in per_tx),
            rollbacks_total=sum(r["rollbacks"] for r in per_tx),
            sim_duration_ms=duration,
            throughput=(committed / (duration / 1000.0)) if duration > 0 else 0.0,
            avg_exec_time_ms=(sum(exec_times) / len(exec_times)) if exec_times else 0.0,
            per_tx=per_tx,
            final_balances=self.final_balances(),
            final_versions=self.final_versions(),
            chains=self.chain_records(),
        )


def run_simulation(
    cfg: ShardConfig,
    balances: dict[AccountId, int],
    txs: list[Transaction],
    partition=None,
    trace: bool = False,
) -> RunReport:
    return Simulator(cfg, balances, txs, partition=partition, trace=trace).run()
