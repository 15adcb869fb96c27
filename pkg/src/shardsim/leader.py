"""Leader-shard state machine: pool management and the commit pipeline.

A leader owns a priority pool of pending transactions, always dispatches
the lowest id first, and walks each transaction through vote collection,
commit confirmation and release.  Restarted transactions go back into the
pool under their original id, so priority never degrades; force-rollback
requests evict a running or committed transaction everywhere and likewise
re-pool it.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

from .messages import Envelope, Message, MsgKind
from .model import (
    ProtocolViolation,
    ShardConfig,
    Subtransaction,
    Transaction,
    TxId,
    destination_shards,
    split,
)


@dataclass
class TxLife:
    """Per-transaction lifecycle record for the metrics sink."""

    submitted_at: int
    attempts: int = 0
    restarts: int = 0
    rollbacks: int = 0
    outcome: str | None = None
    commit_time: int | None = None
    finished_at: int | None = None

    def to_json(self, tx: TxId) -> dict:
        return {
            "tx": str(tx),
            "submitted_at": self.submitted_at,
            "attempts": self.attempts,
            "restarts": self.restarts,
            "rollbacks": self.rollbacks,
            "outcome": self.outcome,
            "commit_time": self.commit_time,
            "finished_at": self.finished_at,
        }


@dataclass
class TxProgress:
    tx: Transaction
    subtxs: tuple[Subtransaction, ...]
    attempt: int
    votes: dict[str, str] = field(default_factory=dict)
    acks: dict[str, str] = field(default_factory=dict)
    finals: dict[str, str] = field(default_factory=dict)
    rollback_acks: set[str] = field(default_factory=set)
    vote_decision: str | None = None
    ack_decision: str | None = None
    rolling_back: bool = False
    from_committed: bool = False

    @property
    def objects(self) -> tuple[str, ...]:
        return tuple(s.obj for s in self.subtxs)


@dataclass
class CommittedTx:
    tx: Transaction
    subtxs: tuple[Subtransaction, ...]
    attempt: int
    commit_time: int


class LeaderCore:
    """Pool, lifecycle accounting and dispatch pacing shared by every protocol."""

    def __init__(self, shard_id: int, cfg: ShardConfig, partition):
        self.shard_id = shard_id
        self.cfg = cfg
        self.partition = partition
        self.pool: list[tuple[TxId, Transaction]] = []
        self.in_flight: dict[TxId, TxProgress] = {}
        self.committed: dict[TxId, CommittedTx] = {}
        self.discarded: dict[TxId, int] = {}
        self.lifecycle: dict[TxId, TxLife] = {}
        self.known_lowest: dict[int, tuple[int, TxId | None]] = {}
        self._splits: dict[TxId, tuple[Subtransaction, ...]] = {}

    # -- pool ------------------------------------------------------------

    def on_submit(self, tx: Transaction, ctx) -> None:
        if tx.id in self.lifecycle:
            raise ProtocolViolation(f"duplicate submission of {tx.id}")
        self.lifecycle[tx.id] = TxLife(submitted_at=ctx.now)
        heapq.heappush(self.pool, (tx.id, tx))
        ctx.request_dispatch_check(self.shard_id)

    def _repool(self, tx: Transaction, ctx) -> None:
        heapq.heappush(self.pool, (tx.id, tx))
        ctx.request_dispatch_check(self.shard_id)

    def on_dispatch_check(self, ctx) -> None:
        while self.pool and len(self.in_flight) < self.cfg.pipeline_depth:
            txid, tx = heapq.heappop(self.pool)
            self._dispatch(tx, ctx)

    def _dispatch(self, tx: Transaction, ctx) -> None:
        life = self.lifecycle[tx.id]
        life.attempts += 1
        subtxs = self._splits.get(tx.id)
        if subtxs is None:
            subtxs = tuple(split(tx, self.partition))
            self._splits[tx.id] = subtxs
        prog = TxProgress(tx=tx, subtxs=subtxs, attempt=life.attempts)
        self.in_flight[tx.id] = prog
        for sub in subtxs:
            ctx.send(
                sub.shard,
                Message(
                    MsgKind.SUBTX_DISPATCH,
                    tx=tx.id,
                    obj=sub.obj,
                    attempt=prog.attempt,
                    subtx=sub,
                ),
            )

    def pending_lowest(self) -> TxId | None:
        """Lowest id this leader is still responsible for.

        Covers the pool *and* everything in flight: a dispatched transaction
        must keep its priority signal or the liveness override could never
        fire for it.
        """
        candidates = [txid for txid, _ in self.pool]
        candidates.extend(self.in_flight)
        return min(candidates) if candidates else None

    def on_gossip_timer(self, ctx) -> TxId | None:
        lowest = self.pending_lowest()
        for dst in range(self.cfg.shards):
            if dst != self.shard_id:
                ctx.send(dst, Message(MsgKind.LOWEST_ID_GOSSIP, lowest=lowest))
        return lowest

    def record_gossip(self, env: Envelope) -> None:
        prev = self.known_lowest.get(env.src)
        if prev is None or env.send_time >= prev[0]:
            self.known_lowest[env.src] = (env.send_time, env.msg.lowest)

    # -- bookkeeping -----------------------------------------------------

    def _complete(self, prog: TxProgress, ctx) -> None:
        txid = prog.tx.id
        self.committed[txid] = CommittedTx(
            tx=prog.tx, subtxs=prog.subtxs, attempt=prog.attempt, commit_time=ctx.now
        )
        life = self.lifecycle[txid]
        life.outcome = "committed"
        life.commit_time = ctx.now
        life.finished_at = ctx.now
        del self.in_flight[txid]
        ctx.tx_finished()
        ctx.request_dispatch_check(self.shard_id)

    def _discard(self, prog: TxProgress, ctx) -> None:
        txid = prog.tx.id
        self.discarded[txid] = ctx.now
        life = self.lifecycle[txid]
        life.outcome = "discarded"
        life.finished_at = ctx.now
        del self.in_flight[txid]
        ctx.tx_finished()
        ctx.request_dispatch_check(self.shard_id)

    def _restart_tx(self, prog: TxProgress, ctx) -> None:
        txid = prog.tx.id
        self.lifecycle[txid].restarts += 1
        del self.in_flight[txid]
        self._repool(prog.tx, ctx)

    def accounting(self) -> dict[str, int]:
        """Conservation check: every submitted transaction is in exactly one bucket."""
        in_flight_only = sum(1 for p in self.in_flight.values() if not p.from_committed)
        return {
            "pooled": len(self.pool),
            "in_flight": in_flight_only,
            "committed": len(self.committed),
            "discarded": len(self.discarded),
            "submitted": len(self.lifecycle),
        }

    def _progress_for(self, m: Message) -> TxProgress | None:
        prog = self.in_flight.get(m.tx)
        if prog is None or prog.attempt != m.attempt:
            return None
        return prog


class LeaderShard(LeaderCore):
    """Leader side of the lockless protocol."""

    def handle(self, env: Envelope, ctx) -> None:
        m = env.msg
        kind = m.kind
        if kind == MsgKind.CLIENT_SUBMIT:
            self.on_submit(m.body, ctx)
        elif kind in (MsgKind.COMMIT_VOTE, MsgKind.ABORT_VOTE):
            self._collect_vote(m, ctx)
        elif kind in (MsgKind.COMMITTED, MsgKind.RESTART_VOTE, MsgKind.ABORTED):
            self._collect_ack(m, ctx)
        elif kind in (MsgKind.RELEASED, MsgKind.RESTARTED):
            self._collect_final(m, ctx)
        elif kind == MsgKind.FORCE_ROLLBACK:
            self._start_rollback(m, ctx)
        elif kind == MsgKind.ROLLBACKED:
            self._collect_rollback_ack(m, ctx)
        elif kind == MsgKind.LOWEST_ID_GOSSIP:
            self.record_gossip(env)
        else:
            raise ProtocolViolation(f"leader shard received {kind.value}")

    def _broadcast(self, prog: TxProgress, kind: MsgKind, ctx) -> None:
        for sub in prog.subtxs:
            ctx.send(sub.shard, Message(kind, tx=prog.tx.id, obj=sub.obj, attempt=prog.attempt))

    def _collect_vote(self, m: Message, ctx) -> None:
        prog = self._progress_for(m)
        if prog is None or prog.rolling_back or prog.vote_decision is not None:
            return
        prog.votes[m.obj] = "commit" if m.kind == MsgKind.COMMIT_VOTE else "abort"
        if m.kind == MsgKind.ABORT_VOTE:
            # Abort wins immediately; remaining votes are moot.
            prog.vote_decision = "abort"
            self._broadcast(prog, MsgKind.ABORT, ctx)
        elif len(prog.votes) == len(prog.subtxs):
            prog.vote_decision = "commit"
            self._broadcast(prog, MsgKind.COMMIT, ctx)

    def _collect_ack(self, m: Message, ctx) -> None:
        prog = self._progress_for(m)
        if prog is None or prog.rolling_back:
            return
        word = {
            MsgKind.COMMITTED: "committed",
            MsgKind.RESTART_VOTE: "restart",
            MsgKind.ABORTED: "aborted",
        }[m.kind]
        prog.acks[m.obj] = word
        values = set(prog.acks.values())
        if "aborted" in values and values != {"aborted"}:
            # The vote broadcast is uniform, so aborted can never mix with
            # committed or restart acks.
            raise ProtocolViolation(f"mixed abort/commit acks for {m.tx}")
        if prog.ack_decision is not None:
            return
        if word == "restart":
            prog.ack_decision = "restart"
            self._broadcast(prog, MsgKind.RESTART, ctx)
        elif len(prog.acks) == len(prog.subtxs):
            if values == {"committed"}:
                prog.ack_decision = "release"
                self._broadcast(prog, MsgKind.RELEASE, ctx)
            else:  # all aborted: gone for good
                self._discard(prog, ctx)

    def _collect_final(self, m: Message, ctx) -> None:
        prog = self._progress_for(m)
        if prog is None or prog.rolling_back:
            return
        prog.finals[m.obj] = "released" if m.kind == MsgKind.RELEASED else "restarted"
        if len(prog.finals) < len(prog.subtxs):
            return
        values = set(prog.finals.values())
        if len(values) != 1:
            raise ProtocolViolation(f"mixed release/restart acks for {m.tx}")
        if values == {"released"}:
            self._complete(prog, ctx)
        else:
            self._restart_tx(prog, ctx)

    def _start_rollback(self, m: Message, ctx) -> None:
        prog = self.in_flight.get(m.tx)
        if prog is not None:
            if prog.attempt != m.attempt or prog.rolling_back:
                return  # stale request or already rolling back
            prog.rolling_back = True
        else:
            rec = self.committed.get(m.tx)
            if rec is None or rec.attempt != m.attempt:
                return  # unknown or superseded: duplicate rollback request
            prog = TxProgress(
                tx=rec.tx,
                subtxs=rec.subtxs,
                attempt=rec.attempt,
                rolling_back=True,
                from_committed=True,
            )
            self.in_flight[m.tx] = prog
            ctx.tx_unfinished()
        self._broadcast(prog, MsgKind.FORCE_ROLLBACK, ctx)

    def _collect_rollback_ack(self, m: Message, ctx) -> None:
        prog = self.in_flight.get(m.tx)
        if prog is None or not prog.rolling_back or prog.attempt != m.attempt:
            return
        prog.rollback_acks.add(m.obj)
        if len(prog.rollback_acks) < len(prog.subtxs):
            return
        txid = prog.tx.id
        if prog.from_committed:
            del self.committed[txid]
            life = self.lifecycle[txid]
            life.outcome = None
            life.commit_time = None
            life.finished_at = None
        self.lifecycle[txid].rollbacks += 1
        del self.in_flight[txid]
        self._repool(prog.tx, ctx)
