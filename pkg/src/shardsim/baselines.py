"""Comparison protocols: exclusive locking and no isolation at all.

Both baselines ride the same network and consensus-delay model as the main
protocol so that throughput and latency differences come from the isolation
mechanism alone.  The no-isolation variant validates and applies in two
short rounds with nothing in between, so concurrent transactions interleave
freely; the lock variant holds an exclusive per-account lock from first
access until the transaction completes, resolving deadlocks by timing out
waiters and aborting-and-retrying the youngest.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .destination import ChainEntry, Registration
from .leader import LeaderCore, TxProgress
from .messages import Envelope, Message, MsgKind
from .model import (
    AccountId,
    ProtocolViolation,
    ShardConfig,
    Subtransaction,
    TxId,
    VersionedObject,
)

SubKey = tuple[TxId, AccountId]


class _BaselineDest:
    """State shared by both baseline destination roles."""

    def __init__(self, shard_id: int, cfg: ShardConfig, store: dict[AccountId, VersionedObject]):
        self.shard_id = shard_id
        self.cfg = cfg
        self.store = store
        self.registered: dict[SubKey, Registration] = {}
        self.chain: list[ChainEntry] = []
        self.dead: dict[SubKey, int] = {}
        self._entry_seq = 0

    def _dead_at(self, key: SubKey) -> int:
        return self.dead.get(key, -1)

    def _bury(self, key: SubKey, attempt: int) -> None:
        if attempt > self._dead_at(key):
            self.dead[key] = attempt

    def _validate(self, sub: Subtransaction) -> tuple[bool, int]:
        obj = self.store.get(sub.obj)
        if obj is None:
            return False, 0
        ok = all(c.holds(obj.balance) for c in sub.conditions)
        if ok and sub.update is not None and sub.update.delta < 0:
            ok = obj.balance + sub.update.delta >= 0
        return ok, obj.version

    def _apply(self, tx: TxId, obj_name: AccountId, attempt: int, reg: Registration) -> None:
        obj = self.store[obj_name]
        writes = reg.delta is not None
        if writes:
            obj.balance += reg.delta
            obj.version += 1
        self._entry_seq += 1
        self.chain.append(
            ChainEntry(
                seq=self._entry_seq,
                tx=tx,
                obj=obj_name,
                attempt=attempt,
                writes=writes,
                delta=reg.delta or 0,
                snapshot_version=reg.snapshot,
                status="released",
                result_version=obj.version if writes else None,
            )
        )

    def note_lowest(self, sender: int, sent_at: int, lowest: TxId | None) -> None:
        pass  # gossip is not part of the baselines

    def snapshot_balances(self) -> dict[AccountId, tuple[int, int]]:
        return {name: (o.balance, o.version) for name, o in sorted(self.store.items())}

    def chain_json(self) -> list[dict]:
        return [e.to_json() for e in self.chain]

    def on_timer(self, token, ctx) -> None:
        raise ProtocolViolation("unexpected timer")


class NoLockDest(_BaselineDest):
    """Checks conditions, then applies on command; nothing in between."""

    def handle(self, env: Envelope, ctx) -> None:
        m = env.msg
        if m.kind == MsgKind.SUBTX_DISPATCH:
            key = (m.tx, m.subtx.obj)
            if self._dead_at(key) >= m.attempt:
                return
            ok, version = self._validate(m.subtx)
            if ok:
                self.registered[key] = Registration(
                    attempt=m.attempt, snapshot=version, delta=m.subtx.delta if m.subtx.writes else None
                )
                ctx.send(env.src, Message(MsgKind.COMMIT_VOTE, tx=m.tx, obj=m.subtx.obj, attempt=m.attempt))
            else:
                ctx.send(env.src, Message(MsgKind.ABORT_VOTE, tx=m.tx, obj=m.subtx.obj, attempt=m.attempt))
        elif m.kind == MsgKind.COMMIT:
            key = (m.tx, m.obj)
            if self._dead_at(key) >= m.attempt:
                return
            reg = self.registered.pop(key, None)
            if reg is None:
                return
            self._apply(m.tx, m.obj, m.attempt, reg)
            ctx.send(env.src, Message(MsgKind.COMMITTED, tx=m.tx, obj=m.obj, attempt=m.attempt))
        elif m.kind == MsgKind.ABORT:
            key = (m.tx, m.obj)
            if self._dead_at(key) >= m.attempt:
                return
            if self.registered.pop(key, None) is None:
                self._bury(key, m.attempt)
            ctx.send(env.src, Message(MsgKind.ABORTED, tx=m.tx, obj=m.obj, attempt=m.attempt))
        else:
            raise ProtocolViolation(f"nolock destination received {m.kind.value}")

    def assert_quiescent(self) -> None:
        if self.registered:
            raise ProtocolViolation("fragments left validated but never resolved")
        # Negative balances are possible here by design: isolation is absent.


class NoLockLeader(LeaderCore):
    def handle(self, env: Envelope, ctx) -> None:
        m = env.msg
        if m.kind == MsgKind.CLIENT_SUBMIT:
            self.on_submit(m.body, ctx)
        elif m.kind in (MsgKind.COMMIT_VOTE, MsgKind.ABORT_VOTE):
            prog = self._progress_for(m)
            if prog is None or prog.vote_decision is not None:
                return
            prog.votes[m.obj] = "commit" if m.kind == MsgKind.COMMIT_VOTE else "abort"
            if m.kind == MsgKind.ABORT_VOTE:
                prog.vote_decision = "abort"
                self._broadcast(prog, MsgKind.ABORT, ctx)
            elif len(prog.votes) == len(prog.subtxs):
                prog.vote_decision = "commit"
                self._broadcast(prog, MsgKind.COMMIT, ctx)
        elif m.kind in (MsgKind.COMMITTED, MsgKind.ABORTED):
            prog = self._progress_for(m)
            if prog is None:
                return
            prog.acks[m.obj] = "committed" if m.kind == MsgKind.COMMITTED else "aborted"
            if len(prog.acks) == len(prog.subtxs):
                if set(prog.acks.values()) == {"committed"}:
                    self._complete(prog, ctx)
                elif set(prog.acks.values()) == {"aborted"}:
                    self._discard(prog, ctx)
                else:
                    raise ProtocolViolation("mixed apply/abort acks")
        else:
            raise ProtocolViolation(f"nolock leader received {m.kind.value}")

    def _broadcast(self, prog: TxProgress, kind: MsgKind, ctx) -> None:
        for sub in prog.subtxs:
            ctx.send(sub.shard, Message(kind, tx=prog.tx.id, obj=sub.obj, attempt=prog.attempt))


@dataclass
class LockState:
    holder: TxId | None = None
    holder_attempt: int = 0
    queue: list[tuple[TxId, int, Subtransaction]] = field(default_factory=list)


class LockedDest(_BaselineDest):
    """Exclusive per-account locks held from first access to completion."""

    def __init__(self, shard_id: int, cfg: ShardConfig, store: dict[AccountId, VersionedObject]):
        super().__init__(shard_id, cfg, store)
        self.locks: dict[AccountId, LockState] = {}

    def handle(self, env: Envelope, ctx) -> None:
        m = env.msg
        kind = m.kind
        if kind == MsgKind.SUBTX_DISPATCH:
            self._acquire(m, ctx)
        elif kind == MsgKind.COMMIT:
            self._apply_commit(m, ctx)
        elif kind == MsgKind.ABORT:
            self._cleanup(m, ctx, MsgKind.ABORTED)
        elif kind == MsgKind.RESTART:
            self._cleanup(m, ctx, MsgKind.RESTARTED)
        elif kind == MsgKind.RELEASE:
            if self._dead_at((m.tx, m.obj)) >= m.attempt:
                return
            self._unlock(m.obj, m.tx, ctx)
            ctx.send(env.src, Message(MsgKind.RELEASED, tx=m.tx, obj=m.obj, attempt=m.attempt))
        else:
            raise ProtocolViolation(f"locked destination received {kind.value}")

    def _acquire(self, m: Message, ctx) -> None:
        sub = m.subtx
        key = (m.tx, sub.obj)
        if self._dead_at(key) >= m.attempt:
            return
        lock = self.locks.setdefault(sub.obj, LockState())
        if lock.holder is None or lock.holder == m.tx:
            lock.holder = m.tx
            lock.holder_attempt = m.attempt
            self._grant(m.tx, m.attempt, sub, ctx)
        else:
            lock.queue.append((m.tx, m.attempt, sub))
            ctx.after(self.cfg.lock_timeout, ("lock_timeout", sub.obj, m.tx, m.attempt))

    def _grant(self, tx: TxId, attempt: int, sub: Subtransaction, ctx) -> None:
        ok, version = self._validate(sub)
        kind = MsgKind.COMMIT_VOTE if ok else MsgKind.ABORT_VOTE
        if ok:
            self.registered[(tx, sub.obj)] = Registration(
                attempt=attempt, snapshot=version, delta=sub.delta if sub.writes else None
            )
        # The lock stays held either way; it is released when the leader's
        # decision comes back, so the holder's view cannot change under it.
        ctx.send(self.cfg.leader_of(tx), Message(kind, tx=tx, obj=sub.obj, attempt=attempt))

    def on_timer(self, token, ctx) -> None:
        tag, obj, tx, attempt = token
        if tag != "lock_timeout":
            raise ProtocolViolation(f"unknown timer {tag}")
        lock = self.locks.get(obj)
        if lock is None or (tx, attempt) not in [(t, a) for t, a, _ in lock.queue]:
            return  # already granted or cleaned up
        holder = lock.holder
        if holder is not None and holder < tx:
            # Waited too long on an older holder: likely a deadlock, and this
            # waiter is the younger party, so it retires and retries.
            lock.queue = [(t, a, s) for t, a, s in lock.queue if (t, a) != (tx, attempt)]
            ctx.send(self.cfg.leader_of(tx), Message(MsgKind.RESTART_VOTE, tx=tx, obj=obj, attempt=attempt))
        else:
            ctx.after(self.cfg.lock_timeout, token)

    def _apply_commit(self, m: Message, ctx) -> None:
        key = (m.tx, m.obj)
        if self._dead_at(key) >= m.attempt:
            return
        reg = self.registered.pop(key, None)
        if reg is None:
            raise ProtocolViolation(f"commit without validation for {m.tx}/{m.obj}")
        self._apply(m.tx, m.obj, m.attempt, reg)
        ctx.send(self.cfg.leader_of(m.tx), Message(MsgKind.COMMITTED, tx=m.tx, obj=m.obj, attempt=m.attempt))

    def _cleanup(self, m: Message, ctx, reply: MsgKind) -> None:
        key = (m.tx, m.obj)
        if self._dead_at(key) >= m.attempt:
            return
        lock = self.locks.get(m.obj)
        known = self.registered.pop(key, None) is not None
        if lock is not None:
            before = len(lock.queue)
            lock.queue = [(t, a, s) for t, a, s in lock.queue if t != m.tx]
            known = known or len(lock.queue) != before
            if lock.holder == m.tx:
                known = True
                self._unlock(m.obj, m.tx, ctx)
        if not known:
            self._bury(key, m.attempt)  # message overtook the dispatch
        ctx.send(self.cfg.leader_of(m.tx), Message(reply, tx=m.tx, obj=m.obj, attempt=m.attempt))

    def _unlock(self, obj: AccountId, tx: TxId, ctx) -> None:
        lock = self.locks.get(obj)
        if lock is None or lock.holder != tx:
            raise ProtocolViolation(f"release of a lock {obj!r} not held by {tx}")
        lock.holder = None
        if lock.queue:
            nxt_tx, nxt_attempt, nxt_sub = lock.queue.pop(0)
            lock.holder = nxt_tx
            lock.holder_attempt = nxt_attempt
            self._grant(nxt_tx, nxt_attempt, nxt_sub, ctx)

    def assert_quiescent(self) -> None:
        if self.registered:
            raise ProtocolViolation("fragments left validated but never resolved")
        for name, lock in self.locks.items():
            if lock.holder is not None or lock.queue:
                raise ProtocolViolation(f"lock on {name} still busy at quiescence")
        for name, obj in self.store.items():
            if obj.balance < 0:
                raise ProtocolViolation(f"negative balance on {name} under locking")


class LockedLeader(LeaderCore):
    """Same seven-step shape as the lockless leader, with timeout retries
    instead of version-conflict restarts."""

    def handle(self, env: Envelope, ctx) -> None:
        m = env.msg
        kind = m.kind
        if kind == MsgKind.CLIENT_SUBMIT:
            self.on_submit(m.body, ctx)
        elif kind in (MsgKind.COMMIT_VOTE, MsgKind.ABORT_VOTE, MsgKind.RESTART_VOTE):
            self._collect_vote(m, ctx)
        elif kind in (MsgKind.COMMITTED, MsgKind.ABORTED, MsgKind.RESTARTED):
            self._collect_ack(m, ctx)
        elif kind == MsgKind.RELEASED:
            self._collect_final(m, ctx)
        else:
            raise ProtocolViolation(f"locked leader received {kind.value}")

    def _broadcast(self, prog: TxProgress, kind: MsgKind, ctx) -> None:
        for sub in prog.subtxs:
            ctx.send(sub.shard, Message(kind, tx=prog.tx.id, obj=sub.obj, attempt=prog.attempt))

    def _collect_vote(self, m: Message, ctx) -> None:
        prog = self._progress_for(m)
        if prog is None or prog.vote_decision is not None:
            return
        word = {
            MsgKind.COMMIT_VOTE: "commit",
            MsgKind.ABORT_VOTE: "abort",
            MsgKind.RESTART_VOTE: "restart",
        }[m.kind]
        prog.votes[m.obj] = word
        if word == "abort":
            prog.vote_decision = "abort"
            self._broadcast(prog, MsgKind.ABORT, ctx)
        elif word == "restart":
            prog.vote_decision = "restart"
            self._broadcast(prog, MsgKind.RESTART, ctx)
        elif len(prog.votes) == len(prog.subtxs):
            prog.vote_decision = "commit"
            self._broadcast(prog, MsgKind.COMMIT, ctx)

    def _collect_ack(self, m: Message, ctx) -> None:
        prog = self._progress_for(m)
        if prog is None:
            return
        word = {
            MsgKind.COMMITTED: "committed",
            MsgKind.ABORTED: "aborted",
            MsgKind.RESTARTED: "restarted",
        }[m.kind]
        prog.acks[m.obj] = word
        if prog.ack_decision is not None or len(prog.acks) < len(prog.subtxs):
            return
        values = set(prog.acks.values())
        if values == {"committed"}:
            prog.ack_decision = "release"
            self._broadcast(prog, MsgKind.RELEASE, ctx)
        elif values == {"aborted"}:
            self._discard(prog, ctx)
        elif values == {"restarted"}:
            self._restart_tx(prog, ctx)
        else:
            raise ProtocolViolation(f"mixed acks for {m.tx}: {sorted(values)}")

    def _collect_final(self, m: Message, ctx) -> None:
        prog = self._progress_for(m)
        if prog is None:
            return
        prog.finals[m.obj] = "released"
        if len(prog.finals) == len(prog.subtxs):
            self._complete(prog, ctx)
