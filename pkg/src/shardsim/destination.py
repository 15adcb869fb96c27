"""Destination-shard state machine: optimistic per-object validation.

Each shard owns a disjoint set of accounts and keeps, per account, the set
of in-progress fragments that will read or write it, the version each
fragment snapshotted at validation, and an append-only chain of committed
fragments.  Writes are applied provisionally when a fragment commits and
become durable (version bump) only at release; a restart or rollback undoes
the provisional delta.

Condition checks always run against the *settled* balance, i.e. the live
balance minus outstanding provisional deltas.  Validating against tentative
state would let a fragment commit on the strength of a write that is later
undone, which breaks the sequential-equivalence guarantee the verifier
enforces.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .messages import Envelope, Message, MsgKind
from .model import (
    AccountId,
    ProtocolViolation,
    ShardConfig,
    TxId,
    VersionedObject,
)

SubKey = tuple[TxId, AccountId]


@dataclass
class ChainEntry:
    """One committed fragment in the shard's local chain."""

    seq: int
    tx: TxId
    obj: AccountId
    attempt: int
    writes: bool
    delta: int
    snapshot_version: int
    status: str = "tentative"
    result_version: int | None = None

    def to_json(self) -> dict:
        return {
            "seq": self.seq,
            "tx": str(self.tx),
            "subtx_object": self.obj,
            "status": self.status,
            "snapshot_v": self.snapshot_version,
            "result_v": self.result_version,
        }


@dataclass
class Registration:
    """Per-fragment validation record kept between dispatch and release."""

    attempt: int
    snapshot: int
    delta: int | None  # None for a pure read


class DestShard:
    """Single-writer message handler for one shard's object store."""

    def __init__(self, shard_id: int, cfg: ShardConfig, store: dict[AccountId, VersionedObject]):
        self.shard_id = shard_id
        self.cfg = cfg
        self.store = store
        self.registered: dict[SubKey, Registration] = {}
        self.readers: dict[AccountId, set[TxId]] = {}
        self.writers: dict[AccountId, set[TxId]] = {}
        self.pending: dict[AccountId, dict[TxId, int]] = {}
        self.chain: list[ChainEntry] = []
        self._entries: dict[SubKey, ChainEntry] = {}
        # Latest per-attempt tombstones: any message at or below the recorded
        # attempt arrives for state that was forcibly erased (or never built)
        # and must be swallowed, except ForceRollback which is re-acked.
        self.dead: dict[SubKey, int] = {}
        # Latest gossip per sender, keyed on send time so reordered gossip
        # cannot roll the view backwards.
        self.lowest_seen: dict[int, tuple[int, TxId | None]] = {}
        self._entry_seq = 0

    # -- helpers ---------------------------------------------------------

    def settled_balance(self, obj: AccountId) -> int:
        o = self.store[obj]
        return o.balance - sum(self.pending.get(obj, {}).values())

    def lowest_known(self) -> TxId | None:
        ids = [txid for (_, txid) in self.lowest_seen.values() if txid is not None]
        return min(ids) if ids else None

    def note_lowest(self, sender: int, sent_at: int, lowest: TxId | None) -> None:
        prev = self.lowest_seen.get(sender)
        if prev is None or sent_at >= prev[0]:
            self.lowest_seen[sender] = (sent_at, lowest)

    def _dead_at(self, key: SubKey) -> int:
        return self.dead.get(key, -1)

    def _bury(self, key: SubKey, attempt: int) -> None:
        if attempt > self._dead_at(key):
            self.dead[key] = attempt

    def _discard_membership(self, tx: TxId, obj: AccountId) -> None:
        self.readers.get(obj, set()).discard(tx)
        self.writers.get(obj, set()).discard(tx)

    def _find_entry_index(self, entry: ChainEntry) -> int:
        # Targets of removal sit near the end of the chain.
        for i in range(len(self.chain) - 1, -1, -1):
            if self.chain[i] is entry:
                return i
        raise ProtocolViolation("chain entry vanished from its chain")

    def snapshot_balances(self) -> dict[AccountId, tuple[int, int]]:
        """Read-only (balance, version) view; meaningful at quiescence."""
        return {name: (o.balance, o.version) for name, o in sorted(self.store.items())}

    def assert_quiescent(self) -> None:
        if self.registered or any(self.pending.get(o) for o in self.pending):
            raise ProtocolViolation(f"shard {self.shard_id} still has in-progress fragments")
        for e in self.chain:
            if e.status != "released":
                raise ProtocolViolation(f"tentative entry {e.tx}/{e.obj} at quiescence")
        for name, o in self.store.items():
            if o.balance < 0:
                raise ProtocolViolation(f"negative settled balance on {name}")

    # -- message handling ------------------------------------------------

    def handle(self, env: Envelope, ctx) -> None:
        m = env.msg
        kind = m.kind
        if kind == MsgKind.SUBTX_DISPATCH:
            self._validate(env, ctx)
        elif kind == MsgKind.COMMIT:
            self._commit(env, ctx)
        elif kind == MsgKind.ABORT:
            self._abort(env, ctx)
        elif kind == MsgKind.RELEASE:
            self._release(env, ctx)
        elif kind == MsgKind.RESTART:
            self._restart(env, ctx)
        elif kind == MsgKind.FORCE_ROLLBACK:
            self._force_rollback(env, ctx)
        elif kind == MsgKind.LOWEST_ID_GOSSIP:
            self.note_lowest(env.src, env.send_time, m.lowest)
        else:
            raise ProtocolViolation(f"destination shard received {kind.value}")

    def _validate(self, env: Envelope, ctx) -> None:
        m = env.msg
        sub = m.subtx
        key = (m.tx, sub.obj)
        if self._dead_at(key) >= m.attempt:
            # A rollback or abort for this attempt overtook the dispatch;
            # the leader has already moved on, so stay silent.
            return
        obj = self.store.get(sub.obj)
        ok = obj is not None
        if ok:
            settled = self.settled_balance(sub.obj)
            ok = all(c.holds(settled) for c in sub.conditions)
            if ok and sub.update is not None and sub.update.delta < 0:
                ok = settled + sub.update.delta >= 0
        if not ok:
            ctx.send(env.src, Message(MsgKind.ABORT_VOTE, tx=m.tx, obj=sub.obj, attempt=m.attempt))
            return
        self.registered[key] = Registration(
            attempt=m.attempt,
            snapshot=obj.version,
            delta=sub.update.delta if sub.update else None,
        )
        self.readers.setdefault(sub.obj, set()).add(m.tx)
        if sub.update is not None:
            self.writers.setdefault(sub.obj, set()).add(m.tx)
        ctx.send(env.src, Message(MsgKind.COMMIT_VOTE, tx=m.tx, obj=sub.obj, attempt=m.attempt))

    def _commit(self, env: Envelope, ctx) -> None:
        m = env.msg
        key = (m.tx, m.obj)
        if self._dead_at(key) >= m.attempt:
            return
        reg = self.registered.get(key)
        if reg is None or reg.attempt != m.attempt:
            return  # stale: the fragment was erased after voting
        obj = self.store[m.obj]
        other_writers = self.writers.get(m.obj, set()) - {m.tx}
        other_readers = self.readers.get(m.obj, set()) - {m.tx}
        is_writer = reg.delta is not None
        # A writer may commit only while no other fragment is registered on
        # the object; a reader only while no writer is pending.  The
        # globally-lowest transaction skips the set check (and evicts the
        # writers blocking it) but still needs an unchanged version: its
        # conditions were judged at the snapshot, and an intervening release
        # would put its chain position after state it never saw.
        set_ok = not other_writers or (is_writer and not other_readers)
        version_ok = obj.version == reg.snapshot
        lowest = self.lowest_known()
        if version_ok and (set_ok or m.tx == lowest):
            if reg.delta is not None:
                obj.balance += reg.delta
                self.pending.setdefault(m.obj, {})[m.tx] = reg.delta
            self._entry_seq += 1
            entry = ChainEntry(
                seq=self._entry_seq,
                tx=m.tx,
                obj=m.obj,
                attempt=m.attempt,
                writes=is_writer,
                delta=reg.delta or 0,
                snapshot_version=reg.snapshot,
            )
            self.chain.append(entry)
            self._entries[key] = entry
            ctx.send(env.src, Message(MsgKind.COMMITTED, tx=m.tx, obj=m.obj, attempt=m.attempt))
            if m.tx == lowest:
                for victim in sorted(other_writers):
                    v_reg = self.registered.get((victim, m.obj))
                    if v_reg is None:
                        continue
                    ctx.send(
                        self.cfg.leader_of(victim),
                        Message(MsgKind.FORCE_ROLLBACK, tx=victim, obj=m.obj, attempt=v_reg.attempt),
                    )
        else:
            ctx.send(env.src, Message(MsgKind.RESTART_VOTE, tx=m.tx, obj=m.obj, attempt=m.attempt))

    def _abort(self, env: Envelope, ctx) -> None:
        m = env.msg
        key = (m.tx, m.obj)
        if self._dead_at(key) >= m.attempt:
            return
        reg = self.registered.pop(key, None)
        if reg is None:
            # Either the fragment failed validation (nothing recorded) or the
            # abort overtook the dispatch; bury the attempt so a late
            # dispatch cannot leak a registration.
            self._bury(key, m.attempt)
        else:
            if key in self._entries:
                raise ProtocolViolation("abort for a fragment that already committed")
            self._discard_membership(m.tx, m.obj)
        ctx.send(env.src, Message(MsgKind.ABORTED, tx=m.tx, obj=m.obj, attempt=m.attempt))

    def _release(self, env: Envelope, ctx) -> None:
        m = env.msg
        key = (m.tx, m.obj)
        if self._dead_at(key) >= m.attempt:
            return
        entry = self._entries.get(key)
        if entry is None or entry.status != "tentative":
            raise ProtocolViolation(f"release without a tentative entry for {m.tx}/{m.obj}")
        if entry.writes:
            obj = self.store[m.obj]
            obj.version += 1
            entry.result_version = obj.version
            self.pending.get(m.obj, {}).pop(m.tx, None)
            if self.settled_balance(m.obj) < 0:
                raise ProtocolViolation(f"released write drove {m.obj} negative")
        entry.status = "released"
        self.registered.pop(key, None)
        self._discard_membership(m.tx, m.obj)
        ctx.send(env.src, Message(MsgKind.RELEASED, tx=m.tx, obj=m.obj, attempt=m.attempt))

    def _restart(self, env: Envelope, ctx) -> None:
        m = env.msg
        key = (m.tx, m.obj)
        if self._dead_at(key) >= m.attempt:
            return
        entry = self._entries.pop(key, None)
        if entry is not None:
            # Legal only while tentative: the entry was never observable as
            # committed history.
            if entry.status != "tentative":
                raise ProtocolViolation("restart reached a released entry")
            del self.chain[self._find_entry_index(entry)]
            if entry.writes:
                self.store[m.obj].balance -= entry.delta
                self.pending.get(m.obj, {}).pop(m.tx, None)
        self.registered.pop(key, None)
        self._discard_membership(m.tx, m.obj)
        ctx.send(env.src, Message(MsgKind.RESTARTED, tx=m.tx, obj=m.obj, attempt=m.attempt))

    def _force_rollback(self, env: Envelope, ctx) -> None:
        """Erase a fragment and the whole chain suffix that follows it.

        Every entry appended after the target may depend on its write, so
        the suffix is undone in reverse order and each undone fragment's
        leader is told to roll the rest of that transaction back too.
        Re-delivery is an idempotent re-ack.
        """
        m = env.msg
        key = (m.tx, m.obj)
        reply_to = self.cfg.leader_of(m.tx)
        if self._dead_at(key) >= m.attempt:
            ctx.send(reply_to, Message(MsgKind.ROLLBACKED, tx=m.tx, obj=m.obj, attempt=m.attempt))
            return
        self._bury(key, m.attempt)
        self.registered.pop(key, None)
        self._discard_membership(m.tx, m.obj)
        entry = self._entries.get(key)
        cascade: list[ChainEntry] = []
        if entry is not None:
            idx = self._find_entry_index(entry)
            suffix = self.chain[idx:]
            for e in reversed(suffix):
                obj = self.store[e.obj]
                if e.writes:
                    obj.balance -= e.delta
                    if e.status == "released":
                        obj.version -= 1
                    else:
                        self.pending.get(e.obj, {}).pop(e.tx, None)
                ekey = (e.tx, e.obj)
                self._bury(ekey, e.attempt)
                self.registered.pop(ekey, None)
                self._discard_membership(e.tx, e.obj)
                self._entries.pop(ekey, None)
            del self.chain[idx:]
            cascade = [e for e in suffix if (e.tx, e.obj) != key]
        ctx.send(reply_to, Message(MsgKind.ROLLBACKED, tx=m.tx, obj=m.obj, attempt=m.attempt))
        for e in cascade:
            ctx.send(
                self.cfg.leader_of(e.tx),
                Message(MsgKind.FORCE_ROLLBACK, tx=e.tx, obj=e.obj, attempt=e.attempt),
            )

    def on_timer(self, token, ctx) -> None:  # pragma: no cover - lockless has no timers
        raise ProtocolViolation("unexpected timer on a lockless destination shard")

    def chain_json(self) -> list[dict]:
        return [e.to_json() for e in self.chain]
