"""Hand-driven harness: real shard state machines, manual message delivery.

Lets a test stage any interleaving: every emitted message lands in a queue
and is delivered only when the test says so.  Logical time advances one
tick per delivery so send-time ordering stays meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from shardsim.destination import DestShard
from shardsim.leader import LeaderShard
from shardsim.messages import Envelope, Message, MsgKind
from shardsim.model import ShardConfig, Transaction, TxId, VersionedObject, as_partition

LEADER_KINDS = {
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


class RecordingCtx:
    """Context for driving a single shard object directly."""

    def __init__(self, now: int = 0):
        self.now = now
        self.sent: list[tuple[int, Message]] = []
        self.checks: list[int] = []
        self.timers: list[tuple[int, object]] = []
        self.finished = 0

    def send(self, dst: int, msg: Message) -> None:
        self.sent.append((dst, msg))

    def request_dispatch_check(self, shard: int) -> None:
        self.checks.append(shard)

    def after(self, delay: int, token) -> None:
        self.timers.append((delay, token))

    def tx_finished(self) -> None:
        self.finished += 1

    def tx_unfinished(self) -> None:
        self.finished -= 1

    def take(self) -> list[tuple[int, Message]]:
        out, self.sent = self.sent, []
        return out


class _HandCtx:
    def __init__(self, net: "HandNet", src: int):
        self.net = net
        self.src = src

    @property
    def now(self) -> int:
        return self.net.now

    def send(self, dst: int, msg: Message) -> None:
        self.net.queue.append(
            Envelope(src=self.src, dst=dst, send_time=self.net.now, deliver_time=self.net.now + 1, msg=msg)
        )

    def request_dispatch_check(self, shard: int) -> None:
        self.net.pending_checks.append(shard)

    def after(self, delay: int, token) -> None:
        self.net.timers.append((self.src, token))

    def tx_finished(self) -> None:
        self.net.finished += 1

    def tx_unfinished(self) -> None:
        self.net.finished -= 1


@dataclass
class HandNet:
    cfg: ShardConfig
    balances: dict
    partition: object

    def __post_init__(self):
        part = as_partition(self.partition)
        stores = [{} for _ in range(self.cfg.shards)]
        for name, bal in self.balances.items():
            stores[part(name)][name] = VersionedObject(id=name, balance=bal)
        self.leaders = [LeaderShard(i, self.cfg, part) for i in range(self.cfg.shards)]
        self.dests = [DestShard(i, self.cfg, stores[i]) for i in range(self.cfg.shards)]
        self.queue: list[Envelope] = []
        self.pending_checks: list[int] = []
        self.timers: list = []
        self.now = 0
        self.finished = 0
        self.delivered: list[Envelope] = []

    def ctx(self, src: int) -> _HandCtx:
        return _HandCtx(self, src)

    def submit(self, tx: Transaction) -> None:
        leader = self.cfg.leader_of(tx.id)
        self.leaders[leader].on_submit(tx, self.ctx(leader))
        self.run_checks()

    def run_checks(self) -> None:
        while self.pending_checks:
            shard = self.pending_checks.pop(0)
            self.leaders[shard].on_dispatch_check(self.ctx(shard))

    def inject_lowest(self, lowest: TxId | None) -> None:
        """Make every destination believe `lowest` is the system-wide minimum."""
        self.now += 1
        for dest in self.dests:
            dest.note_lowest(sender=-1, sent_at=self.now, lowest=lowest)

    def _matches(self, env: Envelope, kind=None, dst=None, tx=None, obj=None) -> bool:
        m = env.msg
        return (
            (kind is None or m.kind == kind)
            and (dst is None or env.dst == dst)
            and (tx is None or m.tx == tx)
            and (obj is None or m.obj == obj)
        )

    def hold(self, **query) -> Envelope:
        """Pull the first matching message out of the queue without delivering."""
        for i, env in enumerate(self.queue):
            if self._matches(env, **query):
                return self.queue.pop(i)
        raise AssertionError(f"no queued message matches {query}")

    def deliver(self, env: Envelope) -> None:
        self.now += 1
        self.delivered.append(env)
        ctx = self.ctx(env.dst)
        if env.msg.kind == MsgKind.LOWEST_ID_GOSSIP:
            self.dests[env.dst].handle(env, ctx)
            self.leaders[env.dst].record_gossip(env)
        elif env.msg.kind in LEADER_KINDS:
            self.leaders[env.dst].handle(env, ctx)
        else:
            self.dests[env.dst].handle(env, ctx)
        self.run_checks()

    def deliver_where(self, **query) -> Envelope:
        env = self.hold(**query)
        self.deliver(env)
        return env

    def deliver_all(self, **query) -> int:
        count = 0
        while any(self._matches(e, **query) for e in self.queue):
            self.deliver_where(**query)
            count += 1
        return count

    def pump(self, limit: int = 100_000) -> None:
        """FIFO-deliver everything until the network is silent."""
        steps = 0
        while self.queue:
            self.deliver(self.queue.pop(0))
            steps += 1
            if steps > limit:
                raise AssertionError("hand-driven network did not quiesce")

    def kinds_delivered(self) -> list[MsgKind]:
        return [env.msg.kind for env in self.delivered]

    def balances_now(self) -> dict[str, int]:
        out = {}
        for dest in self.dests:
            for name, (bal, _) in dest.snapshot_balances().items():
                out[name] = bal
        return out

    def versions_now(self) -> dict[str, int]:
        out = {}
        for dest in self.dests:
            for name, (_, version) in dest.snapshot_balances().items():
                out[name] = version
        return out

    def chains(self) -> dict[str, list[dict]]:
        return {str(d.shard_id): d.chain_json() for d in self.dests}
