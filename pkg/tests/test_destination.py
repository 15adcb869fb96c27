import copy

import pytest

from shardsim.destination import DestShard
from shardsim.messages import Envelope, Message, MsgKind
from shardsim.model import (
    Condition,
    ProtocolViolation,
    ShardConfig,
    Subtransaction,
    TxId,
    Update,
    VersionedObject,
)

from helpers import RecordingCtx

CFG = ShardConfig(shards=4, delta3=0)


def make_dest(balances, shard=1):
    store = {name: VersionedObject(id=name, balance=bal) for name, bal in balances.items()}
    return DestShard(shard, CFG, store)


def sub(txid, obj, conditions=(), delta=None, shard=1):
    return Subtransaction(
        parent=txid,
        shard=shard,
        obj=obj,
        conditions=tuple(conditions),
        update=Update(obj, delta) if delta is not None else None,
    )


def env(dst, msg, src=0, t=0):
    return Envelope(src=src, dst=dst, send_time=t, deliver_time=t + 1, msg=msg)


def dispatch(dest, ctx, subtx, attempt=1, src=0):
    dest.handle(
        env(dest.shard_id, Message(MsgKind.SUBTX_DISPATCH, tx=subtx.parent, obj=subtx.obj, attempt=attempt, subtx=subtx), src=src),
        ctx,
    )


def send_kind(dest, ctx, kind, txid, obj, attempt=1, src=0):
    dest.handle(env(dest.shard_id, Message(kind, tx=txid, obj=obj, attempt=attempt), src=src), ctx)


T1 = TxId(1, 0, 0)
T2 = TxId(2, 0, 0)
T3 = TxId(3, 0, 0)


class TestValidation:
    def test_writer_with_passing_condition_votes_commit(self):
        dest = make_dest({"rock": 3000})
        ctx = RecordingCtx()
        dispatch(dest, ctx, sub(T1, "rock", [Condition("rock", ">=", 3000)], delta=-2000))
        ((_, vote),) = ctx.take()
        assert vote.kind == MsgKind.COMMIT_VOTE
        assert dest.readers["rock"] == {T1}
        assert dest.writers["rock"] == {T1}
        assert dest.registered[(T1, "rock")].snapshot == 0

    def test_read_only_fragment_registers_no_write(self):
        dest = make_dest({"mark": 200})
        ctx = RecordingCtx()
        dispatch(dest, ctx, sub(T1, "mark", [Condition("mark", ">=", 200)]))
        ((_, vote),) = ctx.take()
        assert vote.kind == MsgKind.COMMIT_VOTE
        assert dest.readers["mark"] == {T1}
        assert dest.writers.get("mark", set()) == set()

    def test_failing_condition_votes_abort_and_records_nothing(self):
        dest = make_dest({"asma": 500})
        ctx = RecordingCtx()
        dispatch(dest, ctx, sub(T2, "asma", [Condition("asma", ">=", 5000)], delta=-500))
        ((_, vote),) = ctx.take()
        assert vote.kind == MsgKind.ABORT_VOTE
        assert (T2, "asma") not in dest.registered
        assert dest.readers.get("asma", set()) == set()

    def test_overdraw_votes_abort_even_when_conditions_pass(self):
        dest = make_dest({"rock": 100})
        ctx = RecordingCtx()
        dispatch(dest, ctx, sub(T1, "rock", [Condition("rock", ">=", 10)], delta=-500))
        ((_, vote),) = ctx.take()
        assert vote.kind == MsgKind.ABORT_VOTE

    def test_unknown_account_votes_abort(self):
        dest = make_dest({})
        ctx = RecordingCtx()
        dispatch(dest, ctx, sub(T1, "ghost", [], delta=5))
        ((_, vote),) = ctx.take()
        assert vote.kind == MsgKind.ABORT_VOTE

    def test_validation_reads_settled_balance_not_tentative(self):
        # A pending provisional deposit must not satisfy someone else's check.
        dest = make_dest({"asma": 500})
        ctx = RecordingCtx()
        dispatch(dest, ctx, sub(T1, "asma", [], delta=2000))
        send_kind(dest, ctx, MsgKind.COMMIT, T1, "asma")
        assert dest.store["asma"].balance == 2500  # provisionally applied
        ctx.take()
        dispatch(dest, ctx, sub(T2, "asma", [Condition("asma", ">=", 1000)]))
        ((_, vote),) = ctx.take()
        assert vote.kind == MsgKind.ABORT_VOTE


class TestCommitPhase:
    def test_sole_accessor_commits_and_appends(self):
        dest = make_dest({"rock": 3000})
        ctx = RecordingCtx()
        dispatch(dest, ctx, sub(T1, "rock", [], delta=-2000))
        ctx.take()
        send_kind(dest, ctx, MsgKind.COMMIT, T1, "rock")
        ((_, reply),) = ctx.take()
        assert reply.kind == MsgKind.COMMITTED
        assert dest.store["rock"].balance == 1000
        assert len(dest.chain) == 1 and dest.chain[0].status == "tentative"

    def test_second_writer_must_restart(self):
        dest = make_dest({"asma": 5000})
        ctx = RecordingCtx()
        dispatch(dest, ctx, sub(T1, "asma", [], delta=2000))
        dispatch(dest, ctx, sub(T2, "asma", [], delta=-500))
        ctx.take()
        send_kind(dest, ctx, MsgKind.COMMIT, T2, "asma")
        ((_, reply),) = ctx.take()
        assert reply.kind == MsgKind.RESTART_VOTE
        assert len(dest.chain) == 0

    def test_reader_blocked_by_pending_writer(self):
        dest = make_dest({"asma": 5000})
        ctx = RecordingCtx()
        dispatch(dest, ctx, sub(T1, "asma", [], delta=2000))
        dispatch(dest, ctx, sub(T2, "asma", [Condition("asma", ">=", 1)]))
        ctx.take()
        send_kind(dest, ctx, MsgKind.COMMIT, T2, "asma")
        ((_, reply),) = ctx.take()
        assert reply.kind == MsgKind.RESTART_VOTE

    def test_writer_may_commit_over_pending_readers(self):
        dest = make_dest({"asma": 5000})
        ctx = RecordingCtx()
        dispatch(dest, ctx, sub(T1, "asma", [Condition("asma", ">=", 1)]))
        dispatch(dest, ctx, sub(T2, "asma", [], delta=-500))
        ctx.take()
        send_kind(dest, ctx, MsgKind.COMMIT, T2, "asma")
        ((_, reply),) = ctx.take()
        assert reply.kind == MsgKind.COMMITTED

    def test_version_change_forces_restart_vote(self):
        dest = make_dest({"rock": 3000})
        ctx = RecordingCtx()
        dispatch(dest, ctx, sub(T1, "rock", [], delta=-100))
        dispatch(dest, ctx, sub(T2, "rock", [Condition("rock", ">=", 1)]))
        ctx.take()
        send_kind(dest, ctx, MsgKind.COMMIT, T1, "rock")
        send_kind(dest, ctx, MsgKind.RELEASE, T1, "rock")
        ctx.take()
        assert dest.store["rock"].version == 1
        send_kind(dest, ctx, MsgKind.COMMIT, T2, "rock")
        ((_, reply),) = ctx.take()
        assert reply.kind == MsgKind.RESTART_VOTE

    def test_lowest_id_override_commits_and_fires_rollback(self):
        dest = make_dest({"asma": 5000})
        ctx = RecordingCtx()
        dispatch(dest, ctx, sub(T2, "asma", [], delta=2000))   # writer registered first
        dispatch(dest, ctx, sub(T1, "asma", [], delta=-500))   # lowest id arrives second
        ctx.take()
        send_kind(dest, ctx, MsgKind.COMMIT, T2, "asma")
        ctx.take()  # T2 tentatively committed
        dest.note_lowest(sender=9, sent_at=5, lowest=T1)
        send_kind(dest, ctx, MsgKind.COMMIT, T1, "asma")
        sent = ctx.take()
        kinds = [m.kind for _, m in sent]
        assert MsgKind.COMMITTED in kinds
        assert MsgKind.FORCE_ROLLBACK in kinds
        (fr_dst, fr) = next((d, m) for d, m in sent if m.kind == MsgKind.FORCE_ROLLBACK)
        assert fr.tx == T2 and fr_dst == CFG.leader_of(T2)

    def test_override_still_respects_version_check(self):
        # The lowest transaction may skip the set check but never the version
        # check: its conditions were judged at the snapshot.
        dest = make_dest({"rock": 3000})
        ctx = RecordingCtx()
        dispatch(dest, ctx, sub(T1, "rock", [Condition("rock", ">=", 1)]))
        dispatch(dest, ctx, sub(T2, "rock", [], delta=-100))
        ctx.take()
        send_kind(dest, ctx, MsgKind.COMMIT, T2, "rock")
        send_kind(dest, ctx, MsgKind.RELEASE, T2, "rock")
        ctx.take()
        dest.note_lowest(sender=9, sent_at=5, lowest=T1)
        send_kind(dest, ctx, MsgKind.COMMIT, T1, "rock")
        ((_, reply),) = ctx.take()
        assert reply.kind == MsgKind.RESTART_VOTE

    def test_stale_commit_without_registration_is_dropped(self):
        dest = make_dest({"rock": 3000})
        ctx = RecordingCtx()
        send_kind(dest, ctx, MsgKind.COMMIT, T1, "rock")
        assert ctx.take() == []


class TestFinalize:
    def test_release_bumps_version_once(self):
        dest = make_dest({"asma": 500})
        ctx = RecordingCtx()
        dispatch(dest, ctx, sub(T1, "asma", [], delta=2000))
        send_kind(dest, ctx, MsgKind.COMMIT, T1, "asma")
        ctx.take()
        send_kind(dest, ctx, MsgKind.RELEASE, T1, "asma")
        ((_, reply),) = ctx.take()
        assert reply.kind == MsgKind.RELEASED
        obj = dest.store["asma"]
        assert (obj.balance, obj.version) == (2500, 1)
        assert dest.chain[0].status == "released"
        assert dest.chain[0].result_version == 1
        assert dest.registered == {}

    def test_restart_of_read_only_fragment_touches_nothing(self):
        dest = make_dest({"mark": 200})
        ctx = RecordingCtx()
        dispatch(dest, ctx, sub(T1, "mark", [Condition("mark", ">=", 200)]))
        ctx.take()
        send_kind(dest, ctx, MsgKind.RESTART, T1, "mark")
        ((_, reply),) = ctx.take()
        assert reply.kind == MsgKind.RESTARTED
        assert dest.store["mark"].balance == 200
        assert dest.chain == []

    def test_restart_undoes_provisional_delta(self):
        # Apply-then-undo identity: the balance returns to its prior value.
        dest = make_dest({"rock": 3000})
        ctx = RecordingCtx()
        dispatch(dest, ctx, sub(T1, "rock", [], delta=-2000))
        send_kind(dest, ctx, MsgKind.COMMIT, T1, "rock")
        ctx.take()
        assert dest.store["rock"].balance == 1000
        send_kind(dest, ctx, MsgKind.RESTART, T1, "rock")
        ctx.take()
        assert dest.store["rock"].balance == 3000
        assert dest.store["rock"].version == 0
        assert dest.chain == []

    def test_release_without_entry_is_a_violation(self):
        dest = make_dest({"rock": 3000})
        ctx = RecordingCtx()
        dispatch(dest, ctx, sub(T1, "rock", [], delta=-5))
        ctx.take()
        with pytest.raises(ProtocolViolation):
            send_kind(dest, ctx, MsgKind.RELEASE, T1, "rock")


class TestForceRollback:
    def _committed_writer(self, dest, ctx, txid, obj, delta, attempt=1):
        dispatch(dest, ctx, sub(txid, obj, [], delta=delta), attempt=attempt)
        send_kind(dest, ctx, MsgKind.COMMIT, txid, obj, attempt=attempt)
        send_kind(dest, ctx, MsgKind.RELEASE, txid, obj, attempt=attempt)
        ctx.take()

    def test_singleton_suffix(self):
        dest = make_dest({"rock": 3000})
        ctx = RecordingCtx()
        self._committed_writer(dest, ctx, T1, "rock", -2000)
        send_kind(dest, ctx, MsgKind.FORCE_ROLLBACK, T1, "rock")
        ((dst, reply),) = ctx.take()
        assert reply.kind == MsgKind.ROLLBACKED and dst == CFG.leader_of(T1)
        assert dest.store["rock"].balance == 3000
        assert dest.store["rock"].version == 0
        assert dest.chain == []

    def test_suffix_cascades_to_dependent_entries(self):
        dest = make_dest({"rock": 3000})
        ctx = RecordingCtx()
        self._committed_writer(dest, ctx, T1, "rock", -2000)
        self._committed_writer(dest, ctx, T2, "rock", -500)
        send_kind(dest, ctx, MsgKind.FORCE_ROLLBACK, T1, "rock")
        sent = ctx.take()
        kinds = {(m.kind, m.tx) for _, m in sent}
        assert (MsgKind.ROLLBACKED, T1) in kinds
        assert (MsgKind.FORCE_ROLLBACK, T2) in kinds
        assert dest.store["rock"].balance == 3000 and dest.store["rock"].version == 0
        assert dest.chain == []

    def test_rollback_without_entry_acks_immediately(self):
        dest = make_dest({"rock": 3000})
        ctx = RecordingCtx()
        send_kind(dest, ctx, MsgKind.FORCE_ROLLBACK, T3, "rock")
        ((_, reply),) = ctx.take()
        assert reply.kind == MsgKind.ROLLBACKED

    def test_double_delivery_is_a_no_op(self):
        dest = make_dest({"rock": 3000})
        ctx = RecordingCtx()
        self._committed_writer(dest, ctx, T1, "rock", -2000)
        send_kind(dest, ctx, MsgKind.FORCE_ROLLBACK, T1, "rock")
        ctx.take()
        before = (
            copy.deepcopy(dest.store),
            list(dest.chain),
            dict(dest.registered),
            {k: set(v) for k, v in dest.readers.items()},
        )
        send_kind(dest, ctx, MsgKind.FORCE_ROLLBACK, T1, "rock")
        ((_, reply),) = ctx.take()
        assert reply.kind == MsgKind.ROLLBACKED
        after = (
            dest.store,
            list(dest.chain),
            dict(dest.registered),
            {k: set(v) for k, v in dest.readers.items()},
        )
        assert before[0] == after[0] and before[1:] == after[1:]

    def test_rollback_tombstone_swallows_late_dispatch(self):
        dest = make_dest({"rock": 3000})
        ctx = RecordingCtx()
        send_kind(dest, ctx, MsgKind.FORCE_ROLLBACK, T1, "rock", attempt=2)
        ctx.take()
        dispatch(dest, ctx, sub(T1, "rock", [], delta=-5), attempt=2)
        assert ctx.take() == []  # no vote: this attempt is dead
        dispatch(dest, ctx, sub(T1, "rock", [], delta=-5), attempt=3)
        ((_, vote),) = ctx.take()
        assert vote.kind == MsgKind.COMMIT_VOTE  # the next attempt is live


class TestLowestTracking:
    def test_min_over_senders_ignoring_none(self):
        dest = make_dest({})
        dest.note_lowest(1, 10, TxId(3, 0, 0))
        dest.note_lowest(2, 10, None)
        dest.note_lowest(3, 10, TxId(8, 0, 0))
        assert dest.lowest_known() == TxId(3, 0, 0)

    def test_stale_gossip_never_overwrites_newer(self):
        dest = make_dest({})
        dest.note_lowest(1, sent_at=20, lowest=TxId(9, 0, 0))
        dest.note_lowest(1, sent_at=10, lowest=TxId(1, 0, 0))  # late arrival, older send
        assert dest.lowest_known() == TxId(9, 0, 0)

    def test_all_none_means_no_override(self):
        dest = make_dest({})
        dest.note_lowest(1, 10, None)
        dest.note_lowest(2, 11, None)
        assert dest.lowest_known() is None
