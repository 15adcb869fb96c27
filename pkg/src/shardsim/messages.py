"""Closed wire vocabulary between leader and destination shards."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .model import Subtransaction, Transaction, TxId


class MsgKind(str, Enum):
    SUBTX_DISPATCH = "SubtxDispatch"
    COMMIT_VOTE = "CommitVote"
    ABORT_VOTE = "AbortVote"
    COMMIT = "Commit"
    ABORT = "Abort"
    COMMITTED = "Committed"
    RESTART_VOTE = "RestartVote"
    ABORTED = "Aborted"
    RELEASE = "Release"
    RESTART = "Restart"
    RELEASED = "Released"
    RESTARTED = "Restarted"
    FORCE_ROLLBACK = "ForceRollback"
    ROLLBACKED = "Rollbacked"
    LOWEST_ID_GOSSIP = "LowestIdGossip"
    CLIENT_SUBMIT = "ClientSubmit"


# Which step of the commit pipeline consumes each kind.  Gossip and rollback
# traffic run outside the numbered ladder.
_PHASE = {
    MsgKind.CLIENT_SUBMIT: 1,
    MsgKind.SUBTX_DISPATCH: 2,
    MsgKind.COMMIT_VOTE: 3,
    MsgKind.ABORT_VOTE: 3,
    MsgKind.COMMIT: 4,
    MsgKind.ABORT: 4,
    MsgKind.COMMITTED: 5,
    MsgKind.RESTART_VOTE: 5,
    MsgKind.ABORTED: 5,
    MsgKind.RELEASE: 6,
    MsgKind.RESTART: 6,
    MsgKind.RELEASED: 7,
    MsgKind.RESTARTED: 7,
    MsgKind.FORCE_ROLLBACK: "rollback",
    MsgKind.ROLLBACKED: "rollback",
    MsgKind.LOWEST_ID_GOSSIP: "gossip",
}


def classify(kind: MsgKind) -> int | str:
    """Phase tag (1..7, "rollback" or "gossip") consuming this message kind."""
    return _PHASE[MsgKind(kind)]


@dataclass(frozen=True)
class Message:
    """One protocol message.

    ``attempt`` counts dispatches of the parent transaction; handlers drop
    messages from superseded attempts, which closes the races left open by
    restarts and rollbacks overtaking slower messages in flight.
    """

    kind: MsgKind
    tx: TxId | None = None
    obj: str | None = None
    attempt: int = 0
    subtx: Subtransaction | None = None
    lowest: TxId | None = None
    body: Transaction | None = None

    def __post_init__(self) -> None:
        if self.kind not in (MsgKind.LOWEST_ID_GOSSIP, MsgKind.CLIENT_SUBMIT):
            if self.tx is None:
                raise ValueError(f"{self.kind.value} must reference a transaction")


@dataclass(frozen=True)
class Envelope:
    """In-flight message with simulator timing metadata.

    Delivery always lands within (0, delta1] of the send: the network never
    loses or duplicates, it only delays.
    """

    src: int
    dst: int
    send_time: int
    deliver_time: int
    msg: Message

    def trace_json(self) -> dict:
        return {
            "t_send": self.send_time,
            "t_deliver": self.deliver_time,
            "from": self.src,
            "to": self.dst,
            "kind": self.msg.kind.value,
            "tx": str(self.msg.tx) if self.msg.tx else None,
            "obj": self.msg.obj,
        }
