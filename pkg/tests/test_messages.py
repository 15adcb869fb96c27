import pytest

from shardsim.messages import Envelope, Message, MsgKind, classify
from shardsim.model import TxId


def test_vocabulary_is_closed_at_sixteen_kinds():
    assert len(MsgKind) == 16


def test_classify_is_total():
    for kind in MsgKind:
        assert classify(kind) is not None


def test_phase_mapping_examples():
    assert classify(MsgKind.COMMIT_VOTE) == 3
    assert classify(MsgKind.LOWEST_ID_GOSSIP) == "gossip"
    assert classify(MsgKind.RELEASED) == 7
    assert classify(MsgKind.SUBTX_DISPATCH) == 2
    assert classify(MsgKind.FORCE_ROLLBACK) == "rollback"


def test_protocol_messages_require_a_transaction():
    with pytest.raises(ValueError):
        Message(MsgKind.COMMIT)
    Message(MsgKind.LOWEST_ID_GOSSIP)  # gossip may carry no transaction


def test_trace_schema():
    env = Envelope(
        src=0,
        dst=1,
        send_time=10,
        deliver_time=14,
        msg=Message(MsgKind.COMMIT, tx=TxId(1, 0, 0), obj="rock"),
    )
    doc = env.trace_json()
    assert set(doc) >= {"t_send", "t_deliver", "from", "to", "kind", "tx"}
    assert doc["kind"] == "Commit" and doc["t_deliver"] - doc["t_send"] == 4
