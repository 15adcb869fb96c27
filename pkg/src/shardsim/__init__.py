"""Deterministic desk-scale simulator for lockless sharded transaction commit."""

from .model import (
    AccountId,
    Condition,
    ConfigError,
    ProtocolViolation,
    ShardConfig,
    ShardSimError,
    Subtransaction,
    Transaction,
    TxId,
    Update,
    VersionedObject,
    WorkloadError,
    evaluate_condition,
    make_partition,
    partition_account,
    split,
)
from .messages import Envelope, Message, MsgKind, classify
from .sim import RunReport, SimulationStalled, Simulator, run_simulation
from .verifier import (
    CausalGraph,
    ChainRecord,
    VerifyReport,
    build_graph,
    check_shard_coherence,
    check_valid,
    oracle_replay,
    serialize,
    verify_run,
)
from .workload import gen_accounts, gen_transactions

__version__ = "0.1.0"
