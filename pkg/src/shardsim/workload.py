"""Randomized transfer workloads over a generated account universe.

Every generator draw comes from a stream seeded by (seed, index), so the
transfer pairs and amounts are identical across different constraint counts
and the whole workload is reproducible byte for byte.
"""

from __future__ import annotations

import argparse
import random
import string
from typing import Mapping, Sequence

from .model import (
    Condition,
    Transaction,
    TxId,
    Update,
    WorkloadError,
    dump_accounts,
    dump_transactions,
)

NAME_LENGTH = 6
MAX_TRANSFER = 500
MAX_THRESHOLD = 3000


def gen_accounts(count: int, initial_balance: int, seed) -> dict[str, int]:
    """Distinct random letter-string accounts, all at the same balance."""
    if count < 1:
        raise WorkloadError("need at least one account")
    rng = random.Random(f"{seed}:accounts")
    names: dict[str, int] = {}
    while len(names) < count:
        name = "".join(rng.choice(string.ascii_lowercase) for _ in range(NAME_LENGTH))
        if name not in names:
            names[name] = initial_balance
    return names


def gen_transactions(
    count: int,
    accounts: Sequence[str] | Mapping[str, int],
    constraints_per_tx: int = 4,
    seed=0,
    shards: int = 4,
    spacing_ms: int = 1,
    fail_fraction: float = 0.0,
) -> list[Transaction]:
    """Random transfers with a sufficient-balance check plus extra constraints.

    Each transaction moves 1..500 units from one account to another.  The
    first condition guards the withdrawal; the remaining
    ``constraints_per_tx - 1`` are balance checks on further distinct
    accounts with thresholds that pass against the initial balances unless
    ``fail_fraction`` asks for deliberately unsatisfiable ones.  Arrival
    times are staggered ``spacing_ms`` apart and leaders assigned
    round-robin.
    """
    names = list(accounts)
    if constraints_per_tx < 1:
        raise WorkloadError("need at least the sufficient-balance constraint")
    if len(names) < constraints_per_tx + 1:
        raise WorkloadError(
            f"{len(names)} accounts cannot support {constraints_per_tx} constraints per transaction"
        )
    txs = []
    for i in range(count):
        rng = random.Random(f"{seed}:tx:{i}")
        src, dst = rng.sample(names, 2)
        amount = rng.randint(1, MAX_TRANSFER)
        conditions = [Condition(src, ">=", amount)]
        others = [n for n in names if n != src and n != dst]
        for extra in rng.sample(others, constraints_per_tx - 1):
            if fail_fraction > 0 and rng.random() < fail_fraction:
                threshold = rng.randint(MAX_THRESHOLD + 1, MAX_THRESHOLD * 10)
            else:
                threshold = rng.randint(1, MAX_THRESHOLD)
            conditions.append(Condition(extra, ">=", threshold))
        node = i % shards
        txs.append(
            Transaction(
                id=TxId(ts=i * spacing_ms, node=node, seq=i // shards),
                leader=node,
                conditions=tuple(conditions),
                updates=(Update(src, -amount), Update(dst, amount)),
            )
        )
    return txs


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="shardsim-workload", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    gen = sub.add_parser("gen", help="generate an account set and transaction file")
    gen.add_argument("--accounts", type=int, default=1000)
    gen.add_argument("--balance", type=int, default=3000)
    gen.add_argument("--txs", type=int, default=1500)
    gen.add_argument("--constraints", type=int, default=4)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--shards", type=int, default=4)
    gen.add_argument("--spacing-ms", type=int, default=1)
    gen.add_argument("--fail-fraction", type=float, default=0.0)
    gen.add_argument("--out", required=True, help="transaction file; accounts go to OUT.accounts")
    args = parser.parse_args(argv)

    balances = gen_accounts(args.accounts, args.balance, args.seed)
    txs = gen_transactions(
        args.txs,
        balances,
        constraints_per_tx=args.constraints,
        seed=args.seed,
        shards=args.shards,
        spacing_ms=args.spacing_ms,
        fail_fraction=args.fail_fraction,
    )
    dump_transactions(txs, args.out)
    dump_accounts(balances, args.out + ".accounts")
    print(f"wrote {len(txs)} transactions to {args.out} and {len(balances)} accounts alongside")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
