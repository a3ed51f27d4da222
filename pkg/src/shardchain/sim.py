"""Deterministic multi-node simulation harness.

Drives a simulated node tree plus one miner through a configured number
of block intervals, measures confirmed-transaction throughput and
storage, and checks exact value conservation at the end. Block pacing
uses the discrete-event clock, so a 600-second interval simulates in
milliseconds.
"""

from __future__ import annotations

import random
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

from . import codec, mainchain, miner as miner_mod, network, node as node_mod
from . import sharding, subchain, wallet
from .codec import KeyPair, SendTx, sha256
from .errors import ConfigInvalid, InvariantViolation
from .mainchain import ChainParams, EASY_BITS, Genesis, capacity, \
    coinbase_amount, make_genesis
from .network import Envelope, FloodRouter, MsgKind, SimTransport, \
    TreeTopology
from .node import Node


@dataclass(frozen=True)
class SimConfig:
    seed: int = 1
    accounts: int = 100
    width: int = 10
    avg_txs: int = 1
    block_limit: int = 4096
    block_interval: int = 15
    blocks: int = 10
    node_count: int = 1
    latency_min_ms: float = 1.0
    latency_max_ms: float = 5.0
    difficulty_bits: int = EASY_BITS
    maturity: int = 6
    workers: int = 1
    neighbor_count: int = 2
    initial_balance: int = 1_000_000
    send_amount: int = 1
    subsidy: int = mainchain.DEFAULT_SUBSIDY
    claim_inflows: bool = True

    def validate(self) -> None:
        positive = ["accounts", "avg_txs", "block_limit", "block_interval",
                    "blocks", "node_count", "initial_balance",
                    "send_amount", "workers"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigInvalid("%s must be positive" % name)
        if self.width < 0 or self.width > self.accounts:
            raise ConfigInvalid("width must be in [0, accounts]")
        if capacity(self.block_limit) < 1:
            raise ConfigInvalid("block limit below one record")
        if self.latency_min_ms < 0 \
                or self.latency_max_ms < self.latency_min_ms:
            raise ConfigInvalid("bad latency range")


_key_cache: Dict[bytes, KeyPair] = {}


def derived_key(label: bytes) -> KeyPair:
    """Deterministic keypair from a label (retries on invalid scalars)."""
    key = _key_cache.get(label)
    if key is None:
        seed = sha256(label)
        while not 0 < int.from_bytes(seed, "big") < codec.CURVE_ORDER:
            seed = sha256(seed)
        key = codec.keygen(seed)
        _key_cache[label] = key
    return key


class Simulation:
    """One fully wired network instance; reusable by tests that need to
    poke at intermediate state."""

    def __init__(self, cfg: SimConfig):
        cfg.validate()
        self.cfg = cfg
        self.rng = random.Random(cfg.seed)
        self.params = ChainParams(difficulty_bits=cfg.difficulty_bits,
                                  block_limit=cfg.block_limit,
                                  block_interval=cfg.block_interval,
                                  subsidy=cfg.subsidy,
                                  maturity=cfg.maturity)
        self.keys = [derived_key(b"account:%d:%d" % (cfg.seed, i))
                     for i in range(cfg.accounts)]
        self.addresses = [k.address for k in self.keys]
        self.key_of = dict(zip(self.addresses, self.keys))
        self.miner_key = derived_key(b"miner:%d" % cfg.seed)
        self.genesis = make_genesis(
            {a: cfg.initial_balance for a in self.addresses})

        self.topology = TreeTopology(neighbor_count=cfg.neighbor_count)
        root_id = self.topology.add_root()
        ids = [root_id]
        for i in range(1, cfg.node_count):
            parent = ids[(i - 1) // 2]
            nid, _ = self.topology.join(parent)
            ids.append(nid)
        self.transport = SimTransport(seed=cfg.seed,
                                      latency_ms=(cfg.latency_min_ms,
                                                  cfg.latency_max_ms))
        self.nodes: Dict[bytes, Node] = {}
        for nid in ids:
            n = Node(nid, self.topology.assignments[nid], self.genesis,
                     self.params)
            n.fetch = self._fetcher(nid)
            n.remote_send_lookup = self._send_lookup(nid)
            self.nodes[nid] = n
        self.root = self.nodes[root_id]
        self.router = FloodRouter(self.topology, self.transport,
                                  on_deliver=self._deliver)
        self.router.attach_all()
        self.miner = miner_mod.Miner(self.miner_key.address, self.root)
        self.active: set = set()
        self.block_rows: List[dict] = []
        self.errors: List[str] = []
        self.now = 0

    # -- network plumbing ---------------------------------------------

    def _fetcher(self, nid):
        def fetch(address, lo, hi):
            return network.request_fragment(
                nid, address, lo, hi, self.topology, self.transport,
                serve=lambda target, a, l, h:
                    self.nodes[target].serve_fragment(a, l, h))
        return fetch

    def _send_lookup(self, nid):
        def lookup(address, tx_hash):
            for other in sharding.nodes_path(self.topology, address):
                if other == nid or not self.transport.is_alive(other):
                    continue
                send = self.nodes[other].store.find_send(address, tx_hash)
                if send is not None:
                    return send
            return None
        return lookup

    def _deliver(self, nid, env: Envelope):
        n = self.nodes[nid]
        if env.kind == MsgKind.NewTx:
            # one envelope per account batch: fragment framing keeps the
            # intra-subchain order across redundant flood paths
            try:
                for tx in subchain.decode_fragment(env.payload).txs:
                    n.accept_pending_tx(tx)
            except Exception as err:
                self.errors.append("tx@%s: %r" % (nid.hex(), err))
        elif env.kind == MsgKind.NewBlock:
            try:
                n.ingest_block(mainchain.decode_block(env.payload))
            except Exception as err:
                self.errors.append("block@%s: %r" % (nid.hex(), err))

    def broadcast(self, kind: MsgKind, payload: bytes) -> None:
        self.router.originate(self.root.node_id, Envelope(kind, payload))

    # -- workload ------------------------------------------------------

    def _eligible(self) -> List[bytes]:
        need = self.cfg.avg_txs * self.cfg.send_amount
        out = []
        for address in self.addresses:
            if self.root.store.pending.get(address):
                continue
            view = wallet.account_view(self.root, address)
            budget = view.spendable
            if self.cfg.claim_inflows:
                budget += sum(f.amount for f in view.mature_inflows())
            if budget >= need:
                out.append(address)
        return out

    def run_interval(self) -> dict:
        cfg = self.cfg
        self.now += cfg.block_interval
        eligible = self._eligible()
        senders = self.rng.sample(eligible,
                                  min(cfg.width, len(eligible)))
        txs = []
        for address in senders:
            view = wallet.account_view(self.root, address)
            if not cfg.claim_inflows:
                view.claimables = []
            sends = [(self.addresses[self.rng.randrange(cfg.accounts)],
                      cfg.send_amount) for _ in range(cfg.avg_txs)]
            batch = wallet.batch_settle(view, sends,
                                        self.key_of[address],
                                        timestamp=self.now)
            txs.extend(batch)
            self.active.add(address)
            frag = subchain.SubchainFragment(
                address=address, from_height=batch[0].height - 1,
                txs=tuple(batch))
            self.broadcast(MsgKind.NewTx, subchain.encode_fragment(frag))
        self.transport.run()
        for tx in txs:
            self.miner.pool_insert(tx)

        block = mainchain.seal(
            self.miner.assemble(self.miner.build_template(), self.now))
        deltas = self.root.ingest_block(block)
        self.broadcast(MsgKind.NewBlock, block.encode())
        self.transport.run()
        self.miner.refresh_pool()

        row = {"height": block.header.height,
               "records": len(block.confirmations),
               "txs_covered": sum(len(d[2]) for d in deltas.values()),
               "bytes": len(block.encode())}
        self.block_rows.append(row)
        return row

    # -- end-of-run accounting ----------------------------------------

    def conservation(self) -> dict:
        root = self.root
        view = root.view
        touched = set(self.addresses) | set(root.store.confirmed) \
            | {self.miner_key.address}
        balances = sum(root.confirmed_state(a).balance for a in
                       sorted(touched))
        unclaimed_sends = 0
        for (address, _h), tx in root.store.txs.items():
            if isinstance(tx, SendTx):
                rcpt = root.confirmed_state(tx.recipient_address)
                if tx.tx_hash not in rcpt.claimed_sends:
                    unclaimed_sends += tx.amount
        unclaimed_coinbase = 0
        for bh in view.canonical[1:]:
            block = view.blocks[bh]
            miner_state = root.confirmed_state(block.header.miner_address)
            if bh not in miner_state.claimed_coinbases:
                unclaimed_coinbase += coinbase_amount(
                    block.header.height, self.params)
        genesis_total = sum(b for _, b in self.genesis.allocations)
        subsidies = sum(coinbase_amount(view.blocks[bh].header.height,
                                        self.params)
                        for bh in view.canonical[1:])
        lhs = balances + unclaimed_sends + unclaimed_coinbase
        rhs = genesis_total + subsidies
        return {"balances": balances, "unclaimed_sends": unclaimed_sends,
                "unclaimed_coinbase": unclaimed_coinbase,
                "genesis_total": genesis_total, "subsidies": subsidies,
                "ok": lhs == rhs}

    def report(self) -> dict:
        cfg = self.cfg
        if self.errors:
            raise InvariantViolation(
                "node-side processing errors: %s" % "; ".join(self.errors[:5]))
        cons = self.conservation()
        if not cons["ok"]:
            raise InvariantViolation("value conservation failed: %r" % cons)
        non_empty = sum(
            1 for a in sorted(set(self.addresses)
                              | set(self.root.store.confirmed)
                              | {self.miner_key.address})
            if self.root.full_state(a).tip_height > 0)
        if non_empty != len(self.active):
            raise InvariantViolation(
                "shard count %d != active account count %d"
                % (non_empty, len(self.active)))
        total = sum(r["txs_covered"] for r in self.block_rows)
        elapsed = cfg.blocks * cfg.block_interval
        storage = {}
        for nid in sorted(self.nodes):
            n = self.nodes[nid]
            entry = n.storage_report().as_dict()
            entry["depth"] = n.assignment.depth
            storage[nid.hex()] = entry
        return {
            "config": asdict(cfg),
            "capacity": capacity(cfg.block_limit),
            "blocks": self.block_rows,
            "total_txs_confirmed": total,
            "elapsed_sim_seconds": elapsed,
            "tps": total / elapsed,
            "conservation": cons,
            "non_empty_subchains": non_empty,
            "active_accounts": len(self.active),
            "storage": storage,
        }

    def run(self) -> dict:
        for _ in range(self.cfg.blocks):
            self.run_interval()
        return self.report()


def run_sim(cfg: SimConfig) -> dict:
    return Simulation(cfg).run()


def bench_verify(n_txs: int, worker_counts: List[int],
                 seed: int = 1) -> List[dict]:
    """Time verify_batch over freshly generated valid transactions."""
    if n_txs < 1:
        raise ConfigInvalid("n_txs must be >= 1")
    keys = [derived_key(b"bench:%d:%d" % (seed, i)) for i in range(32)]
    tips: Dict[bytes, Tuple[bytes, int]] = {
        k.address: (codec.NULL_HASH, 0) for k in keys}
    txs = []
    for i in range(n_txs):
        key = keys[i % len(keys)]
        parent, height = tips[key.address]
        tx = SendTx(parent_hash=parent, height=height + 1,
                    current_address=key.address,
                    recipient_address=keys[(i + 1) % len(keys)].address,
                    amount=1, timestamp=i)
        tx = codec.sign_tx(tx, key)
        tips[key.address] = (tx.tx_hash, tx.height)
        txs.append(tx)
    rows = []
    baseline = None
    for workers in worker_counts:
        start = time.perf_counter()
        verdicts = miner_mod.verify_batch(txs, workers=workers)
        seconds = time.perf_counter() - start
        if baseline is None:
            baseline = verdicts
        elif verdicts != baseline:
            raise InvariantViolation("verdicts differ across worker counts")
        rows.append({"workers": workers, "seconds": seconds,
                     "txs": n_txs, "all_valid": all(verdicts)})
    return rows


def bench_storage(cfg: SimConfig) -> List[dict]:
    """Run one simulation over a depth-2 tree (full, half, quarter nodes)
    and report per-node storage."""
    if cfg.node_count != 7:
        cfg = SimConfig(**{**asdict(cfg), "node_count": 7})
    sim = Simulation(cfg)
    sim.run()
    rows = []
    for nid in sorted(sim.nodes):
        n = sim.nodes[nid]
        rep = n.storage_report()
        rows.append({"node": nid.hex(), "depth": n.assignment.depth,
                     "main_chain_bytes": rep.main_chain_bytes,
                     "subchain_bytes": rep.subchain_bytes,
                     "shard_count": rep.shard_count})
    return rows
