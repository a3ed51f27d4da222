"""The miner role: pool pending subchain tails, assemble confirmation
records, run PoW and publish blocks.

One confirmation record covers an address's whole pending tail, so block
space scales with the number of active accounts, never with per-account
transaction counts.
"""

from __future__ import annotations

import multiprocessing
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

from . import codec, mainchain, subchain
from .errors import (
    Aborted,
    BadLink,
    ConfirmedFrozen,
    DuplicateHashConflict,
    InvalidSignature,
    TailConflict,
)
from .mainchain import (
    BlockHeader,
    ConfirmationRecord,
    MainBlock,
    capacity,
    confirmations_root,
)
from .node import Node

DEFAULT_POOL_CAPACITY = 100_000


@dataclass(frozen=True)
class BlockTemplate:
    parent_block_hash: bytes
    height: int
    miner_address: bytes
    difficulty_bits: int
    records: tuple = ()

    def encoded_size(self) -> int:
        return mainchain.BLOCK_OVERHEAD \
            + mainchain.RECORD_LEN * len(self.records)


class TxPool:
    """Per-address pending tails, oldest-first eviction order."""

    def __init__(self, capacity_addresses: int = DEFAULT_POOL_CAPACITY):
        self.capacity_addresses = capacity_addresses
        self.tails: Dict[bytes, List[codec.SubchainTx]] = {}
        self.arrival: Dict[bytes, int] = {}
        self._seq = 0

    def __len__(self):
        return len(self.tails)

    def touch(self, address: bytes) -> None:
        if address not in self.arrival:
            self._seq += 1
            self.arrival[address] = self._seq

    def evict_oldest(self) -> Optional[bytes]:
        if not self.tails:
            return None
        oldest = min(self.tails, key=lambda a: self.arrival[a])
        del self.tails[oldest]
        del self.arrival[oldest]
        return oldest


class Miner:
    """Builds blocks on top of the chain view of its attached node."""

    def __init__(self, address: bytes, node: Node,
                 pool_capacity: int = DEFAULT_POOL_CAPACITY):
        self.address = address
        self.node = node
        self.pool = TxPool(pool_capacity)
        self.seen: Dict[bytes, bytes] = {}

    @property
    def view(self):
        return self.node.view

    # -- pool ----------------------------------------------------------

    def _tail_state(self, address: bytes,
                    tail: Sequence[codec.SubchainTx]):
        state = self.node.confirmed_state(address)
        if tail:
            state = subchain.replay(tail, self.node.claim_context(),
                                    initial=state, verify=None)
        return state

    def pool_insert(self, tx: codec.SubchainTx) -> bool:
        """Full miner-side verification, then append to the address tail."""
        wire = codec.encode_tx(tx)
        stored = self.seen.get(tx.tx_hash)
        if stored is not None:
            if stored == wire:
                return True
            raise DuplicateHashConflict(
                "different transaction with the same hash")
        if not codec.verify_tx(tx):
            raise InvalidSignature("transaction failed verification")
        address = tx.current_address
        tail = self.pool.tails.get(address, [])
        state = self._tail_state(address, tail)
        if tx.height == state.tip_height + 1:
            subchain.apply_tx(state, tx, self.node.claim_context())
        elif tx.height <= state.tip_height:
            if tx.height - 1 < state.confirmed_height:
                raise ConfirmedFrozen("fork below the confirmed height")
            raise TailConflict("replacement tail does not win")
        else:
            raise BadLink("gap above the current tip", height=tx.height)
        if address not in self.pool.tails \
                and len(self.pool.tails) >= self.pool.capacity_addresses:
            self.pool.evict_oldest()
        self.pool.tails.setdefault(address, []).append(tx)
        self.pool.touch(address)
        self.seen[tx.tx_hash] = wire
        return True

    def replace_tail(self, fork_height: int,
                     new_tail: subchain.SubchainFragment) -> None:
        """Owner fork of a pooled tail; accepted only when the new tip is
        strictly higher."""
        address = new_tail.address
        old = self.pool.tails.get(address, [])
        state = self._tail_state(address, old)
        if new_tail.to_height <= state.tip_height:
            raise TailConflict("replacement tail does not win")
        confirmed = self.node.confirmed_state(address)
        if fork_height < confirmed.confirmed_height:
            raise ConfirmedFrozen("fork below the confirmed height")
        prefix = [t for t in old if t.height <= fork_height]
        prefix_state = self._tail_state(address, prefix)
        if prefix_state.tip_height != fork_height:
            raise TailConflict("fork point not present in the pool")
        subchain.verify_fragment(prefix_state, new_tail,
                                 self.node.claim_context())
        self.pool.tails[address] = prefix + list(new_tail.txs)
        self.pool.touch(address)
        for tx in new_tail.txs:
            self.seen[tx.tx_hash] = codec.encode_tx(tx)

    def refresh_pool(self) -> None:
        """Drop confirmed prefixes and revalidate every remaining tail
        against the (possibly reorged) canonical state."""
        ctx = self.node.claim_context()
        for address in list(self.pool.tails):
            confirmed = self.node.confirmed_state(address)
            tail = [t for t in self.pool.tails[address]
                    if t.height > confirmed.tip_height]
            kept = []
            state = confirmed
            for tx in tail:
                if tx.height != state.tip_height + 1 \
                        or tx.parent_hash != state.tip_hash:
                    break
                try:
                    state = subchain.apply_tx(state, tx, ctx)
                except Exception:
                    break
                kept.append(tx)
            if kept:
                self.pool.tails[address] = kept
            else:
                del self.pool.tails[address]
                self.pool.arrival.pop(address, None)

    # -- block building ------------------------------------------------

    def build_template(self, limit_bytes: Optional[int] = None
                       ) -> BlockTemplate:
        """Select up to capacity addresses, longest tail first (ties by
        arrival); one record per address at its tail tip."""
        params = self.node.params
        limit = limit_bytes if limit_bytes is not None \
            else params.block_limit
        cap = capacity(limit)
        order = sorted(self.pool.tails,
                       key=lambda a: (-len(self.pool.tails[a]),
                                      self.pool.arrival[a]))
        records = []
        for address in order[:cap]:
            tail = self.pool.tails[address]
            records.append(ConfirmationRecord(
                address=address, tip_hash=tail[-1].tx_hash,
                tip_height=tail[-1].height))
        records.sort(key=lambda r: r.address)
        return BlockTemplate(
            parent_block_hash=self.view.tip,
            height=self.view.tip_height + 1,
            miner_address=self.address,
            difficulty_bits=params.difficulty_bits,
            records=tuple(records))

    def assemble(self, template: BlockTemplate, timestamp: int) -> MainBlock:
        header = BlockHeader(
            parent_block_hash=template.parent_block_hash,
            height=template.height, timestamp=timestamp,
            miner_address=template.miner_address,
            confirmations_root=confirmations_root(template.records),
            difficulty_bits=template.difficulty_bits, nonce=0)
        return MainBlock(header=header, confirmations=template.records)

    def mine_block(self, timestamp: int,
                   abort: Optional[Callable[[], bool]] = None) -> MainBlock:
        template = self.build_template()
        return mainchain.seal(self.assemble(template, timestamp),
                              abort=abort)

    def mine_loop(self, timestamps: Sequence[int],
                  publish: Callable[[MainBlock], None],
                  abort: Optional[Callable[[], bool]] = None):
        """Seal and publish one block per timestamp; a tip change during
        the PoW search restarts the template on the new tip."""
        published = []
        for ts in timestamps:
            while True:
                tip_before = self.view.tip
                combined = (lambda: (abort is not None and abort())
                            or self.view.tip != tip_before)
                try:
                    block = mainchain.seal(
                        self.assemble(self.build_template(), ts),
                        abort=combined)
                except Aborted:
                    if abort is not None and abort():
                        return published
                    continue   # rebuild on the new tip
                publish(block)
                self.refresh_pool()
                published.append(block)
                break
        return published


# -- parallel verification --------------------------------------------

def _verify_wire_chunk(wires: List[bytes]) -> List[bool]:
    out = []
    for wire in wires:
        try:
            tx = codec.decode_tx(wire)
        except Exception:
            out.append(False)
            continue
        out.append(codec._verify_uncached(tx))
    return out


def verify_batch(txs: Sequence[codec.SubchainTx],
                 workers: int = 1) -> List[bool]:
    """Signature+digest verification sharded across worker processes.

    The verdict list is order-preserving and independent of the worker
    count.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    wires = [codec.encode_tx(tx) for tx in txs]
    if workers == 1 or len(wires) < 2 * workers:
        return _verify_wire_chunk(wires)
    chunk = (len(wires) + workers - 1) // workers
    chunks = [wires[i:i + chunk] for i in range(0, len(wires), chunk)]
    ctx = multiprocessing.get_context("fork")
    with ctx.Pool(processes=workers) as pool:
        results = pool.map(_verify_wire_chunk, chunks)
    verdicts: List[bool] = []
    for part in results:
        verdicts.extend(part)
    return verdicts
