"""The node role: host shards, keep the full main chain, validate blocks
incrementally for hosted addresses and serve subchain fragments.

A node runs full STF verification only for the shards it hosts;
non-hosted confirmation records get the structural checks (PoW, sorting,
root, stale-advance) and are otherwise the hosting nodes' duty. That
asymmetry is the whole storage/compute saving of sharding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

from . import codec, mainchain, subchain
from .codec import ReceiveTx, SendTx, SubchainTx
from .errors import (
    BadLink,
    ConfirmedFrozen,
    DuplicateHashConflict,
    InvalidSignature,
    NotHosted,
    PartialFetch,
    RangeUnavailable,
    TailConflict,
)
from .mainchain import ChainParams, ChainView, Genesis, MainBlock, \
    ViewClaimContext
from .sharding import ShardAssignment, hosts
from .subchain import SubchainFragment, SubchainState


@dataclass(frozen=True)
class Inflow:
    """A confirmed, not-yet-claimed transfer toward an account."""
    sender_address: bytes
    sender_tx_hash: bytes
    amount: int
    block_hash: bytes
    block_height: int
    coinbase: bool = False


@dataclass
class StorageReport:
    main_chain_bytes: int = 0
    subchain_bytes: int = 0
    shard_count: int = 0
    tx_count: int = 0

    def as_dict(self) -> dict:
        return {"main_chain_bytes": self.main_chain_bytes,
                "subchain_bytes": self.subchain_bytes,
                "shard_count": self.shard_count,
                "tx_count": self.tx_count}


class NodeStore:
    """In-memory keyspaces; byte accounting uses serialized sizes only."""

    def __init__(self):
        self.confirmed: Dict[bytes, SubchainState] = {}
        self.pending: Dict[bytes, List[SubchainTx]] = {}
        self.txs: Dict[Tuple[bytes, int], SubchainTx] = {}
        self.send_index: Dict[Tuple[bytes, bytes], SendTx] = {}
        self.seen: Dict[bytes, bytes] = {}      # tx_hash -> wire bytes
        self.inflows: Dict[bytes, Dict[bytes, Inflow]] = {}
        # every fragment any accepted block confirmed, per (block, address);
        # this archive makes fork validation and reorg rebuild possible
        self.frag_archive: Dict[Tuple[bytes, bytes], tuple] = {}

    def find_send(self, address: bytes, tx_hash: bytes) -> Optional[SendTx]:
        return self.send_index.get((address, tx_hash))


class Node:
    def __init__(self, node_id: bytes, assignment: ShardAssignment,
                 genesis: Genesis, params: ChainParams,
                 fetch: Optional[Callable[[bytes, int, int],
                                          SubchainFragment]] = None):
        self.node_id = node_id
        self.assignment = assignment
        self.genesis = genesis
        self.params = params
        self.view = ChainView(genesis, params)
        self.store = NodeStore()
        self.fetch = fetch
        self.remote_send_lookup: Optional[Callable] = None

    # -- shard plumbing ------------------------------------------------

    def hosts(self, address: bytes) -> bool:
        return hosts(self.assignment, address)

    def base_state(self, address: bytes) -> SubchainState:
        return subchain.initial_state(address,
                                      self.genesis.balance_of(address))

    def confirmed_state(self, address: bytes) -> SubchainState:
        return self.store.confirmed.get(address, self.base_state(address))

    def full_state(self, address: bytes) -> SubchainState:
        """Confirmed state extended by the pending tail."""
        state = self.confirmed_state(address)
        tail = self.store.pending.get(address)
        if tail:
            state = subchain.replay(tail, self.claim_context(),
                                    initial=state, verify=None)
        return state

    def claim_context(self, branch_tip: Optional[bytes] = None
                      ) -> ViewClaimContext:
        return ViewClaimContext(self.view,
                                branch_tip or self.view.tip,
                                send_source=self._send_source)

    def _send_source(self, address: bytes, tx_hash: bytes):
        send = self.store.find_send(address, tx_hash)
        if send is None and not self.hosts(address) \
                and self.remote_send_lookup is not None:
            send = self.remote_send_lookup(address, tx_hash)
        return send

    # -- pending transactions -----------------------------------------

    def accept_pending_tx(self, tx: SubchainTx) -> bool:
        """Verify and pool a broadcast transaction.

        Returns True when accepted (idempotently for exact duplicates);
        raises on rejection.
        """
        wire = codec.encode_tx(tx)
        stored = self.store.seen.get(tx.tx_hash)
        if stored is not None:
            if stored == wire:
                return True
            raise DuplicateHashConflict(
                "different transaction with the same hash")
        if not codec.verify_tx(tx):
            raise InvalidSignature("transaction failed local verification")
        address = tx.current_address
        if self.hosts(address):
            state = self.full_state(address)
            if tx.height == state.tip_height + 1:
                subchain.apply_tx(state, tx, self.claim_context())
                self.store.pending.setdefault(address, []).append(tx)
            elif tx.height <= state.tip_height:
                # single-transaction fork: new tip would not be higher
                if tx.height - 1 < state.confirmed_height:
                    raise ConfirmedFrozen("fork below the confirmed height")
                raise TailConflict("replacement tail does not win")
            else:
                raise BadLink("gap above the current tip", height=tx.height)
        self.store.seen[tx.tx_hash] = wire
        return True

    def replace_pending_tail(self, fork_height: int,
                             new_tail: SubchainFragment) -> None:
        """Owner rewrite of an unconfirmed tail; higher tip wins."""
        address = new_tail.address
        if not self.hosts(address):
            raise NotHosted("address outside this node's prefix")
        state = self.full_state(address)
        if new_tail.to_height <= state.tip_height:
            raise TailConflict("replacement tail does not win")
        new_state = subchain.try_replace_tail(
            state, fork_height, new_tail, self.claim_context(),
            state_at=lambda h: self._state_at(address, h))
        confirmed = self.confirmed_state(address)
        kept = [t for t in self.store.pending.get(address, [])
                if t.height <= fork_height]
        self.store.pending[address] = kept + list(new_tail.txs)
        for tx in new_tail.txs:
            self.store.seen[tx.tx_hash] = codec.encode_tx(tx)
        assert new_state.tip_height == confirmed.tip_height \
            + len(self.store.pending[address])

    def _state_at(self, address: bytes, height: int) -> SubchainState:
        state = self.confirmed_state(address)
        if height < state.tip_height:
            raise ConfirmedFrozen("cannot rewind below confirmed state")
        for tx in self.store.pending.get(address, []):
            if tx.height > height:
                break
            state = subchain.apply_tx(state, tx, self.claim_context())
        if state.tip_height != height:
            raise RangeUnavailable("no state at height %d" % height)
        return state

    # -- block ingest --------------------------------------------------

    def ingest_block(self, block: MainBlock) -> Dict[bytes, tuple]:
        """Validate and apply one main block; idempotent.

        Returns the per-address state deltas for hosted shards (empty on
        duplicate ingest).
        """
        bh = block.block_hash
        if bh in self.view.blocks:
            return {}
        parent = block.header.parent_block_hash
        fast = parent == self.view.tip
        ctx = self.claim_context(parent) if parent in self.view.work \
            else None
        if ctx is None:
            raise mainchain.UnknownParent("parent block unknown")
        if fast:
            provider = self.confirmed_state
        else:
            provider = lambda addr: self._branch_state(parent, addr)
        deltas = mainchain.validate_block(
            block, self.view, provider, self._shard_oracle, ctx,
            stf_filter=self.hosts)
        for rec in block.confirmations:
            if rec.address in deltas:
                _, _, txs = deltas[rec.address]
                self.store.frag_archive[(bh, rec.address)] = tuple(txs)
        changed = self.view.extend(block)
        if not changed:
            return deltas
        if fast:
            self._apply_canonical_deltas(block, deltas)
        else:
            self._rebuild_hosted()
        return deltas

    def _shard_oracle(self, address: bytes, lo: int, hi: int
                      ) -> SubchainFragment:
        """Fragment (lo, hi] from the local pending tail, else remote."""
        local = self._local_fragment(address, lo, hi)
        if local is not None:
            return local
        if self.fetch is None:
            raise PartialFetch("no local data and no fetch source for "
                               "heights (%d, %d]" % (lo, hi))
        frag = self.fetch(address, lo, hi)
        if frag is None:
            raise PartialFetch("remote fragment unavailable")
        return frag

    def _local_fragment(self, address, lo, hi):
        txs = []
        for h in range(lo + 1, hi + 1):
            tx = self.store.txs.get((address, h))
            if tx is None:
                tx = next((t for t in self.store.pending.get(address, [])
                           if t.height == h), None)
            if tx is None:
                return None
            txs.append(tx)
        return SubchainFragment(address=address, from_height=lo,
                                txs=tuple(txs))

    def _apply_canonical_deltas(self, block: MainBlock,
                                deltas: Dict[bytes, tuple]) -> None:
        bh = block.block_hash
        for address, (_, new_state, txs) in deltas.items():
            self.store.confirmed[address] = new_state
            for tx in txs:
                self.store.txs[(address, tx.height)] = tx
                self.store.seen.setdefault(tx.tx_hash, codec.encode_tx(tx))
                if isinstance(tx, SendTx):
                    self.store.send_index[(address, tx.tx_hash)] = tx
                self._index_tx(tx, bh, block.header.height)
            self._trim_pending(address, new_state)
        if self.hosts(block.header.miner_address):
            self.store.inflows.setdefault(
                block.header.miner_address, {})[bh] = Inflow(
                    sender_address=codec.NULL_ADDRESS,
                    sender_tx_hash=codec.NULL_HASH,
                    amount=mainchain.coinbase_amount(block.header.height,
                                                     self.params),
                    block_hash=bh, block_height=block.header.height,
                    coinbase=True)

    def _index_tx(self, tx: SubchainTx, block_hash: bytes,
                  block_height: int) -> None:
        if isinstance(tx, SendTx):
            if self.hosts(tx.recipient_address):
                self.store.inflows.setdefault(
                    tx.recipient_address, {})[tx.tx_hash] = Inflow(
                        sender_address=tx.current_address,
                        sender_tx_hash=tx.tx_hash, amount=tx.amount,
                        block_hash=block_hash, block_height=block_height)
        elif isinstance(tx, ReceiveTx):
            pool = self.store.inflows.get(tx.current_address)
            if pool is not None:
                key = tx.main_block_hash if tx.is_coinbase \
                    else tx.sender_tx_hash
                pool.pop(key, None)

    def _trim_pending(self, address: bytes,
                      confirmed: SubchainState) -> None:
        tail = self.store.pending.get(address)
        if not tail:
            return
        kept = [t for t in tail if t.height > confirmed.tip_height]
        if kept and (kept[0].parent_hash != confirmed.tip_hash
                     or kept[0].height != confirmed.tip_height + 1):
            kept = []   # tail no longer links: drop it
        if kept:
            self.store.pending[address] = kept
        else:
            self.store.pending.pop(address, None)

    def _branch_state(self, branch_tip: bytes,
                      address: bytes) -> SubchainState:
        """Confirmed state of one address along an arbitrary branch,
        replayed from the fragment archive."""
        state = self.base_state(address)
        branch = self.view.branch(branch_tip)
        sends: Dict[Tuple[bytes, bytes], SendTx] = {}
        for bh in branch[1:]:
            block = self.view.blocks[bh]
            for rec in block.confirmations:
                frag = self.store.frag_archive.get((bh, rec.address))
                if frag is None:
                    continue
                for tx in frag:
                    if isinstance(tx, SendTx):
                        sends[(rec.address, tx.tx_hash)] = tx
                if rec.address != address:
                    continue
                parent = block.header.parent_block_hash
                ctx = ViewClaimContext(
                    self.view, parent,
                    send_source=lambda a, h, s=sends: s.get((a, h)))
                state = subchain.replay(frag, ctx, initial=state,
                                        verify=None)
                state = subchain.mark_confirmed(state, rec.tip_height)
        return state

    def _rebuild_hosted(self) -> None:
        """Reorg path: recompute every hosted keyspace from the new
        canonical chain."""
        old_pending = self.store.pending
        old_txs = self.store.txs
        store = NodeStore()
        store.seen = self.store.seen
        store.frag_archive = self.store.frag_archive
        self.store = store
        for bh in self.view.canonical[1:]:
            block = self.view.blocks[bh]
            deltas = {}
            for rec in block.confirmations:
                if not self.hosts(rec.address):
                    continue
                frag = store.frag_archive.get((bh, rec.address))
                if frag is None:
                    raise PartialFetch("fragment missing during rebuild")
                state = self._branch_state(bh, rec.address)
                deltas[rec.address] = (None, state, frag)
            self._apply_canonical_deltas(block, deltas)
        # re-admit surviving tails: orphaned formerly-confirmed txs first,
        # then the old pending tail, stopping at the first break
        candidates: Dict[bytes, List[SubchainTx]] = {}
        for (address, height), tx in sorted(old_txs.items(),
                                            key=lambda kv: kv[0][1]):
            candidates.setdefault(address, []).append(tx)
        for address, tail in old_pending.items():
            candidates.setdefault(address, []).extend(tail)
        for address, tail in candidates.items():
            state = self.confirmed_state(address)
            ctx = self.claim_context()
            for tx in tail:
                if tx.height != state.tip_height + 1 \
                        or tx.parent_hash != state.tip_hash:
                    continue
                try:
                    state = subchain.apply_tx(state, tx, ctx)
                except Exception:
                    break
                self.store.pending.setdefault(address, []).append(tx)

    # -- serving -------------------------------------------------------

    def serve_fragment(self, address: bytes, from_height: int,
                       to_height: int) -> SubchainFragment:
        if not self.hosts(address):
            raise NotHosted("address outside this node's prefix")
        tip = self.confirmed_state(address).tip_height \
            + len(self.store.pending.get(address, []))
        if to_height > tip or from_height < 0 or from_height > to_height:
            raise RangeUnavailable("have tip %d, asked (%d, %d]"
                                   % (tip, from_height, to_height))
        frag = self._local_fragment(address, from_height, to_height)
        if frag is None:
            raise RangeUnavailable("range not contiguous locally")
        return frag

    def storage_report(self) -> StorageReport:
        main_bytes = len(self.genesis.encode()) + sum(
            len(b.encode()) for b in self.view.blocks.values())
        sub_bytes = 0
        shards = set()
        count = 0
        for (address, _), tx in self.store.txs.items():
            sub_bytes += len(codec.encode_tx(tx))
            shards.add(address)
            count += 1
        for address, tail in self.store.pending.items():
            for tx in tail:
                sub_bytes += len(codec.encode_tx(tx))
                count += 1
            shards.add(address)
        return StorageReport(main_chain_bytes=main_bytes,
                             subchain_bytes=sub_bytes,
                             shard_count=len(shards), tx_count=count)

    def compact(self) -> int:
        """Drop stored subchain data outside the node's prefix; returns
        the number of transactions removed."""
        removed = 0
        for key in [k for k in self.store.txs if not self.hosts(k[0])]:
            del self.store.txs[key]
            removed += 1
        for addr in [a for a in self.store.pending if not self.hosts(a)]:
            removed += len(self.store.pending.pop(addr))
        for addr in [a for a in self.store.confirmed
                     if not self.hosts(a)]:
            del self.store.confirmed[addr]
        return removed
