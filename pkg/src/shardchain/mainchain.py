"""Main chain: PoW-sealed blocks carrying subchain confirmation records.

Blocks never carry transactions. Each record binds an address to its
latest subchain tip; fork choice is heaviest cumulative work with
first-seen tie-break.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Dict, List, Optional, Tuple

from . import codec, subchain
from .codec import sha256, sha256d
from .errors import (
    Aborted,
    BadPoW,
    ConfirmationMismatch,
    MalformedBits,
    Oversize,
    RootMismatch,
    StaleConfirmation,
    SubchainError,
    UnknownParent,
    UnsortedRecords,
)
from .subchain import SubchainFragment, SubchainState

RECORD_LEN = 60          # 20-byte address + 32-byte tip hash + 8-byte height
HEADER_LEN = 112
BLOCK_OVERHEAD = HEADER_LEN + 4   # header plus the 4-byte record count

_RECORD = struct.Struct(">20s32sQ")
_HEADER = struct.Struct(">32sQQ20s32sIQ")

DEFAULT_SUBSIDY = 50 * 10**8
EASY_BITS = 0x207FFFFF   # top byte 0x7f: ~1/2 success per attempt


def capacity(block_limit: int) -> int:
    """Max confirmation records per block for a given byte limit."""
    return (block_limit - BLOCK_OVERHEAD) // RECORD_LEN


@dataclass(frozen=True)
class ChainParams:
    difficulty_bits: int = EASY_BITS
    block_limit: int = 1 << 20
    block_interval: int = 600          # seconds, simulated
    subsidy: int = DEFAULT_SUBSIDY
    maturity: int = 6


@dataclass(frozen=True)
class ConfirmationRecord:
    address: bytes
    tip_hash: bytes
    tip_height: int

    def encode(self) -> bytes:
        return _RECORD.pack(self.address, self.tip_hash, self.tip_height)


def decode_record(data: bytes) -> ConfirmationRecord:
    address, tip_hash, tip_height = _RECORD.unpack(data)
    return ConfirmationRecord(address, tip_hash, tip_height)


@dataclass(frozen=True)
class BlockHeader:
    parent_block_hash: bytes
    height: int
    timestamp: int
    miner_address: bytes
    confirmations_root: bytes
    difficulty_bits: int
    nonce: int = 0

    def encode(self) -> bytes:
        return _HEADER.pack(self.parent_block_hash, self.height,
                            self.timestamp, self.miner_address,
                            self.confirmations_root, self.difficulty_bits,
                            self.nonce)

    @property
    def block_hash(self) -> bytes:
        return sha256d(self.encode())


def confirmations_root(records) -> bytes:
    return sha256(b"".join(r.encode() for r in records))


@dataclass(frozen=True)
class MainBlock:
    header: BlockHeader
    confirmations: tuple = ()

    @property
    def block_hash(self) -> bytes:
        return self.header.block_hash

    def encode(self) -> bytes:
        parts = [self.header.encode(),
                 struct.pack(">I", len(self.confirmations))]
        parts.extend(r.encode() for r in self.confirmations)
        return b"".join(parts)


def decode_block(data: bytes) -> MainBlock:
    fields = _HEADER.unpack_from(data, 0)
    header = BlockHeader(*fields)
    (count,) = struct.unpack_from(">I", data, HEADER_LEN)
    records = []
    offset = BLOCK_OVERHEAD
    for _ in range(count):
        records.append(decode_record(data[offset:offset + RECORD_LEN]))
        offset += RECORD_LEN
    if offset != len(data):
        raise codec.DecodeError("trailing bytes in block")
    return MainBlock(header=header, confirmations=tuple(records))


def target(difficulty_bits: int) -> int:
    """Compact-bits to 256-bit target: mantissa * 256^(exponent-3)."""
    exponent = difficulty_bits >> 24
    mantissa = difficulty_bits & 0x00FFFFFF
    if not 3 <= exponent <= 32:
        raise MalformedBits("exponent %d out of range" % exponent)
    if mantissa == 0:
        raise MalformedBits("zero mantissa")
    value = mantissa * (256 ** (exponent - 3))
    if value >= 1 << 256:
        raise MalformedBits("target overflows 256 bits")
    return value


def block_work(difficulty_bits: int) -> int:
    return (1 << 256) // (target(difficulty_bits) + 1)


def meets_target(block_hash: bytes, difficulty_bits: int) -> bool:
    return int.from_bytes(block_hash, "big") <= target(difficulty_bits)


def seal(block: MainBlock, abort: Optional[Callable[[], bool]] = None,
         batch: int = 256) -> MainBlock:
    """Iterate the nonce (then the timestamp) until the hash meets target.

    ``abort`` is polled between nonce batches; raising Aborted leaves no
    partial result.
    """
    goal = target(block.header.difficulty_bits)
    header = block.header
    while True:
        base = header.encode()[:-8]
        nonce = header.nonce
        while True:
            for _ in range(batch):
                h = sha256d(base + struct.pack(">Q", nonce))
                if int.from_bytes(h, "big") <= goal:
                    sealed = BlockHeader(
                        header.parent_block_hash, header.height,
                        header.timestamp, header.miner_address,
                        header.confirmations_root, header.difficulty_bits,
                        nonce)
                    return MainBlock(sealed, block.confirmations)
                nonce = (nonce + 1) & 0xFFFFFFFFFFFFFFFF
                if nonce == header.nonce:
                    break
            if abort is not None and abort():
                raise Aborted("new tip arrived during PoW search")
            if nonce == header.nonce:   # nonce space exhausted
                break
        header = BlockHeader(header.parent_block_hash, header.height,
                             header.timestamp + 1, header.miner_address,
                             header.confirmations_root,
                             header.difficulty_bits, 0)


def coinbase_amount(height: int, params: ChainParams = ChainParams()) -> int:
    """Constant per-block subsidy; no halving schedule."""
    return params.subsidy


@dataclass(frozen=True)
class Genesis:
    """Height-0 anchor: allocations are pre-confirmed subchain balances."""
    timestamp: int = 0
    allocations: tuple = ()   # sorted tuple of (address, balance)

    def encode(self) -> bytes:
        parts = [struct.pack(">QI", self.timestamp, len(self.allocations))]
        for address, balance in self.allocations:
            parts.append(struct.pack(">20sQ", address, balance))
        return b"".join(parts)

    @cached_property
    def block_hash(self) -> bytes:
        # cached: the view walks parent links against this hash constantly
        return sha256d(self.encode())

    @cached_property
    def _alloc_map(self) -> Dict[bytes, int]:
        return dict(self.allocations)

    def balance_of(self, address: bytes) -> int:
        return self._alloc_map.get(address, 0)


def make_genesis(allocations: Dict[bytes, int], timestamp: int = 0) -> Genesis:
    return Genesis(timestamp=timestamp,
                   allocations=tuple(sorted(allocations.items())))


class ChainView:
    """Block DAG index: canonical tip by cumulative work, plus the
    per-address latest-confirmation map for the canonical chain only."""

    def __init__(self, genesis: Genesis, params: ChainParams):
        self.genesis = genesis
        self.params = params
        self.blocks: Dict[bytes, MainBlock] = {}
        self.work: Dict[bytes, int] = {genesis.block_hash: 0}
        self.height: Dict[bytes, int] = {genesis.block_hash: 0}
        self.arrival: Dict[bytes, int] = {genesis.block_hash: 0}
        self._seq = 0
        self.tip: bytes = genesis.block_hash
        # canonical indexes
        self.canonical: List[bytes] = [genesis.block_hash]
        self.confirmations: Dict[bytes, Tuple[bytes, bytes, int]] = {}

    # -- queries -------------------------------------------------------

    @property
    def tip_height(self) -> int:
        return self.height[self.tip]

    def block(self, block_hash: bytes) -> MainBlock:
        return self.blocks[block_hash]

    def is_canonical(self, block_hash: bytes) -> bool:
        h = self.height.get(block_hash)
        return h is not None and h < len(self.canonical) \
            and self.canonical[h] == block_hash

    def depth(self, block_hash: bytes) -> int:
        """Confirmation depth on the canonical chain; 0 if not canonical."""
        if not self.is_canonical(block_hash):
            return 0
        return self.tip_height - self.height[block_hash] + 1

    def confirmed_height_of(self, address: bytes) -> int:
        entry = self.confirmations.get(address)
        return entry[2] if entry else 0

    def branch(self, tip_hash: bytes) -> List[bytes]:
        """Hashes from genesis to tip_hash along parent links."""
        chain = []
        h = tip_hash
        while h != self.genesis.block_hash:
            chain.append(h)
            h = self.blocks[h].header.parent_block_hash
        chain.append(self.genesis.block_hash)
        chain.reverse()
        return chain

    def confirmations_at(self, branch_tip: bytes
                         ) -> Dict[bytes, Tuple[bytes, bytes, int]]:
        """Latest confirmation per address along an arbitrary branch."""
        index: Dict[bytes, Tuple[bytes, bytes, int]] = {}
        for bh in self.branch(branch_tip):
            if bh == self.genesis.block_hash:
                continue
            for rec in self.blocks[bh].confirmations:
                index[rec.address] = (bh, rec.tip_hash, rec.tip_height)
        return index

    # -- mutation ------------------------------------------------------

    def extend(self, block: MainBlock) -> bool:
        """Insert a validated block. Returns True if the canonical tip
        changed (possibly a reorg)."""
        parent = block.header.parent_block_hash
        if parent not in self.work:
            raise UnknownParent("parent block unknown")
        bh = block.block_hash
        if bh in self.blocks:
            return False
        assert meets_target(bh, block.header.difficulty_bits)
        self.blocks[bh] = block
        self.height[bh] = self.height[parent] + 1
        self.work[bh] = self.work[parent] \
            + block_work(block.header.difficulty_bits)
        self._seq += 1
        self.arrival[bh] = self._seq
        if self.work[bh] > self.work[self.tip]:
            old_tip = self.tip
            self.tip = bh
            if parent == old_tip:
                self.canonical.append(bh)
                for rec in block.confirmations:
                    self.confirmations[rec.address] = (bh, rec.tip_hash,
                                                       rec.tip_height)
            else:
                self.rebuild_index()
            return True
        return False

    def rebuild_index(self) -> None:
        """From-scratch canonical scan (also the reorg path)."""
        self.canonical = self.branch(self.tip)
        self.confirmations = self.confirmations_at(self.tip)


class ViewClaimContext(subchain.ClaimContext):
    """ClaimContext bound to one branch of a ChainView.

    ``send_source`` maps (sender_address, height) -> SendTx for confirmed
    transactions, typically a node store lookup or fragment fetch.
    """

    def __init__(self, view: ChainView, branch_tip: bytes,
                 send_source: Callable[[bytes, bytes], Optional[codec.SendTx]],
                 maturity: Optional[int] = None):
        self.view = view
        self.branch_tip = branch_tip
        self.branch_height = view.height[branch_tip]
        self.send_source = send_source
        self.maturity = view.params.maturity if maturity is None else maturity
        self._branch_set = set(view.branch(branch_tip))

    def _mature(self, block_hash: bytes) -> bool:
        if block_hash not in self._branch_set:
            return False
        depth = self.branch_height - self.view.height[block_hash] + 1
        return depth >= self.maturity

    def lookup_send(self, sender_address, sender_tx_hash, main_block_hash):
        if not self._mature(main_block_hash):
            return None
        block = self.view.blocks.get(main_block_hash)
        if block is None:
            return None
        rec = next((r for r in block.confirmations
                    if r.address == sender_address), None)
        if rec is None:
            return None
        send = self.send_source(sender_address, sender_tx_hash)
        if send is None or not isinstance(send, codec.SendTx):
            return None
        if send.tx_hash != sender_tx_hash:
            return None
        if send.height > rec.tip_height:
            return None
        return send

    def lookup_coinbase(self, main_block_hash):
        if not self._mature(main_block_hash):
            return None
        if main_block_hash == self.view.genesis.block_hash:
            return None
        block = self.view.blocks[main_block_hash]
        subsidy = coinbase_amount(block.header.height, self.view.params)
        return (block.header.miner_address, subsidy)


def validate_block(block: MainBlock, view: ChainView,
                   state_provider: Callable[[bytes], SubchainState],
                   shard_oracle: Callable[[bytes, int, int],
                                          SubchainFragment],
                   ctx: subchain.ClaimContext,
                   verify=codec.verify_tx,
                   stf_filter: Optional[Callable[[bytes], bool]] = None,
                   ) -> Dict[bytes, Tuple[SubchainState, SubchainState,
                                          tuple]]:
    """Full validation of one block against its parent branch.

    ``state_provider`` returns the confirmed SubchainState of an address
    as of the parent block; ``shard_oracle(addr, lo, hi)`` fetches the
    fragment (lo, hi]. ``stf_filter`` restricts full STF verification to
    hosted addresses (non-hosted records still pass the structural
    checks). Returns per-address (old_state, new_state, fragment_txs).
    """
    parent = block.header.parent_block_hash
    if parent not in view.work:
        raise UnknownParent("parent block unknown")
    if not meets_target(block.block_hash, block.header.difficulty_bits):
        raise BadPoW("block hash above target")
    if block.header.difficulty_bits != view.params.difficulty_bits:
        raise BadPoW("unexpected difficulty bits")
    if block.header.height != view.height[parent] + 1:
        raise BadPoW("wrong block height")
    if len(block.encode()) > view.params.block_limit:
        raise Oversize("block exceeds %d bytes" % view.params.block_limit)
    records = block.confirmations
    addresses = [r.address for r in records]
    if any(a >= b for a, b in zip(addresses, addresses[1:])):
        raise UnsortedRecords("records must be strictly increasing")
    if block.header.confirmations_root != confirmations_root(records):
        raise RootMismatch("confirmations root does not match records")

    prev_index = view.confirmations_at(parent)
    deltas: Dict[bytes, Tuple[SubchainState, SubchainState, tuple]] = {}
    for rec in records:
        prev_height = prev_index.get(rec.address, (None, None, 0))[2]
        if rec.tip_height <= prev_height:
            raise StaleConfirmation(
                "record does not advance beyond height %d" % prev_height)
        if stf_filter is not None and not stf_filter(rec.address):
            continue
        old_state = state_provider(rec.address)
        frag = shard_oracle(rec.address, prev_height, rec.tip_height)
        try:
            new_state = subchain.verify_fragment(old_state, frag, ctx,
                                                 verify=verify)
        except SubchainError as err:
            err.address = rec.address
            raise
        if new_state.tip_hash != rec.tip_hash \
                or new_state.tip_height != rec.tip_height:
            raise ConfirmationMismatch(
                "fragment tip does not match the record")
        new_state = subchain.mark_confirmed(new_state, rec.tip_height)
        deltas[rec.address] = (old_state, new_state, frag.txs)
    return deltas
