"""Persistent single-process node and a miner client over stream sockets.

Wire format per message: the envelope framing (4-byte length, 1-byte
kind, 32-byte msg_id, payload). Every request gets one reply whose
payload begins with a status byte (0 = ok). The deterministic in-process
transport remains the primary implementation; this module exists so a
node and a miner can run as separate processes against a data directory.
"""

from __future__ import annotations

import json
import os
import socket
import socketserver
import struct
import threading
import time
from typing import Optional, Tuple

from . import codec, mainchain, sharding, subchain
from .errors import PartialFetch, ShardChainError
from .mainchain import ChainParams, Genesis, MainBlock, make_genesis
from .network import Envelope, MsgKind, decode_envelope
from .node import Node
from .sharding import ShardAssignment

OK = b"\x00"
ERR = b"\x01"


# -- data directory persistence ---------------------------------------

def save_node(node: Node, data_dir: str) -> None:
    os.makedirs(data_dir, exist_ok=True)
    meta = {
        "prefix": node.assignment.prefix_bits,
        "difficulty_bits": node.params.difficulty_bits,
        "block_limit": node.params.block_limit,
        "block_interval": node.params.block_interval,
        "subsidy": node.params.subsidy,
        "maturity": node.params.maturity,
        "allocations": {a.hex(): b for a, b in node.genesis.allocations},
        "genesis_timestamp": node.genesis.timestamp,
    }
    with open(os.path.join(data_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
    with open(os.path.join(data_dir, "blocks.bin"), "wb") as fh:
        for bh in node.view.canonical[1:]:
            data = node.view.blocks[bh].encode()
            fh.write(struct.pack(">I", len(data)) + data)
    with open(os.path.join(data_dir, "frags.bin"), "wb") as fh:
        for (bh, address), txs in sorted(node.store.frag_archive.items()):
            body = subchain.encode_fragment(
                subchain.SubchainFragment(address=address, from_height=0,
                                          txs=tuple(txs)))
            fh.write(struct.pack(">32sI", bh, len(body)) + body)
    with open(os.path.join(data_dir, "pending.bin"), "wb") as fh:
        for address in sorted(node.store.pending):
            for tx in node.store.pending[address]:
                data = codec.encode_tx(tx)
                fh.write(struct.pack(">I", len(data)) + data)


def load_node(data_dir: str, node_id: bytes = b"\x00" * 8) -> Node:
    with open(os.path.join(data_dir, "meta.json")) as fh:
        meta = json.load(fh)
    params = ChainParams(difficulty_bits=meta["difficulty_bits"],
                         block_limit=meta["block_limit"],
                         block_interval=meta["block_interval"],
                         subsidy=meta["subsidy"],
                         maturity=meta["maturity"])
    genesis = make_genesis({bytes.fromhex(a): b
                            for a, b in meta["allocations"].items()},
                           timestamp=meta["genesis_timestamp"])
    node = Node(node_id, ShardAssignment(meta["prefix"]), genesis, params)
    frags = {}
    path = os.path.join(data_dir, "frags.bin")
    if os.path.exists(path):
        with open(path, "rb") as fh:
            while True:
                head = fh.read(36)
                if not head:
                    break
                bh, length = struct.unpack(">32sI", head)
                frag = subchain.decode_fragment(fh.read(length))
                frags[(bh, frag.address)] = frag.txs
    path = os.path.join(data_dir, "blocks.bin")
    if os.path.exists(path):
        with open(path, "rb") as fh:
            while True:
                head = fh.read(4)
                if not head:
                    break
                (length,) = struct.unpack(">I", head)
                block = mainchain.decode_block(fh.read(length))
                bh = block.block_hash
                for rec in block.confirmations:
                    txs = frags.get((bh, rec.address))
                    if txs:
                        for tx in txs:
                            node.store.pending.setdefault(
                                rec.address, []).append(tx)
                node.ingest_block(block)
    path = os.path.join(data_dir, "pending.bin")
    if os.path.exists(path):
        with open(path, "rb") as fh:
            while True:
                head = fh.read(4)
                if not head:
                    break
                (length,) = struct.unpack(">I", head)
                tx = codec.decode_tx(fh.read(length))
                try:
                    node.accept_pending_tx(tx)
                except ShardChainError:
                    pass
    return node


def init_data_dir(data_dir: str, allocations, params: ChainParams,
                  prefix: str = "") -> Node:
    genesis = make_genesis(allocations)
    node = Node(b"\x00" * 8, ShardAssignment(prefix), genesis, params)
    save_node(node, data_dir)
    return node


# -- framing helpers --------------------------------------------------

def read_envelope(sock) -> Optional[Envelope]:
    head = _read_exact(sock, 37)
    if head is None:
        return None
    (length,) = struct.unpack(">I", head[:4])
    payload = _read_exact(sock, length)
    if payload is None and length:
        return None
    return decode_envelope(head + (payload or b""))


def _read_exact(sock, n: int) -> Optional[bytes]:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


def send_envelope(sock, env: Envelope) -> None:
    sock.sendall(env.encode())


# -- node server ------------------------------------------------------

_PENDING_SUMMARY = struct.Struct(">20s32sQQ")


class NodeServer:
    def __init__(self, data_dir: str, listen: Tuple[str, int]):
        self.data_dir = data_dir
        self.node = load_node(data_dir)
        self.lock = threading.Lock()
        self.listen = listen
        outer = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                while True:
                    env = read_envelope(self.request)
                    if env is None:
                        return
                    send_envelope(self.request, outer.handle(env))

        self.server = socketserver.ThreadingTCPServer(listen, Handler)
        self.server.daemon_threads = True

    def serve_forever(self):
        self.server.serve_forever()

    def shutdown(self):
        self.server.shutdown()
        self.server.server_close()

    def handle(self, env: Envelope) -> Envelope:
        with self.lock:
            try:
                return self._dispatch(env)
            except ShardChainError as err:
                return Envelope(MsgKind.Hello,
                                ERR + type(err).__name__.encode()
                                + b": " + str(err).encode())

    def _dispatch(self, env: Envelope) -> Envelope:
        node = self.node
        if env.kind == MsgKind.Hello:
            body = [node.assignment.encode(),
                    node.view.tip,
                    struct.pack(">Q", node.view.tip_height),
                    struct.pack(">I", len(node.store.pending))]
            for address in sorted(node.store.pending):
                tail = node.store.pending[address]
                confirmed = node.confirmed_state(address)
                body.append(_PENDING_SUMMARY.pack(
                    address, tail[-1].tx_hash, tail[-1].height,
                    confirmed.tip_height))
            return Envelope(MsgKind.Hello, OK + b"".join(body))
        if env.kind == MsgKind.NewTx:
            node.accept_pending_tx(codec.decode_tx(env.payload))
            save_node(node, self.data_dir)
            return Envelope(MsgKind.Hello, OK)
        if env.kind == MsgKind.NewBlock:
            node.ingest_block(mainchain.decode_block(env.payload))
            save_node(node, self.data_dir)
            return Envelope(MsgKind.Hello, OK)
        if env.kind == MsgKind.FragmentRequest:
            address, lo, hi = struct.unpack(">20sQQ", env.payload)
            frag = node.serve_fragment(address, lo, hi)
            return Envelope(MsgKind.FragmentResponse,
                            OK + subchain.encode_fragment(frag))
        return Envelope(MsgKind.Hello, ERR + b"unsupported kind")


# -- miner client -----------------------------------------------------

class NodeClient:
    def __init__(self, host: str, port: int):
        self.sock = socket.create_connection((host, port))

    def close(self):
        self.sock.close()

    def call(self, env: Envelope) -> bytes:
        send_envelope(self.sock, env)
        reply = read_envelope(self.sock)
        if reply is None:
            raise ConnectionError("node closed the connection")
        if not reply.payload.startswith(OK):
            raise ShardChainError(reply.payload[1:].decode("utf-8",
                                                           "replace"))
        return reply.payload[1:]

    def hello(self):
        body = self.call(Envelope(MsgKind.Hello, b""))
        depth = body[0]
        alen = 1 + (depth + 7) // 8
        assignment = sharding.decode_assignment(body[:alen])
        tip = body[alen:alen + 32]
        (tip_height,) = struct.unpack_from(">Q", body, alen + 32)
        (count,) = struct.unpack_from(">I", body, alen + 40)
        offset = alen + 44
        pending = []
        for _ in range(count):
            address, tip_hash, height, confirmed = \
                _PENDING_SUMMARY.unpack_from(body, offset)
            offset += _PENDING_SUMMARY.size
            pending.append((address, tip_hash, height, confirmed))
        return assignment, tip, tip_height, pending

    def fetch_fragment(self, address: bytes, lo: int, hi: int):
        body = self.call(Envelope(MsgKind.FragmentRequest,
                                  struct.pack(">20sQQ", address, lo, hi)))
        return subchain.decode_fragment(body)

    def submit_tx(self, tx) -> None:
        self.call(Envelope(MsgKind.NewTx, codec.encode_tx(tx)))

    def submit_block(self, block: MainBlock) -> None:
        self.call(Envelope(MsgKind.NewBlock, block.encode()))


def mine_once(client: NodeClient, miner_address: bytes, params: ChainParams,
              timestamp: Optional[int] = None) -> MainBlock:
    """Build one block from the node's pending tails, verify fragment
    link-validity and signatures, seal and submit it."""
    _, tip, tip_height, pending = client.hello()
    cap = mainchain.capacity(params.block_limit)
    records = []
    for address, tip_hash, height, confirmed in pending[:cap]:
        frag = client.fetch_fragment(address, confirmed, height)
        prev = None
        for i, tx in enumerate(frag.txs):
            if not codec.verify_tx(tx):
                raise ShardChainError("bad signature in served fragment")
            if prev is not None and tx.parent_hash != prev.tx_hash:
                raise ShardChainError("served fragment is not link-valid")
            prev = tx
        records.append(mainchain.ConfirmationRecord(
            address=address, tip_hash=tip_hash, tip_height=height))
    records.sort(key=lambda r: r.address)
    header = mainchain.BlockHeader(
        parent_block_hash=tip, height=tip_height + 1,
        timestamp=int(time.time()) if timestamp is None else timestamp,
        miner_address=miner_address,
        confirmations_root=mainchain.confirmations_root(records),
        difficulty_bits=params.difficulty_bits, nonce=0)
    block = mainchain.seal(MainBlock(header, tuple(records)))
    client.submit_block(block)
    return block
