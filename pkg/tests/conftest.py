import random

import pytest

from shardchain import codec, mainchain, subchain
from shardchain.codec import NULL_HASH, SendTx, ReceiveTx
from shardchain.sim import derived_key


@pytest.fixture(scope="session")
def keys():
    """A pool of deterministic keypairs shared by the whole session."""
    return [derived_key(b"test-key:%d" % i) for i in range(12)]


def make_send(key, parent=NULL_HASH, height=1, recipient=b"\x07" * 20,
              amount=1, timestamp=0, sign=True):
    tx = SendTx(parent_hash=parent, height=height,
                current_address=key.address, recipient_address=recipient,
                amount=amount, timestamp=timestamp)
    return codec.sign_tx(tx, key) if sign else tx


def make_receive(key, parent, height, sender, sender_tx_hash, block_hash,
                 amount, timestamp=0):
    tx = ReceiveTx(parent_hash=parent, height=height,
                   current_address=key.address, sender_address=sender,
                   sender_tx_hash=sender_tx_hash,
                   main_block_hash=block_hash, amount=amount,
                   timestamp=timestamp)
    return codec.sign_tx(tx, key)


def make_coinbase_claim(key, parent, height, block_hash, amount,
                        timestamp=0):
    return make_receive(key, parent, height, codec.NULL_ADDRESS,
                        NULL_HASH, block_hash, amount, timestamp)


def random_tx(rng: random.Random, key):
    """A structurally random signed transaction for codec round trips."""
    if rng.random() < 0.5:
        tx = SendTx(parent_hash=rng.randbytes(32),
                    height=rng.randrange(1, 1 << 32),
                    current_address=key.address,
                    recipient_address=rng.randbytes(20),
                    amount=rng.randrange(1, 1 << 40),
                    timestamp=rng.randrange(1 << 32))
    else:
        tx = ReceiveTx(parent_hash=rng.randbytes(32),
                       height=rng.randrange(1, 1 << 32),
                       current_address=key.address,
                       sender_address=rng.randbytes(20),
                       sender_tx_hash=rng.randbytes(32),
                       main_block_hash=rng.randbytes(32),
                       amount=rng.randrange(1, 1 << 40),
                       timestamp=rng.randrange(1 << 32))
    return codec.sign_tx(tx, key)


def build_chain(key, length, start_balance, ctx=None, rng=None):
    """A valid all-sends subchain of the given length for one key."""
    rng = rng or random.Random(0)
    txs = []
    parent, height, balance = NULL_HASH, 0, start_balance
    for _ in range(length):
        amount = rng.randrange(1, 3)
        tx = make_send(key, parent=parent, height=height + 1,
                       recipient=rng.randbytes(20), amount=amount)
        txs.append(tx)
        parent, height, balance = tx.tx_hash, tx.height, balance - amount
    return txs
