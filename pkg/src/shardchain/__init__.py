"""Sharded blockchain with one subchain per account, a PoW main chain
confirming subchain tips, and a deterministic simulation harness."""

__version__ = "0.1.0"
