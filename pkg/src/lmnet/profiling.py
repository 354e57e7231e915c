"""Multiply-accumulate accounting hooks used by the cost counter."""

import contextlib
import threading
from collections import Counter

_local = threading.local()


def add_macs(kind: str, n: int) -> None:
    counter = getattr(_local, "counter", None)
    if counter is not None:
        counter[kind] += int(n)


@contextlib.contextmanager
def count_macs():
    """Collect MACs reported by ops run inside the block, keyed by op kind."""
    prev = getattr(_local, "counter", None)
    counter: Counter = Counter()
    _local.counter = counter
    try:
        yield counter
    finally:
        _local.counter = prev
