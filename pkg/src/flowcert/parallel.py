"""Worker pool sizing and deterministic chunked evaluation.

FLOWCERT_THREADS caps the number of worker threads. Work is split into
fixed-size chunks that do not depend on the worker count, and results are
assembled by chunk index, so outputs are identical for any thread count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")

# fixed work-unit size; independent of the worker count by design
CHUNK = 128


def worker_count() -> int:
    raw = os.environ.get("FLOWCERT_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        n = min(4, os.cpu_count() or 1)
    return n


def map_chunked(fn: Callable[[Sequence[T]], list[R]], items: Sequence[T], chunk: int = CHUNK) -> list[R]:
    """Apply ``fn`` to fixed-size chunks of ``items`` and concatenate in order."""
    chunks = [items[i : i + chunk] for i in range(0, len(items), chunk)]
    if not chunks:
        return []
    workers = worker_count()
    if workers == 1 or len(chunks) == 1:
        results = [fn(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fn, chunks))
    out: list[R] = []
    for r in results:
        out.extend(r)
    return out
