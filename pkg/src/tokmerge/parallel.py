"""Deterministic patch-parallel execution.

Patches are independent, so a thread pool may process them in any order;
results are collected by patch index and every worker derives its own RNG
substream, which makes the output identical to sequential processing
regardless of scheduling.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

DEFAULT_THREADS_ENV = "TOKMERGE_THREADS"


def resolve_threads(threads: int | None) -> int:
    """CLI flag wins; falls back to the TOKMERGE_THREADS env var, then 1."""
    if threads is not None:
        if threads < 1:
            from .errors import ConfigError

            raise ConfigError(f"threads must be >= 1, got {threads}")
        return threads
    env = os.environ.get(DEFAULT_THREADS_ENV)
    if env is not None:
        try:
            val = int(env)
        except ValueError:
            from .errors import ConfigError

            raise ConfigError(f"{DEFAULT_THREADS_ENV} must be an integer, got {env!r}")
        if val >= 1:
            return val
    return 1


def map_patches(work, feats, patches, threads: int = 1):
    """Run ``work(k, patch_feats, patch_mask)`` for every patch.

    Returns the list of results ordered by patch index.
    """
    tasks = [
        (k, feats[patches.indices[k]], patches.pad_mask[k])
        for k in range(patches.n_patches)
    ]
    if threads <= 1 or patches.n_patches == 1:
        return [work(*t) for t in tasks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(work, *t) for t in tasks]
        return [f.result() for f in futures]
