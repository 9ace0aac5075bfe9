"""Shared plumbing: deterministic RNG derivation, digests, stable file output.

Every stochastic routine in the package takes an explicit integer seed and
derives per-unit generators with :func:`derive_rng`, so results never depend
on scheduling, thread count, or global RNG state.
"""

from __future__ import annotations

import hashlib
import json
import os
from typing import Any, Iterable, Sequence

import numpy as np


def _key_to_int(key: Any) -> int:
    """Map an arbitrary key (int or str) to a stable 64-bit integer."""
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def derive_rng(seed: int, *keys: Any) -> np.random.Generator:
    """Deterministic generator for the work unit identified by ``keys``.

    The same (seed, keys) always yields the same stream, independent of how
    many other units run or in which order.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key_to_int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *keys: Any) -> int:
    """Derived child seed (for APIs that take seeds rather than Generators)."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key_to_int(k) for k in keys]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


def file_digest(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def json_digest(obj: Any) -> str:
    """Digest of the canonical JSON form of ``obj``."""
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def fmt_num(x: Any) -> str:
    """Format a number for CSV output, byte-stable across runs.

    Floats use repr (shortest round-trip), so identical doubles always
    produce identical bytes; NaN renders as the empty string.
    """
    if x is None:
        return ""
    if isinstance(x, float) or isinstance(x, np.floating):
        if np.isnan(x):
            return ""
        return repr(float(x))
    return str(x)


def write_csv(path: str | os.PathLike, header: Sequence[str],
              rows: Iterable[Sequence[Any]]) -> None:
    """Write rows with deterministic formatting and unix newlines."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt_num(v) for v in row) + "\n")


def write_json(path: str | os.PathLike, obj: Any) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2, default=str)
        fh.write("\n")
