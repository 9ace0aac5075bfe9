"""Posterior draw storage and a self-describing columnar file format.

The file layout is a single JSON header line (parameter names, shapes,
dtypes, axis labels, config digest) followed by the raw C-order float64/int
payloads concatenated in header order.  Everything needed to reload and
interpret the draws lives in the header.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DataError

MAGIC = "raterlab-draws/1"


@dataclass
class PosteriorDraws:
    """Post-burn-in MCMC draws, indexed (chain, draw, *param shape)."""
    arrays: dict[str, np.ndarray]
    labels: dict[str, list]
    meta: dict

    @property
    def n_chains(self) -> int:
        first = next(iter(self.arrays.values()))
        return first.shape[0]

    @property
    def n_draws(self) -> int:
        first = next(iter(self.arrays.values()))
        return first.shape[1]

    def flat(self, name: str) -> np.ndarray:
        """Draws pooled over chains: (chains*draws, *shape)."""
        arr = self.arrays[name]
        return arr.reshape(-1, *arr.shape[2:])

    def param_names(self) -> list[str]:
        return sorted(self.arrays)


def save_draws(draws: PosteriorDraws, path: str | Path) -> None:
    path = Path(path)
    names = sorted(draws.arrays)
    header = {
        "magic": MAGIC,
        "params": [{
            "name": n,
            "shape": list(draws.arrays[n].shape),
            "dtype": str(draws.arrays[n].dtype),
        } for n in names],
        "labels": draws.labels,
        "meta": draws.meta,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True,
                            separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(draws.arrays[n]).tobytes())


def load_draws(path: str | Path) -> PosteriorDraws:
    path = Path(path)
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: not a draws file: {exc}") from exc
        if header.get("magic") != MAGIC:
            raise DataError(f"{path}: unknown draws format "
                            f"{header.get('magic')!r}")
        arrays = {}
        for spec in header["params"]:
            shape = tuple(spec["shape"])
            dtype = np.dtype(spec["dtype"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * dtype.itemsize)
            if len(buf) != count * dtype.itemsize:
                raise DataError(f"{path}: truncated payload for "
                                f"{spec['name']!r}")
            arrays[spec["name"]] = np.frombuffer(
                buf, dtype=dtype).reshape(shape).copy()
    labels = {k: [tuple(v) if isinstance(v, list) else v for v in vals]
              for k, vals in header.get("labels", {}).items()}
    return PosteriorDraws(arrays=arrays, labels=labels,
                          meta=header.get("meta", {}))
