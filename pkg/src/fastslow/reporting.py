"""Reproducibility helpers: seed streams, confidence intervals, report files.

Every Monte-Carlo experiment derives its generator from a master seed and a
stable text label, so adding an experiment never perturbs another's stream.
Reports are written with repr() floats (shortest exact round trip), which
makes reruns byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np


def stream(master_seed, label, index=0):
    """Deterministic per-experiment generator via label-keyed counter splitting."""
    digest = hashlib.sha256(label.encode()).digest()
    key = int.from_bytes(digest[:8], "big")
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(key, int(index)))
    return np.random.default_rng(ss)


def wilson_interval(k, n, z=1.959963984540054):
    """Wilson 95% score interval for a binomial proportion."""
    if n == 0:
        return 0.0, 1.0
    p = k / n
    z2 = z * z
    den = 1.0 + z2 / n
    centre = (p + z2 / (2.0 * n)) / den
    half = z * math.sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / den
    return max(0.0, centre - half), min(1.0, centre + half)


def pairwise_sum(a, axis=None):
    """Order-independent reduction; numpy's native pairwise summation."""
    return np.sum(np.asarray(a), axis=axis)


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


@dataclass
class ExperimentReport:
    """Seeded, reproducible record of one Monte-Carlo estimate.

    `summary` carries the estimates with their tolerance metadata; `tables`
    maps a name to (header, rows) written as CSV side files.
    """

    name: str
    seed: int
    config: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)

    def write(self, outdir):
        import os

        os.makedirs(outdir, exist_ok=True)
        payload = {
            "experiment": self.name,
            "seed": self.seed,
            "config": _jsonable(self.config),
            "summary": _jsonable(self.summary),
        }
        json_path = os.path.join(outdir, f"{self.name}.json")
        with open(json_path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        paths = [json_path]
        for tname, (header, rows) in self.tables.items():
            path = os.path.join(outdir, f"{self.name}_{tname}.csv")
            write_csv(path, header, rows)
            paths.append(path)
        return paths


def write_csv(path, header, rows):
    """CSV with repr-formatted floats: byte-identical across reruns."""
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def content_hash(text):
    """Short content hash used to tag reports with their system file."""
    return hashlib.sha256(text.encode()).hexdigest()[:16]
