"""Report files: CSV tables, JSON payloads, plot-ready histogram text.

Main report files are byte-stable given (config, seeds); wall-clock
timestamps live only in the separate provenance block so reruns diff clean.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from pathlib import Path

import numpy as np


def canonical_json(payload):
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), default=float)


def config_hash(config):
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def _plain(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


class ReportWriter:
    """Writes one experiment's outputs under a directory, then a provenance
    block carrying the config hash, checkpoint hashes, and the timestamp."""

    def __init__(self, out_dir, config, checkpoint_hashes=None):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.checkpoint_hashes = checkpoint_hashes or {}
        self.files = []

    def _register(self, path):
        self.files.append(path.name)
        return path

    def table(self, name, rows):
        path = self._register(self.out_dir / f"{name}.csv")
        rows = [_plain(r) for r in rows]
        fieldnames = []
        for row in rows:
            for key in row:
                if key not in fieldnames:
                    fieldnames.append(key)
        stamp = config_hash(self.config)[:12]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fieldnames + ["config_hash"])
            writer.writeheader()
            for row in rows:
                writer.writerow({**row, "config_hash": stamp})
        return path

    def json_blob(self, name, payload):
        path = self._register(self.out_dir / f"{name}.json")
        with open(path, "w") as fh:
            json.dump(_plain(payload), fh, indent=1, sort_keys=True)
        return path

    def histogram(self, name, counts, edges):
        """Gnuplot-ready two-column text: bin center and count."""
        path = self._register(self.out_dir / f"{name}.dat")
        centers = 0.5 * (np.asarray(edges)[:-1] + np.asarray(edges)[1:])
        with open(path, "w") as fh:
            fh.write("# bin_center count\n")
            for c, n in zip(centers, np.asarray(counts)):
                fh.write(f"{c:.6f} {int(n)}\n")
        return path

    def finalize(self):
        provenance = {
            "config_hash": config_hash(self.config),
            "checkpoint_hashes": dict(self.checkpoint_hashes),
            "files": sorted(self.files),
            "written_at_unix": time.time(),
        }
        with open(self.out_dir / "provenance.json", "w") as fh:
            json.dump(provenance, fh, indent=1, sort_keys=True)
        return provenance
