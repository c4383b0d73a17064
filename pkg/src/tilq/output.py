"""Deterministic CSV/JSON writers and run manifests.

Floats are rendered with shortest round-trip precision so identical runs
produce byte-identical files; the manifest lists every output with its
sha256 so reruns can be audited without re-reading the data.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path


def fmt(x) -> str:
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def write_csv(path, header, rows) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(x) for x in row])
    return str(path)


def write_json(path, obj) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonify)
        fh.write("\n")
    return str(path)


def _jsonify(obj):
    import numpy as np

    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return str(obj)


def csv_mirror_json(csv_path) -> str:
    """JSON mirror of a CSV file (list of row objects keyed by header)."""
    csv_path = Path(csv_path)
    with csv_path.open() as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [dict(zip(header, row)) for row in reader]
    out = csv_path.with_suffix(".json")
    write_json(out, rows)
    return str(out)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(outdir, subcommand: str, config_path: str, config_sha: str,
                   seed: int, files, wall_clock: float, version: str,
                   extra: dict = None) -> str:
    outdir = Path(outdir)
    manifest = {
        "subcommand": subcommand,
        "config": str(config_path),
        "config_sha256": config_sha,
        "seed": seed,
        "tool_version": version,
        "wall_clock_seconds": wall_clock,
        "outputs": [{"file": Path(f).name, "sha256": file_sha256(f)}
                    for f in sorted(files)],
    }
    if extra:
        manifest.update(extra)
    return write_json(outdir / "manifest.json", manifest)
