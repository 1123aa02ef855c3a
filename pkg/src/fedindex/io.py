"""Text file formats: populations, round traces and JSON documents.

Population file (version 1)::

    # fedindex-population v1
    [producers]
    id,weight,p,q,phi,truth_intercept,truth_a_1,...,truth_a_J
    producer-000,57.3,1.01,1.42,0.87,0.0,0.51,0.29
    [observations]
    id,x,y_1,...,y_J
    producer-000,0.0,2.71,3.05
    ...

Truth columns are left empty when a producer carries no generating
parameters. Reals are written with ``repr`` so reloading is bit-exact.
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from fedindex.federated import RoundTrace
from fedindex.index_model import ProducerDataset, ProducerTruth
from fedindex.tweedie import TweedieParams

POPULATION_MAGIC = "# fedindex-population"
POPULATION_VERSION = 1


class PopulationFormatError(ValueError):
    pass


def fmt(value: float) -> str:
    """Shortest round-trip text for a real."""
    return repr(float(value))


def write_population(path, clients: Sequence[ProducerDataset]) -> None:
    if not clients:
        raise ValueError("cannot write an empty population")
    j = clients[0].n_covariates
    buf = io.StringIO()
    buf.write(f"{POPULATION_MAGIC} v{POPULATION_VERSION}\n")
    writer = csv.writer(buf, lineterminator="\n")
    buf.write("[producers]\n")
    writer.writerow(
        ["id", "weight", "p", "q", "phi", "truth_intercept"] + [f"truth_a_{k + 1}" for k in range(j)]
    )
    for c in clients:
        if c.n_covariates != j:
            raise ValueError("all producers must share the covariate dimension")
        truth = [""] * (j + 1)
        if c.truth is not None:
            truth = [fmt(c.truth.intercept)] + [fmt(v) for v in c.truth.a]
        writer.writerow([c.id, fmt(c.weight), fmt(c.params.p), fmt(c.params.q), fmt(c.params.phi)] + truth)
    buf.write("[observations]\n")
    writer.writerow(["id", "x"] + [f"y_{k + 1}" for k in range(j)])
    for c in clients:
        for xd, yd in zip(c.x, c.y):
            writer.writerow([c.id, fmt(xd)] + [fmt(v) for v in yd])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_population(path) -> list[ProducerDataset]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or not lines[0].startswith(POPULATION_MAGIC):
        raise PopulationFormatError(f"{path}: missing '{POPULATION_MAGIC}' header")
    version = lines[0][len(POPULATION_MAGIC):].strip()
    if version != f"v{POPULATION_VERSION}":
        raise PopulationFormatError(f"{path}: unsupported population version {version!r}")
    try:
        split = lines.index("[observations]")
        if lines[1] != "[producers]":
            raise ValueError
    except (ValueError, IndexError):
        raise PopulationFormatError(f"{path}: expected [producers] and [observations] sections") from None

    producers = list(csv.reader(lines[2:split]))
    observations = list(csv.reader(lines[split + 1:]))
    if not producers or not observations:
        raise PopulationFormatError(f"{path}: empty section")
    header, rows = producers[0], producers[1:]
    j = len(header) - 6
    obs_header, obs_rows = observations[0], observations[1:]
    if j < 1 or len(obs_header) != j + 2:
        raise PopulationFormatError(f"{path}: inconsistent covariate dimension in headers")

    grouped: dict[str, tuple[list, list]] = {}
    for lineno, row in enumerate(obs_rows, start=split + 3):
        if len(row) != j + 2:
            raise PopulationFormatError(f"{path}:{lineno}: expected {j + 2} fields, got {len(row)}")
        xs, ys = grouped.setdefault(row[0], ([], []))
        xs.append(float(row[1]))
        ys.append([float(v) for v in row[2:]])

    clients = []
    for lineno, row in enumerate(rows, start=4):
        if len(row) != j + 6:
            raise PopulationFormatError(f"{path}:{lineno}: expected {j + 6} fields, got {len(row)}")
        pid = row[0]
        if pid not in grouped:
            raise PopulationFormatError(f"{path}: producer {pid!r} has no observations")
        truth = None
        if row[5] != "":
            truth = ProducerTruth(np.array([float(v) for v in row[6:]]), float(row[5]))
        xs, ys = grouped.pop(pid)
        params = TweedieParams(float(row[2]), float(row[3]), float(row[4]))
        clients.append(ProducerDataset(pid, np.array(ys), np.array(xs), params, float(row[1]), truth))
    if grouped:
        raise PopulationFormatError(f"{path}: observations for unknown producers {sorted(grouped)}")
    return clients


def trace_header(n_coeffs: int, intercept: bool = False) -> list[str]:
    cols = ["round", "run", "global_loss"] + [f"a_{k + 1}" for k in range(n_coeffs)]
    if intercept:
        cols.append("intercept")
    return cols


def write_traces(path, runs: Sequence[Sequence[RoundTrace]]) -> None:
    """CSV with one row per (run, round), runs in index order."""
    first = runs[0][0].coeffs_after
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(trace_header(first.n_covariates, first.has_intercept))
    for run, traces in enumerate(runs):
        for t in traces:
            writer.writerow([t.round, run, fmt(t.global_loss)] + [fmt(v) for v in t.coeffs_after.to_vector()])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_traces(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        rec = {k: float(v) for k, v in row.items()}
        rec["round"] = int(rec["round"])
        rec["run"] = int(rec["run"])
        out.append(rec)
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        return value if math.isfinite(value) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))

