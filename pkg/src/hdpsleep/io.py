"""File formats: sample series, observation and posterior JSON-lines, CSV tables.

Every JSON-lines file starts with a header record carrying the manifest
hash of the stage that wrote it; CSV files start with a ``# manifest_hash:``
comment line.
"""
from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np

from .inference import PosteriorSample
from .signal import SpectralObservation

__all__ = [
    "FormatError",
    "read_series",
    "write_series",
    "write_json",
    "read_json",
    "write_observations",
    "read_observations",
    "write_jsonl_header",
    "append_jsonl",
    "read_samples",
    "write_csv",
    "read_csv",
    "read_hypnogram",
]


class FormatError(ValueError):
    pass


def read_series(path, fmt: str = "csv") -> np.ndarray:
    path = Path(path)
    if fmt == "f32":
        return np.fromfile(path, dtype="<f4").astype(float)
    values = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                values.append(float(line))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: not a number: {line[:40]!r}") from None
    return np.asarray(values)


def write_series(path, samples, fmt: str = "csv") -> None:
    samples = np.asarray(samples, dtype=float)
    if fmt == "f32":
        samples.astype("<f4").tofile(path)
        return
    with open(path, "w") as fh:
        fh.writelines(f"{x!r}\n" for x in samples.tolist())


def write_json(path, obj) -> None:
    """Atomic JSON write (tmp file + rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"missing file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: line {exc.lineno}: {exc.msg}") from exc


def _jsonl_records(path):
    try:
        fh = open(path)
    except FileNotFoundError as exc:
        raise FormatError(f"missing file: {path}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError:
                # a torn final line from an interrupted writer is dropped
                rest = fh.read()
                if rest.strip():
                    raise FormatError(f"{path}:{lineno}: malformed JSON record") from None
                return


def write_jsonl_header(path, header: dict) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"type": "header", **header}, sort_keys=True) + "\n")


def append_jsonl(path, records) -> None:
    with open(path, "a") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _read_jsonl(path):
    records = list(_jsonl_records(path))
    if not records or records[0][1].get("type") != "header":
        raise FormatError(f"{path}: missing header record")
    return records[0][1], records[1:]


def write_observations(path, obs: SpectralObservation, header: dict) -> None:
    head = {
        **header,
        "fs": obs.fs,
        "J": obs.J,
        "bands": [list(b) for b in obs.bands],
        "M": obs.M,
        "T": obs.T,
    }
    write_jsonl_header(path, head)
    recs = (
        {
            "type": "window",
            "window": t,
            "valid": bool(obs.valid[t]),
            "indices": obs.indices[t].tolist(),
            "coeffs": np.stack((obs.coeffs[t].real, obs.coeffs[t].imag), axis=-1).tolist(),
        }
        for t in range(obs.T)
    )
    append_jsonl(path, recs)


def read_observations(path):
    """Return (header, SpectralObservation)."""
    head, records = _read_jsonl(path)
    T = len(records)
    B, M = len(head["bands"]), head["M"]
    coeffs = np.empty((T, B, M), dtype=complex)
    indices = np.empty((T, B), dtype=np.int64)
    valid = np.empty(T, dtype=bool)
    for n, (lineno, rec) in enumerate(records):
        try:
            if rec["window"] != n:
                raise FormatError(f"{path}:{lineno}: expected window {n}, found {rec['window']}")
            c = np.asarray(rec["coeffs"], dtype=float)
            if c.shape != (B, M, 2):
                raise FormatError(f"{path}:{lineno}: coefficient block has shape {c.shape}, expected {(B, M, 2)}")
            coeffs[n] = c[..., 0] + 1j * c[..., 1]
            indices[n] = rec["indices"]
            valid[n] = rec["valid"]
        except KeyError as exc:
            raise FormatError(f"{path}:{lineno}: missing field {exc}") from None
    bands = tuple(tuple(b) for b in head["bands"])
    return head, SpectralObservation(coeffs, indices, valid, head["fs"], head["J"], bands)


def read_samples(path, max_iteration: int | None = None):
    """Return (header, list of PosteriorSample)."""
    head, records = _read_jsonl(path)
    out = []
    for lineno, rec in records:
        try:
            smp = PosteriorSample.from_dict(rec)
        except KeyError as exc:
            raise FormatError(f"{path}:{lineno}: missing field {exc}") from None
        if max_iteration is None or smp.iteration <= max_iteration:
            out.append(smp)
    return head, out


def write_csv(path, header: list, rows, manifest_hash: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# manifest_hash: {manifest_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_csv(path):
    """Return (manifest_hash or None, header, rows as lists of str)."""
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    mhash = None
    if lines and lines[0].startswith("# manifest_hash:"):
        mhash = lines[0].split(":", 1)[1].strip()
        lines = lines[1:]
    rows = list(csv.reader(lines))
    return mhash, rows[0], rows[1:]


def read_hypnogram(path) -> np.ndarray:
    """One stage code per line (header line and '#' comments allowed)."""
    labels = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                labels.append(int(float(line.split(",")[-1])))
            except ValueError:
                if labels:
                    raise FormatError(f"{path}:{lineno}: not a stage code: {line!r}") from None
    return np.asarray(labels, dtype=np.int64)
