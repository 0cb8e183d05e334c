"""JSON interchange format for operator ensembles.

Floats are written with ``repr``, the shortest decimal string that reads
back to the same double (never more than 17 significant digits), so a
load/dump cycle is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .operators import AffineOperator, OperatorEnsemble, PiecewiseScalarOperator, ShiftedScalingOperator

__all__ = ["FORMAT_VERSION", "ensemble_to_dict", "ensemble_from_dict", "dumps", "loads", "save", "load", "ensemble_hash"]

FORMAT_VERSION = 1


def _floats(a) -> list:
    return [float(v) for v in np.asarray(a, dtype=float).ravel()]


def _member_to_dict(m) -> dict:
    if isinstance(m, AffineOperator):
        return {"kind": m.kind, "B": _floats(m.B), "r": _floats(m.r)}
    if isinstance(m, ShiftedScalingOperator):
        return {"kind": m.kind, "mu": m.mu, "center": _floats(m.center), "offset": _floats(m.offset)}
    if isinstance(m, PiecewiseScalarOperator):
        return {
            "kind": m.kind,
            "breakpoints": _floats(m.breakpoints),
            "slopes": _floats(m.slopes),
            "intercepts": _floats(m.intercepts),
        }
    raise TypeError(f"cannot serialize {type(m).__name__}")


def _member_from_dict(doc: dict, d: int):
    kind = doc.get("kind")
    if kind == "affine":
        return AffineOperator(np.reshape(doc["B"], (d, d)), doc["r"])
    if kind == "shifted-scaling":
        return ShiftedScalingOperator(doc["mu"], doc["center"], doc["offset"])
    if kind == "piecewise":
        return PiecewiseScalarOperator(doc["breakpoints"], doc["slopes"], doc["intercepts"])
    raise ValueError(f"unknown member kind {kind!r}")


def ensemble_to_dict(ens: OperatorEnsemble) -> dict:
    """Matrices are stored row-major as flat lists."""
    return {
        "format": FORMAT_VERSION,
        "dim": ens.dim,
        "n": ens.n,
        "weights": _floats(ens.weights),
        "x_star": None if ens.x_star is None else _floats(ens.x_star),
        "members": [_member_to_dict(m) for m in ens.members],
    }


def ensemble_from_dict(doc: dict) -> OperatorEnsemble:
    if doc.get("format") != FORMAT_VERSION:
        raise ValueError(f"unsupported ensemble format {doc.get('format')!r}")
    d, n = int(doc["dim"]), int(doc["n"])
    members = [_member_from_dict(m, d) for m in doc["members"]]
    if len(members) != n:
        raise ValueError(f"header says n={n} but {len(members)} members follow")
    return OperatorEnsemble(members, weights=doc["weights"], x_star=doc.get("x_star"))


def dumps(ens: OperatorEnsemble) -> str:
    # json writes floats with repr, which round-trips exactly
    return json.dumps(ensemble_to_dict(ens), sort_keys=True, separators=(",", ":"))


def loads(text: str) -> OperatorEnsemble:
    return ensemble_from_dict(json.loads(text))


def ensemble_hash(ens: OperatorEnsemble) -> str:
    return hashlib.sha256(dumps(ens).encode()).hexdigest()


def save(ens: OperatorEnsemble, path, metadata: dict | None = None) -> str:
    """Write ``ens`` (plus an optional metadata block) and return its hash."""
    doc = {"ensemble": ensemble_to_dict(ens), "hash": ensemble_hash(ens)}
    if metadata is not None:
        doc["metadata"] = metadata
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1))
    return doc["hash"]


def load(path) -> tuple[OperatorEnsemble, dict]:
    """Read an ensemble file; returns the ensemble and its metadata block."""
    doc = json.loads(Path(path).read_text())
    ens = ensemble_from_dict(doc["ensemble"] if "ensemble" in doc else doc)
    if "hash" in doc and doc["hash"] != ensemble_hash(ens):
        raise ValueError(f"{path}: hash mismatch, file is corrupted")
    return ens, doc.get("metadata", {})
