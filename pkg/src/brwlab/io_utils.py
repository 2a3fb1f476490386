"""Artifact writers: CSV schemas, fit summaries, and the hash manifest.

Float formatting uses repr (shortest round-trip), so identical results
serialize to identical bytes; no artifact embeds wall-clock state.
"""

from __future__ import annotations

import hashlib
import math
import os

import numpy as np

from .errors import ValidationError


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, np.integer):
        return str(int(value))
    if isinstance(value, np.floating):
        value = float(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    if value is None:
        return ""
    return str(value)


def write_csv(path, header: list[str], rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def read_csv(path):
    """(header, rows) with rows as lists of strings; no type coercion."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines:
        raise ValidationError(f"{path} is empty")
    header = lines[0].split(",")
    rows = [ln.split(",") for ln in lines[1:] if ln]
    return header, rows


def require_columns(header: list[str], needed: list[str], path: str):
    missing = [c for c in needed if c not in header]
    if missing:
        raise ValidationError(f"{path} is missing column(s): {', '.join(missing)}")


def write_fit_summary(path, fit):
    with open(path, "w") as fh:
        fh.write(f"q_hat={fmt(fit.q_hat)}\n")
        fh.write(f"C_hat={fmt(fit.c_hat)}\n")
        fh.write(f"r2={fmt(fit.r2)}\n")
        fh.write(f"window=[{fmt(fit.window[0])},{fmt(fit.window[1])}]\n")
        fh.write(f"n_points={fit.n_points}\n")
        fh.write(f"flagged={1 if fit.flagged else 0}\n")


def read_fit_summary(path) -> dict:
    out = {}
    with open(path) as fh:
        for ln in fh:
            ln = ln.strip()
            if not ln or "=" not in ln:
                continue
            key, val = ln.split("=", 1)
            out[key.strip()] = val.strip()
    for key in ("q_hat", "C_hat"):
        if key not in out:
            raise ValidationError(f"{path} is missing {key}")
    return out


class Manifest:
    """Collects written artifacts and emits name + sha256 lines, sorted.

    An existing manifest in the same directory is merged, so multi-step
    recipes sharing an out-dir accumulate one manifest; reruns from a
    clean directory reproduce it byte for byte.
    """

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self.entries: dict[str, str] = {}
        prior = os.path.join(out_dir, "manifest.txt")
        if os.path.exists(prior):
            with open(prior) as fh:
                for ln in fh:
                    parts = ln.rstrip("\n").split("  ", 1)
                    if len(parts) == 2:
                        self.entries[parts[1]] = parts[0]

    def register(self, path: str):
        h = hashlib.sha256()
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 16), b""):
                h.update(chunk)
        rel = os.path.relpath(path, self.out_dir)
        self.entries[rel] = h.hexdigest()

    def write(self, name: str = "manifest.txt") -> str:
        path = os.path.join(self.out_dir, name)
        with open(path, "w") as fh:
            for rel in sorted(self.entries):
                fh.write(f"{self.entries[rel]}  {rel}\n")
        return path


def parse_grid_spec(spec: str):
    """'lo:hi:step' -> inclusive arange; a bare comma list also works."""
    import numpy as np

    spec = spec.strip()
    if ":" in spec:
        parts = spec.split(":")
        if len(parts) != 3:
            raise ValidationError(f"grid spec must be lo:hi:step, got {spec!r}")
        try:
            lo, hi, step = (float(p) for p in parts)
        except ValueError:
            raise ValidationError(f"grid spec has non-numeric parts: {spec!r}")
        if step <= 0 or hi < lo:
            raise ValidationError(f"grid spec must have step > 0 and hi >= lo: {spec!r}")
        return np.arange(lo, hi + step * 0.5, step)
    try:
        return np.array([float(p) for p in spec.split(",") if p.strip() != ""])
    except ValueError:
        raise ValidationError(f"grid spec has non-numeric parts: {spec!r}")
