"""Waiting-time matrices and their on-disk CSV form.

The central data object is a matrix of per-rank, per-iteration waiting
times: row r is the timeline of rank r, column i is iteration i.  All
analysis modules consume this one structure, either whole or windowed
to a consecutive-iteration snippet.

On disk a trace is a plain CSV (one row per rank, no header by default)
plus an optional ``.meta`` sidecar of ``key=value`` lines carrying
provenance: ``ranks=``, ``iterations=``, ``domain_size=``, ``topology=``,
``seed=``, and anything else the producer wants to record.
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import InitVar, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

SIDECAR_SUFFIX = ".meta"


class TraceFormatError(ValueError):
    """A trace file that exists but does not parse as the CSV format."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class TraceMatrix:
    """N_p x N_it matrix of waiting times in seconds.

    Entries must be finite; raw traces are additionally non-negative.
    ``center_global`` produces traces with negative entries, which are
    marked via ``meta["centered"]`` and exempt from the sign check.
    """

    waits: np.ndarray
    rank_labels: tuple[int, ...] = ()
    domain_of: Mapping[int, int] = field(default_factory=dict)
    meta: Mapping[str, str] = field(default_factory=dict)
    allow_negative: InitVar[bool] = False

    def __post_init__(self, allow_negative: bool) -> None:
        w = _freeze(np.atleast_2d(np.asarray(self.waits, dtype=np.float64)))
        object.__setattr__(self, "waits", w)
        if w.ndim != 2 or w.shape[0] < 1 or w.shape[1] < 1:
            raise ValueError(f"trace must be a 2-D matrix with at least one row and column, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            r, c = np.argwhere(~np.isfinite(w))[0]
            raise ValueError(f"non-finite waiting time at rank row {r}, iteration {c}")
        if not allow_negative and np.any(w < 0):
            r, c = np.argwhere(w < 0)[0]
            raise ValueError(f"negative waiting time at rank row {r}, iteration {c}")
        labels = tuple(self.rank_labels) if self.rank_labels else tuple(range(w.shape[0]))
        object.__setattr__(self, "rank_labels", labels)
        if len(labels) != w.shape[0] or len(set(labels)) != len(labels):
            raise ValueError(f"rank_labels must be {w.shape[0]} unique ids, got {labels!r}")
        dom = dict(self.domain_of) if self.domain_of else {r: 0 for r in labels}
        missing = [r for r in labels if r not in dom]
        if missing:
            raise ValueError(f"domain_of is missing ranks {missing}")
        object.__setattr__(self, "domain_of", dom)
        object.__setattr__(self, "meta", dict(self.meta))

    @property
    def n_ranks(self) -> int:
        return self.waits.shape[0]

    @property
    def n_iterations(self) -> int:
        return self.waits.shape[1]

    @property
    def n_domains(self) -> int:
        return len(set(self.domain_of[r] for r in self.rank_labels))

    def domain_indices(self) -> np.ndarray:
        """Domain index per row, aligned with the row order."""
        return np.array([self.domain_of[r] for r in self.rank_labels], dtype=np.int64)


@dataclass(frozen=True)
class PerfSeries:
    """Iterations-per-second per rank, averaged over fixed windows."""

    perf: np.ndarray
    window: int

    def __post_init__(self) -> None:
        p = _freeze(np.atleast_2d(np.asarray(self.perf, dtype=np.float64)))
        object.__setattr__(self, "perf", p)
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if not np.all(p > 0):
            raise ValueError("performance entries must be positive for a completed run")


@dataclass(frozen=True)
class Snippet:
    """A consecutive-iteration window cut out of a trace."""

    start: int
    length: int
    data: TraceMatrix

    def __post_init__(self) -> None:
        if self.start < 0 or self.length < 2:
            raise ValueError(f"snippet needs start >= 0 and length >= 2, got start={self.start} length={self.length}")
        if self.data.n_iterations != self.length:
            raise ValueError("snippet data does not match the declared length")


def snippet(trace: TraceMatrix, start: int, length: int) -> Snippet:
    """Cut out iterations [start, start+length) without touching the input."""
    if length < 2:
        raise ValueError(f"snippet length must be >= 2, got {length}")
    if start < 0 or start + length > trace.n_iterations:
        raise ValueError(
            f"snippet window [{start}, {start + length}) overruns the {trace.n_iterations}-iteration trace"
        )
    meta = dict(trace.meta)
    meta["snippet_start"] = str(start + int(meta.get("snippet_start", 0)))
    meta["snippet_length"] = str(length)
    data = TraceMatrix(
        trace.waits[:, start : start + length].copy(),
        rank_labels=trace.rank_labels,
        domain_of=trace.domain_of,
        meta=meta,
        allow_negative=True,
    )
    return Snippet(start=start, length=length, data=data)


def center_global(trace: TraceMatrix) -> tuple[TraceMatrix, float]:
    """Subtract the grand mean over all ranks and iterations.

    Returns the centered trace and the mean that was removed.  The
    centered matrix has grand mean zero and (in general) negative
    entries; it is tagged with ``meta["centered"]``.
    """
    mean = float(trace.waits.mean())
    meta = dict(trace.meta)
    meta["centered"] = "1"
    centered = TraceMatrix(
        trace.waits - mean,
        rank_labels=trace.rank_labels,
        domain_of=trace.domain_of,
        meta=meta,
        allow_negative=True,
    )
    return centered, mean


def sidecar_path(trace_path: str | Path) -> Path:
    return Path(trace_path).with_suffix(SIDECAR_SUFFIX)


def read_sidecar(path: str | Path) -> dict[str, str]:
    meta: dict[str, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise TraceFormatError(f"{path}: sidecar line without '=': {line!r}")
        key, value = line.split("=", 1)
        meta[key.strip()] = value.strip()
    return meta


def write_atomic(path: str | Path, data: str | bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_trace(path: str | Path, format: str = "csv") -> TraceMatrix:
    """Read a trace CSV (plus its sidecar, when present).

    Raises ``TraceFormatError`` naming the offending row and column for
    malformed, negative, or non-finite values.
    """
    if format != "csv":
        raise ValueError(f"unsupported trace format {format!r}")
    path = Path(path)
    rows: list[list[float]] = []
    n_cols = -1
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if lineno == 0 and cells and cells[0] == "iter0":
                continue  # optional header written by --header
            if n_cols < 0:
                n_cols = len(cells)
            elif len(cells) != n_cols:
                raise TraceFormatError(
                    f"{path}: row {len(rows)} has {len(cells)} columns, expected {n_cols}"
                )
            parsed = []
            for col, cell in enumerate(cells):
                try:
                    v = float(cell)
                except ValueError:
                    raise TraceFormatError(f"{path}: unparsable value {cell!r} at row {len(rows)}, column {col}") from None
                if not math.isfinite(v):
                    raise TraceFormatError(f"{path}: non-finite value at row {len(rows)}, column {col}")
                if v < 0:
                    raise TraceFormatError(f"{path}: negative value at row {len(rows)}, column {col}")
                parsed.append(v)
            rows.append(parsed)
    if not rows:
        raise TraceFormatError(f"{path}: no rows")

    meta: dict[str, str] = {}
    side = sidecar_path(path)
    if side.exists():
        meta = read_sidecar(side)
    waits = np.array(rows, dtype=np.float64)
    labels = tuple(range(waits.shape[0]))
    domain_size = int(meta["domain_size"]) if "domain_size" in meta else waits.shape[0]
    domain_of = {r: r // domain_size for r in labels}
    return TraceMatrix(waits, rank_labels=labels, domain_of=domain_of, meta=meta)


def format_trace_csv(trace: TraceMatrix, header: bool = False) -> str:
    """Render the matrix with full round-trip precision (repr of float64)."""
    lines = []
    if header:
        lines.append(",".join(f"iter{i}" for i in range(trace.n_iterations)))
    for row in trace.waits:
        lines.append(",".join(repr(v) for v in row.tolist()))
    return "\n".join(lines) + "\n"


def save_trace(
    trace: TraceMatrix,
    path: str | Path,
    perf: PerfSeries | None = None,
    header: bool = False,
) -> list[Path]:
    """Write trace CSV + sidecar (+ optional ``<stem>_perf.csv``).

    Returns the written paths.  Writes are atomic (temp file + rename).
    """
    path = Path(path)
    written = [path]
    write_atomic(path, format_trace_csv(trace, header=header))

    meta = dict(trace.meta)
    meta.setdefault("ranks", str(trace.n_ranks))
    meta.setdefault("iterations", str(trace.n_iterations))
    side_lines = [f"{k}={v}" for k, v in meta.items()]
    side = sidecar_path(path)
    write_atomic(side, "\n".join(side_lines) + "\n")
    written.append(side)

    if perf is not None:
        perf_path = path.with_name(path.stem + "_perf.csv")
        lines = [",".join(repr(v) for v in row.tolist()) for row in perf.perf]
        write_atomic(perf_path, "\n".join(lines) + "\n")
        written.append(perf_path)
    return written
