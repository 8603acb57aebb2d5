"""Corpus ingestion, canonicalization and descriptive statistics.

Missing values are NaN in memory, ``null`` in JSONL and empty cells in CSV.
Timestamps are hours from admission.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from grutv.errors import OrderingError, ParseError, UsageError

log = logging.getLogger(__name__)

ALIGN_WINDOW_HOURS = 5.0 / 60.0


@dataclass
class Sequence:
    id: str
    t: np.ndarray
    values: np.ndarray
    mask: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values.reshape(len(self.t), -1)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        n = len(self.t)
        if self.values.shape[0] != n or self.mask.shape != self.values.shape:
            raise UsageError(
                f"sequence {self.id}: {n} timestamps, values {list(self.values.shape)}, "
                f"mask {list(self.mask.shape)}"
            )
        if n and self.t[0] < 0:
            raise OrderingError(f"sequence {self.id}: first timestamp {self.t[0]} is negative")
        if n > 1 and np.any(np.diff(self.t) < 0):
            raise OrderingError(f"sequence {self.id}: timestamps are not non-decreasing")

    @classmethod
    def from_values(cls, id, t, values, labels=None):
        """Build from raw values with NaN marking missing entries."""
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 1:
            values = values.reshape(len(np.atleast_1d(t)), -1)
        return cls(id, t, values, (~np.isnan(values)).astype(np.float64), labels)

    def __len__(self):
        return len(self.t)

    @property
    def n_vars(self):
        return self.values.shape[1]

    def take(self, idx):
        idx = np.asarray(idx, dtype=int)
        return Sequence(self.id, self.t[idx], self.values[idx], self.mask[idx], self.labels)


@dataclass
class PreparedSequence:
    id: str
    t: np.ndarray
    values: np.ndarray
    mask: np.ndarray
    dt: np.ndarray
    delta: np.ndarray
    defaults: np.ndarray
    labels: np.ndarray | None = None

    def to_sequence(self):
        raw = np.where(self.mask > 0, self.values, np.nan)
        return Sequence(self.id, self.t.copy(), raw, self.mask.copy(), self.labels)

    def equals(self, other):
        return all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("t", "values", "mask", "dt", "delta", "defaults")
        ) and self.id == other.id


@dataclass
class CorpusStats:
    variables: list
    missing_mean: np.ndarray
    missing_std: np.ndarray
    interval_hist: dict
    interval_mean: float
    interval_std: float
    n_pairs: int
    n_sequences: int
    bucket_width: float = 1.0


@dataclass
class Corpus:
    """Sequences plus the optional variable and task names from the header."""

    sequences: list
    variables: list = field(default_factory=list)
    tasks: list = field(default_factory=list)
    merge_conflicts: int = 0

    def __len__(self):
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    def __getitem__(self, i):
        return self.sequences[i]

    @property
    def n_vars(self):
        if self.variables:
            return len(self.variables)
        return self.sequences[0].n_vars if self.sequences else 0

    def subset(self, idx):
        return Corpus([self.sequences[i] for i in idx], list(self.variables), list(self.tasks))


# ---------------------------------------------------------------------------
# alignment / ingestion


def align_records(t, values, window=ALIGN_WINDOW_HOURS):
    """Merge records closer than ``window`` hours to the first record of their group.

    Returns ``(t, values, conflicts)``; when two merged records both observe a
    variable the later value wins and the conflict is counted.
    """
    t = np.asarray(t, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if len(t) == 0 or window <= 0:
        return t, values, 0
    out_t, out_v = [], []
    conflicts = 0
    start = 0
    while start < len(t):
        end = start + 1
        while end < len(t) and t[end] - t[start] < window:
            end += 1
        row = values[start].copy()
        for j in range(start + 1, end):
            seen = ~np.isnan(values[j])
            conflicts += int(np.sum(seen & ~np.isnan(row)))
            row[seen] = values[j][seen]
        out_t.append(t[start])
        out_v.append(row)
        start = end
    return np.array(out_t), np.array(out_v).reshape(len(out_t), values.shape[1]), conflicts


def _check_times(t, where):
    if len(t) and t[0] < 0:
        raise OrderingError(f"{where}: first timestamp {t[0]} is negative")
    if np.any(np.diff(t) < 0):
        raise OrderingError(f"{where}: timestamps are not non-decreasing")


def _parse_jsonl_record(obj, lineno, n_vars):
    try:
        sid = str(obj["id"])
        t = np.array([float(v) for v in obj["t"]], dtype=np.float64)
        rows = obj["x"]
        values = np.array(
            [[np.nan if v is None else float(v) for v in row] for row in rows], dtype=np.float64
        )
        labels = obj.get("y")
        if labels is not None:
            labels = np.array([float(v) for v in labels], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed sequence object ({exc})", lineno) from None
    if len(rows) == 0:
        values = np.zeros((0, n_vars or 0))
    if values.ndim != 2 or values.shape[0] != len(t):
        raise ParseError(f"sequence {sid}: {len(t)} timestamps but {len(rows)} value rows", lineno)
    if n_vars is not None and values.shape[1] != n_vars and len(rows):
        raise ParseError(f"sequence {sid}: expected {n_vars} variables, got {values.shape[1]}", lineno)
    if labels is not None and not np.all((labels == 0) | (labels == 1)):
        raise ParseError(f"sequence {sid}: labels must be 0/1", lineno)
    return sid, t, values, labels


def load_jsonl(path, window=ALIGN_WINDOW_HOURS):
    path = Path(path)
    sequences, variables, tasks = [], [], []
    n_vars = None
    conflicts = 0
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(obj, dict):
                raise ParseError("expected a JSON object", lineno)
            if "id" not in obj and ("vars" in obj or "tasks" in obj):
                variables = list(obj.get("vars", []))
                tasks = list(obj.get("tasks", []))
                if variables:
                    n_vars = len(variables)
                continue
            sid, t, values, labels = _parse_jsonl_record(obj, lineno, n_vars)
            if n_vars is None and len(t):
                n_vars = values.shape[1]
            try:
                _check_times(t, f"line {lineno} (sequence {sid})")
            except OrderingError as exc:
                raise OrderingError(str(exc)) from None
            t, values, c = align_records(t, values, window)
            conflicts += c
            sequences.append(Sequence.from_values(sid, t, values, labels))
    if conflicts:
        log.warning("%s: %d alignment conflicts resolved by keeping the later value", path, conflicts)
    return Corpus(sequences, variables, tasks, conflicts)


def _csv_float(cell, where):
    cell = cell.strip()
    if cell == "":
        return np.nan
    try:
        return float(cell)
    except ValueError:
        raise ParseError(f"{where}: not a number: {cell!r}") from None


def load_csv_dir(path, window=ALIGN_WINDOW_HOURS):
    path = Path(path)
    labels, tasks = {}, []
    label_file = path / "labels.csv"
    if label_file.exists():
        with label_file.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is not None:
                tasks = header[1:]
                for lineno, row in enumerate(reader, start=2):
                    if not row:
                        continue
                    if len(row) != len(header):
                        raise ParseError(f"labels.csv: expected {len(header)} columns", lineno)
                    labels[row[0]] = np.array(
                        [_csv_float(c, f"labels.csv line {lineno}") for c in row[1:]]
                    )
    sequences, variables = [], []
    conflicts = 0
    for f in sorted(path.glob("*.csv")):
        if f.name == "labels.csv":
            continue
        with f.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                continue
            if not header or header[0].strip() != "t":
                raise ParseError(f"{f.name}: first column must be 't'", 1)
            names = [h.strip() for h in header[1:]]
            if variables and names != variables:
                raise ParseError(f"{f.name}: variable columns differ from other files", 1)
            variables = names
            ts, rows = [], []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(header):
                    raise ParseError(f"{f.name}: expected {len(header)} columns, got {len(row)}", lineno)
                ts.append(_csv_float(row[0], f"{f.name} line {lineno}"))
                rows.append([_csv_float(c, f"{f.name} line {lineno}") for c in row[1:]])
        t = np.array(ts, dtype=np.float64)
        if np.any(np.isnan(t)):
            raise ParseError(f"{f.name}: missing timestamp")
        _check_times(t, f.name)
        values = np.array(rows, dtype=np.float64).reshape(len(ts), len(variables))
        t, values, c = align_records(t, values, window)
        conflicts += c
        sequences.append(Sequence.from_values(f.stem, t, values, labels.get(f.stem)))
    if conflicts:
        log.warning("%s: %d alignment conflicts resolved by keeping the later value", path, conflicts)
    return Corpus(sequences, variables, tasks, conflicts)


def load_corpus(path, fmt=None, window=ALIGN_WINDOW_HOURS):
    """Read a corpus from a JSONL file or a CSV directory (``fmt`` in {"jsonl", "csv-dir"})."""
    path = Path(path)
    if fmt is None:
        fmt = "csv-dir" if path.is_dir() else "jsonl"
    if not path.exists():
        raise UsageError(f"{path}: no such file or directory")
    if fmt == "jsonl":
        return load_jsonl(path, window)
    if fmt in ("csv-dir", "csv"):
        return load_csv_dir(path, window)
    raise UsageError(f"unknown corpus format {fmt!r}")


def _json_value(v):
    return None if math.isnan(v) else float(v)


def sequence_to_json(seq, extra=None):
    obj = {
        "id": seq.id,
        "t": [float(v) for v in seq.t],
        "x": [[_json_value(v) if m > 0 else None for v, m in zip(row, mrow)]
              for row, mrow in zip(seq.values, seq.mask)],
        "y": [] if seq.labels is None else [int(v) for v in seq.labels],
    }
    if extra:
        obj.update(extra)
    return obj


def save_jsonl(corpus, path, extras=None):
    """Write a corpus; ``extras[i]`` (if given) is merged into sequence i's object."""
    path = Path(path)
    with path.open("w") as fh:
        if corpus.variables or corpus.tasks:
            fh.write(json.dumps({"vars": list(corpus.variables), "tasks": list(corpus.tasks)}) + "\n")
        for i, seq in enumerate(corpus.sequences):
            extra = extras[i] if extras is not None else None
            fh.write(json.dumps(sequence_to_json(seq, extra)) + "\n")


def save_csv_dir(corpus, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = corpus.variables or [f"v{i}" for i in range(corpus.n_vars)]
    for seq in corpus.sequences:
        with (path / f"{seq.id}.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + names)
            for t, row, mrow in zip(seq.t, seq.values, seq.mask):
                w.writerow([repr(float(t))] + [repr(float(v)) if m > 0 else "" for v, m in zip(row, mrow)])
    if any(s.labels is not None for s in corpus.sequences):
        k = max(len(s.labels) for s in corpus.sequences if s.labels is not None)
        tasks = corpus.tasks or [f"y{i + 1}" for i in range(k)]
        with (path / "labels.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id"] + list(tasks))
            for seq in corpus.sequences:
                if seq.labels is not None:
                    w.writerow([seq.id] + [int(v) for v in seq.labels])


# ---------------------------------------------------------------------------
# canonicalization


def compute_defaults(sequences, n_vars=None):
    """Per-variable mean of observed values; 0 for variables never observed."""
    sequences = list(sequences)
    if n_vars is None:
        n_vars = sequences[0].n_vars if sequences else 0
    total = np.zeros(n_vars)
    count = np.zeros(n_vars)
    for s in sequences:
        obs = s.mask > 0
        total += np.where(obs, s.values, 0.0).sum(axis=0)
        count += obs.sum(axis=0)
    return np.divide(total, count, out=np.zeros(n_vars), where=count > 0)


def elapsed_times(t):
    """Gap to the previous record, with the first gap fixed at 1."""
    t = np.asarray(t, dtype=np.float64)
    dt = np.empty_like(t)
    if len(t):
        dt[0] = 1.0
        dt[1:] = np.diff(t)
    return dt


def staleness(t, mask):
    """Per-variable time since the variable was last observed (0 on the first record)."""
    t = np.asarray(t, dtype=np.float64)
    n, d = mask.shape
    delta = np.zeros((n, d))
    for i in range(1, n):
        gap = t[i] - t[i - 1]
        delta[i] = gap + np.where(mask[i - 1] > 0, 0.0, delta[i - 1])
    return delta


def forward_fill(values, mask, defaults):
    out = np.empty_like(values, dtype=np.float64)
    last = np.array(defaults, dtype=np.float64)
    for i in range(values.shape[0]):
        obs = mask[i] > 0
        last = np.where(obs, values[i], last)
        out[i] = last
    return out


def canonicalize(seq, defaults):
    """Forward-fill missing values (falling back to ``defaults``) and derive dt / staleness."""
    if isinstance(seq, PreparedSequence):
        seq = seq.to_sequence()
    defaults = np.asarray(defaults, dtype=np.float64)
    if defaults.shape != (seq.n_vars,):
        raise UsageError(f"defaults have length {defaults.size}, sequence has {seq.n_vars} variables")
    return PreparedSequence(
        id=seq.id,
        t=seq.t.copy(),
        values=forward_fill(seq.values, seq.mask, defaults),
        mask=seq.mask.copy(),
        dt=elapsed_times(seq.t),
        delta=staleness(seq.t, seq.mask),
        defaults=defaults.copy(),
        labels=None if seq.labels is None else seq.labels.copy(),
    )


# ---------------------------------------------------------------------------
# descriptive statistics


def bucket_of(gap, width=1.0):
    """Bucket key for a gap: the nearest multiple of ``width``."""
    return float(np.round(gap / width) * width)


def adjacent_intervals(sequences):
    parts = [np.diff(s.t) for s in sequences if len(s) > 1]
    return np.concatenate(parts) if parts else np.zeros(0)


def corpus_stats(corpus, bucket_width=1.0):
    seqs = list(corpus)
    if not seqs:
        raise UsageError("corpus_stats: empty corpus")
    d = seqs[0].n_vars
    rates = np.array([(s.mask == 0).sum(axis=0) / len(s) if len(s) else np.ones(d) for s in seqs])
    gaps = adjacent_intervals(seqs)
    hist = Counter(bucket_of(g, bucket_width) for g in gaps)
    names = list(getattr(corpus, "variables", []) or [f"v{i}" for i in range(d)])
    return CorpusStats(
        variables=names,
        missing_mean=rates.mean(axis=0),
        missing_std=rates.std(axis=0),
        interval_hist=dict(sorted(hist.items())),
        interval_mean=float(gaps.mean()) if gaps.size else float("nan"),
        interval_std=float(gaps.std()) if gaps.size else float("nan"),
        n_pairs=int(gaps.size),
        n_sequences=len(seqs),
        bucket_width=bucket_width,
    )


def stats_rows(stats):
    """Flat rows ``(kind, name, mean, std, count)`` for delimited output."""
    rows = []
    for name, m, s in zip(stats.variables, stats.missing_mean, stats.missing_std):
        rows.append(("missing_rate", name, repr(float(m)), repr(float(s)), stats.n_sequences))
    for bucket, count in stats.interval_hist.items():
        rows.append(("interval_bucket", repr(bucket), "", "", count))
    rows.append(("interval_summary", "all", repr(stats.interval_mean), repr(stats.interval_std), stats.n_pairs))
    return rows


def write_stats_csv(stats, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["kind", "name", "mean", "std", "count"])
    w.writerows(stats_rows(stats))
