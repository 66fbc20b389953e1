"""SpO2 ingestion: EDF parsing, annotations, per-second labels, windows, splits.

Windows are 11 s at 8 Hz (88 samples); the window for labeled second ``t``
covers seconds ``[t - 1, t + 9]`` so the labeled second is the window's second
second.
"""

from __future__ import annotations

import json
import logging
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ParameterError, ParseError

log = logging.getLogger(__name__)

SAMPLE_RATE = 8
WINDOW_SECONDS = 11
WINDOW_LENGTH = SAMPLE_RATE * WINDOW_SECONDS
ARTIFACT_THRESHOLD = 50.0
# records without any apnea events in the St. Vincent's database
DEFAULT_EXCLUDED = ("ucddb008", "ucddb011", "ucddb013", "ucddb018")


# ======================================================================
# EDF
# ======================================================================

_HEADER_FIELDS = [
    ("version", 8), ("patient", 80), ("recording", 80), ("startdate", 8), ("starttime", 8),
    ("header_bytes", 8), ("reserved", 44), ("n_records", 8), ("record_duration", 8), ("n_signals", 4),
]
_SIGNAL_FIELDS = [
    ("label", 16), ("transducer", 80), ("dimension", 8), ("physical_min", 8), ("physical_max", 8),
    ("digital_min", 8), ("digital_max", 8), ("prefilter", 80), ("samples_per_record", 8), ("reserved", 32),
]


@dataclass
class EdfSignal:
    """One signal; header fields are kept as the raw fixed-width text."""

    fields: Dict[str, str]
    digital: np.ndarray  # int16, all data records concatenated

    @property
    def label(self) -> str:
        return self.fields["label"].strip()

    @property
    def samples_per_record(self) -> int:
        return int(self.fields["samples_per_record"])

    def _num(self, key: str) -> float:
        return float(self.fields[key])

    @property
    def physical_range(self) -> Tuple[float, float]:
        return self._num("physical_min"), self._num("physical_max")

    @property
    def digital_range(self) -> Tuple[int, int]:
        return int(self.fields["digital_min"]), int(self.fields["digital_max"])

    def physical(self) -> np.ndarray:
        pmin, pmax = self.physical_range
        dmin, dmax = self.digital_range
        return pmin + (self.digital.astype(np.float64) - dmin) * (pmax - pmin) / (dmax - dmin)


@dataclass
class EdfFile:
    fields: Dict[str, str]
    signals: List[EdfSignal]

    @property
    def record_duration(self) -> float:
        return float(self.fields["record_duration"])

    @property
    def n_records(self) -> int:
        return int(self.fields["n_records"])

    def sample_rate(self, signal: EdfSignal) -> float:
        return signal.samples_per_record / self.record_duration

    def find(self, pattern: str = "spo2") -> EdfSignal:
        """First signal whose label contains ``pattern`` (case-insensitive)."""
        for sig in self.signals:
            if pattern.lower() in sig.label.lower():
                return sig
        raise ParseError(f"no signal label contains {pattern!r}; labels: {[s.label for s in self.signals]}")


def _field_text(value, width: int) -> str:
    text = value if isinstance(value, str) else _format_number(value)
    if len(text) > width:
        raise ParameterError(f"value {text!r} does not fit in {width} header bytes")
    return text.ljust(width)


def _format_number(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{value:.6g}"


def parse_edf(data: bytes) -> EdfFile:
    """Parse an EDF/EDF+ byte string (16-bit little-endian samples)."""
    pos = 0

    def take(width: int, what: str) -> str:
        nonlocal pos
        if pos + width > len(data):
            raise ParseError(f"truncated EDF header: {what} needs bytes {pos}..{pos + width}, file has {len(data)}")
        chunk = data[pos:pos + width].decode("latin-1")
        pos += width
        return chunk

    def number(text: str, what: str, offset: int, kind=float):
        try:
            return kind(text.strip())
        except ValueError:
            raise ParseError(f"non-numeric EDF header field {what} at byte offset {offset}: {text.strip()!r}") from None

    fields: Dict[str, str] = {}
    offsets: Dict[str, int] = {}
    for name, width in _HEADER_FIELDS:
        offsets[name] = pos
        fields[name] = take(width, name)
    for name in ("header_bytes", "n_records", "n_signals"):
        number(fields[name], name, offsets[name], int)
    number(fields["record_duration"], "record_duration", offsets["record_duration"])
    ns = int(fields["n_signals"])
    if ns < 0:
        raise ParseError(f"negative signal count at byte offset {offsets['n_signals']}")

    sig_fields: List[Dict[str, str]] = [{} for _ in range(ns)]
    for name, width in _SIGNAL_FIELDS:
        for i in range(ns):
            start = pos
            sig_fields[i][name] = take(width, f"signal {i} {name}")
            if name in ("physical_min", "physical_max"):
                number(sig_fields[i][name], f"signal {i} {name}", start)
            elif name in ("digital_min", "digital_max", "samples_per_record"):
                number(sig_fields[i][name], f"signal {i} {name}", start, int)
    for i, f in enumerate(sig_fields):
        if int(f["digital_min"]) == int(f["digital_max"]):
            raise ParseError(f"signal {i} ({f['label'].strip()}) has digital_min == digital_max")

    per_record = [int(f["samples_per_record"]) for f in sig_fields]
    record_bytes = 2 * sum(per_record)
    n_records = int(fields["n_records"])
    if n_records < 0:  # -1: unknown, infer from size
        n_records = (len(data) - pos) // record_bytes if record_bytes else 0
    needed = pos + n_records * record_bytes
    if len(data) < needed:
        complete = (len(data) - pos) // record_bytes if record_bytes else 0
        raise ParseError(f"truncated EDF data: record {complete} ends past byte offset {len(data)} "
                         f"(expected {needed} bytes)")
    if len(data) > needed:
        log.warning("ignoring %d trailing bytes after byte offset %d", len(data) - needed, needed)
    raw = np.frombuffer(data, dtype="<i2", count=n_records * record_bytes // 2, offset=pos)
    raw = raw.reshape(n_records, -1) if record_bytes else raw.reshape(n_records, 0)
    signals = []
    col = 0
    for f, n in zip(sig_fields, per_record):
        signals.append(EdfSignal(f, raw[:, col:col + n].reshape(-1).astype(np.int16)))
        col += n
    return EdfFile(fields, signals)


def write_edf(edf: EdfFile) -> bytes:
    """Serialize; inverse of :func:`parse_edf` for files it produced."""
    ns = len(edf.signals)
    out = []
    for name, width in _HEADER_FIELDS:
        out.append(_field_text(edf.fields[name], width).encode("latin-1"))
    for name, width in _SIGNAL_FIELDS:
        for sig in edf.signals:
            out.append(_field_text(sig.fields[name], width).encode("latin-1"))
    per_record = [s.samples_per_record for s in edf.signals]
    if ns:
        n_records = len(edf.signals[0].digital) // per_record[0]
        blocks = [s.digital.astype("<i2").reshape(n_records, n) for s, n in zip(edf.signals, per_record)]
        out.append(np.concatenate(blocks, axis=1).tobytes())
    return b"".join(out)


def make_edf(signals: Sequence[dict], *, record_duration: int = 1, patient: str = "X X X X",
             recording: str = "Startdate X X X X", startdate: str = "01.01.01",
             starttime: str = "00.00.00") -> EdfFile:
    """Build an EDF from physical signals.

    Each signal dict has ``label``, ``rate`` (Hz), ``values`` (physical) and
    optionally ``physical_min/max``, ``digital_min/max``, ``dimension``.
    All signals must cover the same whole number of records.
    """
    built = []
    n_records = None
    for spec in signals:
        rate = spec["rate"]
        per_record = int(round(rate * record_duration))
        values = np.asarray(spec["values"], dtype=np.float64)
        if per_record == 0 or len(values) % per_record:
            raise ParameterError(f"signal {spec['label']!r} length is not a whole number of records")
        nr = len(values) // per_record
        if n_records is not None and nr != n_records:
            raise ParameterError("signals cover different numbers of records")
        n_records = nr
        pmin = spec.get("physical_min", 0.0)
        pmax = spec.get("physical_max", 100.0)
        dmin = spec.get("digital_min", -32768)
        dmax = spec.get("digital_max", 32767)
        digital = np.round((values - pmin) * (dmax - dmin) / (pmax - pmin) + dmin)
        digital = np.clip(digital, dmin, dmax).astype(np.int16)
        fields = {
            "label": spec["label"], "transducer": spec.get("transducer", ""),
            "dimension": spec.get("dimension", ""), "physical_min": pmin, "physical_max": pmax,
            "digital_min": dmin, "digital_max": dmax, "prefilter": "", "samples_per_record": per_record,
            "reserved": "",
        }
        fields = {k: _field_text(fields[k], w) for k, w in _SIGNAL_FIELDS}
        built.append(EdfSignal(fields, digital))
    ns = len(built)
    header = {
        "version": "0", "patient": patient, "recording": recording, "startdate": startdate,
        "starttime": starttime, "header_bytes": 256 * (ns + 1), "reserved": "",
        "n_records": n_records or 0, "record_duration": record_duration, "n_signals": ns,
    }
    header = {k: _field_text(header[k], w) for k, w in _HEADER_FIELDS}
    return EdfFile(header, built)


# ======================================================================
# annotations and labels
# ======================================================================

@dataclass(frozen=True)
class AnnotationEvent:
    onset: float
    duration: float
    event_type: str


def parse_annotations(text: str) -> List[AnnotationEvent]:
    """Parse ``onset duration type`` lines (seconds); blank and ``#`` lines are skipped."""
    events, bad = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split(None, 2)
        try:
            if len(parts) != 3:
                raise ValueError
            onset, duration = float(parts[0]), float(parts[1])
        except ValueError:
            bad.append(lineno)
            continue
        if onset < 0 or duration <= 0 or not (math.isfinite(onset) and math.isfinite(duration)):
            raise ParseError(f"line {lineno}: onset must be >= 0 and duration > 0")
        events.append(AnnotationEvent(onset, duration, parts[2].strip()))
    if bad:
        raise ParseError(f"malformed annotation lines: {', '.join(map(str, bad))}")
    return sorted(events, key=lambda e: e.onset)


def format_annotations(events: Iterable[AnnotationEvent]) -> str:
    return "".join(f"{e.onset:g} {e.duration:g} {e.event_type}\n" for e in events)


_UCD_LINE = re.compile(r"^\s*(\d{1,2}):(\d{2}):(\d{2})\s+(\S+)\s+(?:(?:PB|CS)\s+)?(\d+(?:\.\d+)?)\b")


def parse_ucd_respevt(text: str, starttime: str = "00.00.00") -> List[AnnotationEvent]:
    """Adapter for the St. Vincent's ``*_respevt.txt`` layout.

    Event lines start with a clock time ``hh:mm:ss`` followed by the event
    type, an optional PB/CS marker and the duration in seconds; onsets are
    made relative to the EDF start time (``hh.mm.ss``), wrapping at midnight.
    Header and separator lines are ignored.
    """
    h, m, s = (int(x) for x in re.split(r"[.:]", starttime.strip()))
    start = h * 3600 + m * 60 + s
    events = []
    for line in text.splitlines():
        match = _UCD_LINE.match(line)
        if not match:
            continue
        hh, mm, ss, kind, dur = match.groups()
        clock = int(hh) * 3600 + int(mm) * 60 + int(ss)
        onset = (clock - start) % 86400
        if float(dur) > 0:
            events.append(AnnotationEvent(float(onset), float(dur), kind))
    return sorted(events, key=lambda e: e.onset)


def is_apneic_type(event_type: str) -> bool:
    """Apnea family (obstructive, central, mixed) and hypopneas count as apneic."""
    t = event_type.upper()
    return "APNEA" in t or "APNOEA" in t or t.startswith("HYP")


def label_seconds(events: Iterable[AnnotationEvent], record_duration: int) -> np.ndarray:
    """Per-second labels: second ``t`` is apneic iff some apneic event covers ``[onset, onset + duration)``.

    Events reaching past the record are clipped to it.
    """
    labels = np.zeros(int(record_duration), dtype=np.int8)
    for e in events:
        if not is_apneic_type(e.event_type):
            continue
        first = max(0, math.ceil(e.onset))
        stop = min(int(record_duration), math.ceil(e.onset + e.duration))
        if stop > first:
            labels[first:stop] = 1
    return labels


# ======================================================================
# records and windows
# ======================================================================

@dataclass
class SpO2Record:
    record_id: str
    samples: np.ndarray  # percent saturation at 8 Hz
    labels: np.ndarray  # per second, 1 = apneic
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if len(self.samples) != self.sample_rate * len(self.labels):
            raise ParameterError(
                f"record {self.record_id}: {len(self.samples)} samples for {len(self.labels)} labeled seconds")
        if not np.all(np.isfinite(self.samples)):
            raise ParameterError(f"record {self.record_id} contains non-finite samples")

    @property
    def duration(self) -> int:
        return len(self.labels)


@dataclass
class WindowSample:
    values: np.ndarray
    label: int
    record_id: str
    labeled_second: int


@dataclass
class Windows:
    """A column-oriented collection of :class:`WindowSample`."""

    values: np.ndarray  # (n, 88)
    labels: np.ndarray  # (n,)
    record_ids: np.ndarray  # (n,) str
    seconds: np.ndarray  # (n,)

    @classmethod
    def empty(cls) -> "Windows":
        return cls(np.zeros((0, WINDOW_LENGTH)), np.zeros(0, np.int8), np.zeros(0, dtype=object),
                   np.zeros(0, np.int64))

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> WindowSample:
        return WindowSample(self.values[i], int(self.labels[i]), str(self.record_ids[i]), int(self.seconds[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "Windows":
        idx = np.asarray(idx, dtype=np.int64)
        return Windows(self.values[idx], self.labels[idx], self.record_ids[idx], self.seconds[idx])

    @classmethod
    def concat(cls, parts: Sequence["Windows"]) -> "Windows":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(np.concatenate([p.values for p in parts]), np.concatenate([p.labels for p in parts]),
                   np.concatenate([p.record_ids for p in parts]), np.concatenate([p.seconds for p in parts]))

    def class_counts(self) -> Dict[int, int]:
        return {0: int(np.sum(self.labels == 0)), 1: int(np.sum(self.labels == 1))}


def extract_windows(record: SpO2Record) -> Windows:
    """One window per second ``t`` with ``1 <= t <= duration - 10``."""
    n_sec = record.duration
    if n_sec < WINDOW_SECONDS:
        log.warning("record %s is shorter than %d s; no windows", record.record_id, WINDOW_SECONDS)
        return Windows.empty()
    seconds = np.arange(1, n_sec - WINDOW_SECONDS + 2)
    view = np.lib.stride_tricks.sliding_window_view(record.samples, WINDOW_LENGTH)[::SAMPLE_RATE]
    values = view[seconds - 1].copy()
    ids = np.empty(len(seconds), dtype=object)
    ids[:] = record.record_id
    return Windows(values, record.labels[seconds].astype(np.int8), ids, seconds)


def artifact_filter(windows: Windows) -> Windows:
    """Drop every window with any sample strictly below 50 % saturation."""
    if not len(windows):
        return windows
    keep = np.flatnonzero(windows.values.min(axis=1) >= ARTIFACT_THRESHOLD)
    return windows.subset(keep)


# ======================================================================
# splits
# ======================================================================

@dataclass
class DatasetSplit:
    train: Windows
    validation: Windows
    test: Windows
    oversampling: Dict[str, dict] = field(default_factory=dict)
    indices: Dict[str, np.ndarray] = field(default_factory=dict)  # into the input, pre-oversampling


def _oversample(idx: np.ndarray, labels: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, dict]:
    counts = {c: int(np.sum(labels[idx] == c)) for c in (0, 1)}
    report = {"before": {str(c): n for c, n in counts.items()}, "added": 0, "minority": None}
    if min(counts.values()) == 0 or counts[0] == counts[1]:
        if min(counts.values()) == 0 and len(idx):
            log.warning("split of %d windows holds a single class; left unbalanced", len(idx))
        report["after"] = report["before"]
        return idx, report
    minority = 0 if counts[0] < counts[1] else 1
    target = max(counts.values())
    pool = idx[labels[idx] == minority]
    copies, remainder = divmod(target, len(pool))
    extra = [np.repeat(pool, copies - 1)]
    if remainder:
        extra.append(np.sort(rng.choice(pool, size=remainder, replace=False)))
    out = np.concatenate([idx] + extra)
    report["minority"] = minority
    report["added"] = int(len(out) - len(idx))
    report["after"] = {str(c): int(np.sum(labels[out] == c)) for c in (0, 1)}
    return out, report


def split_and_oversample(windows: Windows, ratios: Sequence[int] = (8, 1, 1), seed: int = 0) -> DatasetSplit:
    """Shuffle, split by count (remainders to train), then balance train and validation.

    The minority class is replicated whole-window; the partial final copy is
    drawn without replacement from the seed.  The test split is left as is.
    """
    n = len(windows)
    if n < 10:
        raise ParameterError(f"need at least 10 windows to split, got {n}")
    if len(np.unique(windows.labels)) < 2:
        raise ParameterError("windows hold a single class; cannot balance")
    rng = np.random.default_rng(seed)
    total = sum(ratios)
    n_val = n * ratios[1] // total
    n_test = n * ratios[2] // total
    n_train = n - n_val - n_test
    perm = rng.permutation(n)
    idx = {"train": perm[:n_train], "validation": perm[n_train:n_train + n_val], "test": perm[n_train + n_val:]}
    tr, tr_rep = _oversample(idx["train"], windows.labels, rng)
    va, va_rep = _oversample(idx["validation"], windows.labels, rng)
    return DatasetSplit(windows.subset(tr), windows.subset(va), windows.subset(idx["test"]),
                        {"train": tr_rep, "validation": va_rep}, idx)


# ======================================================================
# synthetic records
# ======================================================================

def synthesize_record(seed: int, duration_seconds: int = 600, event_rate: float = 0.2,
                      desaturation_depth: Tuple[float, float] = (6.0, 12.0), artifact_rate: float = 0.0,
                      ramp_seconds: float = 3.0, noise: float = 0.1,
                      record_id: Optional[str] = None) -> Tuple[SpO2Record, List[AnnotationEvent]]:
    """Seeded SpO2 record with labeled desaturation events.

    ``event_rate`` is the expected fraction of apneic seconds.  Events last
    10-30 s; SpO2 falls linearly by the drawn depth over ``ramp_seconds`` from
    the onset, holds, and recovers over the same time from the event end.
    ``artifact_rate`` is the per-second probability of a sensor dropout
    (1-3 s below 50 %), placed outside events.
    """
    if duration_seconds < 60:
        raise ParameterError("synthetic records must be at least 60 s long")
    if not 0.0 <= event_rate < 1.0:
        raise ParameterError("event_rate must be in [0, 1)")
    rng = np.random.default_rng(seed)
    n = duration_seconds * SAMPLE_RATE
    t = np.arange(n) / SAMPLE_RATE
    baseline = rng.uniform(96.0, 98.0)
    drift_period = rng.uniform(120.0, 300.0)
    signal = baseline + 0.3 * np.sin(2 * np.pi * t / drift_period + rng.uniform(0, 2 * np.pi))
    events: List[AnnotationEvent] = []
    if event_rate > 0:
        mean_event = 20.0
        mean_gap = mean_event * (1.0 - event_rate) / event_rate
        min_gap = 2 * ramp_seconds + 3
        pos = float(rng.integers(5, 6 + int(mean_gap / 2)))
        while True:
            dur = int(rng.integers(10, 31))
            if pos + dur + ramp_seconds + 1 > duration_seconds:
                break
            depth = rng.uniform(*desaturation_depth)
            events.append(AnnotationEvent(float(pos), float(dur), str(rng.choice(["APNEA-O", "APNEA-C", "HYP-O"]))))
            dip = np.clip((t - pos) / ramp_seconds, 0, 1) * (t >= pos)
            rec = 1.0 - np.clip((t - pos - dur) / ramp_seconds, 0, 1)
            signal -= depth * np.minimum(dip, rec)
            gap = max(min_gap, rng.uniform(0.5, 1.5) * mean_gap)
            pos = float(int(pos + dur + gap))
    signal += rng.normal(0.0, noise, size=n)
    labels = label_seconds(events, duration_seconds)
    if artifact_rate > 0:
        for sec in np.flatnonzero(rng.random(duration_seconds) < artifact_rate):
            length = int(rng.integers(1, 4))
            if labels[max(0, sec - 5):sec + length + 5].any():
                continue
            a, b = sec * SAMPLE_RATE, min(n, (sec + length) * SAMPLE_RATE)
            signal[a:b] = rng.uniform(20.0, 45.0)
    signal = np.clip(signal, 0.0, 100.0)
    rid = record_id or f"synth{seed:04d}"
    return SpO2Record(rid, signal, labels), events


# ======================================================================
# record files and prepared datasets
# ======================================================================

def record_from_edf(edf: EdfFile, events: Iterable[AnnotationEvent], record_id: str,
                    pattern: str = "spo2") -> SpO2Record:
    sig = edf.find(pattern)
    rate = edf.sample_rate(sig)
    if abs(rate - SAMPLE_RATE) > 1e-9:
        raise ParameterError(f"{record_id}: SpO2 sampled at {rate:g} Hz; only 8 Hz is supported")
    values = sig.physical()
    n_sec = len(values) // SAMPLE_RATE
    return SpO2Record(record_id, values[:n_sec * SAMPLE_RATE], label_seconds(events, n_sec))


def load_record(edf_path, annotation_path) -> SpO2Record:
    """Read an EDF + annotation pair; ``*_respevt.txt`` files go through the St. Vincent's adapter."""
    edf_path, annotation_path = Path(edf_path), Path(annotation_path)
    edf = parse_edf(edf_path.read_bytes())
    text = annotation_path.read_text(encoding="latin-1")
    if annotation_path.name.lower().endswith("_respevt.txt"):
        events = parse_ucd_respevt(text, edf.fields["starttime"])
    else:
        events = parse_annotations(text)
    return record_from_edf(edf, events, edf_path.stem)


def find_record_pairs(directory) -> List[Tuple[Path, Path]]:
    """EDF files (``.edf``/``.rec``) in ``directory`` paired with their annotation file."""
    directory = Path(directory)
    pairs = []
    for edf in sorted(list(directory.glob("*.edf")) + list(directory.glob("*.rec"))):
        for candidate in (edf.with_suffix(".txt"), edf.with_name(edf.stem + "_respevt.txt")):
            if candidate.exists():
                pairs.append((edf, candidate))
                break
        else:
            log.warning("no annotation file for %s; skipped", edf.name)
    return pairs


def prepare_windows(records: Iterable[SpO2Record], exclude: Iterable[str] = DEFAULT_EXCLUDED):
    """Window, filter and pool records; returns the windows and a manifest dict."""
    exclude = set(exclude)
    parts, entries = [], []
    offset = 0
    for rec in records:
        if rec.record_id in exclude:
            entries.append({"record_id": rec.record_id, "excluded": True})
            continue
        raw = extract_windows(rec)
        kept = artifact_filter(raw)
        parts.append(kept)
        entries.append({
            "record_id": rec.record_id, "excluded": False, "duration_seconds": rec.duration,
            "windows_total": len(raw), "windows_dropped_artifact": len(raw) - len(kept),
            "first_window": offset, "window_count": len(kept),
            "dropped_seconds": sorted(set(raw.seconds.tolist()) - set(kept.seconds.tolist())),
            "apneic_windows": int(kept.labels.sum()) if len(kept) else 0,
        })
        offset += len(kept)
    windows = Windows.concat(parts)
    manifest = {
        "window_length": WINDOW_LENGTH, "sample_rate": SAMPLE_RATE, "window_count": len(windows),
        "artifact_threshold": ARTIFACT_THRESHOLD, "excluded": sorted(exclude), "records": entries,
    }
    return windows, manifest


DATASET_MAGIC = b"SOMNWIN1"


def write_prepared(path, windows: Windows, manifest: Optional[dict] = None, manifest_path=None) -> None:
    """Binary dataset: magic, uint32 count, uint32 window length, then per window
    88 little-endian float32 values and one label byte."""
    n = len(windows)
    rec = np.zeros(n, dtype=[("values", "<f4", (WINDOW_LENGTH,)), ("label", "u1")])
    if n:
        rec["values"] = windows.values
        rec["label"] = windows.labels
    Path(path).write_bytes(DATASET_MAGIC + struct.pack("<II", n, WINDOW_LENGTH) + rec.tobytes())
    if manifest is not None:
        target = Path(manifest_path) if manifest_path else Path(str(path) + ".json")
        target.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_prepared(path, manifest: Optional[dict] = None) -> Windows:
    data = Path(path).read_bytes()
    if data[:8] != DATASET_MAGIC or len(data) < 16:
        raise ParseError(f"{path}: not a prepared dataset file")
    n, length = struct.unpack("<II", data[8:16])
    if length != WINDOW_LENGTH:
        raise ParseError(f"{path}: window length {length}, expected {WINDOW_LENGTH}")
    dtype = np.dtype([("values", "<f4", (length,)), ("label", "u1")])
    if len(data) != 16 + n * dtype.itemsize:
        raise ParseError(f"{path}: expected {16 + n * dtype.itemsize} bytes, found {len(data)}")
    rec = np.frombuffer(data, dtype=dtype, offset=16, count=n)
    ids = np.empty(n, dtype=object)
    ids[:] = ""
    seconds = np.full(n, -1, dtype=np.int64)
    if manifest:
        for entry in manifest.get("records", []):
            if entry.get("excluded"):
                continue
            a, c = entry["first_window"], entry["window_count"]
            ids[a:a + c] = entry["record_id"]
            if "dropped_seconds" in entry and "duration_seconds" in entry:
                dropped = set(entry["dropped_seconds"])
                kept = [t for t in range(1, entry["duration_seconds"] - WINDOW_SECONDS + 2) if t not in dropped]
                if len(kept) != c:
                    raise ParseError(f"{path}: manifest for {entry['record_id']} lists {len(kept)} windows, not {c}")
                seconds[a:a + c] = kept
    return Windows(rec["values"].astype(np.float64), rec["label"].astype(np.int8), ids, seconds)
