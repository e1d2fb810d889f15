"""Event-log data model, CSV parsing, labeling, splits and prefix extraction.

A log is a list of traces; a trace is one case's time-ordered events plus
its static (case-level) attributes. Outcome labels come from a target
activity: a case is positive iff the target occurs, and prefixes are taken
strictly before it. The module also ships a seeded synthetic generator that
plants a configurable group bias, used by tests and the `synth` command.

CSV format: header row with required columns `case_id`, `activity`,
`timestamp` (ISO-8601); static attributes use a `case:` name prefix
(boolean values TRUE/FALSE, case-insensitive); all other columns are
dynamic event attributes. Every non-required column must be declared in the
schema with a kind (categorical | numeric | boolean).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np

__all__ = [
    "EventLogError",
    "SchemaError",
    "RowError",
    "ConsistencyError",
    "SplitError",
    "BiasSpecError",
    "SchemaConfig",
    "Event",
    "Trace",
    "EventLog",
    "RawPrefixSample",
    "BiasSpec",
    "parse_event_log",
    "write_event_log",
    "label_and_cut",
    "extract_prefixes",
    "split_cases",
    "validation_split",
    "generate_synthetic_log",
    "sample_to_dict",
    "sample_from_dict",
    "write_samples_jsonl",
    "read_samples_jsonl",
]

REQUIRED_COLUMNS = ("case_id", "activity", "timestamp")
STATIC_PREFIX = "case:"
KINDS = ("categorical", "numeric", "boolean")


class EventLogError(ValueError):
    """Base class for event-log problems."""


class SchemaError(EventLogError):
    """Schema and file disagree (missing/undeclared column, bad kind)."""


class RowError(EventLogError):
    """A row's value cannot be parsed; message carries the 1-based line."""


class ConsistencyError(EventLogError):
    """A static attribute varies within one case."""


class SplitError(EventLogError):
    """A split cannot be formed (too few cases)."""


class BiasSpecError(EventLogError):
    """Synthetic-log spec is infeasible."""


@dataclass(frozen=True)
class SchemaConfig:
    """Kinds of all non-required columns. Names starting with `case:` are
    static (case-level); everything else is a dynamic event attribute."""

    attributes: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for name, kind in self.attributes.items():
            if name in REQUIRED_COLUMNS:
                raise SchemaError(f"column '{name}' is reserved and needs no schema entry")
            if kind not in KINDS:
                raise SchemaError(f"attribute '{name}' has unknown kind '{kind}'")

    @property
    def static_attrs(self) -> dict[str, str]:
        return {n: k for n, k in self.attributes.items() if n.startswith(STATIC_PREFIX)}

    @property
    def dynamic_attrs(self) -> dict[str, str]:
        return {n: k for n, k in self.attributes.items() if not n.startswith(STATIC_PREFIX)}

    def to_dict(self) -> dict:
        return {"attributes": dict(sorted(self.attributes.items()))}

    @classmethod
    def from_dict(cls, d: dict) -> "SchemaConfig":
        return cls(attributes=dict(d.get("attributes", {})))


@dataclass(frozen=True)
class Event:
    case_id: str
    activity: str
    timestamp: datetime
    dynamic_attrs: dict

    def __post_init__(self):
        if not self.case_id:
            raise EventLogError("event case_id must be nonempty")
        if not self.activity:
            raise EventLogError("event activity must be nonempty")


@dataclass(frozen=True)
class Trace:
    case_id: str
    events: tuple
    static_attrs: dict

    def __post_init__(self):
        if not self.events:
            raise EventLogError(f"trace '{self.case_id}' has no events")
        for e in self.events:
            if e.case_id != self.case_id:
                raise EventLogError(f"trace '{self.case_id}' holds an event of case '{e.case_id}'")
        stamps = [e.timestamp for e in self.events]
        if any(b < a for a, b in zip(stamps, stamps[1:])):
            raise EventLogError(f"trace '{self.case_id}' events are not time-ordered")


@dataclass(frozen=True)
class EventLog:
    traces: tuple
    schema: SchemaConfig

    def __post_init__(self):
        ids = [t.case_id for t in self.traces]
        if len(set(ids)) != len(ids):
            raise EventLogError("duplicate case_id across traces")

    def __len__(self):
        return len(self.traces)


@dataclass(frozen=True)
class RawPrefixSample:
    case_id: str
    events: tuple
    static_attrs: dict
    outcome: int
    sensitive: int

    def __post_init__(self):
        if self.outcome not in (0, 1):
            raise EventLogError("outcome must be 0 or 1")
        if self.sensitive not in (0, 1):
            raise EventLogError("sensitive must be 0 or 1")
        if not self.events:
            raise EventLogError("prefix must hold at least one event")


def _skip_comment_lines(fh, skipped: list):
    """Pass lines through, dropping leading '#' comments (provenance headers)."""
    in_preamble = True
    for line in fh:
        if in_preamble and line.startswith("#"):
            skipped.append(line)
            continue
        in_preamble = False
        yield line


def _parse_value(raw: str, kind: str, column: str, line: int):
    if kind == "categorical":
        return raw
    if kind == "numeric":
        try:
            return float(raw)
        except ValueError:
            raise RowError(f"line {line}: column '{column}' value '{raw}' is not numeric") from None
    upper = raw.strip().upper()
    if upper == "TRUE":
        return True
    if upper == "FALSE":
        return False
    raise RowError(f"line {line}: column '{column}' value '{raw}' is not TRUE/FALSE")


def parse_event_log(path, schema: SchemaConfig) -> EventLog:
    """Read a CSV event log into one Trace per case.

    Events are sorted by timestamp within each case (stable, so file order
    breaks ties); static attributes come from the case's first file row and
    must be constant across the case.
    """
    skipped: list = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(_skip_comment_lines(fh, skipped))
        header = reader.fieldnames or []
        for col in REQUIRED_COLUMNS:
            if col not in header:
                raise SchemaError(f"missing required column '{col}'")
        extra = [c for c in header if c not in REQUIRED_COLUMNS]
        for col in extra:
            if col not in schema.attributes:
                raise SchemaError(f"column '{col}' is not declared in the schema")
        for col in schema.attributes:
            if col not in header:
                raise SchemaError(f"schema attribute '{col}' is missing from the file")
        static_cols = [c for c in extra if c.startswith(STATIC_PREFIX)]
        dynamic_cols = [c for c in extra if not c.startswith(STATIC_PREFIX)]

        cases: dict[str, dict] = {}
        # data starts after any skipped comment lines plus the header line
        for line, row in enumerate(reader, start=2 + len(skipped)):
            case_id = row["case_id"]
            if not case_id:
                raise RowError(f"line {line}: empty case_id")
            if not row["activity"]:
                raise RowError(f"line {line}: empty activity")
            try:
                stamp = datetime.fromisoformat(row["timestamp"])
            except (ValueError, TypeError):
                raise RowError(
                    f"line {line}: unparseable timestamp '{row['timestamp']}'"
                ) from None
            statics = {
                c: _parse_value(row[c], schema.attributes[c], c, line) for c in static_cols
            }
            dynamics = {
                c: _parse_value(row[c], schema.attributes[c], c, line) for c in dynamic_cols
            }
            event = Event(case_id, row["activity"], stamp, dynamics)
            entry = cases.get(case_id)
            if entry is None:
                cases[case_id] = {"static": statics, "events": [event]}
            else:
                if entry["static"] != statics:
                    raise ConsistencyError(
                        f"case '{case_id}': static attributes vary between rows"
                    )
                entry["events"].append(event)

    traces = []
    for case_id, entry in cases.items():
        events = sorted(entry["events"], key=lambda e: e.timestamp)
        traces.append(Trace(case_id, tuple(events), entry["static"]))
    return EventLog(tuple(traces), schema)


def write_event_log(log: EventLog, path) -> None:
    """Write a log back to the CSV format `parse_event_log` reads."""
    static_cols = sorted(log.schema.static_attrs)
    dynamic_cols = sorted(log.schema.dynamic_attrs)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(REQUIRED_COLUMNS) + static_cols + dynamic_cols)
        for trace in log.traces:
            for event in trace.events:
                row = [trace.case_id, event.activity, event.timestamp.isoformat()]
                row += [_format_value(trace.static_attrs[c]) for c in static_cols]
                row += [_format_value(event.dynamic_attrs[c]) for c in dynamic_cols]
                writer.writerow(row)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "TRUE" if value else "FALSE"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def label_and_cut(trace: Trace, target_activity: str) -> tuple[int, int]:
    """Outcome and cut index: (1, first target index) if the target occurs,
    else (0, trace length). Events at/after the cut are excluded downstream."""
    for i, event in enumerate(trace.events):
        if event.activity == target_activity:
            return 1, i
    return 0, len(trace.events)


def extract_prefixes(
    log: EventLog,
    target_activity: str,
    sensitive_attr: str,
    max_gen_len: int = 6,
) -> list[RawPrefixSample]:
    """All prefixes of lengths 1..min(cut, max_gen_len) per trace, labeled
    with the trace outcome and its binary sensitive value. Traces whose cut
    is 0 (target first) yield nothing and are skipped."""
    if max_gen_len < 1:
        raise ValueError("max_gen_len must be >= 1")
    if log.schema.static_attrs.get(sensitive_attr) != "boolean":
        raise SchemaError(
            f"sensitive attribute '{sensitive_attr}' must be a static boolean in the schema"
        )
    samples = []
    for trace in log.traces:
        if sensitive_attr not in trace.static_attrs:
            raise EventLogError(
                f"case '{trace.case_id}' is missing sensitive attribute '{sensitive_attr}'"
            )
        sensitive = int(bool(trace.static_attrs[sensitive_attr]))
        outcome, cut = label_and_cut(trace, target_activity)
        for length in range(1, min(cut, max_gen_len) + 1):
            samples.append(
                RawPrefixSample(
                    case_id=trace.case_id,
                    events=trace.events[:length],
                    static_attrs=trace.static_attrs,
                    outcome=outcome,
                    sensitive=sensitive,
                )
            )
    return samples


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_cases(log: EventLog, test_fraction: float, seed: int) -> tuple[EventLog, EventLog]:
    """Case-level partition; |test| = round half up of fraction * cases."""
    if not 0.0 < test_fraction < 1.0:
        raise SplitError("test_fraction must be in (0,1)")
    n = len(log.traces)
    if n < 2:
        raise SplitError("need at least 2 cases to split")
    n_test = _round_half_up(test_fraction * n)
    perm = np.random.default_rng(seed).permutation(n)
    test_idx = set(perm[:n_test].tolist())
    train = tuple(t for i, t in enumerate(log.traces) if i not in test_idx)
    test = tuple(t for i, t in enumerate(log.traces) if i in test_idx)
    return EventLog(train, log.schema), EventLog(test, log.schema)


def validation_split(samples: list, fraction: float, seed: int) -> tuple[list, list]:
    """Sample-level (not case-level) partition, round half up on the
    validation size; both halves keep the original relative order."""
    if not 0.0 < fraction < 1.0:
        raise SplitError("fraction must be in (0,1)")
    n = len(samples)
    if n < 2:
        raise SplitError("need at least 2 samples to split")
    n_valid = _round_half_up(fraction * n)
    perm = np.random.default_rng(seed).permutation(n)
    valid_idx = set(perm[:n_valid].tolist())
    train = [s for i, s in enumerate(samples) if i not in valid_idx]
    valid = [s for i, s in enumerate(samples) if i in valid_idx]
    return train, valid


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class BiasSpec:
    """Recipe for a synthetic log with a planted group bias.

    ``p_s1`` is the protected-group proportion, ``r0``/``r1`` the positive
    rates per group, and ``proxy_corr`` in [0,1] the agreement strength of a
    second static feature with the protected one (1 = identical, 0 =
    independent). Group and outcome quotas are assigned by exact counts and
    then shuffled, so realized rates match the spec up to rounding.
    """

    n_cases: int = 2000
    activities: tuple = (
        "submit",
        "screen",
        "collect_docs",
        "interview",
        "offer",
        "reject",
        "close",
    )
    target_activity: str = "offer"
    p_s1: float = 0.20
    r0: float = 0.49
    r1: float = 0.11
    proxy_corr: float = 0.8

    def __post_init__(self):
        if self.n_cases < 1:
            raise BiasSpecError("n_cases must be >= 1")
        for name in ("p_s1", "r0", "r1", "proxy_corr"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise BiasSpecError(f"{name} must be in [0,1], got {v}")
        if self.target_activity not in self.activities:
            raise BiasSpecError("target_activity must be in the activity alphabet")
        if len(self.activities) < 3:
            raise BiasSpecError("need at least 3 activities")
        object.__setattr__(self, "activities", tuple(self.activities))

    PRESETS = {
        "high": {"r0": 0.49, "r1": 0.11},
        "medium": {"r0": 0.50, "r1": 0.25},
        "low": {"r0": 0.50, "r1": 0.40},
    }

    @classmethod
    def preset(cls, name: str, n_cases: int = 2000) -> "BiasSpec":
        if name not in cls.PRESETS:
            raise BiasSpecError(f"unknown preset '{name}' (have {sorted(cls.PRESETS)})")
        return cls(n_cases=n_cases, **cls.PRESETS[name])

    def to_dict(self) -> dict:
        return {
            "n_cases": self.n_cases,
            "activities": list(self.activities),
            "target_activity": self.target_activity,
            "p_s1": self.p_s1,
            "r0": self.r0,
            "r1": self.r1,
            "proxy_corr": self.proxy_corr,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BiasSpec":
        kwargs = dict(d)
        if "activities" in kwargs:
            kwargs["activities"] = tuple(kwargs["activities"])
        return cls(**kwargs)


SYNTH_SCHEMA = SchemaConfig(
    attributes={
        "case:protected": "boolean",
        "case:proxy": "boolean",
        "resource": "categorical",
        "score": "numeric",
    }
)


def generate_synthetic_log(spec: BiasSpec, seed: int) -> EventLog:
    """Deterministic biased log: exact group/outcome quotas, a proxy static
    feature, outcome-dependent control flow and a numeric signal channel.
    The target activity appears exactly for positive cases."""
    rng = np.random.default_rng(seed)
    n = spec.n_cases

    protected = np.zeros(n, dtype=bool)
    protected[: _round_half_up(spec.p_s1 * n)] = True
    rng.shuffle(protected)

    outcome = np.zeros(n, dtype=bool)
    for group, rate in ((False, spec.r0), (True, spec.r1)):
        members = np.flatnonzero(protected == group)
        chosen = rng.permutation(members)[: _round_half_up(rate * members.size)]
        outcome[chosen] = True

    p_agree = (1.0 + spec.proxy_corr) / 2.0
    agree = rng.random(n) < p_agree
    proxy = np.where(agree, protected, ~protected)

    pool = [a for a in spec.activities if a != spec.target_activity]
    openers = pool[:2]
    optionals = pool[2:4]
    closers = pool[4:]

    width = len(str(n - 1))
    traces = []
    for i in range(n):
        positive = bool(outcome[i])
        path = list(openers)
        for j, step in enumerate(optionals):
            p_step = (0.7, 0.8)[j % 2] if positive else (0.3, 0.35)[j % 2]
            if rng.random() < p_step:
                path.append(step)
        if positive:
            path.append(spec.target_activity)
        if closers:
            path.append(closers[0] if not positive and len(closers) > 1 else closers[-1])

        case_id = f"c{i:0{width}d}"
        statics = {
            "case:protected": bool(protected[i]),
            "case:proxy": bool(proxy[i]),
        }
        stamp = datetime(2024, 1, 5, 8, 0) + timedelta(minutes=3 * i)
        events = []
        loc = 0.62 if positive else 0.45
        for activity in path:
            stamp = stamp + timedelta(minutes=int(rng.integers(2, 30)))
            events.append(
                Event(
                    case_id=case_id,
                    activity=activity,
                    timestamp=stamp,
                    dynamic_attrs={
                        "resource": f"r{int(rng.integers(1, 6))}",
                        "score": float(np.clip(rng.normal(loc, 0.15), 0.0, 1.0)),
                    },
                )
            )
        traces.append(Trace(case_id, tuple(events), statics))
    return EventLog(tuple(traces), SYNTH_SCHEMA)


# ---------------------------------------------------------------------------
# sample (de)serialization for ingest artifacts


def sample_to_dict(sample: RawPrefixSample) -> dict:
    return {
        "case_id": sample.case_id,
        "outcome": sample.outcome,
        "sensitive": sample.sensitive,
        "static_attrs": dict(sorted(sample.static_attrs.items())),
        "events": [
            {
                "activity": e.activity,
                "timestamp": e.timestamp.isoformat(),
                "dynamic_attrs": dict(sorted(e.dynamic_attrs.items())),
            }
            for e in sample.events
        ],
    }


def sample_from_dict(d: dict) -> RawPrefixSample:
    case_id = d["case_id"]
    events = tuple(
        Event(
            case_id=case_id,
            activity=e["activity"],
            timestamp=datetime.fromisoformat(e["timestamp"]),
            dynamic_attrs=dict(e["dynamic_attrs"]),
        )
        for e in d["events"]
    )
    return RawPrefixSample(
        case_id=case_id,
        events=events,
        static_attrs=dict(d["static_attrs"]),
        outcome=int(d["outcome"]),
        sensitive=int(d["sensitive"]),
    )


def write_samples_jsonl(samples, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(json.dumps(sample_to_dict(sample), sort_keys=True))
            fh.write("\n")


def read_samples_jsonl(path) -> list:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            # tooling may stamp a metadata record first; it carries no sample
            if "_provenance" in record:
                continue
            samples.append(sample_from_dict(record))
    return samples
