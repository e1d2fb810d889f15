"""Fixed-length tensor encoding of prefix samples.

Categorical attributes (the activity plus any declared categorical column)
become index sequences against train-fitted vocabularies, with index 0
reserved for padding and out-of-vocabulary labels. Numeric and boolean
attributes become min-max-scaled channels in [0,1], fitted on training data
and clamped elsewhere. Static attributes are replicated at every unmasked
position. Prefixes shorter than ``max_len`` are right-padded; longer ones
keep their last ``max_len`` events.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .eventlog import RawPrefixSample, SchemaConfig, STATIC_PREFIX

__all__ = [
    "EncoderSpec",
    "EncodedPrefix",
    "PackedDataset",
    "fit_encoder",
    "encode",
    "encoder_to_json",
    "encoder_from_json",
]

ACTIVITY = "activity"


@dataclass(frozen=True)
class EncoderSpec:
    """Train-fitted vocabularies, scaling ranges and embedding sizes."""

    max_len: int
    schema: SchemaConfig
    vocabularies: dict  # categorical attr -> {label: index >= 1}
    numeric_ranges: dict  # numeric/boolean attr -> (min, max) from train
    embedding_dims: dict  # categorical attr -> ceil(sqrt(vocab size))
    drop_sensitive: bool
    sensitive_attr: str

    @property
    def categorical_attrs(self) -> list:
        return sorted(self.vocabularies)

    @property
    def numeric_attrs(self) -> list:
        return sorted(self.numeric_ranges)

    def inverse_vocabulary(self, attr: str) -> dict:
        return {index: label for label, index in self.vocabularies[attr].items()}

    def is_static(self, attr: str) -> bool:
        return attr.startswith(STATIC_PREFIX)


@dataclass(frozen=True)
class EncodedPrefix:
    """One sample as fixed-length index/value rows plus the event mask."""

    cat_indices: dict  # attr -> tuple of max_len indices
    num_values: dict  # attr -> tuple of max_len floats in [0,1]
    mask: tuple  # max_len booleans, contiguous True block from position 0
    y: int
    s: int


def fit_encoder(
    train: list,
    schema: SchemaConfig,
    max_len: int = 6,
    drop_sensitive: bool = False,
    sensitive_attr: str = "case:protected",
) -> EncoderSpec:
    """Fit vocabularies and numeric ranges on training samples only.

    With ``drop_sensitive`` the sensitive attribute is excluded from every
    feature map (it survives only as the label ``s`` on each sample).
    A constant numeric attribute triggers a warning and encodes to 0.
    """
    if not train:
        raise ValueError("fit_encoder requires a nonempty training set")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if drop_sensitive and sensitive_attr not in schema.attributes:
        raise ValueError(f"sensitive attribute '{sensitive_attr}' is not in the schema")

    excluded = {sensitive_attr} if drop_sensitive else set()
    cat_attrs = [ACTIVITY] + sorted(
        a for a, k in schema.attributes.items() if k == "categorical" and a not in excluded
    )
    num_attrs = sorted(
        a
        for a, k in schema.attributes.items()
        if k in ("numeric", "boolean") and a not in excluded
    )

    vocabularies = {}
    for attr in cat_attrs:
        labels = set()
        for sample in train:
            if attr == ACTIVITY:
                labels.update(e.activity for e in sample.events)
            elif attr.startswith(STATIC_PREFIX):
                labels.add(sample.static_attrs[attr])
            else:
                labels.update(e.dynamic_attrs[attr] for e in sample.events)
        # labels may mix types (e.g. booleans beside strings); the tagged
        # serialization key gives them one deterministic total order
        ordered = sorted(labels, key=_label_key)
        vocabularies[attr] = {label: i + 1 for i, label in enumerate(ordered)}

    numeric_ranges = {}
    for attr in num_attrs:
        values = []
        for sample in train:
            if attr.startswith(STATIC_PREFIX):
                values.append(float(sample.static_attrs[attr]))
            else:
                values.extend(float(e.dynamic_attrs[attr]) for e in sample.events)
        lo, hi = min(values), max(values)
        if lo == hi:
            warnings.warn(
                f"numeric attribute '{attr}' is constant ({lo}) in training data; "
                "it will encode to 0",
                stacklevel=2,
            )
        numeric_ranges[attr] = (lo, hi)

    embedding_dims = {
        attr: math.ceil(math.sqrt(len(vocab))) for attr, vocab in vocabularies.items()
    }
    return EncoderSpec(
        max_len=max_len,
        schema=schema,
        vocabularies=vocabularies,
        numeric_ranges=numeric_ranges,
        embedding_dims=embedding_dims,
        drop_sensitive=drop_sensitive,
        sensitive_attr=sensitive_attr,
    )


def encode(spec: EncoderSpec, sample: RawPrefixSample) -> EncodedPrefix:
    """Encode one sample; total for any sample once the spec is fitted."""
    events = sample.events[-spec.max_len :]
    length = len(events)
    pad = spec.max_len - length

    cat_indices = {}
    for attr in spec.categorical_attrs:
        vocab = spec.vocabularies[attr]
        if attr == ACTIVITY:
            row = [vocab.get(e.activity, 0) for e in events]
        elif spec.is_static(attr):
            row = [vocab.get(sample.static_attrs.get(attr), 0)] * length
        else:
            row = [vocab.get(e.dynamic_attrs.get(attr), 0) for e in events]
        cat_indices[attr] = tuple(row + [0] * pad)

    num_values = {}
    for attr in spec.numeric_attrs:
        lo, hi = spec.numeric_ranges[attr]
        if spec.is_static(attr):
            raw = [float(sample.static_attrs[attr])] * length
        else:
            raw = [float(e.dynamic_attrs[attr]) for e in events]
        if hi > lo:
            scaled = [min(max((v - lo) / (hi - lo), 0.0), 1.0) for v in raw]
        else:
            scaled = [0.0] * length
        num_values[attr] = tuple(scaled + [0.0] * pad)

    mask = tuple([True] * length + [False] * pad)
    return EncodedPrefix(
        cat_indices=cat_indices,
        num_values=num_values,
        mask=mask,
        y=sample.outcome,
        s=sample.sensitive,
    )


@dataclass
class PackedDataset:
    """Column-packed encoded samples for batched model evaluation."""

    cat: dict  # attr -> (N, T) int64
    num: dict  # attr -> (N, T) float64
    mask: np.ndarray  # (N, T) bool
    y: np.ndarray  # (N,) float64
    s: np.ndarray  # (N,) int64
    cat_order: list = field(default_factory=list)
    num_order: list = field(default_factory=list)

    @classmethod
    def from_encoded(cls, encoded: list) -> "PackedDataset":
        if not encoded:
            raise ValueError("cannot pack an empty sample list")
        cat_order = sorted(encoded[0].cat_indices)
        num_order = sorted(encoded[0].num_values)
        return cls(
            cat={
                a: np.array([e.cat_indices[a] for e in encoded], dtype=np.int64)
                for a in cat_order
            },
            num={
                a: np.array([e.num_values[a] for e in encoded], dtype=np.float64)
                for a in num_order
            },
            mask=np.array([e.mask for e in encoded], dtype=bool),
            y=np.array([e.y for e in encoded], dtype=np.float64),
            s=np.array([e.s for e in encoded], dtype=np.int64),
            cat_order=cat_order,
            num_order=num_order,
        )

    def subset(self, indices) -> "PackedDataset":
        idx = np.asarray(indices)
        return PackedDataset(
            cat={a: m[idx] for a, m in self.cat.items()},
            num={a: m[idx] for a, m in self.num.items()},
            mask=self.mask[idx],
            y=self.y[idx],
            s=self.s[idx],
            cat_order=list(self.cat_order),
            num_order=list(self.num_order),
        )

    def __len__(self):
        return self.y.size


def encoder_to_json(spec: EncoderSpec) -> str:
    payload = {
        "max_len": spec.max_len,
        "schema": spec.schema.to_dict(),
        "vocabularies": {
            attr: {_label_key(l): i for l, i in sorted(vocab.items(), key=lambda kv: kv[1])}
            for attr, vocab in sorted(spec.vocabularies.items())
        },
        "numeric_ranges": {
            attr: [lo, hi] for attr, (lo, hi) in sorted(spec.numeric_ranges.items())
        },
        "embedding_dims": dict(sorted(spec.embedding_dims.items())),
        "drop_sensitive": spec.drop_sensitive,
        "sensitive_attr": spec.sensitive_attr,
    }
    return json.dumps(payload, sort_keys=True, indent=2)


def _label_key(label) -> str:
    # categorical labels may be booleans (static categorical flags); JSON
    # object keys are strings, so tag the type for loss-free round-trips
    if isinstance(label, bool):
        return f"bool:{label}"
    return f"str:{label}"


def _label_from_key(key: str):
    kind, _, raw = key.partition(":")
    if kind == "bool":
        return raw == "True"
    return raw


def encoder_from_json(text: str) -> EncoderSpec:
    payload = json.loads(text)
    return EncoderSpec(
        max_len=int(payload["max_len"]),
        schema=SchemaConfig.from_dict(payload["schema"]),
        vocabularies={
            attr: {_label_from_key(k): int(i) for k, i in vocab.items()}
            for attr, vocab in payload["vocabularies"].items()
        },
        numeric_ranges={
            attr: (float(lo), float(hi))
            for attr, (lo, hi) in payload["numeric_ranges"].items()
        },
        embedding_dims={a: int(d) for a, d in payload["embedding_dims"].items()},
        drop_sensitive=bool(payload["drop_sensitive"]),
        sensitive_attr=payload["sensitive_attr"],
    )
