"""Recurrent outcome classifier: embeddings, (bi)LSTM, losses, optimizer.

The model embeds each categorical attribute separately, concatenates the
embeddings with the numeric channels per timestep, runs one or two
(optionally bidirectional) LSTM layers, reads the hidden state at the last
real (unmasked) event, and maps it through a dense layer + sigmoid to a
propensity in (0,1). Everything runs on the autodiff tape from
``fairppm.autodiff``; one call builds one graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .encoding import EncoderSpec, PackedDataset
from .transport import SinkhornConfig, SinkhornResult, sinkhorn_distance

__all__ = [
    "Hyper",
    "ModelParams",
    "CompositeLossConfig",
    "CompositeLossResult",
    "ForwardResult",
    "AdamWState",
    "PlateauScheduler",
    "EarlyStopper",
    "init_params",
    "forward",
    "predict",
    "bce_loss",
    "composite_loss",
    "backward",
    "adamw_step",
]

GATES = ("i", "f", "g", "o")
BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class Hyper:
    """One architecture/training cell."""

    layers: int = 1
    hidden: int = 16
    bidirectional: bool = False
    batch: int = 512
    lr: float = 1e-3
    dropout: float = 0.2

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0,1)")


@dataclass
class ModelParams:
    """Named weight arrays plus the hyper cell they were shaped by."""

    hyper: Hyper
    arrays: dict

    def copy(self) -> "ModelParams":
        return ModelParams(self.hyper, {k: v.copy() for k, v in self.arrays.items()})


@dataclass(frozen=True)
class CompositeLossConfig:
    """Accuracy/fairness mixing weight and the Sinkhorn settings behind it."""

    lam: float = 0.0
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must be in [0,1]")


def _directions(hyper: Hyper):
    return ("f", "b") if hyper.bidirectional else ("f",)


def init_params(hyper: Hyper, encoder: EncoderSpec, seed: int) -> ModelParams:
    """Seeded init: uniform +-1/sqrt(fan_in) weights, zero biases except the
    forget gate at 1.0. Embedding fan_in counts the one-hot width."""
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    arrays = {}
    input_size = 0
    for attr in encoder.categorical_attrs:
        vocab = len(encoder.vocabularies[attr])
        dim = encoder.embedding_dims[attr]
        arrays[f"emb:{attr}"] = uniform((vocab + 1, dim), vocab + 1)
        input_size += dim
    input_size += len(encoder.numeric_attrs)

    h = hyper.hidden
    feat = input_size
    for layer in range(hyper.layers):
        for direction in _directions(hyper):
            for gate in GATES:
                key = f"lstm{layer}:{direction}:{gate}"
                arrays[f"{key}:W"] = uniform((feat, h), feat)
                arrays[f"{key}:U"] = uniform((h, h), h)
                arrays[f"{key}:b"] = np.full(h, 1.0) if gate == "f" else np.zeros(h)
        feat = h * len(_directions(hyper))

    out_size = h * len(_directions(hyper))
    arrays["dense:w"] = uniform((out_size,), out_size)
    arrays["dense:b"] = np.zeros(1)
    return ModelParams(hyper, arrays)


@dataclass
class ForwardResult:
    propensities: Var  # (B,) in (0,1)
    leaves: dict  # param name -> leaf Var, for gradient extraction


def _lstm_direction(tape, leaves, inp, layer, direction, hidden):
    batch = inp.value.shape[0]
    steps = inp.value.shape[1]
    h = tape.constant(np.zeros((batch, hidden)))
    c = tape.constant(np.zeros((batch, hidden)))

    def gate_pre(x_t, gate):
        key = f"lstm{layer}:{direction}:{gate}"
        return ad.matmul(x_t, leaves[f"{key}:W"]) + ad.matmul(h, leaves[f"{key}:U"]) + leaves[f"{key}:b"]

    outputs = []
    for t in range(steps):
        x_t = ad.step_slice(inp, t)
        i = ad.sigmoid(gate_pre(x_t, "i"))
        f = ad.sigmoid(gate_pre(x_t, "f"))
        g = ad.tanh(gate_pre(x_t, "g"))
        o = ad.sigmoid(gate_pre(x_t, "o"))
        c = f * c + i * g
        h = o * ad.tanh(c)
        outputs.append(h)
    return ad.stack_steps(outputs)


def _dropout(tape, var, rate, rng):
    keep = (rng.random(var.value.shape) >= rate) / (1.0 - rate)
    return var * tape.constant(keep)


def forward(
    params: ModelParams,
    batch: PackedDataset,
    training: bool,
    rng: np.random.Generator | None = None,
    tape: Tape | None = None,
) -> ForwardResult:
    """Propensities for a packed batch on a fresh (or given) tape.

    Padded positions are computed but never selected: the forward direction
    reads the state at the last unmasked step, the backward direction the
    state covering position 0 of the unmasked span. ``rng`` is required in
    training mode when dropout is active.
    """
    hyper = params.hyper
    if training and hyper.dropout > 0 and rng is None:
        raise ValueError("training-mode forward with dropout needs an rng")
    tape = tape or Tape()
    leaves = {name: tape.leaf(arr) for name, arr in params.arrays.items()}

    lengths = batch.mask.sum(axis=1).astype(np.int64)
    if (lengths < 1).any():
        raise ValueError("every sample must have at least one unmasked event")
    n, steps = batch.mask.shape

    channels = []
    for attr in batch.cat_order:
        emb = leaves[f"emb:{attr}"]
        dim = emb.value.shape[1]
        flat = ad.gather_rows(emb, batch.cat[attr].reshape(-1))
        channels.append(ad.reshape(flat, (n, steps, dim)))
    for attr in batch.num_order:
        channels.append(tape.constant(batch.num[attr][:, :, None]))
    x = ad.concat(channels, axis=-1) if len(channels) > 1 else channels[0]

    positions = np.broadcast_to(np.arange(steps), (n, steps))
    reverse_idx = np.where(
        positions < lengths[:, None], lengths[:, None] - 1 - positions, positions
    )

    seq_f = seq_b_rev = None
    for layer in range(hyper.layers):
        seq_f = _lstm_direction(tape, leaves, x, layer, "f", hyper.hidden)
        if hyper.bidirectional:
            seq_b_rev = _lstm_direction(
                tape, leaves, ad.gather_steps(x, reverse_idx), layer, "b", hyper.hidden
            )
            seq = ad.concat([seq_f, ad.gather_steps(seq_b_rev, reverse_idx)], axis=-1)
        else:
            seq = seq_f
        if layer < hyper.layers - 1:
            if training and hyper.dropout > 0:
                seq = _dropout(tape, seq, hyper.dropout, rng)
            x = seq

    last = ad.gather_steps(seq_f, lengths - 1)
    if hyper.bidirectional:
        # state after the backward pass consumed the whole span sits at the
        # last reversed step, i.e. covers original position 0
        last = ad.concat([last, ad.gather_steps(seq_b_rev, lengths - 1)], axis=-1)
    if training and hyper.dropout > 0:
        last = _dropout(tape, last, hyper.dropout, rng)

    logits = ad.matmul(last, leaves["dense:w"]) + leaves["dense:b"]
    return ForwardResult(propensities=ad.sigmoid(logits), leaves=leaves)


def predict(params: ModelParams, data: PackedDataset, chunk: int = 2048) -> np.ndarray:
    """Eval-mode propensities for a whole dataset, batched for memory."""
    pieces = []
    for start in range(0, len(data), chunk):
        part = data.subset(np.arange(start, min(start + chunk, len(data))))
        pieces.append(forward(params, part, training=False).propensities.value)
    return np.concatenate(pieces)


def bce_loss(propensities: Var, labels) -> Var:
    """Mean binary cross-entropy; propensities clamped to [1e-7, 1-1e-7]."""
    tape = propensities.tape
    y = tape.constant(np.asarray(labels, dtype=np.float64))
    p = ad.clip(propensities, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return ad.neg(ad.reduce_mean(y * ad.log(p) + (1.0 - y) * ad.log(1.0 - p)))


@dataclass
class CompositeLossResult:
    loss: Var
    bce: float
    ipm: float | None
    group_empty: bool
    sinkhorn: SinkhornResult | None


def composite_loss(
    propensities: Var, labels, sensitive, cfg: CompositeLossConfig
) -> CompositeLossResult:
    """(1-lambda)*BCE + lambda*Sinkhorn between the batch's group scores.

    With a single-group batch the transport term is 0 (flagged via
    ``group_empty``); at the endpoints lambda in {0,1} the returned loss is
    literally the single surviving term.
    """
    sensitive = np.asarray(sensitive)
    bce = bce_loss(propensities, labels)
    lam = cfg.lam
    if lam == 0.0:
        return CompositeLossResult(bce, float(bce.value), None, False, None)

    idx0 = np.flatnonzero(sensitive == 0)
    idx1 = np.flatnonzero(sensitive == 1)
    if idx0.size == 0 or idx1.size == 0:
        return CompositeLossResult(bce * (1.0 - lam), float(bce.value), None, True, None)

    result = sinkhorn_distance(
        ad.take(propensities, idx0), ad.take(propensities, idx1), cfg.sinkhorn
    )
    if lam == 1.0:
        loss = result.var
    else:
        loss = bce * (1.0 - lam) + result.var * lam
    return CompositeLossResult(loss, float(bce.value), result.value, False, result)


def backward(tape: Tape, loss: Var, leaves: dict) -> dict:
    """Gradients of ``loss`` for every named parameter leaf (zeros if the
    parameter never reached the loss)."""
    tape.backward(loss)
    return {name: tape.grad(var) for name, var in leaves.items()}


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(
    params: ModelParams,
    grads: dict,
    state: AdamWState,
    lr: float,
    betas: tuple = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> None:
    """One AdamW update in place: decoupled decay, bias-corrected moments."""
    state.step += 1
    b1, b2 = betas
    corr1 = 1.0 - b1**state.step
    corr2 = 1.0 - b2**state.step
    for name, w in params.arrays.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(w))
        v = state.v.setdefault(name, np.zeros_like(w))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        w -= lr * weight_decay * w
        w -= lr * (m / corr1) / (np.sqrt(v / corr2) + eps)


class PlateauScheduler:
    """Cut the learning rate by ``factor`` after ``patience`` consecutive
    epochs whose validation loss fails to beat the best by more than
    ``margin``; the stall counter resets on improvement and on reduction."""

    def __init__(self, lr: float, factor: float = 0.75, patience: int = 10, margin: float = 1e-3):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.margin = margin
        self.best = np.inf
        self.stall = 0

    def step(self, validation_loss: float) -> float:
        if validation_loss < self.best - self.margin:
            self.best = validation_loss
            self.stall = 0
        else:
            self.stall += 1
            if self.stall >= self.patience:
                self.lr *= self.factor
                self.stall = 0
        return self.lr


class EarlyStopper:
    """Stop after ``patience`` epochs without strict best-loss improvement,
    or at the epoch cap; keeps a snapshot of the best parameters."""

    def __init__(self, patience: int, max_epochs: int = 300):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.max_epochs = max_epochs
        self.best = np.inf
        self.best_epoch = 0
        self.best_params: ModelParams | None = None
        self.stall = 0
        self.epoch = 0

    def update(self, validation_loss: float, params: ModelParams) -> bool:
        self.epoch += 1
        if validation_loss < self.best:
            self.best = validation_loss
            self.best_epoch = self.epoch
            self.best_params = params.copy()
            self.stall = 0
        else:
            self.stall += 1
        return self.stall >= self.patience or self.epoch >= self.max_epochs
