"""Training orchestration: single runs, grid search, lambda sweeps, Pareto
fronts and test evaluation.

A training run shuffles mini-batches per epoch (per-epoch seed derived from
the run seed and epoch index), optimizes with AdamW under a plateau LR
schedule, early-stops on validation loss and returns the best-validation
snapshot. Validation propensities are stored in the checkpoint so threshold
tuning at evaluation time never touches training data again. When the
fairness term is active (lambda > 0) the batch size is forced to 512.
"""

from __future__ import annotations

import concurrent.futures
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .encoding import EncoderSpec, PackedDataset
from .metrics import (
    EvalReport,
    GroupedScores,
    abcc,
    abpc,
    auc,
    eval_report,
    optimal_threshold,
)
from .nn import (
    AdamWState,
    CompositeLossConfig,
    EarlyStopper,
    Hyper,
    ModelParams,
    PlateauScheduler,
    adamw_step,
    backward,
    composite_loss,
    forward,
    init_params,
    predict,
)
from .transport import SinkhornConfig

__all__ = [
    "IPM_BATCH",
    "TrainConfig",
    "TrainingError",
    "Checkpoint",
    "GridCell",
    "GridResult",
    "SweepPoint",
    "ParetoFront",
    "default_grid",
    "default_lambdas",
    "select_best",
    "train_model",
    "grid_search",
    "lambda_sweep",
    "pareto_front",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
    "write_sweep_csv",
]

IPM_BATCH = 512  # batch size forced whenever the transport term is active

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Orchestration-level failure (empty data, all grid cells failed)."""


@dataclass(frozen=True)
class TrainConfig:
    """Loop settings; defaults are the main-experiment values."""

    max_epochs: int = 300
    patience: int = 50
    plateau_factor: float = 0.75
    plateau_patience: int = 10
    plateau_margin: float = 1e-3
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class Checkpoint:
    """Best-validation model plus everything evaluate/reruns need."""

    params: ModelParams
    seed: int
    loss_cfg: CompositeLossConfig
    train_cfg: TrainConfig
    effective_batch: int
    best_val_loss: float
    best_epoch: int
    epochs_run: int
    valid_scores: np.ndarray
    valid_labels: np.ndarray
    group_empty_batches: int
    sinkhorn_evals: int
    sinkhorn_nonconverged: int
    encoder_ref: dict | None = None

    @property
    def converged(self) -> bool:
        """False when half or more of the Sinkhorn evaluations hit the
        iteration cap without reaching tolerance."""
        if self.sinkhorn_evals == 0:
            return True
        return self.sinkhorn_nonconverged < 0.5 * self.sinkhorn_evals


def _epoch_rng(seed: int, epoch: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, stream])


def _validation_loss(
    params: ModelParams, valid: PackedDataset, loss_cfg: CompositeLossConfig, batch: int
) -> float:
    losses = []
    for start in range(0, len(valid), batch):
        part = valid.subset(np.arange(start, min(start + batch, len(valid))))
        result = forward(params, part, training=False)
        losses.append(float(composite_loss(result.propensities, part.y, part.s, loss_cfg).loss.value))
    return float(np.mean(losses))


def train_model(
    train: PackedDataset,
    valid: PackedDataset,
    encoder: EncoderSpec,
    hyper: Hyper,
    loss_cfg: CompositeLossConfig,
    seed: int,
    cfg: TrainConfig | None = None,
) -> Checkpoint:
    """Full training loop returning the best-validation snapshot."""
    cfg = cfg or TrainConfig()
    if len(train) == 0 or len(valid) == 0:
        raise TrainingError("training and validation sets must be nonempty")
    effective_batch = IPM_BATCH if loss_cfg.lam > 0 else hyper.batch

    params = init_params(hyper, encoder, seed)
    adam = AdamWState()
    scheduler = PlateauScheduler(
        hyper.lr,
        factor=cfg.plateau_factor,
        patience=cfg.plateau_patience,
        margin=cfg.plateau_margin,
    )
    stopper = EarlyStopper(cfg.patience, max_epochs=cfg.max_epochs)

    group_empty = 0
    sink_evals = 0
    sink_nonconverged = 0
    n = len(train)
    for epoch in range(1, cfg.max_epochs + 1):
        perm = _epoch_rng(seed, epoch, 0).permutation(n)
        dropout_rng = _epoch_rng(seed, epoch, 1)
        for start in range(0, n, effective_batch):
            batch = train.subset(perm[start : start + effective_batch])
            result = forward(params, batch, training=True, rng=dropout_rng)
            closs = composite_loss(result.propensities, batch.y, batch.s, loss_cfg)
            if closs.group_empty:
                group_empty += 1
            if closs.sinkhorn is not None:
                sink_evals += 1
                if not closs.sinkhorn.converged:
                    sink_nonconverged += 1
            tape = result.propensities.tape
            grads = backward(tape, closs.loss, result.leaves)
            adamw_step(
                params,
                grads,
                adam,
                lr=scheduler.lr,
                betas=cfg.betas,
                eps=cfg.adam_eps,
                weight_decay=cfg.weight_decay,
            )
        val_loss = _validation_loss(params, valid, loss_cfg, effective_batch)
        scheduler.step(val_loss)
        if stopper.update(val_loss, params):
            break

    best = stopper.best_params if stopper.best_params is not None else params
    valid_scores = predict(best, valid)
    return Checkpoint(
        params=best,
        seed=seed,
        loss_cfg=loss_cfg,
        train_cfg=cfg,
        effective_batch=effective_batch,
        best_val_loss=float(stopper.best),
        best_epoch=stopper.best_epoch,
        epochs_run=stopper.epoch,
        valid_scores=valid_scores,
        valid_labels=valid.y.copy(),
        group_empty_batches=group_empty,
        sinkhorn_evals=sink_evals,
        sinkhorn_nonconverged=sink_nonconverged,
    )


# ---------------------------------------------------------------------------
# grid search


def default_grid() -> list:
    """The full 144-cell cartesian hyperparameter grid."""
    cells = []
    for layers in (1, 2):
        for bidirectional in (False, True):
            for hidden in (16, 32, 64):
                for batch in (128, 256, 512):
                    for lr in (1e-4, 1e-3):
                        for dropout in (0.2, 0.4):
                            cells.append(
                                Hyper(
                                    layers=layers,
                                    hidden=hidden,
                                    bidirectional=bidirectional,
                                    batch=batch,
                                    lr=lr,
                                    dropout=dropout,
                                )
                            )
    return cells


@dataclass
class GridCell:
    hyper: Hyper
    valid_auc: float | None
    error: str | None = None


@dataclass
class GridResult:
    best: Hyper
    cells: list


def select_best(cells: list) -> Hyper:
    """Argmax of validation AUC over (hyper, auc) pairs; ties prefer the
    smaller model: fewer layers, then smaller hidden, then lower lr (then
    unidirectional, smaller batch, lower dropout to stay total)."""
    if not cells:
        raise TrainingError("no grid cells to select from")

    def key(cell):
        hyper, val_auc = cell
        return (
            -val_auc,
            hyper.layers,
            hyper.hidden,
            hyper.lr,
            hyper.bidirectional,
            hyper.batch,
            hyper.dropout,
        )

    return min(cells, key=key)[0]


def grid_search(
    train: PackedDataset,
    valid: PackedDataset,
    encoder: EncoderSpec,
    seed: int,
    grid: list | None = None,
    cfg: TrainConfig | None = None,
    jobs: int = 1,
) -> GridResult:
    """Train every cell with BCE only (patience 20) and pick by validation
    AUC. Per-cell failures are recorded; only a fully failed grid raises."""
    grid = grid if grid is not None else default_grid()
    cfg = replace(cfg or TrainConfig(), patience=20)
    loss_cfg = CompositeLossConfig(lam=0.0)

    tasks = [
        (train, valid, encoder, hyper, loss_cfg, seed, cfg) for hyper in grid
    ]
    outcomes = _run_tasks(_grid_cell_task, tasks, jobs)

    cells = []
    scored = []
    for hyper, outcome in zip(grid, outcomes):
        if isinstance(outcome, str):
            cells.append(GridCell(hyper, None, error=outcome))
        else:
            cells.append(GridCell(hyper, outcome))
            scored.append((hyper, outcome))
    if not scored:
        raise TrainingError("every grid cell failed to train")
    return GridResult(best=select_best(scored), cells=cells)


def _grid_cell_task(args):
    train, valid, encoder, hyper, loss_cfg, seed, cfg = args
    try:
        ckpt = train_model(train, valid, encoder, hyper, loss_cfg, seed, cfg)
        return float(auc(ckpt.valid_scores, ckpt.valid_labels))
    except Exception as exc:  # noqa: BLE001 - per-cell isolation is the contract
        return f"{type(exc).__name__}: {exc}"


def _run_tasks(fn, tasks, jobs):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


# ---------------------------------------------------------------------------
# lambda sweep and Pareto front


def default_lambdas() -> list:
    return [round(0.05 * i, 2) for i in range(11)]


@dataclass(frozen=True)
class SweepPoint:
    lam: float
    auc: float
    abpc: float
    abcc: float
    seed: int
    converged: bool
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None or math.isnan(self.auc)


@dataclass(frozen=True)
class ParetoFront:
    fairness_key: str  # "abpc" | "abcc"
    points: tuple


def lambda_sweep(
    train: PackedDataset,
    valid: PackedDataset,
    test: PackedDataset,
    encoder: EncoderSpec,
    hyper: Hyper,
    lambdas: list | None = None,
    seed: int = 0,
    sinkhorn: SinkhornConfig | None = None,
    cfg: TrainConfig | None = None,
    jobs: int = 1,
) -> list:
    """One train + test evaluation per lambda, same seed per point; failed
    points are recorded with NaN metrics instead of aborting the sweep."""
    lambdas = default_lambdas() if lambdas is None else list(lambdas)
    if not lambdas:
        raise ValueError("lambdas must be nonempty")
    for lam in lambdas:
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"lambda {lam} outside [0,1]")
    sinkhorn = sinkhorn or SinkhornConfig()
    tasks = [
        (train, valid, test, encoder, hyper, float(lam), sinkhorn, seed, cfg)
        for lam in sorted(lambdas)
    ]
    return _run_tasks(_sweep_point_task, tasks, jobs)


def _sweep_point_task(args) -> SweepPoint:
    train, valid, test, encoder, hyper, lam, sinkhorn, seed, cfg = args
    try:
        ckpt = train_model(
            train,
            valid,
            encoder,
            hyper,
            CompositeLossConfig(lam=lam, sinkhorn=sinkhorn),
            seed,
            cfg,
        )
        scores = predict(ckpt.params, test)
        grouped = GroupedScores.from_scores(scores, test.s)
        return SweepPoint(
            lam=lam,
            auc=float(auc(scores, test.y)),
            abpc=float(abpc(grouped)),
            abcc=float(abcc(grouped)),
            seed=seed,
            converged=ckpt.converged,
        )
    except Exception as exc:  # noqa: BLE001 - failed points must not kill the sweep
        return SweepPoint(
            lam=lam,
            auc=float("nan"),
            abpc=float("nan"),
            abcc=float("nan"),
            seed=seed,
            converged=False,
            error=f"{type(exc).__name__}: {exc}",
        )


def pareto_front(points: list, fairness_key: str) -> ParetoFront:
    """Non-dominated subset under (maximize AUC, minimize fairness metric).

    Exact metric duplicates keep the lowest lambda; failed points are
    excluded. The front is sorted by AUC descending.
    """
    if fairness_key not in ("abpc", "abcc"):
        raise ValueError("fairness_key must be 'abpc' or 'abcc'")
    if not points:
        raise ValueError("points must be nonempty")
    usable = [p for p in points if not p.failed]

    def fair(p):
        return getattr(p, fairness_key)

    by_metrics = {}
    for p in sorted(usable, key=lambda p: p.lam):
        by_metrics.setdefault((p.auc, fair(p)), p)
    candidates = list(by_metrics.values())

    front = []
    for p in candidates:
        dominated = any(
            q.auc >= p.auc
            and fair(q) <= fair(p)
            and (q.auc > p.auc or fair(q) < fair(p))
            for q in candidates
        )
        if not dominated:
            front.append(p)
    front.sort(key=lambda p: (-p.auc, fair(p), p.lam))
    return ParetoFront(fairness_key=fairness_key, points=tuple(front))


# ---------------------------------------------------------------------------
# evaluation


def evaluate(checkpoint: Checkpoint, test: PackedDataset) -> EvalReport:
    """All metrics on a test set; the operating threshold is tuned on the
    validation scores stored inside the checkpoint."""
    scores = predict(checkpoint.params, test)
    opt_t = optimal_threshold(checkpoint.valid_scores, checkpoint.valid_labels)
    return eval_report(scores, test.y, test.s, opt_t)


# ---------------------------------------------------------------------------
# serialization


def save_checkpoint(ckpt: Checkpoint, path, provenance: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "hyper": {
            "layers": ckpt.params.hyper.layers,
            "hidden": ckpt.params.hyper.hidden,
            "bidirectional": ckpt.params.hyper.bidirectional,
            "batch": ckpt.params.hyper.batch,
            "lr": ckpt.params.hyper.lr,
            "dropout": ckpt.params.hyper.dropout,
        },
        "arrays": {name: arr.tolist() for name, arr in ckpt.params.arrays.items()},
        "seed": ckpt.seed,
        "loss": {
            "lambda": ckpt.loss_cfg.lam,
            "sinkhorn": {
                "epsilon": ckpt.loss_cfg.sinkhorn.epsilon,
                "max_iters": ckpt.loss_cfg.sinkhorn.max_iters,
                "tol": ckpt.loss_cfg.sinkhorn.tol,
            },
        },
        "train": {
            "max_epochs": ckpt.train_cfg.max_epochs,
            "patience": ckpt.train_cfg.patience,
            "plateau_factor": ckpt.train_cfg.plateau_factor,
            "plateau_patience": ckpt.train_cfg.plateau_patience,
            "plateau_margin": ckpt.train_cfg.plateau_margin,
            "betas": list(ckpt.train_cfg.betas),
            "adam_eps": ckpt.train_cfg.adam_eps,
            "weight_decay": ckpt.train_cfg.weight_decay,
        },
        "effective_batch": ckpt.effective_batch,
        "best_val_loss": ckpt.best_val_loss,
        "best_epoch": ckpt.best_epoch,
        "epochs_run": ckpt.epochs_run,
        "valid_scores": ckpt.valid_scores.tolist(),
        "valid_labels": ckpt.valid_labels.tolist(),
        "counters": {
            "group_empty_batches": ckpt.group_empty_batches,
            "sinkhorn_evals": ckpt.sinkhorn_evals,
            "sinkhorn_nonconverged": ckpt.sinkhorn_nonconverged,
        },
        "encoder_ref": ckpt.encoder_ref,
    }
    if provenance:
        payload["provenance"] = provenance
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_checkpoint(path) -> Checkpoint:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('format_version')}")
    hyper = Hyper(
        layers=int(payload["hyper"]["layers"]),
        hidden=int(payload["hyper"]["hidden"]),
        bidirectional=bool(payload["hyper"]["bidirectional"]),
        batch=int(payload["hyper"]["batch"]),
        lr=float(payload["hyper"]["lr"]),
        dropout=float(payload["hyper"]["dropout"]),
    )
    arrays = {name: np.asarray(v, dtype=np.float64) for name, v in payload["arrays"].items()}
    loss_cfg = CompositeLossConfig(
        lam=float(payload["loss"]["lambda"]),
        sinkhorn=SinkhornConfig(
            epsilon=float(payload["loss"]["sinkhorn"]["epsilon"]),
            max_iters=int(payload["loss"]["sinkhorn"]["max_iters"]),
            tol=float(payload["loss"]["sinkhorn"]["tol"]),
        ),
    )
    train_cfg = TrainConfig(
        max_epochs=int(payload["train"]["max_epochs"]),
        patience=int(payload["train"]["patience"]),
        plateau_factor=float(payload["train"]["plateau_factor"]),
        plateau_patience=int(payload["train"]["plateau_patience"]),
        plateau_margin=float(payload["train"]["plateau_margin"]),
        betas=tuple(payload["train"]["betas"]),
        adam_eps=float(payload["train"]["adam_eps"]),
        weight_decay=float(payload["train"]["weight_decay"]),
    )
    return Checkpoint(
        params=ModelParams(hyper, arrays),
        seed=int(payload["seed"]),
        loss_cfg=loss_cfg,
        train_cfg=train_cfg,
        effective_batch=int(payload["effective_batch"]),
        best_val_loss=float(payload["best_val_loss"]),
        best_epoch=int(payload["best_epoch"]),
        epochs_run=int(payload["epochs_run"]),
        valid_scores=np.asarray(payload["valid_scores"], dtype=np.float64),
        valid_labels=np.asarray(payload["valid_labels"], dtype=np.float64),
        group_empty_batches=int(payload["counters"]["group_empty_batches"]),
        sinkhorn_evals=int(payload["counters"]["sinkhorn_evals"]),
        sinkhorn_nonconverged=int(payload["counters"]["sinkhorn_nonconverged"]),
        encoder_ref=payload.get("encoder_ref"),
    )


def write_sweep_csv(
    points: list,
    front_abpc: ParetoFront,
    front_abcc: ParetoFront,
    path,
    header_comment: str | None = None,
) -> None:
    on_abpc = {p.lam for p in front_abpc.points}
    on_abcc = {p.lam for p in front_abcc.points}
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        fh.write("lambda,auc,abpc,abcc,on_pareto_abpc,on_pareto_abcc,seed,converged\n")
        for p in points:
            fh.write(
                ",".join(
                    [
                        repr(float(p.lam)),
                        repr(float(p.auc)),
                        repr(float(p.abpc)),
                        repr(float(p.abcc)),
                        "true" if p.lam in on_abpc else "false",
                        "true" if p.lam in on_abcc else "false",
                        str(p.seed),
                        "true" if p.converged else "false",
                    ]
                )
                + "\n"
            )
