"""Training orchestration: grid search, sweeps, Pareto fronts, evaluation.

Oracles: exhaustive dominance scans for the Pareto front, a linearly
separable toy problem for the training loop, and bit-level comparisons
for determinism and serialization round-trips.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest

from conftest import brute_force_pareto, build_datasets, random_packed, toy_encoder
from fairppm.encoding import PackedDataset
from fairppm.metrics import GroupedScores, UndefinedMetricError, abcc, abpc, auc, delta_dp_c
from fairppm.nn import CompositeLossConfig, Hyper, init_params
from fairppm.train import (
    IPM_BATCH,
    Checkpoint,
    GridCell,
    TrainConfig,
    TrainingError,
    default_grid,
    default_lambdas,
    evaluate,
    grid_search,
    lambda_sweep,
    load_checkpoint,
    pareto_front,
    save_checkpoint,
    select_best,
    train_model,
    write_sweep_csv,
)

FAST = TrainConfig(max_epochs=3, patience=2)
QUICK_SINKHORN = dataclasses.replace(
    CompositeLossConfig().sinkhorn, max_iters=50
)


@pytest.fixture(scope="module")
def small_data():
    """A compact synthetic pipeline output shared by the loop tests."""
    encoder, train, valid, test = build_datasets(n_cases=120, seed=4)
    return encoder, train, valid, test


def separable_packed(n: int = 80, seed: int = 0) -> PackedDataset:
    """Binary outcome perfectly determined by the numeric channel."""
    rng = np.random.default_rng(seed)
    steps = 2
    y = (np.arange(n) % 2).astype(np.float64)
    base = np.where(y[:, None] == 1.0, 0.8, 0.2)
    num = np.clip(base + rng.normal(0, 0.02, size=(n, steps)), 0.0, 1.0)
    s = rng.integers(0, 2, size=n).astype(np.int64)
    s[:2] = [0, 1]
    return PackedDataset(
        cat={"activity": np.ones((n, steps), dtype=np.int64)},
        num={"score": num},
        mask=np.ones((n, steps), dtype=bool),
        y=y,
        s=s,
        cat_order=["activity"],
        num_order=["score"],
    )


def make_point(lam, auc_value, fair, key="abpc", **kw):
    fields = dict(
        lam=lam,
        auc=auc_value,
        abpc=fair if key == "abpc" else 0.0,
        abcc=fair if key == "abcc" else 0.0,
        seed=0,
        converged=True,
    )
    fields.update(kw)
    from fairppm.train import SweepPoint

    return SweepPoint(**fields)


# ---------------------------------------------------------------------------
# train_model


def test_lambda_zero_keeps_hyper_batch(small_data):
    encoder, train, valid, _ = small_data
    hyper = Hyper(hidden=4, batch=128, dropout=0.0)
    ckpt = train_model(train, valid, encoder, hyper, CompositeLossConfig(lam=0.0), 0, FAST)
    assert ckpt.effective_batch == 128


def test_lambda_positive_forces_batch_512(small_data):
    encoder, train, valid, _ = small_data
    hyper = Hyper(hidden=4, batch=128, dropout=0.0)
    cfg = CompositeLossConfig(lam=0.3, sinkhorn=QUICK_SINKHORN)
    ckpt = train_model(train, valid, encoder, hyper, cfg, 0, FAST)
    assert ckpt.effective_batch == IPM_BATCH == 512
    assert ckpt.sinkhorn_evals > 0


def test_separable_toy_reaches_perfect_ranking():
    data = separable_packed()
    encoder = toy_encoder(vocab=1, max_len=2)
    hyper = Hyper(hidden=4, batch=32, lr=0.05, dropout=0.0)
    ckpt = train_model(
        data, data, encoder, hyper, CompositeLossConfig(lam=0.0), 0, TrainConfig(max_epochs=40)
    )
    from fairppm.nn import predict

    assert auc(predict(ckpt.params, data), data.y) == 1.0


def test_checkpoint_bookkeeping(small_data):
    encoder, train, valid, _ = small_data
    ckpt = train_model(
        train, valid, encoder, Hyper(hidden=4, dropout=0.2), CompositeLossConfig(), 1, FAST
    )
    assert 1 <= ckpt.best_epoch <= ckpt.epochs_run <= FAST.max_epochs
    assert ckpt.valid_scores.shape == valid.y.shape
    assert np.array_equal(ckpt.valid_labels, valid.y)
    assert math.isfinite(ckpt.best_val_loss)
    assert ckpt.seed == 1


def test_train_model_rejects_empty_sets(small_data):
    encoder, train, valid, _ = small_data
    empty = train.subset(np.array([], dtype=np.int64))
    with pytest.raises(TrainingError):
        train_model(empty, valid, encoder, Hyper(hidden=4), CompositeLossConfig(), 0, FAST)
    with pytest.raises(TrainingError):
        train_model(train, empty, encoder, Hyper(hidden=4), CompositeLossConfig(), 0, FAST)


def test_training_is_deterministic(small_data):
    encoder, train, valid, _ = small_data
    hyper = Hyper(hidden=3, dropout=0.2)
    cfg = CompositeLossConfig(lam=0.1, sinkhorn=QUICK_SINKHORN)
    a = train_model(train, valid, encoder, hyper, cfg, 42, FAST)
    b = train_model(train, valid, encoder, hyper, cfg, 42, FAST)
    assert a.best_val_loss == b.best_val_loss
    assert a.best_epoch == b.best_epoch
    assert a.epochs_run == b.epochs_run
    assert all(np.array_equal(a.params.arrays[k], b.params.arrays[k]) for k in a.params.arrays)
    assert np.array_equal(a.valid_scores, b.valid_scores)
    c = train_model(train, valid, encoder, hyper, cfg, 43, FAST)
    assert any(
        not np.array_equal(a.params.arrays[k], c.params.arrays[k]) for k in a.params.arrays
    )


def test_converged_property_thresholds():
    def ckpt_with(evals, nonconverged):
        params = init_params(Hyper(hidden=1, dropout=0.0), toy_encoder(vocab=1, max_len=1), 0)
        return Checkpoint(
            params=params,
            seed=0,
            loss_cfg=CompositeLossConfig(),
            train_cfg=TrainConfig(),
            effective_batch=512,
            best_val_loss=0.5,
            best_epoch=1,
            epochs_run=1,
            valid_scores=np.array([0.5]),
            valid_labels=np.array([1.0]),
            group_empty_batches=0,
            sinkhorn_evals=evals,
            sinkhorn_nonconverged=nonconverged,
        )

    assert ckpt_with(0, 0).converged
    assert ckpt_with(10, 4).converged
    assert not ckpt_with(10, 5).converged


# ---------------------------------------------------------------------------
# grid search


def test_default_grid_is_full_cartesian_product():
    grid = default_grid()
    assert len(grid) == 144
    assert len(set(grid)) == 144
    assert {h.hidden for h in grid} == {16, 32, 64}
    assert {h.batch for h in grid} == {128, 256, 512}
    assert {h.lr for h in grid} == {1e-4, 1e-3}
    assert {h.dropout for h in grid} == {0.2, 0.4}


def test_select_best_argmax_and_single():
    h1 = Hyper(hidden=16, dropout=0.0)
    h2 = Hyper(hidden=32, dropout=0.0)
    assert select_best([(h1, 0.6), (h2, 0.7)]) == h2
    assert select_best([(h1, 0.4)]) == h1
    with pytest.raises(TrainingError):
        select_best([])


def test_select_best_prefers_smaller_on_ties():
    small = Hyper(layers=1, hidden=16, lr=1e-4, dropout=0.0)
    wide = Hyper(layers=1, hidden=64, lr=1e-4, dropout=0.0)
    deep = Hyper(layers=2, hidden=16, lr=1e-4, dropout=0.0)
    hot = Hyper(layers=1, hidden=16, lr=1e-3, dropout=0.0)
    assert select_best([(wide, 0.7), (small, 0.7), (deep, 0.7), (hot, 0.7)]) == small
    # layers dominate hidden in the tie-break
    assert select_best([(deep, 0.7), (wide, 0.7)]) == wide


def prop_select_best_monotone_invariant(cases: int, seed: int = 89) -> None:
    rng = np.random.default_rng(seed)
    grid = default_grid()
    transforms = [lambda x: 2.0 * x - 0.1, lambda x: x**3, lambda x: np.tanh(3.0 * x)]
    for _ in range(cases):
        cells = [
            (grid[int(i)], float(rng.random()))
            for i in rng.choice(len(grid), size=int(rng.integers(1, 20)), replace=False)
        ]
        base = select_best(cells)
        for f in transforms:
            assert select_best([(h, f(v)) for h, v in cells]) == base


def test_select_best_monotone_invariant():
    prop_select_best_monotone_invariant(100)


def test_grid_search_trains_and_records_cells(small_data):
    encoder, train, valid, _ = small_data
    grid = [Hyper(hidden=3, dropout=0.0), Hyper(hidden=4, dropout=0.0)]
    result = grid_search(train, valid, encoder, seed=0, grid=grid, cfg=FAST)
    assert result.best in grid
    assert len(result.cells) == 2
    for cell in result.cells:
        assert cell.error is None
        assert 0.0 <= cell.valid_auc <= 1.0
    # selection agrees with the recorded AUCs
    assert result.best == select_best([(c.hyper, c.valid_auc) for c in result.cells])


def test_grid_search_all_failures_raise(small_data):
    encoder, train, _, _ = small_data
    empty = train.subset(np.array([], dtype=np.int64))
    with pytest.raises(TrainingError, match="every grid cell failed"):
        grid_search(train, empty, encoder, seed=0, grid=[Hyper(hidden=3)], cfg=FAST)


# ---------------------------------------------------------------------------
# lambda sweep


def test_default_lambdas_eleven_points():
    lams = default_lambdas()
    assert lams == [0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5]


def test_sweep_degenerate_single_lambda_matches_direct_training(small_data):
    encoder, train, valid, test = small_data
    hyper = Hyper(hidden=4, dropout=0.0)
    points = lambda_sweep(train, valid, test, encoder, hyper, lambdas=[0.0], seed=3, cfg=FAST)
    assert len(points) == 1
    point = points[0]
    ckpt = train_model(train, valid, encoder, hyper, CompositeLossConfig(lam=0.0), 3, FAST)
    from fairppm.nn import predict

    scores = predict(ckpt.params, test)
    grouped = GroupedScores.from_scores(scores, test.s)
    assert point.auc == auc(scores, test.y)
    assert point.abpc == abpc(grouped)
    assert point.abcc == abcc(grouped)
    assert not point.failed


def test_sweep_records_failures_and_continues(small_data, monkeypatch):
    encoder, train, valid, test = small_data
    real = train_model

    def sabotaged(train_, valid_, encoder_, hyper_, loss_cfg, seed_, cfg=None):
        if loss_cfg.lam == 0.05:
            raise RuntimeError("synthetic blowup")
        return real(train_, valid_, encoder_, hyper_, loss_cfg, seed_, cfg)

    monkeypatch.setattr("fairppm.train.train_model", sabotaged)
    points = lambda_sweep(
        train,
        valid,
        test,
        encoder,
        Hyper(hidden=3, dropout=0.0),
        lambdas=[0.05, 0.0],
        seed=0,
        sinkhorn=QUICK_SINKHORN,
        cfg=FAST,
    )
    assert [p.lam for p in points] == [0.0, 0.05]  # lambda order regardless of input order
    ok, bad = points
    assert not ok.failed
    assert bad.failed and "synthetic blowup" in bad.error
    assert math.isnan(bad.auc) and not bad.converged


def test_sweep_validates_lambdas(small_data):
    encoder, train, valid, test = small_data
    with pytest.raises(ValueError):
        lambda_sweep(train, valid, test, encoder, Hyper(), lambdas=[])
    with pytest.raises(ValueError):
        lambda_sweep(train, valid, test, encoder, Hyper(), lambdas=[0.2, 1.5])


def test_sweep_is_deterministic(small_data):
    encoder, train, valid, test = small_data
    hyper = Hyper(hidden=3, dropout=0.2)
    kw = dict(lambdas=[0.0, 0.1], seed=9, sinkhorn=QUICK_SINKHORN, cfg=FAST)
    a = lambda_sweep(train, valid, test, encoder, hyper, **kw)
    b = lambda_sweep(train, valid, test, encoder, hyper, **kw)
    assert a == b


# ---------------------------------------------------------------------------
# pareto front


def test_pareto_spec_example():
    pts = [
        make_point(0.0, 0.8, 1.0),
        make_point(0.1, 0.7, 0.5),
        make_point(0.2, 0.75, 1.2),
    ]
    front = pareto_front(pts, "abpc")
    assert [(p.auc, p.abpc) for p in front.points] == [(0.8, 1.0), (0.7, 0.5)]


def test_pareto_single_point():
    pts = [make_point(0.3, 0.6, 0.4)]
    front = pareto_front(pts, "abpc")
    assert front.points == (pts[0],)


def test_pareto_identical_points_keep_lowest_lambda():
    pts = [make_point(lam, 0.6, 0.4) for lam in (0.3, 0.1, 0.5)]
    front = pareto_front(pts, "abpc")
    assert len(front.points) == 1
    assert front.points[0].lam == 0.1


def test_pareto_excludes_failed_points():
    pts = [
        make_point(0.0, 0.9, 0.1, error="boom", auc=float("nan"), abpc=float("nan")),
        make_point(0.1, 0.5, 0.5),
    ]
    front = pareto_front(pts, "abpc")
    assert [p.lam for p in front.points] == [0.1]
    all_failed = [make_point(0.0, float("nan"), float("nan"), error="x")]
    assert pareto_front(all_failed, "abpc").points == ()


def test_pareto_input_validation():
    with pytest.raises(ValueError):
        pareto_front([], "abpc")
    with pytest.raises(ValueError):
        pareto_front([make_point(0.0, 0.5, 0.5)], "auc")


def prop_pareto_matches_brute_force(cases: int, seed: int = 97) -> None:
    rng = np.random.default_rng(seed)
    for _ in range(cases):
        n = int(rng.integers(1, 40))
        key = "abpc" if rng.integers(0, 2) else "abcc"
        # quantized values provoke duplicates and dominance ties
        pts = [
            make_point(
                round(float(rng.integers(0, 11)) * 0.05, 2),
                float(rng.integers(0, 5)) / 4.0,
                float(rng.integers(0, 5)) / 4.0,
                key=key,
            )
            for _ in range(n)
        ]
        ours = pareto_front(pts, key)
        ref = brute_force_pareto(pts, key)
        assert list(ours.points) == ref
        # no front point is dominated by any swept point
        for p in ours.points:
            for q in pts:
                f_p, f_q = getattr(p, key), getattr(q, key)
                assert not (q.auc >= p.auc and f_q <= f_p and (q.auc > p.auc or f_q < f_p))


def test_pareto_matches_brute_force():
    prop_pareto_matches_brute_force(200)


def test_pareto_brute_force_at_scale(rng):
    pts = [
        make_point(
            round(float(i % 11) * 0.05, 2),
            float(rng.integers(0, 30)) / 29.0,
            float(rng.integers(0, 30)) / 29.0,
        )
        for i in range(1000)
    ]
    assert list(pareto_front(pts, "abpc").points) == brute_force_pareto(pts, "abpc")


# ---------------------------------------------------------------------------
# evaluate


def constant_checkpoint(valid_n: int = 20, seed: int = 0) -> Checkpoint:
    params = init_params(Hyper(hidden=4, dropout=0.0), toy_encoder(), seed)
    for k in params.arrays:
        params.arrays[k] = np.zeros_like(params.arrays[k])
    labels = (np.arange(valid_n) % 2).astype(np.float64)
    return Checkpoint(
        params=params,
        seed=seed,
        loss_cfg=CompositeLossConfig(),
        train_cfg=TrainConfig(),
        effective_batch=512,
        best_val_loss=float(np.log(2.0)),
        best_epoch=1,
        epochs_run=1,
        valid_scores=np.full(valid_n, 0.5),
        valid_labels=labels,
        group_empty_batches=0,
        sinkhorn_evals=0,
        sinkhorn_nonconverged=0,
    )


def test_evaluate_constant_classifier(rng):
    ckpt = constant_checkpoint()
    test = random_packed(rng, 50)
    report = evaluate(ckpt, test)
    assert report.auc == 0.5
    # group sizes differ, so the KDE bandwidths differ microscopically
    assert report.abpc <= 1e-12
    assert report.abcc == 0.0
    assert report.ddp_c == 0.0
    assert report.ddp_b_0_5 == 0.0


def test_evaluate_twice_is_identical(small_data):
    encoder, train, valid, test = small_data
    ckpt = train_model(
        train, valid, encoder, Hyper(hidden=4, dropout=0.0), CompositeLossConfig(), 0, FAST
    )
    assert evaluate(ckpt, test) == evaluate(ckpt, test)


def test_evaluate_reports_respect_w1_bound(small_data):
    encoder, train, valid, test = small_data
    ckpt = train_model(
        train, valid, encoder, Hyper(hidden=4, dropout=0.0), CompositeLossConfig(), 0, FAST
    )
    report = evaluate(ckpt, test)
    assert report.ddp_c <= report.abcc + 2e-3
    assert 0.0 <= report.opt_threshold <= 1.0


def test_evaluate_missing_group_names_metric(small_data):
    encoder, train, valid, test = small_data
    ckpt = train_model(
        train, valid, encoder, Hyper(hidden=4, dropout=0.0), CompositeLossConfig(), 0, FAST
    )
    one_group = test.subset(np.flatnonzero(test.s == 0))
    with pytest.raises(UndefinedMetricError):
        evaluate(ckpt, one_group)


# ---------------------------------------------------------------------------
# serialization


def test_checkpoint_round_trip(tmp_path, small_data):
    encoder, train, valid, _ = small_data
    cfg = CompositeLossConfig(lam=0.2, sinkhorn=QUICK_SINKHORN)
    ckpt = train_model(train, valid, encoder, Hyper(hidden=3, dropout=0.2), cfg, 5, FAST)
    ckpt.encoder_ref = {"path": "encoder.json", "sha256": "f" * 64}
    path = tmp_path / "model.json"
    save_checkpoint(ckpt, path, provenance={"config_hash": "deadbeef0123"})
    loaded = load_checkpoint(path)
    assert loaded.params.hyper == ckpt.params.hyper
    assert set(loaded.params.arrays) == set(ckpt.params.arrays)
    for k in ckpt.params.arrays:
        assert np.array_equal(loaded.params.arrays[k], ckpt.params.arrays[k])
    assert loaded.loss_cfg == ckpt.loss_cfg
    assert loaded.train_cfg == ckpt.train_cfg
    assert loaded.seed == ckpt.seed
    assert loaded.effective_batch == ckpt.effective_batch
    assert loaded.best_val_loss == ckpt.best_val_loss
    assert np.array_equal(loaded.valid_scores, ckpt.valid_scores)
    assert np.array_equal(loaded.valid_labels, ckpt.valid_labels)
    assert loaded.encoder_ref == ckpt.encoder_ref
    assert loaded.sinkhorn_evals == ckpt.sinkhorn_evals


def test_checkpoint_version_check(tmp_path):
    path = tmp_path / "model.json"
    path.write_text('{"format_version": 999}\n')
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path)


def test_write_sweep_csv(tmp_path):
    pts = [
        make_point(0.0, 0.8, 1.0),
        make_point(0.1, 0.7, 0.5),
        make_point(0.2, 0.75, 1.2),
    ]
    front = pareto_front(pts, "abpc")
    front_abcc = pareto_front(pts, "abcc")
    path = tmp_path / "sweep.csv"
    write_sweep_csv(pts, front, front_abcc, path, header_comment="run abc")
    lines = path.read_text().splitlines()
    assert lines[0] == "# run abc"
    assert lines[1] == "lambda,auc,abpc,abcc,on_pareto_abpc,on_pareto_abcc,seed,converged"
    assert len(lines) == 2 + len(pts)
    rows = [line.split(",") for line in lines[2:]]
    assert [float(r[0]) for r in rows] == [0.0, 0.1, 0.2]
    assert [r[4] for r in rows] == ["true", "true", "false"]
    assert all(r[7] == "true" for r in rows)
