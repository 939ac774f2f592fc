import math

import numpy as np
import pytest
from pydantic import ValidationError

import training_eval
from conftest import planted_dataset
from errors import DataError, NumericError, UndefinedCorrelationError, UsageError
from feature_matrix import SHAPE_FEATURES, FeatureKind
from sfformer_model import FusionMode
from training_eval import (
    EarlyStopping,
    EarlyStopSplit,
    Experiment,
    FoldData,
    HyperParams,
    HyperRanges,
    TrainReport,
    TrainSettings,
    cross_validate,
    fit_final,
    format_fusion_table,
    format_mean_std,
    fusion_table,
    hyperparam_search,
    load_trained,
    pearson_r,
    predict,
    read_model_config,
    sample_hyperparams,
    save_trained,
    select_helper_feature,
    split_folds,
    train,
)

QUICK = TrainSettings(max_epochs=3, patience=2, batch_size=8)
TINY = HyperParams(lr=1e-3, weight_decay=1e-5, token_dim=8, n_layers=1)


def _fold_data(rng, n_train=12, n_val=6, clusters=4) -> FoldData:
    return FoldData(
        train_x=rng.normal(size=(n_train, clusters)),
        train_y=rng.normal(size=n_train),
        val_x=rng.normal(size=(n_val, clusters)),
        val_y=rng.normal(size=n_val),
    )


def _model_config(clusters=4, hyper=TINY, experiment=None):
    return hyper.model_config_for(clusters, experiment or Experiment(feature=FeatureKind.VOLUME), seed=0)


# ---------------------------------------------------------------------------
# Pearson r
# ---------------------------------------------------------------------------

def test_pearson_examples():
    actual = np.array([1.0, 2.0, 3.0, 4.0])
    assert pearson_r(2 * actual, actual) == pytest.approx(1.0, abs=1e-15)
    assert pearson_r(-actual + 7, actual) == pytest.approx(-1.0, abs=1e-15)
    assert pearson_r([1, 3, 2, 4], actual) == pytest.approx(0.8, abs=1e-15)


def test_pearson_affine_invariance_and_antisymmetry(rng):
    for _ in range(20):
        x, y = rng.normal(size=15), rng.normal(size=15)
        r = pearson_r(x, y)
        assert -1.0 <= r <= 1.0
        assert pearson_r(3.5 * x + 2.0, 0.25 * y - 9.0) == pytest.approx(r, abs=1e-12)
        assert pearson_r(-x, y) == pytest.approx(-r, abs=1e-12)


def test_pearson_constant_vector_is_undefined():
    with pytest.raises(UndefinedCorrelationError):
        pearson_r([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(UndefinedCorrelationError):
        pearson_r([1.0, 2.0, 3.0], [5.0, 5.0, 5.0])


@pytest.mark.parametrize("pred, actual", [([1.0], [2.0]), ([1.0, 2.0], [1.0, 2.0, 3.0])])
def test_pearson_length_errors(pred, actual):
    with pytest.raises(DataError):
        pearson_r(pred, actual)


def test_mean_std_format():
    assert format_mean_std(0.4183, 0.0771) == "0.418±0.077"


# ---------------------------------------------------------------------------
# Hyper-parameters
# ---------------------------------------------------------------------------

def test_sampled_hyperparams_respect_ranges():
    ranges = HyperRanges()
    rng = np.random.default_rng(0)
    draws = [sample_hyperparams(ranges, rng) for _ in range(1000)]
    lrs = np.array([h.lr for h in draws])
    assert np.all((lrs >= 1e-5) & (lrs <= 1e-3))
    assert np.mean(lrs < 1e-4) > 0.4
    assert all(1e-6 <= h.weight_decay <= 1e-3 for h in draws)
    assert all(h.token_dim % 8 == 0 and 64 <= h.token_dim <= 512 for h in draws)
    assert {h.n_layers for h in draws} == {1, 2, 3, 4}
    assert all(0 <= h.dropout_attn <= 0.5 and 0 <= h.dropout_residual <= 0.2 for h in draws)


def test_same_seed_same_configurations():
    a = [sample_hyperparams(HyperRanges(), np.random.default_rng(7)) for _ in range(20)]
    b = [sample_hyperparams(HyperRanges(), np.random.default_rng(7)) for _ in range(20)]
    assert a == b


def test_collapsed_ranges_return_the_point():
    ranges = HyperRanges.point(TINY, trials=5)
    rng = np.random.default_rng(1)
    assert all(sample_hyperparams(ranges, rng) == TINY for _ in range(5))


@pytest.mark.parametrize("field, value", [("lr", (1e-3, 1e-5)), ("weight_decay", (0.0, 1e-3)), ("trials", 0)])
def test_invalid_ranges(field, value):
    with pytest.raises(ValidationError):
        HyperRanges(**{field: value})


def test_token_range_without_multiple_of_eight():
    with pytest.raises(UsageError):
        sample_hyperparams(HyperRanges(token_dim=(9, 15)), np.random.default_rng(0))


def test_experiment_wiring_is_validated():
    with pytest.raises(UsageError):
        Experiment(feature=FeatureKind.FA, fusion_mode=FusionMode.CROSS_FUSION)
    with pytest.raises(UsageError):
        Experiment(feature=FeatureKind.FA, helper=FeatureKind.VOLUME)
    fused = Experiment(feature=FeatureKind.FA, helper=FeatureKind.VOLUME, fusion_mode=FusionMode.CROSS_FUSION)
    assert fused.label == "fa+volume"


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def test_early_stopping_counter():
    stopper = EarlyStopping(patience=2)
    assert stopper.step(1.0, 0)
    assert not stopper.step(1.0, 1)
    assert not stopper.should_stop
    assert not stopper.step(1.5, 2)
    assert stopper.should_stop
    assert stopper.best_epoch == 0


def test_training_is_deterministic(rng):
    data = _fold_data(rng)
    _, a = train(data, _model_config(), TINY, seed=3, settings=QUICK)
    _, b = train(data, _model_config(), TINY, seed=3, settings=QUICK)
    assert a == b


def test_returned_parameters_are_the_best_epoch(rng):
    data = _fold_data(rng)
    settings = TrainSettings(max_epochs=15, patience=4, batch_size=4)
    params, history = train(data, _model_config(), TINY, seed=1, settings=settings)
    assert history.best_val_loss == min(history.val_loss)
    assert history.val_loss[history.best_epoch] == history.best_val_loss
    val = predict(params, data.val_x)
    assert float(np.mean((val - data.val_y) ** 2)) == history.best_val_loss
    if history.stopped_early:
        assert history.epochs_run == history.best_epoch + settings.patience + 1
    else:
        assert history.epochs_run == settings.max_epochs


def test_empty_fold_rejected(rng):
    data = _fold_data(rng).model_copy(update={"val_x": np.empty((0, 4)), "val_y": np.empty(0)})
    with pytest.raises(DataError):
        train(data, _model_config(), TINY, seed=0, settings=QUICK)


def test_cross_training_needs_helper_arrays(rng):
    experiment = Experiment(feature=FeatureKind.FA, helper=FeatureKind.VOLUME, fusion_mode=FusionMode.CROSS_FUSION)
    with pytest.raises(UsageError):
        train(_fold_data(rng), _model_config(experiment=experiment), TINY, seed=0, settings=QUICK)


def test_non_finite_loss_names_epoch_and_batch(rng):
    data = _fold_data(rng)
    data = data.model_copy(update={"train_x": np.full_like(data.train_x, 1e308)})
    with pytest.raises(NumericError, match="epoch 0 batch 0"):
        train(data, _model_config(), TINY, seed=0, settings=QUICK)


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------

def test_folds_partition_subjects():
    parts = split_folds(20, seed=4)
    assert len(parts) == 3
    assert sorted(np.concatenate(parts).tolist()) == list(range(20))
    assert sorted(len(p) for p in parts) == [6, 7, 7]


def test_too_few_subjects_for_folds():
    with pytest.raises(DataError):
        split_folds(5, seed=0)


def test_cross_validation_report(rng):
    dataset = planted_dataset(rng, subjects=18, clusters=4)
    report = cross_validate(dataset, Experiment(feature=FeatureKind.VOLUME, settings=QUICK), TINY, seed=9)
    assert len(report.folds) == 3
    held_out = sorted(s for f in report.folds for s in f.val_subject_ids)
    assert held_out == sorted(dataset.subject_ids)
    assert report.r_std == pytest.approx(float(np.std([f.r for f in report.folds])), abs=1e-15)
    assert report.summary == format_mean_std(report.r_mean, report.r_std)
    assert set(report.seeds) == {"seed", "split", "fold_0", "fold_1", "fold_2"}
    assert all(f.train_subjects == 12 for f in report.folds)


def test_cross_validation_is_reproducible(rng):
    dataset = planted_dataset(rng, subjects=18, clusters=4)
    experiment = Experiment(feature=FeatureKind.VOLUME, settings=QUICK)
    serial = cross_validate(dataset, experiment, TINY, seed=2)
    assert cross_validate(dataset, experiment, TINY, seed=2).to_json() == serial.to_json()
    assert cross_validate(dataset, experiment, TINY, seed=2, threads=3).to_json() == serial.to_json()


def test_cross_fusion_and_inner_early_stop(rng):
    dataset = planted_dataset(rng, subjects=18, clusters=4)
    settings = QUICK.model_copy(update={"early_stop": EarlyStopSplit.INNER})
    experiment = Experiment(
        feature=FeatureKind.VOLUME, helper=FeatureKind.DIAMETER, fusion_mode=FusionMode.CROSS_FUSION, settings=settings
    )
    report = cross_validate(dataset, experiment, TINY, seed=5)
    assert report.helper == FeatureKind.DIAMETER
    assert all(f.train_subjects < 12 for f in report.folds)
    assert all(-1.0 <= f.r <= 1.0 for f in report.folds)


def test_missing_matrix_rejected(rng):
    dataset = planted_dataset(rng, subjects=18, clusters=4)
    with pytest.raises(DataError):
        cross_validate(dataset, Experiment(feature=FeatureKind.CURL, settings=QUICK), TINY, seed=0)


# ---------------------------------------------------------------------------
# Search and helper selection (cross-validation stubbed out)
# ---------------------------------------------------------------------------

def _report(feature: FeatureKind, hyper: HyperParams, r: float) -> TrainReport:
    return TrainReport(
        assessment="SYNTH", feature=feature, fusion_mode=FusionMode.SELF_BASELINE, hyperparams=hyper,
        seeds={"seed": 0}, folds=[], r_mean=r, r_std=0.0,
    )


def test_search_skips_failed_trials_and_prefers_earlier_ties(rng, monkeypatch):
    failing = set()

    def fake_cv(dataset, experiment, hyper, seed, threads=1):
        if hyper.n_layers in failing:
            raise NumericError("diverged")
        return _report(experiment.feature, hyper, r=0.5 if hyper.n_layers >= 3 else 0.1)

    monkeypatch.setattr(training_eval, "cross_validate", fake_cv)
    ranges = HyperRanges(token_dim=(8, 8), n_layers=(1, 4), trials=12)
    dataset = planted_dataset(rng, subjects=6, clusters=2)
    result = hyperparam_search(dataset, Experiment(feature=FeatureKind.VOLUME), ranges, seed=0)

    assert [t.trial for t in result.trials] == list(range(12))
    first_best = min(t.trial for t in result.trials if t.hyperparams.n_layers >= 3)
    assert result.best_trial == first_best
    assert result.report.trials == result.trials

    failing.update({1, 2, 3, 4})
    with pytest.raises(NumericError, match="All 12"):
        hyperparam_search(dataset, Experiment(feature=FeatureKind.VOLUME), ranges, seed=0)

    failing.clear()
    failing.update({1, 2})
    result = hyperparam_search(dataset, Experiment(feature=FeatureKind.VOLUME), ranges, seed=0)
    skipped = [t for t in result.trials if t.error]
    assert all(t.r_mean is None and t.hyperparams.n_layers <= 2 for t in skipped)


def test_collapsed_search_runs_identical_trials(rng):
    dataset = planted_dataset(rng, subjects=18, clusters=4)
    ranges = HyperRanges.point(TINY, trials=2)
    result = hyperparam_search(dataset, Experiment(feature=FeatureKind.VOLUME, settings=QUICK), ranges, seed=3)
    assert result.best == TINY
    assert result.best_trial == 0
    assert result.trials[0].r_mean == result.trials[1].r_mean


def test_helper_selection_picks_best_and_breaks_ties(rng, monkeypatch):
    scores = {k: 0.1 for k in SHAPE_FEATURES}
    scores[FeatureKind.VOLUME] = 0.9

    def fake_cv(dataset, experiment, hyper, seed, threads=1):
        return _report(experiment.feature, hyper, scores[experiment.feature])

    monkeypatch.setattr(training_eval, "cross_validate", fake_cv)
    dataset = planted_dataset(rng, subjects=6, clusters=2, kinds=SHAPE_FEATURES)
    best, recorded = select_helper_feature(dataset, TINY, seed=0)
    assert best == FeatureKind.VOLUME
    assert list(recorded) == list(SHAPE_FEATURES)

    scores.update({k: 0.2 for k in SHAPE_FEATURES})
    assert select_helper_feature(dataset, TINY, seed=0)[0] == FeatureKind.LENGTH


def test_helper_selection_needs_all_shape_matrices(rng):
    with pytest.raises(DataError, match="length"):
        select_helper_feature(planted_dataset(rng, subjects=6), TINY, seed=0)


def _with_constant(dataset, kind):
    matrices = dict(dataset.matrices)
    matrices[kind] = np.full_like(matrices[kind], 4.0)
    return dataset.model_copy(update={"matrices": matrices})


def test_helper_selection_skips_constant_matrix(rng):
    dataset = _with_constant(planted_dataset(rng, subjects=9, clusters=2, kinds=SHAPE_FEATURES), FeatureKind.LENGTH)
    best, scores = select_helper_feature(dataset, TINY, seed=0, settings=QUICK)
    assert math.isnan(scores[FeatureKind.LENGTH])
    assert best != FeatureKind.LENGTH
    assert math.isfinite(scores[best])


def test_helper_selection_with_no_defined_score(rng, monkeypatch):
    def undefined(dataset, experiment, hyper, seed, threads=1):
        raise UndefinedCorrelationError("constant predictions")

    monkeypatch.setattr(training_eval, "cross_validate", undefined)
    dataset = planted_dataset(rng, subjects=6, clusters=2, kinds=SHAPE_FEATURES)
    with pytest.raises(NumericError, match="no shape feature"):
        select_helper_feature(dataset, TINY, seed=0)


def test_fusion_table_marks_undefined_runs(rng):
    dataset = planted_dataset(rng, subjects=9, clusters=2, kinds=(FeatureKind.NOS, FeatureKind.VOLUME))
    dataset = _with_constant(dataset, FeatureKind.NOS)
    rows = fusion_table(dataset, FeatureKind.VOLUME, TINY, seed=0, settings=QUICK)
    assert [r.feature for r in rows] == [FeatureKind.NOS, FeatureKind.VOLUME]
    assert rows[0].baseline == "n/a"
    assert rows[1].baseline != "n/a"
    assert rows[1].fusion == "---"


def test_fusion_table_rows(rng, monkeypatch):
    def fake_cv(dataset, experiment, hyper, seed, threads=1):
        return _report(experiment.feature, hyper, 0.5 if experiment.helper else 0.25)

    monkeypatch.setattr(training_eval, "cross_validate", fake_cv)
    dataset = planted_dataset(rng, subjects=6, clusters=2, kinds=(FeatureKind.NOS, FeatureKind.VOLUME))
    rows = fusion_table(dataset, FeatureKind.VOLUME, TINY, seed=0)
    assert [(r.feature, r.baseline, r.fusion) for r in rows] == [
        (FeatureKind.NOS, "0.250±0.000", "0.500±0.000"),
        (FeatureKind.VOLUME, "0.250±0.000", "---"),
    ]
    lines = format_fusion_table(rows, FeatureKind.VOLUME)
    assert lines[0].split() == ["feature", "baseline", "fusion(volume)"]
    assert lines[2].split() == ["volume", "0.250±0.000", "---"]


# ---------------------------------------------------------------------------
# Final model
# ---------------------------------------------------------------------------

def test_trained_model_round_trip(tmp_path, rng):
    dataset = planted_dataset(rng, subjects=12, clusters=4)
    experiment = Experiment(
        feature=FeatureKind.VOLUME, helper=FeatureKind.DIAMETER, fusion_mode=FusionMode.CROSS_FUSION, settings=QUICK
    )
    model = fit_final(dataset, experiment, TINY, seed=8)
    save_trained(model, tmp_path)

    config, feature, helper = read_model_config(tmp_path / "model_config.txt")
    assert (feature, helper) == (FeatureKind.VOLUME, FeatureKind.DIAMETER)
    assert config == model.params.config

    loaded = load_trained(tmp_path)
    x, h = dataset.matrices[FeatureKind.VOLUME], dataset.matrices[FeatureKind.DIAMETER]
    np.testing.assert_array_equal(loaded.predict_scores(x, h), model.predict_scores(x, h))
    assert loaded.target_mean == model.target_mean


def test_model_config_without_feature_line(tmp_path):
    (tmp_path / "model_config.txt").write_text("cluster_count=4\ntoken_dim=8\n", encoding="utf-8")
    with pytest.raises(DataError, match="feature"):
        read_model_config(tmp_path / "model_config.txt")


# ---------------------------------------------------------------------------
# Acceptance runs
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_overfits_eight_subjects(rng):
    data = _fold_data(rng, n_train=8, n_val=8, clusters=6)
    data = data.model_copy(update={"val_x": data.train_x, "val_y": data.train_y})
    hyper = HyperParams(lr=1e-3, weight_decay=1e-6, token_dim=32, n_layers=2)
    _, history = train(data, _model_config(clusters=6, hyper=hyper), hyper, seed=0,
                       settings=TrainSettings(max_epochs=500, patience=500, batch_size=8))
    assert min(history.train_loss) < 1e-3


@pytest.mark.slow
def test_constant_target_fits_to_zero(rng):
    data = _fold_data(rng)
    data = data.model_copy(update={"train_y": np.zeros(12), "val_y": np.zeros(6)})
    hyper = HyperParams(lr=1e-3, weight_decay=0.0, token_dim=16)
    params, history = train(data, _model_config(hyper=hyper), hyper, seed=0,
                            settings=TrainSettings(max_epochs=1000, patience=50, batch_size=8))
    assert history.best_val_loss < 1e-4
    assert abs(params["head.b"].data[0]) < 0.1


@pytest.mark.slow
def test_noiseless_linear_target_is_recovered(rng):
    dataset = planted_dataset(rng, subjects=60, clusters=6)
    hyper = HyperParams(lr=1e-3, weight_decay=1e-6, token_dim=32, n_layers=1)
    settings = TrainSettings(max_epochs=400, patience=50, batch_size=8)
    report = cross_validate(dataset, Experiment(feature=FeatureKind.VOLUME, settings=settings), hyper, seed=0)
    assert all(f.r > 0.99 for f in report.folds)


@pytest.mark.slow
def test_permuted_targets_show_no_signal(rng):
    dataset = planted_dataset(rng, subjects=60, clusters=6)
    dataset = dataset.model_copy(update={"target": rng.permutation(dataset.target)})
    hyper = HyperParams(lr=1e-3, token_dim=16)
    settings = TrainSettings(max_epochs=200, patience=20, batch_size=8)
    report = cross_validate(dataset, Experiment(feature=FeatureKind.VOLUME, settings=settings), hyper, seed=0)
    assert abs(report.r_mean) < 0.3
    assert math.isfinite(report.r_std)


@pytest.mark.slow
def test_helper_selection_recovers_planted_feature():
    hyper = HyperParams(lr=1e-3, weight_decay=1e-6, token_dim=16, n_layers=1)
    settings = TrainSettings(max_epochs=150, patience=20, batch_size=8)
    hits = 0
    for rep in range(10):
        rng = np.random.default_rng(100 + rep)
        dataset = planted_dataset(rng, subjects=60, clusters=6, kinds=SHAPE_FEATURES, noise=0.1)
        best, _ = select_helper_feature(dataset, hyper, seed=rep, settings=settings)
        hits += best == FeatureKind.VOLUME
    assert hits >= 9


@pytest.mark.slow
def test_correct_helper_keeps_up_with_baseline(rng):
    dataset = planted_dataset(rng, subjects=120, clusters=6)
    target = dataset.matrices[FeatureKind.VOLUME].mean(axis=1) + dataset.matrices[FeatureKind.DIAMETER].mean(axis=1)
    dataset = dataset.model_copy(update={"target": target + 0.1 * rng.normal(size=120)})
    hyper = HyperParams(lr=1e-3, weight_decay=1e-6, token_dim=32, n_layers=1)
    settings = TrainSettings(max_epochs=300, patience=30, batch_size=8)
    baseline = cross_validate(dataset, Experiment(feature=FeatureKind.VOLUME, settings=settings), hyper, seed=0)
    fused = Experiment(
        feature=FeatureKind.VOLUME, helper=FeatureKind.DIAMETER, fusion_mode=FusionMode.CROSS_FUSION, settings=settings
    )
    assert cross_validate(dataset, fused, hyper, seed=0).r_mean >= baseline.r_mean - 0.02
