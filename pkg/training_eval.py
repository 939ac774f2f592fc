# training_eval.py
"""
Training, 3-fold cross-validation, random hyper-parameter search, helper
feature selection and Pearson-r reporting for SFFormer.

Features are z-scored per fold on the training rows only; targets are
standardized the same way and the loss is MSE on the standardized target.
Reports are pydantic models, dumped as JSON.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

import config
import tensor_core as tc
from errors import DataError, NumericError, UndefinedCorrelationError, UsageError
from feature_matrix import ALL_FEATURES, SHAPE_FEATURES, FeatureDataset, FeatureKind, NormalizationStats, zscore_apply, zscore_fit
from sfformer_model import FusionMode, ModelConfig, ModelParams, Readout, forward, init_params

logger = logging.getLogger(__name__)

MODEL_FILE = "model.ckpt"
MODEL_CONFIG_FILE = "model_config.txt"
REPORT_FILE = "report.json"
INNER_VALIDATION_FRACTION = 0.2
NOT_AVAILABLE = "n/a"


def derive_seed(seed: int, *keys: int) -> int:
    """Independent child seed for (seed, keys...)."""
    return int(np.random.default_rng([seed, *keys]).integers(2 ** 31 - 1))


# ---------------------------------------------------------------------------
# Pearson r
# ---------------------------------------------------------------------------

def pearson_r(pred, actual) -> float:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    actual = np.asarray(actual, dtype=np.float64).reshape(-1)
    if len(pred) != len(actual):
        raise DataError(f"pearson_r: {len(pred)} predictions vs {len(actual)} scores")
    if len(pred) < 2:
        raise DataError("pearson_r needs at least 2 pairs")
    dx = pred - pred.mean()
    dy = actual - actual.mean()
    sxx, syy = dx.dot(dx), dy.dot(dy)
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("Pearson r is undefined for a constant vector")
    r = dx.dot(dy) / math.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, r)))


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.3f}±{std:.3f}"


# ---------------------------------------------------------------------------
# Hyper-parameters
# ---------------------------------------------------------------------------

class HyperRanges(BaseModel):
    model_config = ConfigDict(frozen=True)

    lr: tuple[float, float] = (1e-5, 1e-3)
    weight_decay: tuple[float, float] = (1e-6, 1e-3)
    token_dim: tuple[int, int] = (64, 512)
    n_layers: tuple[int, int] = (1, 4)
    dropout_attn: tuple[float, float] = (0.0, 0.5)
    dropout_ffn: tuple[float, float] = (0.0, 0.5)
    dropout_residual: tuple[float, float] = (0.0, 0.2)
    trials: int = Field(default=config.TRIALS, ge=1)

    @field_validator("lr", "weight_decay", "token_dim", "n_layers", "dropout_attn", "dropout_ffn", "dropout_residual")
    @classmethod
    def ordered(cls, v):
        if v[0] > v[1]:
            raise ValueError(f"range {v} has lower bound above upper bound")
        return v

    @field_validator("lr", "weight_decay")
    @classmethod
    def positive(cls, v):
        if v[0] <= 0:
            raise ValueError(f"log-uniform range {v} must be positive")
        return v

    @classmethod
    def point(cls, hyper: "HyperParams", trials: int = config.TRIALS) -> "HyperRanges":
        """Ranges collapsed onto a single configuration."""
        return cls(trials=trials, **{k: (v, v) for k, v in hyper.model_dump().items()})


class HyperParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    lr: float = Field(default=1e-4, gt=0)
    weight_decay: float = Field(default=1e-5, ge=0)
    token_dim: int = Field(default=64, ge=8)
    n_layers: int = Field(default=1, ge=1, le=4)
    dropout_attn: float = Field(default=0.0, ge=0.0, le=0.5)
    dropout_ffn: float = Field(default=0.0, ge=0.0, le=0.5)
    dropout_residual: float = Field(default=0.0, ge=0.0, le=0.2)

    def model_config_for(self, cluster_count: int, experiment: "Experiment", seed: int) -> ModelConfig:
        return ModelConfig(
            cluster_count=cluster_count,
            token_dim=self.token_dim,
            n_layers=self.n_layers,
            dropout_attn=self.dropout_attn,
            dropout_ffn=self.dropout_ffn,
            dropout_residual=self.dropout_residual,
            fusion_mode=experiment.fusion_mode,
            readout=experiment.readout,
            helper_evolves=experiment.helper_evolves,
            share_tokenizer=experiment.share_tokenizer,
            seed=seed,
        )


def _log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    if lo == hi:
        return lo
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def _uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return lo if lo == hi else float(rng.uniform(lo, hi))


def _token_dim(rng: np.random.Generator, lo: int, hi: int) -> int:
    if lo == hi:
        return lo
    lo8, hi8 = 8 * math.ceil(lo / 8), 8 * (hi // 8)
    if lo8 > hi8:
        raise UsageError(f"token_dim range [{lo}, {hi}] holds no multiple of 8")
    return min(hi8, max(lo8, 8 * int(round(int(rng.integers(lo, hi + 1)) / 8))))


def sample_hyperparams(ranges: HyperRanges, rng: np.random.Generator) -> HyperParams:
    """One draw: log-uniform lr / weight decay, uniform integers and dropouts."""
    return HyperParams(
        lr=_log_uniform(rng, *ranges.lr),
        weight_decay=_log_uniform(rng, *ranges.weight_decay),
        token_dim=_token_dim(rng, *ranges.token_dim),
        n_layers=ranges.n_layers[0] if ranges.n_layers[0] == ranges.n_layers[1]
        else int(rng.integers(ranges.n_layers[0], ranges.n_layers[1] + 1)),
        dropout_attn=_uniform(rng, *ranges.dropout_attn),
        dropout_ffn=_uniform(rng, *ranges.dropout_ffn),
        dropout_residual=_uniform(rng, *ranges.dropout_residual),
    )


# ---------------------------------------------------------------------------
# Experiment settings
# ---------------------------------------------------------------------------

class EarlyStopSplit(str, Enum):
    HELD_OUT = "held_out"
    INNER = "inner"


class TrainSettings(BaseModel):
    model_config = ConfigDict(frozen=True)

    max_epochs: int = Field(default=config.MAX_EPOCHS, ge=1)
    patience: int = Field(default=config.PATIENCE, ge=1)
    batch_size: int = Field(default=config.BATCH_SIZE, ge=1)
    early_stop: EarlyStopSplit = EarlyStopSplit.HELD_OUT


class Experiment(BaseModel):
    """Which matrices feed the model and how the streams are wired."""
    model_config = ConfigDict(frozen=True)

    feature: FeatureKind
    helper: Optional[FeatureKind] = None
    fusion_mode: FusionMode = FusionMode.SELF_BASELINE
    readout: Readout = Readout.CLS
    helper_evolves: bool = False
    share_tokenizer: bool = False
    settings: TrainSettings = TrainSettings()

    @model_validator(mode="after")
    def helper_matches_mode(self):
        if self.fusion_mode == FusionMode.CROSS_FUSION and self.helper is None:
            raise UsageError("cross fusion needs a helper feature (--helper)")
        if self.fusion_mode == FusionMode.SELF_BASELINE and self.helper is not None:
            raise UsageError("a helper feature is only used with cross fusion (--fusion cross)")
        return self

    @property
    def label(self) -> str:
        if self.helper is None:
            return self.feature.value
        return f"{self.feature.value}+{self.helper.value}"


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class EarlyStopping:
    """Tracks the best validation loss; signals a stop after `patience` epochs without improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = -1
        self.counter = 0

    def step(self, loss: float, epoch: int) -> bool:
        """Record one epoch; True when it is the new best."""
        if loss < self.best_loss:
            self.best_loss = loss
            self.best_epoch = epoch
            self.counter = 0
            return True
        self.counter += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.counter >= self.patience


class FoldData(BaseModel):
    """Normalized training and validation arrays for one fit."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    train_helper: Optional[np.ndarray] = None
    val_helper: Optional[np.ndarray] = None


class TrainHistory(BaseModel):
    train_loss: list[float] = Field(default_factory=list)
    val_loss: list[float] = Field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    stopped_early: bool = False

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)


def _batch(x: Optional[np.ndarray], index: np.ndarray) -> Optional[np.ndarray]:
    return None if x is None else x[index]


def predict(params: ModelParams, x: np.ndarray, helper: Optional[np.ndarray] = None, batch_size: int = 64) -> np.ndarray:
    """Eval-mode predictions for every row of x (standardized target units)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    out = []
    for start in range(0, len(x), batch_size):
        index = np.arange(start, min(start + batch_size, len(x)))
        out.append(forward(x[index], _batch(helper, index), params, train=False).data)
    return np.concatenate(out) if out else np.empty(0)


def _mse(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean((pred - target) ** 2))


def train(
    data: FoldData,
    model_config: ModelConfig,
    hyper: HyperParams,
    seed: int,
    settings: Optional[TrainSettings] = None,
) -> tuple[ModelParams, TrainHistory]:
    """Adam on shuffled mini-batches; returns the parameters of the best validation epoch."""
    settings = settings or TrainSettings()
    if len(data.train_y) == 0 or len(data.val_y) == 0:
        raise DataError(f"Empty fold: {len(data.train_y)} training and {len(data.val_y)} validation subjects")
    if model_config.is_fusion and (data.train_helper is None or data.val_helper is None):
        raise UsageError("cross fusion training needs helper matrices for both splits")

    params = init_params(model_config.model_copy(update={"seed": derive_seed(seed, 0)}))
    optimizer = tc.Adam(params.parameters(), lr=hyper.lr, weight_decay=hyper.weight_decay)
    shuffle_rng = np.random.default_rng(derive_seed(seed, 1))
    dropout_rng = np.random.default_rng(derive_seed(seed, 2))
    stopper = EarlyStopping(settings.patience)
    history = TrainHistory()
    best = params.named_arrays()
    n = len(data.train_y)

    for epoch in range(settings.max_epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for batch_no, start in enumerate(range(0, n, settings.batch_size)):
            index = order[start:start + settings.batch_size]
            optimizer.zero_grad()
            pred = forward(data.train_x[index], _batch(data.train_helper, index), params, train=True, rng=dropout_rng)
            loss = tc.mse_loss(pred, data.train_y[index])
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"Non-finite training loss at epoch {epoch} batch {batch_no}")
            loss.backward()
            try:
                optimizer.step()
            except NumericError as e:
                raise NumericError(f"{e.detail} at epoch {epoch} batch {batch_no}") from e
            total += value * len(index)

        val_loss = _mse(predict(params, data.val_x, data.val_helper), data.val_y)
        if not math.isfinite(val_loss):
            raise NumericError(f"Non-finite validation loss at epoch {epoch}")
        history.train_loss.append(total / n)
        history.val_loss.append(val_loss)
        if stopper.step(val_loss, epoch):
            best = params.named_arrays()
        if stopper.should_stop:
            history.stopped_early = True
            break

    params.load_arrays(best)
    history.best_epoch = stopper.best_epoch
    history.best_val_loss = stopper.best_loss
    logger.debug(f"Trained {history.epochs_run} epochs, best epoch {history.best_epoch} (val MSE {history.best_val_loss:.6f})")
    return params, history


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------

class FoldResult(BaseModel):
    fold: int
    r: float
    seed: int
    train_subjects: int
    val_subject_ids: list[str]
    best_epoch: int
    train_loss: list[float]
    val_loss: list[float]


class TrialResult(BaseModel):
    trial: int
    hyperparams: HyperParams
    r_mean: Optional[float] = None
    r_std: Optional[float] = None
    error: Optional[str] = None


class TrainReport(BaseModel):
    assessment: str
    feature: FeatureKind
    helper: Optional[FeatureKind] = None
    fusion_mode: FusionMode
    hyperparams: HyperParams
    seeds: dict[str, int]
    folds: list[FoldResult]
    r_mean: float
    r_std: float
    trials: list[TrialResult] = Field(default_factory=list)

    @property
    def summary(self) -> str:
        return format_mean_std(self.r_mean, self.r_std)

    def to_json(self) -> str:
        return self.model_dump_json(indent=2) + "\n"


def split_folds(n_subjects: int, seed: int, folds: int = config.FOLDS) -> list[np.ndarray]:
    """Seeded shuffle, then `folds` near-equal contiguous parts (each sorted)."""
    if n_subjects < 2 * folds:
        raise DataError(f"Cross-validation needs at least {2 * folds} subjects, got {n_subjects}")
    order = np.random.default_rng(seed).permutation(n_subjects)
    return [np.sort(part) for part in np.array_split(order, folds)]


def _standardize_target(y: np.ndarray, train_index: np.ndarray) -> tuple[float, float]:
    mean = float(y[train_index].mean())
    std = float(y[train_index].std())
    return mean, std if std > 0 else 1.0


def _inner_split(train_index: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray]:
    shuffled = np.random.default_rng(seed).permutation(train_index)
    n_val = max(1, int(round(INNER_VALIDATION_FRACTION * len(shuffled))))
    return np.sort(shuffled[n_val:]), np.sort(shuffled[:n_val])


class _Prepared(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    data: FoldData
    feature_stats: NormalizationStats
    helper_stats: Optional[NormalizationStats] = None
    target_mean: float
    target_std: float


def _prepare(
    dataset: FeatureDataset, experiment: Experiment, fit_index: np.ndarray, val_index: np.ndarray
) -> _Prepared:
    """Normalize with statistics from fit_index only."""
    x = dataset.matrix(experiment.feature)
    feature_stats = zscore_fit(x, fit_index)
    x_norm = zscore_apply(x, feature_stats)
    helper_stats = h_norm = None
    if experiment.helper is not None:
        h = dataset.matrix(experiment.helper)
        helper_stats = zscore_fit(h, fit_index)
        h_norm = zscore_apply(h, helper_stats)
    y_mean, y_std = _standardize_target(dataset.target, fit_index)
    y = (dataset.target - y_mean) / y_std
    return _Prepared(
        data=FoldData(
            train_x=x_norm[fit_index],
            train_y=y[fit_index],
            val_x=x_norm[val_index],
            val_y=y[val_index],
            train_helper=None if h_norm is None else h_norm[fit_index],
            val_helper=None if h_norm is None else h_norm[val_index],
        ),
        feature_stats=feature_stats,
        helper_stats=helper_stats,
        target_mean=y_mean,
        target_std=y_std,
    )


def _run_fold(
    dataset: FeatureDataset,
    experiment: Experiment,
    hyper: HyperParams,
    fold: int,
    train_index: np.ndarray,
    held_out: np.ndarray,
    fold_seed: int,
) -> FoldResult:
    if np.intersect1d(train_index, held_out).size:
        raise DataError(f"Fold {fold}: subjects appear in both training and validation sets")

    if experiment.settings.early_stop == EarlyStopSplit.INNER:
        fit_index, stop_index = _inner_split(train_index, derive_seed(fold_seed, 3))
    else:
        fit_index, stop_index = train_index, held_out

    prepared = _prepare(dataset, experiment, fit_index, stop_index)
    model_config = hyper.model_config_for(dataset.matrices[experiment.feature].shape[1], experiment, fold_seed)
    params, history = train(prepared.data, model_config, hyper, fold_seed, experiment.settings)

    if experiment.settings.early_stop == EarlyStopSplit.HELD_OUT:
        eval_x, eval_h = prepared.data.val_x, prepared.data.val_helper
    else:
        eval_x = zscore_apply(dataset.matrix(experiment.feature), prepared.feature_stats)[held_out]
        eval_h = None
        if experiment.helper is not None:
            eval_h = zscore_apply(dataset.matrix(experiment.helper), prepared.helper_stats)[held_out]
    r = pearson_r(predict(params, eval_x, eval_h), dataset.target[held_out])
    logger.info(f"{experiment.label} fold {fold}: r={r:.3f} (best epoch {history.best_epoch}, {history.epochs_run} epochs)")

    return FoldResult(
        fold=fold,
        r=r,
        seed=fold_seed,
        train_subjects=len(fit_index),
        val_subject_ids=[dataset.subject_ids[i] for i in held_out],
        best_epoch=history.best_epoch,
        train_loss=history.train_loss,
        val_loss=history.val_loss,
    )


def cross_validate(
    dataset: FeatureDataset,
    experiment: Experiment,
    hyper: HyperParams,
    seed: int,
    threads: int = 1,
) -> TrainReport:
    """3-fold CV: every subject is held out exactly once; r is computed on held-out predictions."""
    for kind in filter(None, (experiment.feature, experiment.helper)):
        dataset.matrix(kind)
    parts = split_folds(dataset.size, derive_seed(seed, 10))
    fold_seeds = [derive_seed(seed, 20, k) for k in range(len(parts))]

    def run(k: int) -> FoldResult:
        train_index = np.sort(np.concatenate([p for j, p in enumerate(parts) if j != k]))
        return _run_fold(dataset, experiment, hyper, k, train_index, parts[k], fold_seeds[k])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            folds = list(pool.map(run, range(len(parts))))
    else:
        folds = [run(k) for k in range(len(parts))]

    rs = np.array([f.r for f in folds])
    return TrainReport(
        assessment=dataset.assessment,
        feature=experiment.feature,
        helper=experiment.helper,
        fusion_mode=experiment.fusion_mode,
        hyperparams=hyper,
        seeds={"seed": seed, "split": derive_seed(seed, 10), **{f"fold_{k}": s for k, s in enumerate(fold_seeds)}},
        folds=folds,
        r_mean=float(rs.mean()),
        r_std=float(rs.std()),
    )


# ---------------------------------------------------------------------------
# Search and selection
# ---------------------------------------------------------------------------

class SearchResult(BaseModel):
    best_trial: int
    best: HyperParams
    trials: list[TrialResult]
    report: TrainReport


def hyperparam_search(
    dataset: FeatureDataset,
    experiment: Experiment,
    ranges: HyperRanges,
    seed: int,
    threads: int = 1,
) -> SearchResult:
    """Score `ranges.trials` sampled configurations by CV mean r; best wins, ties go to the earlier trial."""
    rng = np.random.default_rng(derive_seed(seed, 30))
    candidates = [sample_hyperparams(ranges, rng) for _ in range(ranges.trials)]

    def run(trial: int) -> tuple[TrialResult, Optional[TrainReport]]:
        hyper = candidates[trial]
        try:
            report = cross_validate(dataset, experiment, hyper, seed)
        except (NumericError, DataError) as e:
            logger.warning(f"Trial {trial} failed and is skipped: {e.detail}")
            return TrialResult(trial=trial, hyperparams=hyper, error=e.detail), None
        logger.info(f"Trial {trial}: r={report.summary} lr={hyper.lr:.2e} d={hyper.token_dim} layers={hyper.n_layers}")
        return TrialResult(trial=trial, hyperparams=hyper, r_mean=report.r_mean, r_std=report.r_std), report

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(run, range(len(candidates))))
    else:
        outcomes = [run(t) for t in range(len(candidates))]

    trials = [t for t, _ in outcomes]
    best_trial = None
    for trial in trials:
        if trial.r_mean is not None and (best_trial is None or trial.r_mean > trials[best_trial].r_mean):
            best_trial = trial.trial
    if best_trial is None:
        raise NumericError(f"All {len(trials)} search trials failed")

    report = outcomes[best_trial][1].model_copy(update={"trials": trials})
    return SearchResult(best_trial=best_trial, best=candidates[best_trial], trials=trials, report=report)


def _try_cross_validate(
    dataset: FeatureDataset, experiment: Experiment, hyper: HyperParams, seed: int, threads: int
) -> Optional[TrainReport]:
    """cross_validate, or None (logged) when the run has no defined r or diverges."""
    try:
        return cross_validate(dataset, experiment, hyper, seed, threads)
    except NumericError as e:
        logger.warning(f"{experiment.label} ({experiment.fusion_mode.value}) skipped: {e.detail}")
        return None


def _summary(report: Optional[TrainReport]) -> str:
    return NOT_AVAILABLE if report is None else report.summary


def select_helper_feature(
    dataset: FeatureDataset,
    hyper: HyperParams,
    seed: int,
    settings: Optional[TrainSettings] = None,
    threads: int = 1,
) -> tuple[FeatureKind, dict[FeatureKind, float]]:
    """Best shape feature under the self-attention baseline; ties go to the earlier feature.

    A feature whose run has no defined r (e.g. a constant matrix) scores NaN and is never selected.
    """
    missing = [k.value for k in SHAPE_FEATURES if k not in dataset.matrices]
    if missing:
        raise DataError(f"Helper selection needs all shape matrices; missing {missing}")
    settings = settings or TrainSettings()

    scores: dict[FeatureKind, float] = {}
    for kind in SHAPE_FEATURES:
        report = _try_cross_validate(dataset, Experiment(feature=kind, settings=settings), hyper, seed, threads)
        scores[kind] = math.nan if report is None else report.r_mean

    best = None
    for kind in SHAPE_FEATURES:
        if math.isfinite(scores[kind]) and (best is None or scores[kind] > scores[best]):
            best = kind
    if best is None:
        raise NumericError("Helper selection failed: no shape feature has a defined cross-validated r")
    logger.info("Helper selection scores: " + ", ".join(f"{k.value}={v:.3f}" for k, v in scores.items()))
    logger.info(f"Selected helper feature: {best.value}")
    return best, scores


class FusionRow(BaseModel):
    feature: FeatureKind
    baseline: str
    fusion: str


def fusion_table(
    dataset: FeatureDataset,
    helper: FeatureKind,
    hyper: HyperParams,
    seed: int,
    settings: Optional[TrainSettings] = None,
    kinds: Optional[Sequence[FeatureKind]] = None,
    threads: int = 1,
) -> list[FusionRow]:
    """Baseline vs cross fusion with a fixed helper, one row per feature kind."""
    settings = settings or TrainSettings()
    helper = FeatureKind(helper)
    dataset.matrix(helper)
    kinds = list(kinds) if kinds is not None else [k for k in ALL_FEATURES if k in dataset.matrices]
    rows = []
    for kind in kinds:
        baseline = _try_cross_validate(dataset, Experiment(feature=kind, settings=settings), hyper, seed, threads)
        if kind == helper:
            fusion = "---"
        else:
            experiment = Experiment(feature=kind, helper=helper, fusion_mode=FusionMode.CROSS_FUSION, settings=settings)
            fusion = _summary(_try_cross_validate(dataset, experiment, hyper, seed, threads))
        rows.append(FusionRow(feature=kind, baseline=_summary(baseline), fusion=fusion))
    return rows


def format_fusion_table(rows: Sequence[FusionRow], helper: FeatureKind) -> list[str]:
    width = max([len("feature")] + [len(r.feature.value) for r in rows])
    lines = [f"{'feature':<{width}}  {'baseline':>11}  {'fusion(' + helper.value + ')':>11}"]
    lines += [f"{r.feature.value:<{width}}  {r.baseline:>11}  {r.fusion:>11}" for r in rows]
    return lines


# ---------------------------------------------------------------------------
# Final model and inference
# ---------------------------------------------------------------------------

class TrainedModel(BaseModel):
    """Parameters plus the normalization needed to score new subjects."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    params: ModelParams
    feature: FeatureKind
    helper: Optional[FeatureKind] = None
    feature_stats: NormalizationStats
    helper_stats: Optional[NormalizationStats] = None
    target_mean: float
    target_std: float
    history: TrainHistory = Field(default_factory=TrainHistory)

    def predict_scores(self, x: np.ndarray, helper: Optional[np.ndarray] = None) -> np.ndarray:
        """Predictions in the original score units."""
        x_norm = zscore_apply(x, self.feature_stats)
        h_norm = None if helper is None else zscore_apply(helper, self.helper_stats)
        return predict(self.params, x_norm, h_norm) * self.target_std + self.target_mean


def fit_final(dataset: FeatureDataset, experiment: Experiment, hyper: HyperParams, seed: int) -> TrainedModel:
    """Train on every subject, early-stopping on a seeded inner validation split."""
    all_index = np.arange(dataset.size)
    fit_index, stop_index = _inner_split(all_index, derive_seed(seed, 40))
    if len(fit_index) < 2:
        raise DataError(f"Training needs at least 3 subjects, got {dataset.size}")
    prepared = _prepare(dataset, experiment, fit_index, stop_index)
    model_config = hyper.model_config_for(dataset.matrices[experiment.feature].shape[1], experiment, seed)
    params, history = train(prepared.data, model_config, hyper, seed, experiment.settings)
    return TrainedModel(
        params=params,
        feature=experiment.feature,
        helper=experiment.helper,
        feature_stats=prepared.feature_stats,
        helper_stats=prepared.helper_stats,
        target_mean=prepared.target_mean,
        target_std=prepared.target_std,
        history=history,
    )


def _stats_tensors(prefix: str, stats: NormalizationStats) -> dict[str, np.ndarray]:
    return {f"{prefix}.mean": stats.mean, f"{prefix}.std": stats.std}


def save_trained(model: TrainedModel, directory: Path | str) -> None:
    """Checkpoint (weights plus normalization tensors) and key=value model config."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    named = model.params.named_arrays()
    named.update(_stats_tensors("norm.feature", model.feature_stats))
    if model.helper_stats is not None:
        named.update(_stats_tensors("norm.helper", model.helper_stats))
    named["norm.target"] = np.array([model.target_mean, model.target_std])
    tc.save_checkpoint(named, directory / MODEL_FILE)

    text = model.params.config.to_text() + f"feature={model.feature.value}\n"
    if model.helper is not None:
        text += f"helper={model.helper.value}\n"
    (directory / MODEL_CONFIG_FILE).write_text(text, encoding="utf-8")


def read_model_config(path: Path | str) -> tuple[ModelConfig, FeatureKind, Optional[FeatureKind]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Model config not found: {path}")
    lines, feature, helper = [], None, None
    for line in path.read_text(encoding="utf-8").splitlines():
        key = line.split("=", 1)[0].strip()
        if key == "feature":
            feature = FeatureKind(line.split("=", 1)[1].strip())
        elif key == "helper":
            helper = FeatureKind(line.split("=", 1)[1].strip())
        else:
            lines.append(line)
    if feature is None:
        raise DataError(f"{path}: no feature= line")
    try:
        model_config = ModelConfig.from_text("\n".join(lines))
    except ValueError as e:
        raise DataError(f"{path}: invalid model config: {e}")
    return model_config, feature, helper


def load_trained(directory: Path | str) -> TrainedModel:
    directory = Path(directory)
    model_config, feature, helper = read_model_config(directory / MODEL_CONFIG_FILE)
    named = tc.load_checkpoint(directory / MODEL_FILE)

    def stats(prefix: str) -> Optional[NormalizationStats]:
        if f"{prefix}.mean" not in named:
            return None
        return NormalizationStats(mean=named.pop(f"{prefix}.mean"), std=named.pop(f"{prefix}.std"))

    feature_stats = stats("norm.feature")
    helper_stats = stats("norm.helper")
    target = named.pop("norm.target", None)
    if feature_stats is None or target is None:
        raise DataError(f"{directory / MODEL_FILE}: normalization tensors missing")

    params = init_params(model_config)
    params.load_arrays(named)
    return TrainedModel(
        params=params,
        feature=feature,
        helper=helper,
        feature_stats=feature_stats,
        helper_stats=helper_stats,
        target_mean=float(target[0]),
        target_std=float(target[1]),
    )
