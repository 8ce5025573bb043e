"""Evaluation suite: k-fold protocol, split diagnostics, ablation, masking.

Everything here consumes trained parameters or runs the trainer under a
fixed protocol and reports plain numbers; serialization to run directories
is the command-line layer's job.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import DatasetIndex
from .discrepancy import (
    FeatureBatch,
    KernelConfig,
    caba_with_grad,
    resolve_kernel,
    wasserstein1_diag,
)
from .errors import ConfigError, DataError
from .mixer import MixerConfig, MixerParams, forward, mask_channels
from .splits import FoldPlan, SplitSpec, holdout_by_group, split_by_axis_detail, split_for_fold
from .trainer import TrainConfig, train_fold


@dataclass
class FoldResult:
    """Score card of one evaluation fold."""

    fold_id: int
    accuracy: float
    confusion: np.ndarray
    history: list[dict] = field(default_factory=list)
    test_subjects: list[int] = field(default_factory=list)
    test_block_mmd: float | None = None

    def to_dict(self) -> dict:
        return {
            "fold_id": self.fold_id,
            "accuracy": self.accuracy,
            "confusion": self.confusion.tolist(),
            "test_subjects": self.test_subjects,
            "test_block_mmd": self.test_block_mmd,
        }


def evaluate(params: MixerParams, mcfg: MixerConfig, test: DatasetIndex,
             fold_id: int = 0) -> FoldResult:
    """Eval-mode accuracy and confusion matrix on a held-out set.

    Predictions are the argmax of the logits; ties resolve toward the
    lower class index. Confusion rows are true classes, columns predicted.
    """
    if len(test) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    trace = forward(params, mcfg, test.values_array, mode="eval")
    pred = trace.logits.argmax(axis=1)
    labels = test.labels_array
    m = mcfg.classes
    confusion = np.zeros((m, m), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    accuracy = float(np.trace(confusion)) / len(test)
    return FoldResult(fold_id=fold_id, accuracy=accuracy, confusion=confusion,
                      test_subjects=test.subjects())


def block_conditional_mmd(params: MixerParams, mcfg: MixerConfig,
                          index: DatasetIndex,
                          kernel_cfg: KernelConfig | None = None,
                          pairing: str = "block") -> float:
    """Mean within-(subject, session, class) across-block mmd2 of pooled features.

    A domain-shift diagnostic for held-out data: lower means the encoder
    has washed out block structure inside each class.
    """
    trace = forward(params, mcfg, index.values_array, mode="eval")
    pooled = trace.pooled_features
    kern = resolve_kernel(kernel_cfg or KernelConfig(), pooled)
    batch = FeatureBatch(features=pooled, labels=index.labels_array,
                         keys=index.keys_array)
    value, _, _ = caba_with_grad(batch, kern, pairing=pairing)
    return value


def run_one_fold(index: DatasetIndex, plan: FoldPlan, fold: int,
                 mcfg: MixerConfig, tcfg: TrainConfig,
                 kernel_cfg: KernelConfig | None = None,
                 val_fraction: float = 0.1) -> FoldResult:
    """Train and score a single fold of the cross-subject protocol."""
    train, test = split_for_fold(index, plan, fold)
    present = set(int(c) for c in train.labels_array)
    missing = [c for c in range(index.class_count) if c not in present]
    if missing:
        raise DataError(
            f"fold {fold}: class {missing[0]} missing from the training side"
        )
    fit, val = holdout_by_group(train, seed=tcfg.seed + fold,
                                fraction=val_fraction)
    best, history = train_fold(fit, val, mcfg, tcfg, kernel_cfg)
    model_cfg = replace(mcfg, dropout=tcfg.dropout)
    result = evaluate(best, model_cfg, test, fold_id=fold)
    result.history = history
    result.test_block_mmd = block_conditional_mmd(best, model_cfg, test,
                                                  kernel_cfg)
    return result


def _fold_task(args) -> FoldResult:
    return run_one_fold(*args)


def run_kfold(index: DatasetIndex, plan: FoldPlan, mcfg: MixerConfig,
              tcfg: TrainConfig, kernel_cfg: KernelConfig | None = None,
              val_fraction: float = 0.1, jobs: int = 1):
    """Cross-subject k-fold protocol.

    Per fold: the plan's subjects are the test side; the remainder is
    carved into fit/validation by whole subjects (whole blocks if only one
    subject remains); the fold model is trained with early stopping and
    scored on the test side. Folds are independent, so jobs > 1 farms them
    out to worker processes; results are keyed by fold id and identical to
    the sequential run. Returns (mean accuracy, [FoldResult]).
    """
    plan.validate()
    if jobs < 1:
        raise ConfigError("jobs must be >= 1")
    tasks = [(index, plan, fold, mcfg, tcfg, kernel_cfg, val_fraction)
             for fold in range(plan.k)]
    if jobs > 1 and plan.k > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, plan.k)) as pool:
            results = list(pool.map(_fold_task, tasks))
    else:
        results = [_fold_task(task) for task in tasks]
    results.sort(key=lambda r: r.fold_id)
    mean = float(np.mean([r.accuracy for r in results]))
    return mean, results


# --- split scenario diagnostics -------------------------------------------------


def draw_batches(features: np.ndarray, seed: int, batches: int = 20,
                 batch_size: int = 32) -> list[np.ndarray]:
    """Uniform without-replacement mini-batches of feature rows."""
    n = features.shape[0]
    if n == 0:
        raise DataError("cannot draw batches from an empty feature set")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0))))
    size = min(batch_size, n)
    return [features[rng.choice(n, size=size, replace=False)]
            for _ in range(batches)]


def mean_pairwise_wd(batches_a: list[np.ndarray],
                     batches_b: list[np.ndarray]) -> float:
    """Mean 1-Wasserstein distance over all cross pairs of batches."""
    wds = np.array([[wasserstein1_diag(FeatureBatch(a), FeatureBatch(b))
                     for b in batches_b] for a in batches_a])
    return float(wds.mean())


def _features_of(params: MixerParams | None, mcfg: MixerConfig | None,
                 index: DatasetIndex, wd_on: str) -> np.ndarray:
    if wd_on == "raw":
        return index.values_array.reshape(len(index), -1)
    if wd_on == "features":
        if params is None or mcfg is None:
            raise ConfigError("wd_on='features' needs a trained model")
        return forward(params, mcfg, index.values_array, mode="eval").pooled_features
    raise ConfigError(f"wd_on must be 'raw' or 'features', got {wd_on!r}")


def split_scenario_table(index: DatasetIndex, mcfg: MixerConfig,
                         tcfg: TrainConfig, scenarios: list[SplitSpec],
                         wd_on: str = "features", batches: int = 20,
                         batch_size: int = 32,
                         val_fraction: float = 0.1) -> list[dict]:
    """Accuracy and train/test feature shift per split scenario.

    For each scenario the model is trained with cross-entropy only, scored
    on the held-out side, and the mean pairwise 1-Wasserstein distance
    between train and test mini-batch features is reported (pooled encoder
    features by default, raw flattened windows with wd_on="raw").
    """
    if not scenarios:
        raise ConfigError("need at least one split scenario")
    ce_cfg = replace(tcfg, da_mode="none")
    rows: list[dict] = []
    for spec in scenarios:
        detail = split_by_axis_detail(index, spec)
        fit, val = holdout_by_group(detail.train, seed=tcfg.seed,
                                    fraction=val_fraction)
        best, _ = train_fold(fit, val, mcfg, ce_cfg)
        model_cfg = replace(mcfg, dropout=ce_cfg.dropout)
        accuracy = evaluate(best, model_cfg, detail.test).accuracy
        feats_train = _features_of(best, model_cfg, detail.train, wd_on)
        feats_test = _features_of(best, model_cfg, detail.test, wd_on)
        wd = mean_pairwise_wd(
            draw_batches(feats_train, seed=tcfg.seed, batches=batches,
                         batch_size=batch_size),
            draw_batches(feats_test, seed=tcfg.seed + 1, batches=batches,
                         batch_size=batch_size))
        rows.append({"axis": spec.axis, "accuracy": accuracy, "wd": wd})
    return rows


# --- ablation ---------------------------------------------------------------------


def ablate_caba(index: DatasetIndex, plan: FoldPlan, mcfg: MixerConfig,
                tcfg: TrainConfig, kernel_cfg: KernelConfig | None = None,
                jobs: int = 1):
    """Paired k-fold comparison with and without the block-discrepancy term.

    Both arms share every seed and the exact same batch composition; only
    the loss term toggles, so with alpha = 0 the two arms are bit-identical.
    """
    arms = {}
    for name, flag in (("with_caba", True), ("without_caba", False)):
        arm_cfg = replace(tcfg, use_caba=flag)
        mean, results = run_kfold(index, plan, mcfg, arm_cfg, kernel_cfg,
                                  jobs=jobs)
        arms[name] = {
            "mean_accuracy": mean,
            "fold_accuracies": [r.accuracy for r in results],
            "fold_block_mmd": [r.test_block_mmd for r in results],
        }
    arms["delta"] = arms["with_caba"]["mean_accuracy"] - \
        arms["without_caba"]["mean_accuracy"]
    return arms


# --- channel masking ------------------------------------------------------------------


@dataclass
class MaskReport:
    """Per-mask accuracies with a confidence band and the critical set."""

    masks: list[list[int]]
    accuracies: list[float]
    unmasked_accuracy: float
    mean_masked: float
    ci_lower: float
    ci_upper: float
    critical: list[int]

    def to_dict(self) -> dict:
        return {
            "masks": self.masks,
            "accuracies": self.accuracies,
            "unmasked_accuracy": self.unmasked_accuracy,
            "mean_masked": self.mean_masked,
            "ci_lower": self.ci_lower,
            "ci_upper": self.ci_upper,
            "critical": self.critical,
        }


def mask_importance(params: MixerParams, mcfg: MixerConfig,
                    test: DatasetIndex, masks: list,
                    bootstrap: int = 0) -> MaskReport:
    """Channel-ablation importance analysis.

    Each mask zeroes its spatial channels and the model is re-evaluated;
    the 95% band over the per-mask accuracy list is mean +/- 1.96 * s/sqrt(n)
    by default, or a percentile interval over ``bootstrap`` resamples of the
    mask list when bootstrap > 0. Masks scoring below the lower bound form
    the critical set.
    """
    if len(test) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    if not masks:
        raise ConfigError("need at least one mask")
    unmasked = evaluate(params, mcfg, test).accuracy
    labels = test.labels_array
    accuracies: list[float] = []
    for mask in masks:
        masked = mask_channels(test.values_array, mask, mcfg.groups)
        trace = forward(params, mcfg, masked, mode="eval")
        pred = trace.logits.argmax(axis=1)
        accuracies.append(float((pred == labels).mean()))
    accs = np.asarray(accuracies)
    mean_masked = float(accs.mean())
    if bootstrap > 0:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(0)))
        resampled = np.array([
            accs[rng.integers(0, len(accs), size=len(accs))].mean()
            for _ in range(bootstrap)
        ])
        lower = float(np.percentile(resampled, 2.5))
        upper = float(np.percentile(resampled, 97.5))
    else:
        std = float(accs.std(ddof=1)) if len(accs) >= 2 else 0.0
        half = 1.96 * std / np.sqrt(len(accs))
        lower, upper = mean_masked - half, mean_masked + half
    critical = [i for i, acc in enumerate(accuracies) if acc < lower]
    return MaskReport(
        masks=[sorted(int(g) for g in mask) for mask in masks],
        accuracies=accuracies,
        unmasked_accuracy=unmasked,
        mean_masked=mean_masked,
        ci_lower=lower,
        ci_upper=upper,
        critical=critical,
    )
