"""Training: composite objective, contrastive sampler, Adam, grid search.

The per-batch objective is  loss = ce + alpha * (cdd + caba)  where ce is
softmax cross-entropy on the logits and the two discrepancy terms act on
the pooled features. ``da_mode`` selects the adaptation flavor: "none"
(plain supervised), "subject" (cdd across two subjects only), "session"
(cdd plus within-subject across-session caba) or "block" (cdd plus
within-session across-block caba).
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import DatasetIndex
from .discrepancy import (
    FeatureBatch,
    KernelConfig,
    caba_with_grad,
    cdd_with_grad,
    resolve_kernel,
)
from .errors import ConfigError, DataError, NumericalError
from .mixer import MixerConfig, MixerParams, backward, forward, init_params
from .splits import FoldPlan, holdout_by_group, split_for_fold

log = logging.getLogger(__name__)

DA_MODES = ("none", "subject", "session", "block")


@dataclass
class TrainConfig:
    """Optimization and adaptation hyperparameters for one training run."""

    alpha: float = 1.0
    learning_rate: float = 1e-3
    dropout: float = 0.0
    batch_size: int = 32
    patience: int = 50
    max_epochs: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    da_mode: str = "block"
    use_caba: bool = True
    literal_mmd: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError("dropout must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if not (0.0 <= self.beta1 < 1.0) or not (0.0 <= self.beta2 < 1.0):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ConfigError("adam epsilon must be positive")
        if self.da_mode not in DA_MODES:
            raise ConfigError(f"da_mode must be one of {DA_MODES}, got {self.da_mode!r}")

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha, "learning_rate": self.learning_rate,
            "dropout": self.dropout, "batch_size": self.batch_size,
            "patience": self.patience, "max_epochs": self.max_epochs,
            "beta1": self.beta1, "beta2": self.beta2, "epsilon": self.epsilon,
            "da_mode": self.da_mode, "use_caba": self.use_caba,
            "literal_mmd": self.literal_mmd, "seed": self.seed,
        }


@dataclass
class SamplerPlan:
    """Composition of one batch as (class, (subject, session, block), count).

    The quota list is the exact histogram of the emitted batch, so the
    counts always sum to batch_size. For non-fallback compositions the plan
    must show at least two classes (when the task has them) and, in block
    mode, at least two distinct block groups.
    """

    quotas: list[tuple[int, tuple[int, int, int], int]]
    batch_size: int
    fallback: bool = False

    @classmethod
    def from_rows(cls, labels: np.ndarray, keys: np.ndarray,
                  fallback: bool) -> "SamplerPlan":
        counts: dict[tuple[int, tuple[int, int, int]], int] = {}
        for label, key in zip(labels, keys):
            slot = (int(label), (int(key[0]), int(key[1]), int(key[2])))
            counts[slot] = counts.get(slot, 0) + 1
        quotas = [(label, group, n) for (label, group), n in sorted(counts.items())]
        return cls(quotas=quotas, batch_size=int(labels.shape[0]),
                   fallback=fallback)

    def validate(self, class_count: int, da_mode: str) -> None:
        total = sum(n for _, _, n in self.quotas)
        if total != self.batch_size:
            raise ConfigError(f"quotas sum to {total}, not {self.batch_size}")
        if self.fallback:
            return
        classes = {label for label, _, _ in self.quotas}
        if class_count >= 2 and len(classes) < 2:
            raise ConfigError("composed batch covers fewer than 2 classes")
        groups = {group for _, group, _ in self.quotas}
        if da_mode == "block" and len(groups) < 2:
            raise ConfigError("block-mode batch covers fewer than 2 block groups")


@dataclass
class TrainBatch:
    """One mini-batch with its contrastive source/target assignment.

    ``source_rows``/``target_rows`` are positions within the batch; they
    are empty when the corpus could not support the pairing (``fallback``).
    """

    values: np.ndarray
    labels: np.ndarray
    keys: np.ndarray
    source_rows: np.ndarray
    target_rows: np.ndarray
    class_count: int = 0
    fallback: bool = False
    source_subject: int | None = None
    target_subject: int | None = None
    plan: SamplerPlan | None = None

    def __post_init__(self) -> None:
        if self.class_count <= 0:
            self.class_count = int(self.labels.max()) + 1 if len(self.labels) else 1
        if self.plan is None:
            self.plan = SamplerPlan.from_rows(self.labels, self.keys, self.fallback)

    def __len__(self) -> int:
        return self.values.shape[0]


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its logits gradient (numerically stable)."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    ce = -float(log_probs[np.arange(n), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    return ce, grad / n


def objective_with_grads(trace, batch: TrainBatch, cfg: TrainConfig,
                         kernel_cfg: KernelConfig | None = None):
    """Loss, per-term components, and upstream gradients for backward().

    Returns (loss, components, d_logits, d_pooled). Discrepancy terms that
    cannot be computed on this batch (missing class pair, degenerate block
    structure) are skipped with a warning and contribute 0.
    """
    cfg.validate()
    kernel_cfg = kernel_cfg or KernelConfig()
    pooled = trace.pooled_features
    labels = batch.labels
    ce, d_logits = softmax_cross_entropy(trace.logits, labels)
    components = {"ce": ce, "cdd": 0.0, "caba": 0.0}
    d_pooled = np.zeros_like(pooled)
    if cfg.da_mode == "none":
        return ce, components, d_logits, d_pooled

    kern = resolve_kernel(kernel_cfg, pooled)
    if batch.source_rows.size and batch.target_rows.size:
        source = FeatureBatch(features=pooled[batch.source_rows],
                              labels=labels[batch.source_rows])
        target = FeatureBatch(features=pooled[batch.target_rows],
                              labels=labels[batch.target_rows])
        try:
            value, gs, gt = cdd_with_grad(source, target,
                                          batch.class_count, kern)
            components["cdd"] = value
            d_pooled[batch.source_rows] += cfg.alpha * gs
            d_pooled[batch.target_rows] += cfg.alpha * gt
        except DataError as exc:
            log.warning("cdd skipped for this batch: %s", exc)
    else:
        log.debug("cdd skipped: batch has no source/target assignment")

    if cfg.da_mode in ("session", "block") and cfg.use_caba:
        pairing = cfg.da_mode
        feature_batch = FeatureBatch(features=pooled, labels=labels,
                                     keys=batch.keys)
        try:
            value, grad, diag = caba_with_grad(feature_batch, kern,
                                               pairing=pairing)
            components["caba"] = value
            components["caba_degenerate"] = diag.degenerate
            d_pooled += cfg.alpha * grad
        except DataError as exc:
            log.warning("caba skipped for this batch: %s", exc)

    loss = ce + cfg.alpha * (components["cdd"] + components["caba"])
    return loss, components, d_logits, d_pooled


def objective(trace, batch: TrainBatch, cfg: TrainConfig,
              kernel_cfg: KernelConfig | None = None):
    """Loss and components only."""
    loss, components, _, _ = objective_with_grads(trace, batch, cfg, kernel_cfg)
    return loss, components


# --- mini-batch sampling -----------------------------------------------------


def _rows_by(index: DatasetIndex, **conds) -> np.ndarray:
    cols = {"subject": 0, "session": 1, "block": 2, "trial": 3}
    mask = np.ones(len(index), dtype=bool)
    for name, value in conds.items():
        if name == "label":
            mask &= index.labels_array == value
        else:
            mask &= index.keys_array[:, cols[name]] == value
    return np.flatnonzero(mask)


def _draw(rng, candidates: np.ndarray, count: int) -> list[int]:
    if candidates.size == 0 or count <= 0:
        return []
    count = min(count, candidates.size)
    picked = rng.choice(candidates, size=count, replace=False)
    return [int(i) for i in picked]


def _spread_over_units(rng, index: DatasetIndex, subject: int, label: int,
                       quota: int, unit_axis: str) -> list[int]:
    """Draw ``quota`` rows of (subject, label) spanning >= 2 distinct units.

    unit_axis="block" confines the draw to one session and spreads it over
    that session's blocks; unit_axis="session" spreads over the subject's
    sessions. Falls back to whatever single unit is available.
    """
    if unit_axis == "block":
        sessions = sorted({int(k[1]) for k in index.keys_array
                           if k[0] == subject})
        eligible = []
        for sess in sessions:
            rows = _rows_by(index, subject=subject, session=sess, label=label)
            blocks = sorted({int(index.keys_array[r, 2]) for r in rows})
            if len(blocks) >= 2:
                eligible.append((sess, rows, blocks))
        if not eligible:
            return _draw(rng, _rows_by(index, subject=subject, label=label), quota)
        sess, rows, blocks = eligible[int(rng.integers(len(eligible)))]
        unit_col = index.keys_array[rows, 2]
    else:
        rows = _rows_by(index, subject=subject, label=label)
        units = sorted({int(index.keys_array[r, 1]) for r in rows})
        if len(units) < 2:
            return _draw(rng, rows, quota)
        blocks = units
        unit_col = index.keys_array[rows, 1]

    spread = min(2, quota)
    two = rng.choice(np.asarray(blocks), size=spread, replace=False)
    picked: list[int] = []
    for unit in two:
        unit_rows = rows[unit_col == unit]
        picked.extend(_draw(rng, unit_rows, 1))
    remaining = np.setdiff1d(rows, np.asarray(picked, dtype=np.int64))
    picked.extend(_draw(rng, remaining, quota - len(picked)))
    return picked


def sample_minibatch(index: DatasetIndex, cfg: TrainConfig,
                     rng: np.random.Generator) -> TrainBatch:
    """Compose one contrastive mini-batch.

    Two distinct subjects play cdd source and target; each side is
    stratified over classes, and in session/block mode the source quotas
    are spread over >= 2 sessions/blocks so caba has pairs to work with.
    Shortfalls are padded with uniform draws. With a single-subject corpus
    the whole composition degrades to a uniform batch (``fallback``).
    """
    cfg.validate()
    if len(index) == 0:
        raise DataError("cannot sample from an empty dataset")
    subjects = index.subjects()
    m = index.class_count
    rows: list[int] = []
    src_rows: list[int] = []
    tgt_rows: list[int] = []
    fallback = len(subjects) < 2
    source_subject = target_subject = None
    if not fallback:
        pair = rng.choice(np.asarray(subjects), size=2, replace=False)
        source_subject, target_subject = int(pair[0]), int(pair[1])
        half = cfg.batch_size // 2
        quota = max(1, half // m)
        spread_axis = cfg.da_mode if cfg.da_mode in ("session", "block") else None
        for label in range(m):
            if spread_axis is not None:
                picked = _spread_over_units(rng, index, source_subject, label,
                                            quota, spread_axis)
            else:
                picked = _draw(rng, _rows_by(index, subject=source_subject,
                                             label=label), quota)
            src_rows.extend(range(len(rows), len(rows) + len(picked)))
            rows.extend(picked)
        for label in range(m):
            picked = _draw(rng, _rows_by(index, subject=target_subject,
                                         label=label), quota)
            tgt_rows.extend(range(len(rows), len(rows) + len(picked)))
            rows.extend(picked)
        if not src_rows or not tgt_rows:
            log.warning("contrastive composition failed (subjects %s/%s); "
                        "falling back to a uniform batch",
                        source_subject, target_subject)
            rows, src_rows, tgt_rows = [], [], []
            fallback = True
    pad = cfg.batch_size - len(rows)
    if pad > 0:
        rows.extend(int(i) for i in rng.integers(0, len(index), size=pad))
    return TrainBatch(
        values=index.values_array[rows],
        labels=index.labels_array[rows],
        keys=index.keys_array[rows],
        source_rows=np.asarray(src_rows, dtype=np.int64),
        target_rows=np.asarray(tgt_rows, dtype=np.int64),
        class_count=index.class_count,
        fallback=fallback,
        source_subject=source_subject,
        target_subject=target_subject,
    )


# --- Adam ---------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment accumulators and step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, params: MixerParams) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.tensors.items()},
                   v={k: np.zeros_like(p) for k, p in params.tensors.items()})


def adam_step(params: MixerParams, grads: dict[str, np.ndarray],
              state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update; functional, returns new values."""
    if set(grads) != set(params.tensors):
        raise ConfigError("gradient names do not match parameters")
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, p in params.tensors.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape mismatch for {name}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_params[name] = p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        new_m[name] = m
        new_v[name] = v
    return MixerParams(new_params), AdamState(m=new_m, v=new_v, step=t)


# --- training loop --------------------------------------------------------------


def carve_validation(index: DatasetIndex, seed: int, fraction: float = 0.1):
    """Split off a class-stratified validation share of the training data."""
    if not (0.0 < fraction < 1.0):
        raise ConfigError("validation fraction must lie in (0, 1)")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 97))))
    val_rows: list[int] = []
    for label in range(index.class_count):
        rows = np.flatnonzero(index.labels_array == label)
        if rows.size < 2:
            continue
        count = min(max(1, int(round(fraction * rows.size))), rows.size - 1)
        picked = rng.choice(rows, size=count, replace=False)
        val_rows.extend(int(i) for i in picked)
    val_set = set(val_rows)
    train_rows = [i for i in range(len(index)) if i not in val_set]
    if not val_rows or not train_rows:
        raise DataError("validation carve produced an empty side")
    return index.subset(train_rows), index.subset(val_rows)


def evaluate_ce(params: MixerParams, mcfg: MixerConfig, index: DatasetIndex):
    """Eval-mode cross-entropy and accuracy over a whole dataset."""
    trace = forward(params, mcfg, index.values_array, mode="eval")
    ce, _ = softmax_cross_entropy(trace.logits, index.labels_array)
    pred = trace.logits.argmax(axis=1)
    acc = float((pred == index.labels_array).mean())
    return ce, acc


def train_fold(train: DatasetIndex, val: DatasetIndex, mcfg: MixerConfig,
               tcfg: TrainConfig, kernel_cfg: KernelConfig | None = None):
    """Train one model with early stopping on validation cross-entropy.

    Returns (best_params, history); history holds one dict per epoch with
    keys epoch, ce, cdd, caba, loss, val_ce, val_acc. Raises
    NumericalError with a diagnostic snapshot if the loss leaves float
    range.
    """
    tcfg.validate()
    kernel_cfg = kernel_cfg or KernelConfig()
    model_cfg = replace(mcfg, dropout=tcfg.dropout)
    ss = np.random.SeedSequence(tcfg.seed)
    init_seed, sampler_seed, dropout_base = (int(x) for x in ss.generate_state(3))
    params = init_params(model_cfg, init_seed)
    state = AdamState.fresh(params)
    sampler_rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(sampler_seed)))
    steps_per_epoch = max(1, math.ceil(len(train) / tcfg.batch_size))
    if tcfg.da_mode != "none" and len(train.subjects()) < 2:
        log.warning("single training subject: source/target pairing is "
                    "unavailable, the cdd term will be skipped")

    best_val = math.inf
    best_params = params.copy()
    history: list[dict] = []
    since_improve = 0
    global_step = 0
    for epoch in range(1, tcfg.max_epochs + 1):
        sums = {"ce": 0.0, "cdd": 0.0, "caba": 0.0, "loss": 0.0}
        for _ in range(steps_per_epoch):
            batch = sample_minibatch(train, tcfg, sampler_rng)
            trace = forward(params, model_cfg, batch.values, mode="train",
                            seed=dropout_base + global_step)
            loss, comp, d_logits, d_pooled = objective_with_grads(
                trace, batch, tcfg, kernel_cfg)
            if not math.isfinite(loss):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch} step {global_step}: "
                    f"components {comp}"
                )
            grads, _ = backward(trace, params, model_cfg,
                                d_logits=d_logits, d_pooled=d_pooled)
            params, state = adam_step(params, grads, state, tcfg)
            global_step += 1
            for key in ("ce", "cdd", "caba"):
                sums[key] += comp[key]
            sums["loss"] += loss
        val_ce, val_acc = evaluate_ce(params, model_cfg, val)
        if not math.isfinite(val_ce):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        row = {"epoch": epoch,
               "ce": sums["ce"] / steps_per_epoch,
               "cdd": sums["cdd"] / steps_per_epoch,
               "caba": sums["caba"] / steps_per_epoch,
               "loss": sums["loss"] / steps_per_epoch,
               "val_ce": val_ce, "val_acc": val_acc}
        history.append(row)
        if val_ce < best_val:
            best_val = val_ce
            best_params = params.copy()
            since_improve = 0
        else:
            since_improve += 1
            if since_improve >= tcfg.patience:
                break
    return best_params, history


# --- grid search -----------------------------------------------------------------


def run_fold(index: DatasetIndex, plan: FoldPlan, fold: int, mcfg: MixerConfig,
             tcfg: TrainConfig, kernel_cfg: KernelConfig | None = None,
             val_fraction: float = 0.1):
    """Train on one fold of the plan and score the held-out subjects.

    Carves a grouped validation share (whole subjects, or whole blocks for
    a one-subject training side) out of the fold's training side for early
    stopping. Returns (best_params, history, test_accuracy).
    """
    train, test = split_for_fold(index, plan, fold)
    fit, val = holdout_by_group(train, seed=tcfg.seed + fold, fraction=val_fraction)
    best_params, history = train_fold(fit, val, mcfg, tcfg, kernel_cfg)
    model_cfg = replace(mcfg, dropout=tcfg.dropout)
    _, acc = evaluate_ce(best_params, model_cfg, test)
    return best_params, history, acc


def _grid_point_task(args) -> dict:
    """Evaluate one (lr, dropout, alpha) grid point across all folds."""
    index, plan, mcfg, base, kernel_cfg, lr, dropout, alpha = args
    tcfg = replace(base, learning_rate=lr, dropout=dropout, alpha=alpha)
    fold_accs: list[float] = []
    status = "ok"
    try:
        for fold in range(plan.k):
            _, _, acc = run_fold(index, plan, fold, mcfg, tcfg, kernel_cfg)
            fold_accs.append(acc)
        mean_acc = float(np.mean(fold_accs))
    except NumericalError as exc:
        log.warning("grid point (lr=%s, dropout=%s, alpha=%s) failed: %s",
                    lr, dropout, alpha, exc)
        status = "failed"
        mean_acc = math.nan
    return {"learning_rate": lr, "dropout": dropout, "alpha": alpha,
            "mean_accuracy": mean_acc, "fold_accuracies": fold_accs,
            "status": status}


def grid_search(index: DatasetIndex, plan: FoldPlan, mcfg: MixerConfig,
                base: TrainConfig, space: dict,
                kernel_cfg: KernelConfig | None = None, jobs: int = 1):
    """Exhaustive sweep over {learning_rate, dropout, alpha} lists.

    Ranks configurations by mean fold accuracy; ties break toward lower
    learning rate, then dropout, then alpha. A configuration whose
    training diverges is kept in the table with status "failed" and ranks
    last. Grid points are independent, so jobs > 1 spreads them over
    worker processes without changing any result. Returns
    (best TrainConfig, rows, alpha_curve).
    """
    lrs = list(space.get("learning_rate", [base.learning_rate]))
    dropouts = list(space.get("dropout", [base.dropout]))
    alphas = list(space.get("alpha", [base.alpha]))
    if not lrs or not dropouts or not alphas:
        raise ConfigError("grid space must be non-empty")
    if jobs < 1:
        raise ConfigError("jobs must be >= 1")
    tasks = [(index, plan, mcfg, base, kernel_cfg, lr, dropout, alpha)
             for lr in lrs for dropout in dropouts for alpha in alphas]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            rows = list(pool.map(_grid_point_task, tasks))
    else:
        rows = [_grid_point_task(task) for task in tasks]
    def rank(row):
        acc = row["mean_accuracy"]
        return (-(acc if math.isfinite(acc) else -math.inf),
                row["learning_rate"], row["dropout"], row["alpha"])
    ordered = sorted(rows, key=rank)
    best_row = ordered[0]
    best = replace(base, learning_rate=best_row["learning_rate"],
                   dropout=best_row["dropout"], alpha=best_row["alpha"])
    alpha_curve = []
    for alpha in alphas:
        accs = [r["mean_accuracy"] for r in rows
                if r["alpha"] == alpha and math.isfinite(r["mean_accuracy"])]
        alpha_curve.append({"alpha": alpha,
                            "accuracy": max(accs) if accs else math.nan})
    return best, rows, alpha_curve


# --- gradient verification ----------------------------------------------------------


def finite_diff_check(mcfg: MixerConfig, tcfg: TrainConfig, batch: TrainBatch,
                      epsilon: float = 1e-5,
                      kernel_cfg: KernelConfig | None = None) -> float:
    """Central-difference audit of the full objective's parameter gradient.

    The kernel bandwidth is resolved once at the unperturbed point and held
    fixed (it is a stop-gradient), and the dropout masks are pinned by a
    fixed seed, so the analytic and numeric routes differentiate the same
    deterministic function. Returns the max deviation normalized by the
    overall gradient scale (over the full flattened gradient vector).
    """
    if epsilon <= 0:
        raise ConfigError("finite-difference epsilon must be positive")
    tcfg.validate()
    model_cfg = replace(mcfg, dropout=tcfg.dropout)
    ss = np.random.SeedSequence(tcfg.seed)
    init_seed, _, dropout_seed = (int(x) for x in ss.generate_state(3))
    params = init_params(model_cfg, init_seed)
    base_trace = forward(params, model_cfg, batch.values, mode="train",
                         seed=dropout_seed)
    kern = resolve_kernel(kernel_cfg or KernelConfig(),
                          base_trace.pooled_features)

    def loss_value() -> float:
        trace = forward(params, model_cfg, batch.values, mode="train",
                        seed=dropout_seed)
        loss, _, _, _ = objective_with_grads(trace, batch, tcfg, kern)
        return loss

    _, _, d_logits, d_pooled = objective_with_grads(base_trace, batch, tcfg, kern)
    grads, _ = backward(base_trace, params, model_cfg,
                        d_logits=d_logits, d_pooled=d_pooled)
    analytic: list[np.ndarray] = []
    numeric: list[np.ndarray] = []
    for name in grads:
        tensor = params.tensors[name]
        num = np.zeros_like(tensor)
        flat, nflat = tensor.ravel(), num.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss_value()
            flat[i] = orig - epsilon
            down = loss_value()
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * epsilon)
        analytic.append(grads[name].ravel())
        numeric.append(nflat)
    a = np.concatenate(analytic)
    b = np.concatenate(numeric)
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return float(np.abs(a - b).max() / scale)
