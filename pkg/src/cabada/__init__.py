"""Class-aware block-aware domain adaptation for workload classification."""

from .data import (
    DatasetIndex,
    DomainKey,
    SynthConfig,
    WindowSample,
    load_manifest,
    synth_generate,
    validate_dataset,
    write_manifest,
)
from .discrepancy import (
    FeatureBatch,
    KernelConfig,
    caba,
    cdd,
    class_domain_discrepancy,
    mmd2,
    wasserstein1_diag,
)
from .errors import CabadaError, ConfigError, DataError, NumericalError
from .estimator import MixerClassifier
from .evalsuite import (
    FoldResult,
    MaskReport,
    ablate_caba,
    evaluate,
    mask_importance,
    run_kfold,
    split_scenario_table,
)
from .mixer import (
    MixerConfig,
    MixerParams,
    count_macs,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from .splits import (
    FoldPlan,
    SplitSpec,
    holdout_by_group,
    kfold_by_subject,
    split_by_axis,
    split_for_fold,
)
from .trainer import (
    TrainConfig,
    finite_diff_check,
    grid_search,
    train_fold,
)

__version__ = "0.1.0"

__all__ = [
    "CabadaError",
    "ConfigError",
    "DataError",
    "NumericalError",
    "DatasetIndex",
    "DomainKey",
    "SynthConfig",
    "WindowSample",
    "load_manifest",
    "synth_generate",
    "validate_dataset",
    "write_manifest",
    "FeatureBatch",
    "KernelConfig",
    "caba",
    "cdd",
    "class_domain_discrepancy",
    "mmd2",
    "wasserstein1_diag",
    "MixerClassifier",
    "FoldResult",
    "MaskReport",
    "ablate_caba",
    "evaluate",
    "mask_importance",
    "run_kfold",
    "split_scenario_table",
    "MixerConfig",
    "MixerParams",
    "count_macs",
    "forward",
    "load_checkpoint",
    "save_checkpoint",
    "FoldPlan",
    "SplitSpec",
    "holdout_by_group",
    "kfold_by_subject",
    "split_by_axis",
    "split_for_fold",
    "TrainConfig",
    "finite_diff_check",
    "grid_search",
    "train_fold",
    "__version__",
]
