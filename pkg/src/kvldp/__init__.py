"""Poisoning-attack simulation and analysis for key-value LDP protocols."""

from .core import (
    FREQUENCY_STAGE,
    MEAN_STAGE,
    PCKV_GRR,
    PCKV_UE,
    PRIVKVM,
    PROTOCOLS,
    Dictionary,
    EstimateTable,
    GRRPairs,
    KVRecord,
    PerturbParams,
    PrivacyParams,
    PrivKVMMessages,
    SupportCounts,
    TargetSet,
    UEVectors,
    UserRecordSet,
    derive_perturb_params,
    discretize_values,
    make_rng,
)
from .data import (
    Dataset,
    DatasetStats,
    generate_synthetic,
    generate_zipf_synthetic,
    load_csv,
    load_dataset,
    save_dataset,
    true_stats,
)
from .protocols import (
    pckv_aggregate,
    pckv_grr_perturb,
    pckv_sample,
    pckv_support_counts,
    pckv_ue_perturb,
    privkvm_aggregate_frequency,
    privkvm_aggregate_mean,
    privkvm_perturb,
    privkvm_run,
    privkvm_sample,
    verify_ldp_guarantee,
)
from .attacks import ATTACKS, M2GA, RKVA, RMA, AttackConfig, craft_m2ga, craft_messages, craft_rkva, craft_rma
from .analysis import (
    AnalyticalContext,
    analytical_frequency_gain,
    analytical_mean_gain,
    empirical_vs_analytical,
    generic_frequency_gain,
    generic_mean_gain,
    optimality_oracle,
)
from .defenses import (
    AnomalyState,
    ForestConfig,
    IsolationForest,
    as_detect,
    as_scores_update,
    build_feature_rows,
    isolation_forest_fit,
    oc_detect,
    reaggregate_excluding,
)
from .metrics import GainReport, asr, detection_metrics, gain_metrics, recommend_top_t
from .experiment import (
    AS_DEFENSE,
    OC_DEFENSE,
    ConfigError,
    DatasetConfig,
    ExperimentConfig,
    run_experiment,
    run_trial,
    sweep,
)

__version__ = "0.1.0"
