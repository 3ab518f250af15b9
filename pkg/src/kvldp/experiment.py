"""Experiment runner: multi-trial attack/defense simulations with paired
seeds, worker-pool execution and deterministic JSON/CSV emission.

Within a trial the baseline and attacked pipelines consume identical
genuine-user random streams, so measured gains reflect only the injected
fake messages. Per-trial seeds derive from (base seed, trial index), making
results independent of worker count and execution order.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .analysis import (
    AnalyticalContext,
    analytical_frequency_gain,
    analytical_mean_gain,
)
from .attacks import ATTACKS, AttackConfig, craft_messages
from .core import (
    FREQUENCY_STAGE,
    PCKV_UE,
    PRIVKVM,
    PROTOCOLS,
    Dictionary,
    GRRPairs,
    PrivacyParams,
    TargetSet,
    UEVectors,
    derive_perturb_params,
    make_rng,
)
from .data import (
    Dataset,
    generate_synthetic,
    generate_zipf_synthetic,
    load_csv,
    true_stats,
)
from .defenses import ForestConfig, build_feature_rows, isolation_forest_fit, oc_detect, reaggregate_excluding
from .metrics import asr, detection_metrics, recommend_top_t
from .protocols import pckv_aggregate, pckv_grr_perturb, pckv_sample, pckv_ue_perturb, privkvm_run

WORKERS_ENV = "KVLDP_WORKERS"

OC_DEFENSE = "oc"
AS_DEFENSE = "as"
DEFENSES = (OC_DEFENSE, AS_DEFENSE)

_SWEEP_PARAMS = {
    "beta": "beta",
    "epsilon": "epsilon",
    "r": "r",
    "n_iter": "n_iter",
    "lambda": "lam",
    "lam": "lam",
    "eta": "eta",
    "t": "top_t",
    "top_t": "top_t",
}


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"
    n: int = 10_000
    d: int = 100
    key_sigma: float = 15.0
    value_sigma: float = 1.0
    exponent: float = 1.2
    path: str | None = None
    user_col: str = "user"
    key_col: str = "key"
    value_col: str = "value"
    value_min: float | None = None
    value_max: float | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    protocol: str = PRIVKVM
    attack: str | None = None
    defense: str | None = None
    beta: float = 0.05
    epsilon: float = 1.0
    r: int = 1
    n_iter: int = 10
    padding: int = 1
    eta: int = 2
    lam: float = 0.1
    trials: int = 100
    seed: int = 0
    clipping: bool = True
    targets: tuple[int, ...] | None = None
    recommender_case: int | None = None
    top_t: int = 20
    dataset: DatasetConfig = field(default_factory=DatasetConfig)

    def validate(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        if self.attack is not None and self.attack not in ATTACKS:
            raise ConfigError(f"unknown attack {self.attack!r}")
        if self.defense is not None and self.defense not in DEFENSES:
            raise ConfigError(f"unknown defense {self.defense!r}")
        if self.defense == AS_DEFENSE and self.protocol != PRIVKVM:
            raise ConfigError("the anomaly-score defense applies to PrivKVM only")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.trials < 1:
            raise ConfigError("need at least one trial")
        if self.r < 1 or self.r > self.dataset.d:
            raise ConfigError(f"r must lie in 1..{self.dataset.d}")
        if self.attack is not None and round(self.beta * self.dataset.n) < 1:
            raise ConfigError("beta too small: no fake users to craft")
        if self.targets is not None:
            if len(self.targets) != self.r:
                raise ConfigError("explicit target list must have length r")
            if any(not 1 <= k <= self.dataset.d for k in self.targets):
                raise ConfigError("explicit targets must lie in 1..d")
        if self.recommender_case is not None:
            if self.recommender_case not in (1, 2, 3):
                raise ConfigError("recommender case must be 1, 2 or 3")
            if not 1 <= self.top_t <= self.dataset.d:
                raise ConfigError("top_t must lie in 1..d")
        if self.dataset.kind not in ("synthetic", "zipf", "csv"):
            raise ConfigError(f"unknown dataset kind {self.dataset.kind!r}")
        if self.dataset.kind == "csv" and not self.dataset.path:
            raise ConfigError("csv dataset needs a path")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["targets"] = list(self.targets) if self.targets is not None else None
        return out

    @staticmethod
    def from_dict(data: dict) -> "ExperimentConfig":
        data = dict(data)
        ds = data.pop("dataset", {})
        targets = data.pop("targets", None)
        cfg = ExperimentConfig(
            dataset=DatasetConfig(**ds),
            targets=tuple(targets) if targets else None,
            **data,
        )
        return cfg


# ---------------------------------------------------------------------------
# Dataset cache (per process; workers rebuild deterministically from config)
# ---------------------------------------------------------------------------

_DATASET_CACHE: dict[tuple, tuple[Dataset, object]] = {}


def _dataset_key(cfg: ExperimentConfig) -> tuple:
    ds = cfg.dataset
    return (ds.kind, ds.n, ds.d, ds.key_sigma, ds.value_sigma, ds.exponent,
            ds.path, ds.value_min, ds.value_max, cfg.seed)


def _get_dataset(cfg: ExperimentConfig) -> tuple[Dataset, object]:
    key = _dataset_key(cfg)
    if key not in _DATASET_CACHE:
        ds = cfg.dataset
        if ds.kind == "synthetic":
            dataset = generate_synthetic(
                ds.n, ds.d, ds.key_sigma, ds.value_sigma, rng=make_rng(cfg.seed, 0)
            )
        elif ds.kind == "zipf":
            dataset = generate_zipf_synthetic(
                ds.n, ds.d, ds.exponent, ds.value_sigma, rng=make_rng(cfg.seed, 0)
            )
        else:
            dataset, _ = load_csv(
                ds.path, ds.user_col, ds.key_col, ds.value_col, ds.value_min, ds.value_max
            )
        _DATASET_CACHE[key] = (dataset, true_stats(dataset))
    return _DATASET_CACHE[key]


# ---------------------------------------------------------------------------
# Single trial
# ---------------------------------------------------------------------------


def _concat_messages(protocol: str, genuine, fake):
    if protocol == PCKV_UE:
        return UEVectors(bits=np.concatenate([genuine.bits, fake.bits]))
    return GRRPairs(
        key=np.concatenate([genuine.key, fake.key]),
        value=np.concatenate([genuine.value, fake.value]),
    )


def run_trial(cfg: ExperimentConfig, trial: int) -> dict:
    """Run one paired baseline/attacked(/defended) trial; returns a flat row."""
    dataset, stats = _get_dataset(cfg)
    dictionary = Dictionary(dataset.d, cfg.padding)
    n_iter = cfg.n_iter if cfg.protocol == PRIVKVM else 1
    privacy = PrivacyParams(cfg.epsilon, n_iter)
    params = derive_perturb_params(cfg.protocol, FREQUENCY_STAGE, privacy, dictionary)

    def stream(tag: int) -> np.random.Generator:
        return make_rng(cfg.seed, 1, trial, tag)

    # Baseline over genuine users only.
    if cfg.protocol == PRIVKVM:
        baseline = privkvm_run(dataset, privacy, stream(0), clip=cfg.clipping).table
        genuine_msgs = None
    else:
        g_rng = stream(0)
        keys, v_star = pckv_sample(dataset, dictionary, g_rng)
        perturb = pckv_ue_perturb if cfg.protocol == PCKV_UE else pckv_grr_perturb
        genuine_msgs = perturb(keys, v_star, params, dictionary, g_rng)
        baseline = pckv_aggregate(genuine_msgs, dataset.n, params, dictionary, cfg.clipping)

    # Recommendation baseline and target selection.
    rec_rng = stream(4)
    pre_list: list[int] | None = None
    if cfg.recommender_case is not None:
        pre_list = recommend_top_t(baseline, cfg.recommender_case, cfg.top_t, rec_rng)
    if cfg.targets is not None:
        target_set = TargetSet(tuple(sorted(cfg.targets)))
    else:
        pool = np.arange(1, dataset.d + 1)
        if pre_list is not None:
            pool = pool[~np.isin(pool, pre_list)]
        if len(pool) < cfg.r:
            raise ConfigError("not enough keys outside the pre-attack top-t list")
        chosen = stream(1).choice(pool, size=cfg.r, replace=False)
        target_set = TargetSet(tuple(sorted(int(k) for k in chosen)))

    target_idx = np.array(target_set.keys) - 1
    row: dict = {
        "trial": trial,
        "targets": list(target_set.keys),
        "baseline_freq": float(np.sum(baseline.f_hat[target_idx])),
        "baseline_mean": float(np.sum(baseline.m_hat[target_idx])),
    }
    none_metrics = dict(
        gain_freq=None, gain_mean=None, analytical_gain_freq=None,
        analytical_gain_mean=None, defended_gain_freq=None, defended_gain_mean=None,
        asr=None, fpr=None, fnr=None,
    )
    row.update(none_metrics)

    if cfg.attack is None:
        row["gain_freq"] = 0.0
        row["gain_mean"] = 0.0
        if cfg.defense is not None:
            # defense without an attack: the control showing the defense's
            # own estimation artifacts (and its genuine-user FPR)
            _apply_defense(cfg, row, dataset, dictionary, privacy, params,
                           baseline, target_idx, m=0, fake_rounds=None,
                           all_messages=None, genuine_msgs=genuine_msgs)
        return row

    # Attack injection with paired genuine randomness.
    m = int(round(cfg.beta * dataset.n))
    attack_cfg = AttackConfig(attack_id=cfg.attack, targets=target_set, m=m)
    collect = cfg.defense == OC_DEFENSE
    fake_rounds = None
    if cfg.protocol == PRIVKVM:
        fake_rounds = craft_messages(
            cfg.protocol, attack_cfg, params, dictionary, privacy, stream(2), n_rounds=n_iter
        )
        attacked_res = privkvm_run(
            dataset, privacy, stream(0), adversary_rounds=fake_rounds,
            clip=cfg.clipping, collect=collect,
        )
        attacked = attacked_res.table
        all_messages = attacked_res.rounds
    else:
        fake = craft_messages(cfg.protocol, attack_cfg, params, dictionary, privacy, stream(2))
        all_messages = _concat_messages(cfg.protocol, genuine_msgs, fake)
        attacked = pckv_aggregate(all_messages, dataset.n + m, params, dictionary, cfg.clipping)

    idx = target_idx
    row["gain_freq"] = float(np.sum(attacked.f_hat[idx] - baseline.f_hat[idx]))
    row["gain_mean"] = float(np.sum(attacked.m_hat[idx] - baseline.m_hat[idx]))

    ctx = AnalyticalContext(
        n=dataset.n,
        beta=m / dataset.n,
        epsilon=cfg.epsilon,
        d=dataset.d,
        padding=cfg.padding,
        target_f=tuple(float(stats.f[k - 1]) for k in target_set.keys),
        target_m=tuple(
            float(stats.m[k - 1]) if np.isfinite(stats.m[k - 1]) else 0.0
            for k in target_set.keys
        ),
        n_iter=n_iter,
    )
    row["analytical_gain_freq"] = analytical_frequency_gain(cfg.attack, cfg.protocol, ctx)
    row["analytical_gain_mean"] = analytical_mean_gain(cfg.attack, cfg.protocol, ctx)

    if cfg.recommender_case is not None:
        post_list = recommend_top_t(attacked, cfg.recommender_case, cfg.top_t, rec_rng)
        row["asr"] = asr(target_set, post_list, pre_list)

    if cfg.defense is not None:
        _apply_defense(cfg, row, dataset, dictionary, privacy, params, baseline,
                       idx, m=m, fake_rounds=fake_rounds if cfg.protocol == PRIVKVM else None,
                       all_messages=all_messages, genuine_msgs=genuine_msgs)
    return row


def _apply_defense(cfg, row, dataset, dictionary, privacy, params, baseline,
                   target_idx, m, fake_rounds, all_messages, genuine_msgs):
    """Run the configured defense over the (possibly attack-free) messages and
    record defended gains and detection rates in the trial row."""

    def stream(tag: int) -> np.random.Generator:
        return make_rng(cfg.seed, 1, row["trial"], tag)

    fake_mask = np.arange(dataset.n + m) >= dataset.n
    if cfg.defense == AS_DEFENSE:
        defended_res = privkvm_run(
            dataset, privacy, stream(0), adversary_rounds=fake_rounds,
            clip=cfg.clipping, anomaly_eta=cfg.eta,
        )
        defended = defended_res.table
        detected = defended_res.detected
    else:
        if all_messages is None:
            if cfg.protocol == PRIVKVM:
                all_messages = privkvm_run(
                    dataset, privacy, stream(0), clip=cfg.clipping, collect=True
                ).rounds
            else:
                all_messages = genuine_msgs
        rows_x = build_feature_rows(cfg.protocol, all_messages, dictionary)
        d_rng = stream(3)
        known = d_rng.choice(
            dataset.n, size=max(1, int(round(cfg.lam * dataset.n))), replace=False
        )
        forest = isolation_forest_fit(rows_x, ForestConfig(), d_rng)
        detected = oc_detect(forest.anomaly_scores(rows_x), known)
        defended = reaggregate_excluding(
            cfg.protocol, all_messages, detected, dictionary,
            privacy=privacy, params=params, clip=cfg.clipping,
        )
    row["defended_gain_freq"] = float(
        np.sum(defended.f_hat[target_idx] - baseline.f_hat[target_idx])
    )
    row["defended_gain_mean"] = float(
        np.sum(defended.m_hat[target_idx] - baseline.m_hat[target_idx])
    )
    fpr, fnr = detection_metrics(detected, fake_mask)
    row["fpr"] = fpr
    row["fnr"] = fnr


def _trial_worker(args: tuple[dict, int]) -> dict:
    cfg_dict, trial = args
    return run_trial(ExperimentConfig.from_dict(cfg_dict), trial)


# ---------------------------------------------------------------------------
# Experiment and sweep drivers
# ---------------------------------------------------------------------------


def _mean_se(values: list[float | None]) -> tuple[float | None, float | None]:
    present = [v for v in values if v is not None]
    if not present:
        return None, None
    arr = np.array(present, dtype=np.float64)
    se = float(np.std(arr, ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
    return float(arr.mean()), se


def _workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def run_experiment(cfg: ExperimentConfig, workers: int | None = None) -> dict:
    """Run all trials and assemble the JSON-ready report.

    The report is byte-reproducible for a fixed (config, seed) and does not
    depend on the worker count.
    """
    cfg.validate()
    if workers is None:
        workers = _workers()
    if workers > 1 and cfg.trials > 1:
        cfg_dict = cfg.to_dict()
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_trial_worker, [(cfg_dict, t) for t in range(cfg.trials)]))
    else:
        rows = [run_trial(cfg, t) for t in range(cfg.trials)]
    rows.sort(key=lambda r: r["trial"])

    summary: dict = {}
    for metric in (
        "gain_freq", "gain_mean", "defended_gain_freq", "defended_gain_mean",
        "analytical_gain_freq", "analytical_gain_mean", "asr", "fpr", "fnr",
    ):
        mean, se = _mean_se([r[metric] for r in rows])
        summary[metric] = {"mean": mean, "se": se}
    return {"config": cfg.to_dict(), "summary": summary, "trials": rows}


def sweep(cfg: ExperimentConfig, parameter: str, values: list) -> dict:
    """Rerun the experiment for each parameter value with the shared base
    seed; returns per-value reports plus long-format rows (one per value per
    trial)."""
    if parameter not in _SWEEP_PARAMS:
        raise ConfigError(
            f"unknown sweep parameter {parameter!r}; choose from {sorted(set(_SWEEP_PARAMS))}"
        )
    if not values:
        raise ConfigError("sweep needs at least one value")
    attr = _SWEEP_PARAMS[parameter]
    reports = []
    long_rows = []
    for value in values:
        coerced: object = value
        if attr in ("r", "eta", "n_iter", "top_t"):
            coerced = int(value)
        point_cfg = replace(cfg, **{attr: coerced})
        report = run_experiment(point_cfg)
        reports.append({"parameter": parameter, "value": coerced, "report": report})
        for row in report["trials"]:
            long_rows.append({"parameter": parameter, "value": coerced, **row})
    return {"parameter": parameter, "values": list(values), "reports": reports,
            "rows": long_rows}


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

TRIAL_FIELDS = (
    "trial", "targets", "baseline_freq", "baseline_mean", "gain_freq", "gain_mean",
    "analytical_gain_freq", "analytical_gain_mean", "defended_gain_freq",
    "defended_gain_mean", "asr", "fpr", "fnr",
)


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def write_report(report: dict, path: str | Path) -> None:
    Path(path).write_text(report_json(report))


def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, list):
        return ";".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def write_trials_csv(rows: list[dict], path: str | Path, extra_fields: tuple[str, ...] = ()) -> None:
    fields = tuple(extra_fields) + TRIAL_FIELDS
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            writer.writerow([_csv_cell(row.get(f)) for f in fields])


def write_sweep_csv(sweep_result: dict, path: str | Path) -> None:
    write_trials_csv(sweep_result["rows"], path, extra_fields=("parameter", "value"))
