"""Gain metrics over paired trials, top-t recommendation with the three
ranking cases, attack success rate, and detection error rates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import EstimateTable, TargetSet


@dataclass
class GainReport:
    """Trial-averaged frequency/mean gains of a target set with standard
    errors; per-trial sums are retained for downstream significance tests."""

    gain_freq: float
    gain_mean: float
    se_freq: float
    se_mean: float
    trial_freq: np.ndarray
    trial_mean: np.ndarray

    @property
    def n_trials(self) -> int:
        return len(self.trial_freq)


def _se(values: np.ndarray) -> float:
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1) / np.sqrt(len(values)))


def gain_metrics(
    before: list[EstimateTable],
    after: list[EstimateTable],
    targets: TargetSet | list[TargetSet],
) -> GainReport:
    """Per-trial sum over target keys of the estimate difference, averaged
    over trials. `before`/`after` must be paired runs differing only by the
    attack injection; `targets` may vary per trial."""
    if len(before) != len(after):
        raise ValueError(f"trial count mismatch: {len(before)} vs {len(after)}")
    if isinstance(targets, TargetSet):
        targets = [targets] * len(before)
    if len(targets) != len(before):
        raise ValueError("need one target set per trial")
    trial_freq = np.empty(len(before))
    trial_mean = np.empty(len(before))
    for i, (b, a, t) in enumerate(zip(before, after, targets)):
        idx = np.array(t.keys) - 1
        trial_freq[i] = float(np.sum(a.f_hat[idx] - b.f_hat[idx]))
        trial_mean[i] = float(np.sum(a.m_hat[idx] - b.m_hat[idx]))
    return GainReport(
        gain_freq=float(trial_freq.mean()),
        gain_mean=float(trial_mean.mean()),
        se_freq=_se(trial_freq),
        se_mean=_se(trial_mean),
        trial_freq=trial_freq,
        trial_mean=trial_mean,
    )


def recommend_top_t(
    table: EstimateTable,
    case: int,
    t: int,
    rng: np.random.Generator | None = None,
) -> list[int]:
    """Rank keys and return the top-t list.

    Case 1 ranks by estimated frequency (ties by estimated mean), case 2 by
    estimated mean (ties by frequency), case 3 by the uncalibrated total
    score l*(n1_hat - n_minus1_hat)/n with ties broken randomly. Residual
    ties in cases 1 and 2 fall back to the key id.
    """
    d = table.d
    if not 1 <= t <= d:
        raise ValueError(f"t must lie in 1..{d}, got {t}")
    key_ids = np.arange(d)
    if case == 1:
        order = np.lexsort((key_ids, -table.m_hat, -table.f_hat))
    elif case == 2:
        order = np.lexsort((key_ids, -table.f_hat, -table.m_hat))
    elif case == 3:
        if rng is None:
            raise ValueError("case 3 needs an rng for random tie-breaking")
        order = np.lexsort((rng.permutation(d), -table.total_score()))
    else:
        raise ValueError(f"case must be 1, 2 or 3, got {case}")
    return [int(k) + 1 for k in order[:t]]


def asr(
    targets: TargetSet,
    recommended: list[int],
    pre_attack_recommended: list[int],
) -> float:
    """Fraction of target keys inside the post-attack top-t list.

    Targets must not already be recommended before the attack; that is a
    configuration error, not a successful attack.
    """
    overlap = set(targets.keys) & set(pre_attack_recommended)
    if overlap:
        raise ValueError(f"targets {sorted(overlap)} already recommended before attack")
    hit = len(set(targets.keys) & set(recommended))
    return hit / targets.r


def detection_metrics(
    detected: np.ndarray,
    true_fake: np.ndarray,
) -> tuple[float | None, float | None]:
    """(FPR, FNR) of a detector over all users.

    FPR is the fraction of genuine users flagged, FNR the fraction of fake
    users missed; either is None when its population is empty.
    """
    detected = np.asarray(detected, dtype=bool)
    true_fake = np.asarray(true_fake, dtype=bool)
    if detected.shape != true_fake.shape:
        raise ValueError("detected and true_fake masks must align")
    n_genuine = int((~true_fake).sum())
    n_fake = int(true_fake.sum())
    fpr = float((detected & ~true_fake).sum() / n_genuine) if n_genuine else None
    fnr = float((true_fake & ~detected).sum() / n_fake) if n_fake else None
    return fpr, fnr
