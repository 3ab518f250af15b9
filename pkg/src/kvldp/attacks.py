"""Fake-user message crafting for the M2GA, RMA and RKVA attacks.

M2GA sends the gain-maximizing messages directly; RMA samples uniformly
from the protocol's message domain; RKVA pushes a random <target, 1> pair
through the genuine Sample/Perturb path. PrivKVM attacks produce one
message batch per round; the PCKV protocols are single-round.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .core import (
    PCKV_GRR,
    PCKV_UE,
    PRIVKVM,
    Dictionary,
    GRRPairs,
    PerturbParams,
    PrivacyParams,
    PrivKVMMessages,
    TargetSet,
    UEVectors,
)
from .protocols import pckv_grr_perturb, pckv_ue_perturb

logger = logging.getLogger(__name__)

M2GA = "m2ga"
RMA = "rma"
RKVA = "rkva"
ATTACKS = (M2GA, RMA, RKVA)


@dataclass(frozen=True)
class AttackConfig:
    attack_id: str
    targets: TargetSet
    m: int

    def __post_init__(self):
        if self.attack_id not in ATTACKS:
            raise ValueError(f"unknown attack {self.attack_id!r}")
        if self.m < 1:
            raise ValueError(f"need at least one fake user, got m={self.m}")


def balanced_target_assignment(targets: TargetSet, m: int) -> np.ndarray:
    """Assign the m fake users to targets round-robin; when r does not
    divide m the first (m mod r) targets in key order get one extra user.
    Per-target counts differ by at most 1."""
    ordered = np.array(sorted(targets.keys), dtype=np.int64)
    return ordered[np.arange(m) % targets.r]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def craft_m2ga(
    protocol: str,
    config: AttackConfig,
    params: PerturbParams,
    dictionary: Dictionary,
    privacy: PrivacyParams | None = None,
    rng: np.random.Generator | None = None,
    n_rounds: int = 1,
) -> list[PrivKVMMessages] | UEVectors | GRRPairs:
    """Maximal gain attack messages.

    PrivKVM / PCKV-GRR: each fake user supports one target (balanced
    assignment) with value 1, unperturbed; PrivKVM repeats the identical
    batch every round. PCKV-UE: 1 at every target position, with filler
    +/-1 entries so each vector carries exactly the rounded expected
    1-count and -1-count of a genuine <.,1> reporter.
    """
    if config.targets.r > dictionary.d:
        raise ValueError("more targets than real keys")
    m = config.m
    if protocol == PRIVKVM:
        assigned = balanced_target_assignment(config.targets, m)
        batch = PrivKVMMessages(
            key_index=assigned,
            kp=np.ones(m, dtype=np.int8),
            vp=np.ones(m, dtype=np.int8),
        )
        return [batch] * n_rounds
    if protocol == PCKV_GRR:
        assigned = balanced_target_assignment(config.targets, m)
        return GRRPairs(key=assigned, value=np.ones(m, dtype=np.int8))
    if protocol == PCKV_UE:
        if rng is None:
            raise ValueError("PCKV-UE M2GA needs an rng for filler placement")
        return _m2ga_ue_vectors(config, params, dictionary, rng)
    raise ValueError(f"unknown protocol {protocol!r}")


def _m2ga_ue_vectors(
    config: AttackConfig,
    params: PerturbParams,
    dictionary: Dictionary,
    rng: np.random.Generator,
) -> UEVectors:
    d_prime = dictionary.d_prime
    r = config.targets.r
    ones_total = _round_half_up(params.a * params.p + (d_prime - 1) * params.b / 2.0)
    neg_total = _round_half_up(params.a * (1.0 - params.p) + (d_prime - 1) * params.b / 2.0)
    filler_ones = max(ones_total - r, 0)
    if r > ones_total:
        logger.warning(
            "M2GA/PCKV-UE disguise violated: %d targets exceed the expected "
            "1-count %d; vectors carry %d ones", r, ones_total, r,
        )
    non_target = np.setdiff1d(
        np.arange(d_prime), np.array(config.targets.keys) - 1, assume_unique=False
    )
    n_filler = min(filler_ones + neg_total, len(non_target))
    filler_ones = min(filler_ones, n_filler)
    neg_count = min(neg_total, n_filler - filler_ones)

    bits = np.zeros((config.m, d_prime), dtype=np.int8)
    bits[:, np.array(config.targets.keys) - 1] = 1
    if n_filler > 0:
        order = rng.random((config.m, len(non_target))).argsort(axis=1)
        chosen = non_target[order[:, :n_filler]]
        rows = np.repeat(np.arange(config.m), filler_ones)
        bits[rows, chosen[:, :filler_ones].ravel()] = 1
        rows = np.repeat(np.arange(config.m), neg_count)
        bits[rows, chosen[:, filler_ones:filler_ones + neg_count].ravel()] = -1
    return UEVectors(bits=bits)


def craft_rma(
    protocol: str,
    config: AttackConfig,
    params: PerturbParams,
    dictionary: Dictionary,
    rng: np.random.Generator,
    n_rounds: int = 1,
) -> list[PrivKVMMessages] | UEVectors | GRRPairs:
    """Random message attack: uniform draws from the message domain.

    PrivKVM: uniform key with tuple <0,0> w.p. 1/2 and <1,+/-1> w.p. 1/4
    each, redrawn every round. PCKV-UE: every coordinate iid uniform over
    {-1, 0, 1}. PCKV-GRR: uniform key over 1..d' with a uniform sign.
    """
    m = config.m
    if protocol == PRIVKVM:
        batches = []
        for _ in range(n_rounds):
            keys = rng.integers(1, dictionary.d + 1, size=m)
            u = rng.random(m)
            kp = (u >= 0.5).astype(np.int8)
            vp = (np.where(u < 0.75, 1, -1) * kp).astype(np.int8)
            batches.append(PrivKVMMessages(key_index=keys, kp=kp, vp=vp))
        return batches
    if protocol == PCKV_UE:
        bits = rng.integers(-1, 2, size=(m, dictionary.d_prime)).astype(np.int8)
        return UEVectors(bits=bits)
    if protocol == PCKV_GRR:
        keys = rng.integers(1, dictionary.d_prime + 1, size=m)
        values = (rng.integers(0, 2, size=m) * 2 - 1).astype(np.int8)
        return GRRPairs(key=keys, value=values)
    raise ValueError(f"unknown protocol {protocol!r}")


def craft_rkva(
    protocol: str,
    config: AttackConfig,
    params: PerturbParams,
    dictionary: Dictionary,
    privacy: PrivacyParams | None = None,
    rng: np.random.Generator | None = None,
    n_rounds: int = 1,
) -> list[PrivKVMMessages] | UEVectors | GRRPairs:
    """Random key-value pair attack: each fake user fixes a uniform target
    key paired with value 1 and reports it through the genuine Perturb step
    (for PrivKVM, as a possessing user, re-perturbed every round)."""
    if rng is None:
        raise ValueError("RKVA needs an rng")
    m = config.m
    target_keys = np.array(config.targets.keys, dtype=np.int64)
    chosen = target_keys[rng.integers(0, config.targets.r, size=m)]
    v_star = np.ones(m, dtype=np.int8)
    if protocol == PRIVKVM:
        if privacy is None:
            raise ValueError("RKVA for PrivKVM needs privacy parameters")
        e1, e2 = math.exp(privacy.epsilon1), math.exp(privacy.epsilon2)
        p_keep_value = e2 / (1.0 + e2)
        p_keep_flag = e1 / (1.0 + e1)
        batches = []
        for _ in range(n_rounds):
            flip = rng.random(m) >= p_keep_value
            v_prime = np.where(flip, -v_star, v_star).astype(np.int8)
            kp = (rng.random(m) < p_keep_flag).astype(np.int8)
            batches.append(
                PrivKVMMessages(key_index=chosen, kp=kp, vp=(v_prime * kp).astype(np.int8))
            )
        return batches
    if protocol == PCKV_UE:
        return pckv_ue_perturb(chosen, v_star, params, dictionary, rng)
    if protocol == PCKV_GRR:
        return pckv_grr_perturb(chosen, v_star, params, dictionary, rng)
    raise ValueError(f"unknown protocol {protocol!r}")


def craft_messages(
    protocol: str,
    config: AttackConfig,
    params: PerturbParams,
    dictionary: Dictionary,
    privacy: PrivacyParams | None = None,
    rng: np.random.Generator | None = None,
    n_rounds: int = 1,
) -> list[PrivKVMMessages] | UEVectors | GRRPairs:
    """Dispatch to the configured attack's crafting routine."""
    if config.attack_id == M2GA:
        return craft_m2ga(protocol, config, params, dictionary, privacy, rng, n_rounds)
    if config.attack_id == RMA:
        return craft_rma(protocol, config, params, dictionary, rng, n_rounds)
    return craft_rkva(protocol, config, params, dictionary, privacy, rng, n_rounds)
