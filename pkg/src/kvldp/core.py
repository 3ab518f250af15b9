"""Shared domain types for key-value LDP protocols plus the unified
perturbation-parameter derivation and value discretization.

All three protocols (PrivKVM, PCKV-UE, PCKV-GRR) share the (a, b, p, l)
parameterization: `a` is the probability that a report keeps the sampled
key, `b` the rate at which other keys are supported spuriously, `p` the
probability the discretized value survives unflipped, and `l` the padding
length of the sampling step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

PRIVKVM = "privkvm"
PCKV_UE = "pckv_ue"
PCKV_GRR = "pckv_grr"
PROTOCOLS = (PRIVKVM, PCKV_UE, PCKV_GRR)

FREQUENCY_STAGE = "frequency"
MEAN_STAGE = "mean"


@dataclass(frozen=True)
class KVRecord:
    """A single key-value pair with key in 1..d (or a dummy slot above d)."""

    key: int
    value: float

    def __post_init__(self):
        if self.key < 1:
            raise ValueError(f"key must be >= 1, got {self.key}")
        if abs(self.value) > 1.0:
            raise ValueError(f"value must lie in [-1, 1], got {self.value}")


@dataclass(frozen=True)
class UserRecordSet:
    """One user's set of KV pairs; keys within the set are distinct."""

    user_id: int
    records: tuple[KVRecord, ...]

    def __post_init__(self):
        keys = [r.key for r in self.records]
        if len(keys) != len(set(keys)):
            raise ValueError(f"user {self.user_id} has duplicate keys")


@dataclass(frozen=True)
class Dictionary:
    """Key dictionary of d real keys padded with `padding` dummy slots."""

    d: int
    padding: int = 1

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"d must be >= 1, got {self.d}")
        if self.padding < 1:
            raise ValueError(f"padding must be >= 1, got {self.padding}")

    @property
    def d_prime(self) -> int:
        return self.d + self.padding


@dataclass(frozen=True)
class PrivacyParams:
    """Total budget epsilon with PrivKVM's split across rounds.

    epsilon1 = epsilon/2 funds the key perturbation of the first round and
    epsilon2 = epsilon/(2*n_iter) funds the value perturbation of each round,
    so epsilon1 + n_iter*epsilon2 = epsilon exactly.
    """

    epsilon: float
    n_iter: int = 1

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.n_iter < 1:
            raise ValueError(f"n_iter must be >= 1, got {self.n_iter}")

    @property
    def epsilon1(self) -> float:
        return self.epsilon / 2.0

    @property
    def epsilon2(self) -> float:
        return self.epsilon / (2.0 * self.n_iter)


@dataclass(frozen=True)
class PerturbParams:
    """Unified (a, b, p, padding) quadruple driving perturb and aggregate."""

    a: float
    b: float
    p: float
    padding: int = 1


@dataclass(frozen=True)
class TargetSet:
    """The r distinct keys an attacker promotes."""

    keys: tuple[int, ...]

    def __post_init__(self):
        if len(self.keys) < 1:
            raise ValueError("target set must contain at least one key")
        if len(set(self.keys)) != len(self.keys):
            raise ValueError("target keys must be distinct")
        if min(self.keys) < 1:
            raise ValueError("target keys must be >= 1")

    @property
    def r(self) -> int:
        return len(self.keys)


@dataclass
class PrivKVMMessages:
    """Batch of PrivKVM reports: a cleartext key index plus the perturbed
    possession bit kp and value vp. kp == 0 forces vp == 0."""

    key_index: np.ndarray
    kp: np.ndarray
    vp: np.ndarray

    def __len__(self) -> int:
        return len(self.key_index)

    def validate(self, dictionary: Dictionary) -> None:
        if not (len(self.key_index) == len(self.kp) == len(self.vp)):
            raise ValueError("message arrays must have equal length")
        if len(self.key_index) and (
            self.key_index.min() < 1 or self.key_index.max() > dictionary.d
        ):
            raise ValueError("key index outside 1..d")
        if not np.isin(self.kp, (0, 1)).all():
            raise ValueError("kp must be 0 or 1")
        if not np.isin(self.vp, (-1, 0, 1)).all():
            raise ValueError("vp must be -1, 0 or 1")
        if np.any((self.kp == 0) & (self.vp != 0)):
            raise ValueError("kp == 0 requires vp == 0")

    def subset(self, mask: np.ndarray) -> "PrivKVMMessages":
        return PrivKVMMessages(self.key_index[mask], self.kp[mask], self.vp[mask])


@dataclass
class UEVectors:
    """Batch of PCKV-UE reports: one length-d' vector over {-1, 0, 1} per user."""

    bits: np.ndarray  # shape (n_users, d_prime), int8

    def __len__(self) -> int:
        return self.bits.shape[0]

    def validate(self, dictionary: Dictionary) -> None:
        if self.bits.ndim != 2 or self.bits.shape[1] != dictionary.d_prime:
            raise ValueError(f"vectors must have length {dictionary.d_prime}")
        if not np.isin(self.bits, (-1, 0, 1)).all():
            raise ValueError("vector entries must be -1, 0 or 1")

    def subset(self, mask: np.ndarray) -> "UEVectors":
        return UEVectors(self.bits[mask])


@dataclass
class GRRPairs:
    """Batch of PCKV-GRR reports: a single perturbed pair per user."""

    key: np.ndarray
    value: np.ndarray

    def __len__(self) -> int:
        return len(self.key)

    def validate(self, dictionary: Dictionary) -> None:
        if len(self.key) != len(self.value):
            raise ValueError("message arrays must have equal length")
        if len(self.key) and (self.key.min() < 1 or self.key.max() > dictionary.d_prime):
            raise ValueError("key outside 1..d'")
        if not np.isin(self.value, (-1, 1)).all():
            raise ValueError("value must be -1 or 1")

    def subset(self, mask: np.ndarray) -> "GRRPairs":
        return GRRPairs(self.key[mask], self.value[mask])


Messages = PrivKVMMessages | UEVectors | GRRPairs


@dataclass
class SupportCounts:
    """Per-key support counts over the first d' (or d) keys.

    n_reported is PrivKVM-only: the number of users that reported the key's
    index at all, supporting or not.
    """

    n1: np.ndarray
    n_minus1: np.ndarray
    n_reported: np.ndarray | None = None


@dataclass
class EstimateTable:
    """Per-key estimates over the d real keys.

    n1_hat / n_minus1_hat are the debiased (and, when clipping is on,
    clipped) support estimates that fed m_hat; they are kept so downstream
    rankings can use the uncalibrated total score l*(n1_hat-n_minus1_hat)/n.
    """

    f_hat: np.ndarray
    m_hat: np.ndarray
    n1_hat: np.ndarray
    n_minus1_hat: np.ndarray
    n_users: int
    padding: int = 1
    freq_clipped: np.ndarray = field(default=None)  # type: ignore[assignment]
    support_clipped: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        d = len(self.f_hat)
        if self.freq_clipped is None:
            self.freq_clipped = np.zeros(d, dtype=bool)
        if self.support_clipped is None:
            self.support_clipped = np.zeros(d, dtype=bool)

    @property
    def d(self) -> int:
        return len(self.f_hat)

    def total_score(self) -> np.ndarray:
        """Uncalibrated popularity*rating score, l*(n1_hat - n_minus1_hat)/n."""
        return self.padding * (self.n1_hat - self.n_minus1_hat) / self.n_users


def derive_perturb_params(
    protocol: str,
    stage: str,
    privacy: PrivacyParams,
    dictionary: Dictionary,
) -> PerturbParams:
    """Derive the unified (a, b, p, padding) quadruple for a protocol stage.

    PCKV-UE and PCKV-GRR use one parameter set for both frequency and mean
    estimation; PrivKVM uses distinct sets for the two stages and the two
    must never be mixed.
    """
    if stage not in (FREQUENCY_STAGE, MEAN_STAGE):
        raise ValueError(f"unknown stage {stage!r}")
    if protocol == PRIVKVM:
        if stage == FREQUENCY_STAGE:
            e1 = math.exp(privacy.epsilon1)
            return PerturbParams(a=e1 / (e1 + 1), b=1 / (e1 + 1), p=e1 / (e1 + 1), padding=1)
        e2 = math.exp(privacy.epsilon2)
        return PerturbParams(a=1.0, b=0.0, p=e2 / (e2 + 1), padding=1)
    if protocol == PCKV_UE:
        e = math.exp(privacy.epsilon)
        return PerturbParams(
            a=0.5, b=2.0 / (e + 3.0), p=e / (e + 1.0), padding=dictionary.padding
        )
    if protocol == PCKV_GRR:
        if dictionary.d_prime < 2:
            raise ValueError("PCKV-GRR requires d' >= 2")
        le = dictionary.padding * (math.exp(privacy.epsilon) - 1.0)
        a = (le + 2.0) / (le + 2.0 * dictionary.d_prime)
        return PerturbParams(
            a=a,
            b=(1.0 - a) / (dictionary.d_prime - 1),
            p=(le + 1.0) / (le + 2.0),
            padding=dictionary.padding,
        )
    raise ValueError(f"unknown protocol {protocol!r}")


def discretize_values(values: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Discretize values in [-1, 1] to +/-1, returning 1 w.p. (1+v)/2.

    Unbiased: the expectation of the output equals the input value.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size and np.abs(values).max() > 1.0 + 1e-12:
        raise ValueError("values must lie in [-1, 1]")
    draws = rng.random(values.shape)
    return np.where(draws < (1.0 + values) / 2.0, 1, -1).astype(np.int8)


def make_rng(*path: int) -> np.random.Generator:
    """Deterministic generator for a seed path, stable across processes.

    Every stream in an experiment is derived from (base_seed, *components)
    so results do not depend on worker count or execution order.
    """
    return np.random.default_rng(np.random.SeedSequence(list(path)))
