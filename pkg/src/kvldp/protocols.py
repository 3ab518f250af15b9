"""Sample / Perturb / Aggregate implementations of PrivKVM, PCKV-UE and
PCKV-GRR, plus an exhaustive checker of the epsilon-LDP guarantee.

All per-user steps are vectorized over numpy arrays and consume a fixed
number of random draws per user per round, so two runs fed identical
generators stay aligned draw-for-draw (the basis of the paired-seed
experiment design).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .core import (
    FREQUENCY_STAGE,
    MEAN_STAGE,
    PCKV_GRR,
    PRIVKVM,
    Dictionary,
    EstimateTable,
    GRRPairs,
    PerturbParams,
    PrivacyParams,
    PrivKVMMessages,
    SupportCounts,
    UEVectors,
    derive_perturb_params,
    discretize_values,
)
from .data import Dataset

# ---------------------------------------------------------------------------
# PrivKVM
# ---------------------------------------------------------------------------


def privkvm_sample(
    dataset: Dataset,
    virtual_means: np.ndarray,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample one dictionary key per user and discretize its value.

    Non-possessing users substitute the server's current virtual mean for
    the sampled key (all zeros in round 1).
    """
    keys = rng.integers(1, dataset.d + 1, size=dataset.n)
    possessed, values = dataset.lookup(keys)
    v = np.where(possessed, values, virtual_means[keys - 1])
    v_star = discretize_values(v, rng)
    return keys, v_star, possessed


def privkvm_perturb(
    keys: np.ndarray,
    v_star: np.ndarray,
    possessed: np.ndarray,
    privacy: PrivacyParams,
    rng: np.random.Generator,
) -> PrivKVMMessages:
    """Flip the value with budget epsilon2, then randomize the possession
    bit with budget epsilon1; the key index is sent in the clear."""
    e1 = math.exp(privacy.epsilon1)
    e2 = math.exp(privacy.epsilon2)
    p_keep_value = e2 / (1.0 + e2)
    p_keep_flag = e1 / (1.0 + e1)

    flip = rng.random(len(keys)) >= p_keep_value
    v_prime = np.where(flip, -v_star, v_star).astype(np.int8)

    u = rng.random(len(keys))
    kp = np.where(possessed, u < p_keep_flag, u < 1.0 - p_keep_flag).astype(np.int8)
    vp = (v_prime * kp).astype(np.int8)
    return PrivKVMMessages(key_index=np.asarray(keys, dtype=np.int64), kp=kp, vp=vp)


def privkvm_frequency_counts(messages: PrivKVMMessages, d: int) -> SupportCounts:
    """Support counts per key: reporters of <1,1>, <1,-1>, and of the index."""
    supporting = messages.kp == 1
    keys = messages.key_index
    n1 = np.bincount(keys[supporting & (messages.vp == 1)], minlength=d + 1)[1:]
    n_minus1 = np.bincount(keys[supporting & (messages.vp == -1)], minlength=d + 1)[1:]
    n_reported = np.bincount(keys, minlength=d + 1)[1:]
    return SupportCounts(n1=n1, n_minus1=n_minus1, n_reported=n_reported)


def privkvm_aggregate_frequency(
    messages: PrivKVMMessages,
    n_users: int,
    params: PerturbParams,
    clip: bool = True,
    d: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Frequency estimate f_hat = (p - 1 + n_k/n)/(2p - 1) with p = a.

    The supporting fraction n_k/n is taken within the stratum of users that
    reported key k's index: the index draw is data-independent, so that
    stratum is a uniform subsample and the estimator stays unbiased for any
    dictionary size. Keys nobody sampled get a fraction of 0.

    Returns (f_hat, clipped_flags); f_hat is clipped to [1/n, 1] when
    clip is True.
    """
    if len(messages) == 0:
        raise ValueError("cannot aggregate an empty message set")
    if d is None:
        d = int(messages.key_index.max())
    counts = privkvm_frequency_counts(messages, d)
    supporting = counts.n1 + counts.n_minus1
    reported = counts.n_reported
    ratio = np.divide(
        supporting, reported, out=np.zeros(d, dtype=np.float64), where=reported > 0
    )
    p = params.a
    f_hat = (p - 1.0 + ratio) / (2.0 * p - 1.0)
    clipped = np.zeros(d, dtype=bool)
    if clip:
        lo, hi = 1.0 / n_users, 1.0
        clipped = (f_hat < lo) | (f_hat > hi)
        f_hat = np.clip(f_hat, lo, hi)
    return f_hat, clipped


def privkvm_aggregate_mean(
    messages: PrivKVMMessages,
    params: PerturbParams,
    d: int,
    clip: bool = True,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Mean estimate per key from the round's <1,+/-1> support counts.

    n1_hat = ((p-1)*n_k + n1)/(2p - 1) and symmetrically for n_minus1_hat,
    clipped into [0, n_k]; m_hat = (n1_hat - n_minus1_hat)/n_k, defined as 0
    for keys with n_k = 0.

    Returns (m_hat, n1_hat, n_minus1_hat, support_clipped).
    """
    counts = privkvm_frequency_counts(messages, d)
    n_k = (counts.n1 + counts.n_minus1).astype(np.float64)
    p = params.p
    denom = 2.0 * p - 1.0
    n1_hat = ((p - 1.0) * n_k + counts.n1) / denom
    nm1_hat = ((p - 1.0) * n_k + counts.n_minus1) / denom
    support_clipped = np.zeros(d, dtype=bool)
    if clip:
        support_clipped = (n1_hat < 0) | (n1_hat > n_k) | (nm1_hat < 0) | (nm1_hat > n_k)
        n1_hat = np.clip(n1_hat, 0.0, n_k)
        nm1_hat = np.clip(nm1_hat, 0.0, n_k)
    m_hat = np.divide(
        n1_hat - nm1_hat, n_k, out=np.zeros(d, dtype=np.float64), where=n_k > 0
    )
    return m_hat, n1_hat, nm1_hat, support_clipped


@dataclass
class PrivKVMRunResult:
    table: EstimateTable
    rounds: list[PrivKVMMessages] | None = None
    detected: np.ndarray | None = None  # bool over all users, AS defense only
    n_included: int | None = None


def privkvm_run(
    dataset: Dataset,
    privacy: PrivacyParams,
    rng: np.random.Generator,
    adversary_rounds: list[PrivKVMMessages] | None = None,
    clip: bool = True,
    anomaly_eta: int | None = None,
    collect: bool = False,
) -> PrivKVMRunResult:
    """Run N_iter rounds of PrivKVM over the genuine users, injecting the
    given fake messages each round.

    Every genuine user resamples a fresh key each round; non-possessed keys
    report the previous round's estimated mean (clamped into [-1, 1]).
    Frequencies come from round 1, means from the final round.

    With anomaly_eta set, the anomaly-score defense runs online: users whose
    max repeated-key count reaches eta are dropped from the mean aggregation
    of subsequent rounds, and the returned frequencies are re-estimated from
    round 1 without any user in the final detected set.
    """
    from .defenses import AnomalyState, as_detect  # local import to avoid a cycle

    if adversary_rounds is not None and len(adversary_rounds) < privacy.n_iter:
        raise ValueError("need one fake message batch per round")
    d = dataset.d
    n_total = dataset.n + (len(adversary_rounds[0]) if adversary_rounds else 0)
    freq_params = derive_perturb_params(PRIVKVM, FREQUENCY_STAGE, privacy, Dictionary(d))
    mean_params = derive_perturb_params(PRIVKVM, MEAN_STAGE, privacy, Dictionary(d))

    state = AnomalyState(n_users=n_total, d=d) if anomaly_eta is not None else None
    excluded = np.zeros(n_total, dtype=bool)

    virtual_means = np.zeros(d, dtype=np.float64)
    round_log: list[PrivKVMMessages] = []
    first_round: PrivKVMMessages | None = None
    mean_result = None

    for round_index in range(1, privacy.n_iter + 1):
        keys, v_star, possessed = privkvm_sample(dataset, virtual_means, rng)
        genuine = privkvm_perturb(keys, v_star, possessed, privacy, rng)
        if adversary_rounds is not None:
            fake = adversary_rounds[round_index - 1]
            msgs = PrivKVMMessages(
                key_index=np.concatenate([genuine.key_index, fake.key_index]),
                kp=np.concatenate([genuine.kp, fake.kp]),
                vp=np.concatenate([genuine.vp, fake.vp]),
            )
        else:
            msgs = genuine

        if round_index == 1:
            first_round = msgs
        if collect:
            round_log.append(msgs)

        included = msgs.subset(~excluded) if excluded.any() else msgs
        mean_result = privkvm_aggregate_mean(included, mean_params, d, clip=clip)
        virtual_means = np.clip(mean_result[0], -1.0, 1.0)

        if state is not None:
            state.update(msgs.key_index)
            as_detect(state, anomaly_eta)
            excluded = state.flagged.copy()

    assert first_round is not None and mean_result is not None
    survivors = ~excluded
    n_included = int(survivors.sum())
    if state is not None and n_included == 0:
        raise ValueError("anomaly-score defense flagged every user")
    freq_messages = first_round.subset(survivors) if excluded.any() else first_round
    f_hat, freq_clipped = privkvm_aggregate_frequency(
        freq_messages, n_included, freq_params, clip=clip, d=d
    )

    m_hat, n1_hat, nm1_hat, support_clipped = mean_result
    table = EstimateTable(
        f_hat=f_hat,
        m_hat=m_hat,
        n1_hat=n1_hat,
        n_minus1_hat=nm1_hat,
        n_users=n_included,
        padding=1,
        freq_clipped=freq_clipped,
        support_clipped=support_clipped,
    )
    return PrivKVMRunResult(
        table=table,
        rounds=round_log if collect else None,
        detected=excluded if state is not None else None,
        n_included=n_included,
    )


# ---------------------------------------------------------------------------
# PCKV (shared Sample, UE / GRR Perturb, shared Aggregate)
# ---------------------------------------------------------------------------


def pckv_sample(
    dataset: Dataset,
    dictionary: Dictionary,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Pad each user's set to the padding length with dummy pairs <d+j, 0>,
    draw one pair uniformly from the padded set, and discretize its value."""
    counts = dataset.record_counts()
    sizes = np.maximum(counts, dictionary.padding)
    draw = (rng.random(dataset.n) * sizes).astype(np.int64)
    draw = np.minimum(draw, sizes - 1)
    owned = draw < counts
    if dataset.n_records:
        # keep indices in bounds for the rows np.where discards
        flat_idx = np.minimum(
            dataset.offsets[:-1] + np.where(owned, draw, 0), dataset.n_records - 1
        )
        owned_keys = dataset.keys[flat_idx]
        owned_values = dataset.values[flat_idx]
    else:
        owned_keys = np.zeros(dataset.n, dtype=np.int64)
        owned_values = np.zeros(dataset.n)
    keys = np.where(owned, owned_keys, dataset.d + (draw - counts) + 1)
    values = np.where(owned, owned_values, 0.0)
    v_star = discretize_values(values, rng)
    return keys.astype(np.int64), v_star


def pckv_ue_perturb(
    keys: np.ndarray,
    v_star: np.ndarray,
    params: PerturbParams,
    dictionary: Dictionary,
    rng: np.random.Generator,
) -> UEVectors:
    """Unary encoding: the sampled position carries v* w.p. a*p, -v* w.p.
    a*(1-p) and 0 otherwise; every other position is +/-1 w.p. b/2 each."""
    n = len(keys)
    d_prime = dictionary.d_prime
    u = rng.random((n, d_prime))
    bits = np.zeros((n, d_prime), dtype=np.int8)
    bits[u < params.b / 2.0] = 1
    bits[(u >= params.b / 2.0) & (u < params.b)] = -1

    u_k = rng.random(n)
    rows = np.arange(n)
    cols = np.asarray(keys) - 1
    target = np.zeros(n, dtype=np.int8)
    target[u_k < params.a * params.p] = 1
    target[(u_k >= params.a * params.p) & (u_k < params.a)] = -1
    bits[rows, cols] = target * v_star
    return UEVectors(bits=bits)


def pckv_grr_perturb(
    keys: np.ndarray,
    v_star: np.ndarray,
    params: PerturbParams,
    dictionary: Dictionary,
    rng: np.random.Generator,
) -> GRRPairs:
    """Generalized random response over pairs: keep <k, v*> w.p. a*p, flip
    the value w.p. a*(1-p), otherwise emit a uniform other key with a
    uniform sign (mass b/2 per pair)."""
    if dictionary.d_prime < 2:
        raise ValueError("PCKV-GRR requires d' >= 2")
    n = len(keys)
    u = rng.random(n)
    keep = u < params.a * params.p
    flip = (u >= params.a * params.p) & (u < params.a)

    other_draw = rng.integers(0, dictionary.d_prime - 1, size=n)
    other_keys = other_draw + 1 + (other_draw + 1 >= keys)
    other_values = (rng.integers(0, 2, size=n) * 2 - 1).astype(np.int8)

    out_keys = np.where(keep | flip, keys, other_keys).astype(np.int64)
    out_values = np.where(
        keep, v_star, np.where(flip, -v_star, other_values)
    ).astype(np.int8)
    return GRRPairs(key=out_keys, value=out_values)


def pckv_support_counts(
    messages: UEVectors | GRRPairs, dictionary: Dictionary
) -> SupportCounts:
    """Per-key <k,1> / <k,-1> support counts over all d' keys.

    UE vectors support every key independently; a GRR pair supports exactly
    the reported pair.
    """
    d_prime = dictionary.d_prime
    if isinstance(messages, UEVectors):
        n1 = (messages.bits == 1).sum(axis=0)
        n_minus1 = (messages.bits == -1).sum(axis=0)
    else:
        n1 = np.bincount(messages.key[messages.value == 1], minlength=d_prime + 1)[1:]
        n_minus1 = np.bincount(messages.key[messages.value == -1], minlength=d_prime + 1)[1:]
    return SupportCounts(n1=np.asarray(n1), n_minus1=np.asarray(n_minus1))


def pckv_aggregate(
    messages: UEVectors | GRRPairs,
    n_users: int,
    params: PerturbParams,
    dictionary: Dictionary,
    clip: bool = True,
) -> EstimateTable:
    """Frequency and mean estimation shared by PCKV-UE and PCKV-GRR.

    f_hat = ((n1 + n_minus1)/n - b)/(a - b) * l, clipped to [1/n, 1];
    support counts are debiased through the 2x2 perturbation matrix and
    clipped to [0, n*f_hat/l] before m_hat = l*(n1_hat - n_minus1_hat)/(n*f_hat).
    """
    if len(messages) == 0:
        raise ValueError("cannot aggregate an empty message set")
    counts = pckv_support_counts(messages, dictionary)
    d = dictionary.d
    ell = params.padding
    n1 = counts.n1[:d].astype(np.float64)
    nm1 = counts.n_minus1[:d].astype(np.float64)

    f_hat = ((n1 + nm1) / n_users - params.b) / (params.a - params.b) * ell
    freq_clipped = np.zeros(d, dtype=bool)
    if clip:
        lo, hi = 1.0 / n_users, 1.0
        freq_clipped = (f_hat < lo) | (f_hat > hi)
        f_hat = np.clip(f_hat, lo, hi)

    alpha = params.a * params.p - params.b / 2.0
    beta = params.a * (1.0 - params.p) - params.b / 2.0
    det = alpha * alpha - beta * beta
    if abs(det) < 1e-15:
        raise ValueError("singular perturbation matrix (requires p != 1/2)")
    x1 = n1 - n_users * params.b / 2.0
    x2 = nm1 - n_users * params.b / 2.0
    n1_hat = (alpha * x1 - beta * x2) / det
    nm1_hat = (alpha * x2 - beta * x1) / det

    support_clipped = np.zeros(d, dtype=bool)
    if clip:
        cap = n_users * f_hat / ell
        support_clipped = (n1_hat < 0) | (n1_hat > cap) | (nm1_hat < 0) | (nm1_hat > cap)
        n1_hat = np.clip(n1_hat, 0.0, cap)
        nm1_hat = np.clip(nm1_hat, 0.0, cap)

    with np.errstate(divide="ignore", invalid="ignore"):
        m_hat = np.where(
            f_hat != 0.0, ell * (n1_hat - nm1_hat) / (n_users * f_hat), 0.0
        )
    return EstimateTable(
        f_hat=f_hat,
        m_hat=m_hat,
        n1_hat=n1_hat,
        n_minus1_hat=nm1_hat,
        n_users=n_users,
        padding=ell,
        freq_clipped=freq_clipped,
        support_clipped=support_clipped,
    )


# ---------------------------------------------------------------------------
# Executable epsilon-LDP check
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LdpCheck:
    protocol: str
    epsilon: float
    d_prime: int
    max_ratio: float
    bound: float
    tolerance: float
    passed: bool


def _enumerate_input_sets(d: int):
    """All record sets over keys 1..d with values in {-1, +1} (absent/+1/-1)."""
    for assignment in itertools.product((0, 1, -1), repeat=d):
        yield [(k + 1, v) for k, v in enumerate(assignment) if v != 0]


def _grr_output_distribution(record_set, dictionary: Dictionary, params: PerturbParams):
    """Exact distribution over (key, value) messages for one input set."""
    d_prime = dictionary.d_prime
    dist = np.zeros((d_prime, 2))  # columns: value -1, value +1
    size = max(len(record_set), dictionary.padding)
    pairs = [(k, [v]) for k, v in record_set]
    for j in range(dictionary.padding - len(record_set)):
        pairs.append((dictionary.d + j + 1, [-1, 1]))  # dummy value 0 discretizes evenly
    for key, v_options in pairs:
        for v_star in v_options:
            w = (1.0 / size) * (1.0 / len(v_options))
            dist[key - 1, (v_star + 1) // 2] += w * params.a * params.p
            dist[key - 1, (-v_star + 1) // 2] += w * params.a * (1.0 - params.p)
            for other in range(d_prime):
                if other != key - 1:
                    dist[other, 0] += w * params.b / 2.0
                    dist[other, 1] += w * params.b / 2.0
    return dist.ravel()


def _ue_output_distribution(record_set, dictionary: Dictionary, params: PerturbParams):
    """Exact distribution over full UE vectors for one input set."""
    d_prime = dictionary.d_prime
    outputs = list(itertools.product((-1, 0, 1), repeat=d_prime))
    dist = np.zeros(len(outputs))
    size = max(len(record_set), dictionary.padding)
    pairs = [(k, [v]) for k, v in record_set]
    for j in range(dictionary.padding - len(record_set)):
        pairs.append((dictionary.d + j + 1, [-1, 1]))
    coord_other = {-1: params.b / 2.0, 0: 1.0 - params.b, 1: params.b / 2.0}
    for key, v_options in pairs:
        for v_star in v_options:
            w = (1.0 / size) * (1.0 / len(v_options))
            coord_target = {
                v_star: params.a * params.p,
                -v_star: params.a * (1.0 - params.p),
                0: 1.0 - params.a,
            }
            for idx, vec in enumerate(outputs):
                prob = 1.0
                for coord, bit in enumerate(vec):
                    prob *= coord_target[bit] if coord == key - 1 else coord_other[bit]
                dist[idx] += w * prob
    return dist


def _privkvm_output_distributions(privacy: PrivacyParams):
    """Per-round message distributions over (<0,0>, <1,1>, <1,-1>) for the
    four (possessed, v*) inputs; the cleartext index is input-independent."""
    e1, e2 = math.exp(privacy.epsilon1), math.exp(privacy.epsilon2)
    p1, p2 = e1 / (1 + e1), e2 / (1 + e2)
    dists = []
    for possessed in (True, False):
        keep = p1 if possessed else 1 - p1
        for v_star in (1, -1):
            p_vp = {1: p2 if v_star == 1 else 1 - p2, -1: 1 - p2 if v_star == 1 else p2}
            dists.append(np.array([1 - keep, keep * p_vp[1], keep * p_vp[-1]]))
    return dists


def verify_ldp_guarantee(
    protocol: str,
    epsilon: float,
    dictionary: Dictionary,
    tolerance: float = 1e-9,
    n_iter: int = 1,
) -> LdpCheck:
    """Exhaustively verify the epsilon-LDP bound on a small domain.

    For PCKV the inputs are whole record sets pushed through Sample and
    Perturb (padding included), so the check covers the sampling
    amplification that the GRR calibration relies on. For PrivKVM the
    per-round mechanism is checked against exp(epsilon1 + epsilon2).
    """
    if dictionary.d_prime > 6:
        raise ValueError("exhaustive check requires d' <= 6")
    privacy = PrivacyParams(epsilon=epsilon, n_iter=n_iter)
    if protocol == PRIVKVM:
        dists = _privkvm_output_distributions(privacy)
        bound = math.exp(privacy.epsilon1 + privacy.epsilon2)
    else:
        stage_params = derive_perturb_params(protocol, FREQUENCY_STAGE, privacy, dictionary)
        enumerate_dist = (
            _grr_output_distribution if protocol == PCKV_GRR else _ue_output_distribution
        )
        dists = [
            enumerate_dist(s, dictionary, stage_params)
            for s in _enumerate_input_sets(dictionary.d)
        ]
        bound = math.exp(epsilon)

    max_ratio = 1.0
    for da, db in itertools.permutations(dists, 2):
        positive = db > 0
        if np.any(da[~positive] > 0):
            max_ratio = math.inf
            break
        max_ratio = max(max_ratio, float(np.max(da[positive] / db[positive])))
    return LdpCheck(
        protocol=protocol,
        epsilon=epsilon,
        d_prime=dictionary.d_prime,
        max_ratio=max_ratio,
        bound=bound,
        tolerance=tolerance,
        passed=max_ratio <= bound + tolerance,
    )
