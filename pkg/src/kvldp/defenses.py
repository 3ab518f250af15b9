"""Fake-user detection: a one-class isolation forest over per-user message
features, and cross-round key-repetition anomaly scores for PrivKVM, plus
re-aggregation over the surviving users.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    FREQUENCY_STAGE,
    MEAN_STAGE,
    PCKV_GRR,
    PCKV_UE,
    PRIVKVM,
    Dictionary,
    EstimateTable,
    GRRPairs,
    PerturbParams,
    PrivacyParams,
    PrivKVMMessages,
    UEVectors,
    derive_perturb_params,
)

EULER_GAMMA = 0.5772156649015329


@dataclass(frozen=True)
class ForestConfig:
    tree_count: int = 100
    subsample: int = 256

    @property
    def max_depth(self) -> int:
        return max(1, math.ceil(math.log2(self.subsample)))


def _c_factor(sizes: np.ndarray) -> np.ndarray:
    """Average unsuccessful-search path length of a BST with `sizes` points."""
    sizes = np.asarray(sizes, dtype=np.float64)
    out = np.zeros_like(sizes)
    big = sizes > 2
    out[big] = 2.0 * (np.log(sizes[big] - 1.0) + EULER_GAMMA) - 2.0 * (sizes[big] - 1.0) / sizes[big]
    out[sizes == 2] = 1.0
    return out


@dataclass
class _Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray
    is_leaf: np.ndarray


def _build_tree(x: np.ndarray, max_depth: int, rng: np.random.Generator) -> _Tree:
    feature, threshold, left, right, size, is_leaf = [], [], [], [], [], []

    def new_node() -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        size.append(0)
        is_leaf.append(True)
        return len(feature) - 1

    stack = [(new_node(), np.arange(len(x)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        size[node] = len(idx)
        if depth >= max_depth or len(idx) <= 1:
            continue
        sub = x[idx]
        lo, hi = sub.min(axis=0), sub.max(axis=0)
        splittable = np.flatnonzero(hi > lo)
        if splittable.size == 0:
            continue
        q = int(rng.choice(splittable))
        split = rng.uniform(lo[q], hi[q])
        mask = sub[:, q] < split
        if not mask.any() or mask.all():
            continue
        is_leaf[node] = False
        feature[node] = q
        threshold[node] = split
        left[node] = new_node()
        right[node] = new_node()
        stack.append((left[node], idx[mask], depth + 1))
        stack.append((right[node], idx[~mask], depth + 1))

    return _Tree(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        size=np.array(size, dtype=np.int64),
        is_leaf=np.array(is_leaf, dtype=bool),
    )


def _tree_path_lengths(tree: _Tree, x: np.ndarray) -> np.ndarray:
    n = len(x)
    node = np.zeros(n, dtype=np.int64)
    depth = np.zeros(n, dtype=np.float64)
    out = np.zeros(n, dtype=np.float64)
    active = np.arange(n)
    while active.size:
        nd = node[active]
        at_leaf = tree.is_leaf[nd]
        leaf_rows = active[at_leaf]
        if leaf_rows.size:
            out[leaf_rows] = depth[leaf_rows] + _c_factor(tree.size[nd[at_leaf]])
        active = active[~at_leaf]
        if active.size == 0:
            break
        nd = node[active]
        go_left = x[active, tree.feature[nd]] < tree.threshold[nd]
        node[active] = np.where(go_left, tree.left[nd], tree.right[nd])
        depth[active] += 1.0
    return out


@dataclass
class IsolationForest:
    """Ensemble of randomly partitioned trees; anomaly score of a row is
    2**(-E[path length]/c(subsample))."""

    config: ForestConfig = field(default_factory=ForestConfig)
    trees: list[_Tree] = field(default_factory=list)
    _norm: float = 1.0

    def fit(self, x: np.ndarray, rng: np.random.Generator) -> "IsolationForest":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or len(x) < 2:
            raise ValueError("need at least two feature rows")
        psi = min(self.config.subsample, len(x))
        self.trees = []
        for _ in range(self.config.tree_count):
            idx = rng.choice(len(x), size=psi, replace=False)
            self.trees.append(_build_tree(x[idx], self.config.max_depth, rng))
        self._norm = float(_c_factor(np.array([psi]))[0]) or 1.0
        return self

    def anomaly_scores(self, x: np.ndarray) -> np.ndarray:
        if not self.trees:
            raise ValueError("forest is not fitted")
        x = np.asarray(x, dtype=np.float64)
        paths = np.zeros(len(x), dtype=np.float64)
        for tree in self.trees:
            paths += _tree_path_lengths(tree, x)
        paths /= len(self.trees)
        return np.power(2.0, -paths / self._norm)


def isolation_forest_fit(
    rows: np.ndarray, config: ForestConfig, rng: np.random.Generator
) -> IsolationForest:
    return IsolationForest(config=config).fit(rows, rng)


def build_feature_rows(
    protocol: str,
    messages: list[PrivKVMMessages] | UEVectors | GRRPairs,
    dictionary: Dictionary,
) -> np.ndarray:
    """Per-user feature rows from the messages the server saw.

    PrivKVM rows concatenate every round's (key_index/d, kp, vp); the key
    index is normalized so it cannot dominate the random splits.
    """
    if protocol == PRIVKVM:
        if not isinstance(messages, list):
            raise ValueError("PrivKVM features need the per-round message list")
        cols = []
        for batch in messages:
            cols.extend(
                [batch.key_index / dictionary.d, batch.kp.astype(np.float64),
                 batch.vp.astype(np.float64)]
            )
        return np.column_stack(cols)
    if protocol == PCKV_UE:
        return messages.bits.astype(np.float64)
    if protocol == PCKV_GRR:
        return np.column_stack(
            [messages.key.astype(np.float64), messages.value.astype(np.float64)]
        )
    raise ValueError(f"unknown protocol {protocol!r}")


def oc_detect(
    scores: np.ndarray,
    known_genuine: np.ndarray,
    threshold: float = 0.5,
) -> np.ndarray:
    """Split users into two groups at the score threshold and flag the group
    holding fewer ground-truth genuine users.

    Returns a boolean detected mask. Ties in known-genuine counts keep the
    larger group genuine; an empty group means no split was found and
    nothing is flagged.
    """
    known_genuine = np.asarray(known_genuine)
    if known_genuine.size == 0:
        raise ValueError("need at least one known genuine user")
    high = scores >= threshold
    n_high, n_low = int(high.sum()), int((~high).sum())
    if n_high == 0 or n_low == 0:
        return np.zeros(len(scores), dtype=bool)
    known_high = int(high[known_genuine].sum())
    known_low = len(known_genuine) - known_high
    if known_high > known_low:
        genuine_is_high = True
    elif known_low > known_high:
        genuine_is_high = False
    else:
        genuine_is_high = n_high >= n_low
    return ~high if genuine_is_high else high


@dataclass
class AnomalyState:
    """Cross-round repetition counters for PrivKVM's anomaly-score defense.

    scores[u] is the maximum number of rounds in which user u reported the
    same key index so far; it is non-decreasing and bounded by the round
    count.
    """

    n_users: int
    d: int
    counts: np.ndarray = field(init=False)
    scores: np.ndarray = field(init=False)
    flagged: np.ndarray = field(init=False)

    def __post_init__(self):
        self.counts = np.zeros((self.n_users, self.d), dtype=np.int32)
        self.scores = np.zeros(self.n_users, dtype=np.int32)
        self.flagged = np.zeros(self.n_users, dtype=bool)

    def update(self, key_index: np.ndarray) -> None:
        rows = np.arange(self.n_users)
        cols = np.asarray(key_index) - 1
        self.counts[rows, cols] += 1
        self.scores = np.maximum(self.scores, self.counts[rows, cols])


def as_scores_update(state: AnomalyState, round_messages: PrivKVMMessages) -> AnomalyState:
    """Fold one round's reported key indices into the anomaly scores."""
    if len(round_messages) != state.n_users:
        raise ValueError("round message count does not match tracked users")
    state.update(round_messages.key_index)
    return state


def as_detect(state: AnomalyState, eta: int) -> np.ndarray:
    """Flag users whose anomaly score reached eta and were not yet flagged;
    returns the newly flagged mask and records it in the state."""
    if eta < 1:
        raise ValueError("eta must be >= 1")
    newly = (state.scores >= eta) & ~state.flagged
    state.flagged |= newly
    return newly


def reaggregate_excluding(
    protocol: str,
    messages: list[PrivKVMMessages] | UEVectors | GRRPairs,
    detected: np.ndarray,
    dictionary: Dictionary,
    privacy: PrivacyParams | None = None,
    params: PerturbParams | None = None,
    clip: bool = True,
) -> EstimateTable:
    """Re-run the protocol's Aggregate over the surviving users only, with n
    replaced by the survivor count.

    For PrivKVM the frequencies are re-estimated from the first round's
    surviving messages and the means from the final round's.
    """
    from .protocols import (
        pckv_aggregate,
        privkvm_aggregate_frequency,
        privkvm_aggregate_mean,
    )

    detected = np.asarray(detected, dtype=bool)
    survivors = ~detected
    n_survivors = int(survivors.sum())
    if n_survivors == 0:
        raise ValueError("every user was detected; nothing to aggregate")

    if protocol in (PCKV_UE, PCKV_GRR):
        if params is None:
            raise ValueError("PCKV re-aggregation needs perturbation parameters")
        return pckv_aggregate(messages.subset(survivors), n_survivors, params, dictionary, clip)

    if protocol != PRIVKVM:
        raise ValueError(f"unknown protocol {protocol!r}")
    if privacy is None or not isinstance(messages, list):
        raise ValueError("PrivKVM re-aggregation needs privacy params and round logs")
    freq_params = derive_perturb_params(PRIVKVM, FREQUENCY_STAGE, privacy, dictionary)
    mean_params = derive_perturb_params(PRIVKVM, MEAN_STAGE, privacy, dictionary)
    f_hat, freq_clipped = privkvm_aggregate_frequency(
        messages[0].subset(survivors), n_survivors, freq_params, clip=clip, d=dictionary.d
    )
    m_hat, n1_hat, nm1_hat, support_clipped = privkvm_aggregate_mean(
        messages[-1].subset(survivors), mean_params, dictionary.d, clip=clip
    )
    return EstimateTable(
        f_hat=f_hat,
        m_hat=m_hat,
        n1_hat=n1_hat,
        n_minus1_hat=nm1_hat,
        n_users=n_survivors,
        padding=1,
        freq_clipped=freq_clipped,
        support_clipped=support_clipped,
    )
