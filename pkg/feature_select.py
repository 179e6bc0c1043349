"""Gain-based boosted-tree importance, cumulative-importance cut, correlation pruning."""
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy.stats import pearsonr, rankdata

from app_config import FeatureSelectConfig
from errors import ConstantSeries, TooFewRows

logger = logging.getLogger(__name__)


class RegressionTree:
    """Depth-limited least-squares tree with exact greedy splits."""

    def __init__(self, max_depth: int, min_samples_leaf: int):
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.feature: List[int] = []
        self.threshold: List[float] = []
        self.left: List[int] = []
        self.right: List[int] = []
        self.value: List[float] = []

    def _new_node(self, value: float) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(value)
        return len(self.value) - 1

    def _best_split(self, X: np.ndarray, r: np.ndarray, rows: np.ndarray, order: Sequence[int]):
        n = len(rows)
        leaf = self.min_samples_leaf
        if n < 2 * leaf:
            return None
        residual = r[rows]
        total = residual.sum()
        parent = total * total / n
        tolerance = 1e-12 * max(float(np.dot(residual, residual)), 1e-300)
        best_gain, best = tolerance, None
        n_left = np.arange(1, n)
        size_ok = (n_left >= leaf) & (n - n_left >= leaf)
        for f in order:
            xs = X[rows, f]
            idx = np.argsort(xs, kind="stable")
            xs_sorted = xs[idx]
            left_sum = np.cumsum(residual[idx])[:-1]
            valid = size_ok & (xs_sorted[:-1] < xs_sorted[1:])
            if not valid.any():
                continue
            gains = left_sum ** 2 / n_left + (total - left_sum) ** 2 / (n - n_left) - parent
            gains = np.where(valid, gains, -np.inf)
            k = int(np.argmax(gains))
            # strict comparison keeps the earlier feature in canonical order on ties
            if gains[k] > best_gain:
                best_gain = float(gains[k])
                best = (f, 0.5 * (xs_sorted[k] + xs_sorted[k + 1]), rows[idx[: k + 1]], rows[idx[k + 1:]])
        if best is None:
            return None
        return best + (best_gain,)

    def fit(self, X: np.ndarray, r: np.ndarray, rows: np.ndarray, order: Sequence[int], gains: np.ndarray) -> "RegressionTree":
        """Grow on the given rows; split gains are added into ``gains`` per feature."""
        stack = [(self._new_node(float(r[rows].mean())), rows, 0)]
        while stack:
            node, node_rows, depth = stack.pop()
            if depth >= self.max_depth:
                continue
            split = self._best_split(X, r, node_rows, order)
            if split is None:
                continue
            f, threshold, left_rows, right_rows, gain = split
            gains[f] += gain
            self.feature[node] = f
            self.threshold[node] = float(threshold)
            self.left[node] = self._new_node(float(r[left_rows].mean()))
            self.right[node] = self._new_node(float(r[right_rows].mean()))
            stack.append((self.right[node], right_rows, depth + 1))
            stack.append((self.left[node], left_rows, depth + 1))
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        feature = np.array(self.feature)
        threshold = np.array(self.threshold)
        left, right = np.array(self.left), np.array(self.right)
        node = np.zeros(len(X), dtype=int)
        for _ in range(self.max_depth):
            f = feature[node]
            internal = f >= 0
            if not internal.any():
                break
            rows = np.flatnonzero(internal)
            go_left = X[rows, f[rows]] <= threshold[node[rows]]
            node[rows] = np.where(go_left, left[node[rows]], right[node[rows]])
        return np.array(self.value)[node]


class GradientBoostedTrees:
    """Squared-error residual boosting; importance = accumulated split gain."""

    def __init__(self, trees: int = 100, max_depth: int = 4, learning_rate: float = 0.1,
                 min_samples_leaf: int = 5, subsample: float = 1.0, seed: int = 0):
        self.trees = trees
        self.max_depth = max_depth
        self.learning_rate = learning_rate
        self.min_samples_leaf = min_samples_leaf
        self.subsample = subsample
        self.seed = seed
        self.base_value = 0.0
        self.estimators: List[RegressionTree] = []
        self.gains: Optional[np.ndarray] = None

    def fit(self, X: np.ndarray, y: np.ndarray, order: Optional[Sequence[int]] = None) -> "GradientBoostedTrees":
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        order = list(order) if order is not None else list(range(X.shape[1]))
        rng = np.random.default_rng(self.seed)
        self.gains = np.zeros(X.shape[1])
        self.base_value = float(y.mean())
        prediction = np.full(len(y), self.base_value)
        all_rows = np.arange(len(y))
        for _ in range(self.trees):
            residual = y - prediction
            rows = all_rows
            if self.subsample < 1.0:
                size = max(2 * self.min_samples_leaf, int(round(self.subsample * len(y))))
                rows = np.sort(rng.choice(all_rows, size=min(size, len(y)), replace=False))
            tree = RegressionTree(self.max_depth, self.min_samples_leaf).fit(X, residual, rows, order, self.gains)
            self.estimators.append(tree)
            prediction += self.learning_rate * tree.predict(X)
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        out = np.full(len(X), self.base_value)
        for tree in self.estimators:
            out += self.learning_rate * tree.predict(X)
        return out


def fit_gbt_importance(X: pd.DataFrame, y: Sequence[float], config: FeatureSelectConfig,
                       seed: int = 0) -> Tuple[Dict[str, float], bool]:
    """
    Gain importance per feature, normalized to sum 1.

    Returns:
        (importance map, constant_target flag); a constant target yields all zeros
    """
    names = [str(c) for c in X.columns]
    values = X.to_numpy(dtype=float)
    y = np.asarray(y, dtype=float)
    if len(y) < 2:
        raise TooFewRows(f"boosted-tree importance needs at least 2 rows, got {len(y)}")
    if np.ptp(y) == 0.0:
        logger.warning("ConstantTarget: target has no variance, all importances are 0")
        return {name: 0.0 for name in names}, True
    order = sorted(range(len(names)), key=lambda i: names[i])
    model = GradientBoostedTrees(config.trees, config.max_depth, config.learning_rate,
                                 config.min_samples_leaf, config.subsample, seed).fit(values, y, order)
    total = model.gains.sum()
    if total <= 0.0:
        logger.warning("No split reduced the squared error; all importances are 0")
        return {name: 0.0 for name in names}, False
    return {name: float(g / total) for name, g in zip(names, model.gains)}, False


def rank_features(importance: Dict[str, float]) -> List[str]:
    return sorted(importance, key=lambda name: (-importance[name], name))


def select_by_cumulative(importance: Dict[str, float], cumulative_threshold: float) -> List[str]:
    """Shortest importance-ranked prefix whose mass reaches the threshold."""
    if not 0.0 < cumulative_threshold <= 1.0:
        raise ValueError("cumulative_threshold must be in (0, 1]")
    ranked = [name for name in rank_features(importance) if importance[name] > 0.0]
    if not ranked:
        logger.warning("All importance scores are zero; no feature selected")
        return []
    kept, mass = [], 0.0
    for name in ranked:
        kept.append(name)
        mass += importance[name]
        if mass >= cumulative_threshold - 1e-9:
            break
    return kept


def pearson_r(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("pearson_r needs two 1-D series of equal length >= 2")
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        raise ConstantSeries("correlation of a constant series is undefined")
    statistic, _ = pearsonr(x, y)
    return float(np.clip(statistic, -1.0, 1.0))


def spearman_r(x: Sequence[float], y: Sequence[float]) -> float:
    return pearson_r(rankdata(x), rankdata(y))


def correlation(x: Sequence[float], y: Sequence[float], method: str = "pearson") -> float:
    return spearman_r(x, y) if method == "spearman" else pearson_r(x, y)


def prune_redundant(kept: Sequence[str], X: pd.DataFrame, corr_threshold: float,
                    method: str = "pearson") -> Tuple[List[str], List[Tuple[str, str, float]]]:
    """
    Drop the lower-ranked feature of every pair with |r| >= corr_threshold.

    Args:
        kept: features ordered by importance, most important first

    Returns:
        (surviving features, [(dropped, kept_partner, r), ...])
    """
    survivors: List[str] = []
    dropped: List[Tuple[str, str, float]] = []
    for name in kept:
        partner = None
        for other in survivors:
            try:
                r = correlation(X[other].to_numpy(), X[name].to_numpy(), method)
            except ConstantSeries:
                continue
            if abs(r) >= corr_threshold:
                partner = (other, r)
                break
        if partner is None:
            survivors.append(name)
        else:
            dropped.append((name, partner[0], partner[1]))
            logger.info(f"Dropped {name}: |r|={abs(partner[1]):.4f} with {partner[0]}")
    return survivors, dropped


class FeatureReport(BaseModel):
    importance: Dict[str, float]
    cumulative_threshold: float
    kept_after_importance: List[str]
    corr_threshold: float
    correlation_method: str = "pearson"
    dropped_redundant: List[Tuple[str, str, float]] = Field(default_factory=list)
    final_features: List[str] = Field(default_factory=list)
    target: str = ""
    constant_target: bool = False

    @property
    def model_inputs(self) -> List[str]:
        """Selected features plus the target, which always feeds the encoder."""
        return self.final_features + ([self.target] if self.target and self.target not in self.final_features else [])

    @property
    def target_index(self) -> int:
        return self.model_inputs.index(self.target)

    def ranked_table(self) -> str:
        lines = [f"{'rank':>4}  {'feature':<24} {'importance':>10}  status"]
        final = set(self.final_features)
        redundant = {d[0]: d[1] for d in self.dropped_redundant}
        for i, name in enumerate(rank_features(self.importance), start=1):
            if name in final:
                status = "kept"
            elif name in redundant:
                status = f"redundant with {redundant[name]}"
            else:
                status = "below cumulative cut"
            lines.append(f"{i:>4}  {name:<24} {self.importance[name]:>10.4f}  {status}")
        return "\n".join(lines)


def select_features(frame: pd.DataFrame, target: str, config: FeatureSelectConfig, seed: int = 0) -> FeatureReport:
    """Run importance ranking, the cumulative cut and redundancy pruning on training rows."""
    candidates = frame.drop(columns=[target])
    y = frame[target].to_numpy(dtype=float)
    if config.max_rows is not None and len(frame) > config.max_rows:
        rows = np.unique(np.linspace(0, len(frame) - 1, config.max_rows).round().astype(int))
        candidates, y = candidates.iloc[rows], y[rows]
    importance, constant_target = fit_gbt_importance(candidates, y, config, seed)
    kept = select_by_cumulative(importance, config.cumulative_threshold)
    final, dropped = prune_redundant(kept, candidates, config.corr_threshold, config.correlation_method)
    logger.info(f"Feature selection: {len(importance)} candidates, {len(kept)} after importance, {len(final)} final")
    return FeatureReport(
        importance=importance,
        cumulative_threshold=config.cumulative_threshold,
        kept_after_importance=kept,
        corr_threshold=config.corr_threshold,
        correlation_method=config.correlation_method,
        dropped_redundant=dropped,
        final_features=final,
        target=target,
        constant_target=constant_target,
    )
