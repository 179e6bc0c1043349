"""
Architecture and hyperparameter search over ModelSpec.

Random search is the baseline; Bayesian optimization fits a Gaussian-process
surrogate with a squared-exponential kernel on the unit-cube encoding of the
search space and picks the next candidate by expected improvement over a
seeded candidate pool.
"""
import hashlib
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.stats import norm

from app_config import SearchConfig, SearchSpaceConfig
from errors import InvalidSearchConfig, SingularKernel, ZeroBudget
from neural_core import ModelSpec, NetworkWeights, TrainHyperparams, TrainingData, evaluate_mae, train

if TYPE_CHECKING:
    from eval_report import WindowedSet

logger = logging.getLogger(__name__)

Objective = Callable[[Dict[str, Any], int], float]

LENGTH_SCALE_GRID = (0.05, 0.1, 0.2, 0.3, 0.5, 0.8, 1.2, 2.0)
JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)


@dataclass(frozen=True)
class Real:
    name: str
    low: float
    high: float
    log: bool = False

    def decode(self, u: float) -> float:
        u = min(max(u, 0.0), 1.0)
        if self.log:
            return float(np.exp(np.log(self.low) + u * (np.log(self.high) - np.log(self.low))))
        return float(self.low + u * (self.high - self.low))

    def encode(self, value: float) -> float:
        if self.high == self.low:
            return 0.0
        if self.log:
            return float((np.log(value) - np.log(self.low)) / (np.log(self.high) - np.log(self.low)))
        return float((value - self.low) / (self.high - self.low))


@dataclass(frozen=True)
class Integer:
    """Integer range as a scaled integer in [0, 1]; rounded on decode."""
    name: str
    low: int
    high: int

    def decode(self, u: float) -> int:
        u = min(max(u, 0.0), 1.0)
        return int(np.clip(np.round(self.low + u * (self.high - self.low)), self.low, self.high))

    def encode(self, value: int) -> float:
        return 0.0 if self.high == self.low else (value - self.low) / (self.high - self.low)


@dataclass(frozen=True)
class Choice:
    """Ordered options, encoded like an Integer over their indices."""
    name: str
    options: Tuple[Any, ...]

    def decode(self, u: float) -> Any:
        last = len(self.options) - 1
        index = int(np.clip(np.round(min(max(u, 0.0), 1.0) * last), 0, last))
        return self.options[index]

    def encode(self, value: Any) -> float:
        last = len(self.options) - 1
        return 0.0 if last == 0 else self.options.index(value) / last


Dimension = Union[Real, Integer, Choice]


class SearchSpace:
    """Named dimensions with a unit-cube encoding."""

    def __init__(self, dimensions: Sequence[Dimension]):
        if not dimensions:
            raise InvalidSearchConfig("search space has no dimensions")
        self.dimensions = list(dimensions)

    @classmethod
    def from_config(cls, config: SearchSpaceConfig) -> "SearchSpace":
        return cls([
            Integer("encoder_layers", *config.encoder_layers),
            Integer("decoder_layers", *config.decoder_layers),
            Choice("lstm_units", tuple(config.lstm_units)),
            Integer("dense_layers", *config.dense_layers),
            Choice("dense_units", tuple(config.dense_units)),
            Real("learning_rate", *config.learning_rate, log=True),
            Real("dropout", *config.dropout),
        ])

    @property
    def names(self) -> List[str]:
        return [d.name for d in self.dimensions]

    def __len__(self) -> int:
        return len(self.dimensions)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.random((n, len(self.dimensions)))

    def decode(self, u: Sequence[float]) -> Dict[str, Any]:
        return {d.name: d.decode(float(x)) for d, x in zip(self.dimensions, u)}

    def encode(self, point: Dict[str, Any]) -> np.ndarray:
        return np.array([d.encode(point[d.name]) for d in self.dimensions], dtype=float)

    def canonical(self, u: Sequence[float]) -> np.ndarray:
        """Snap a unit vector onto the grid of its discrete dimensions."""
        return self.encode(self.decode(u))


def derive_seed(seed: int, index: int) -> int:
    """Per-candidate seed; independent of evaluation order or worker count."""
    digest = hashlib.sha256(f"{seed}:{index}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass
class TrialRecord:
    index: int
    phase: str
    point: Dict[str, Any]
    unit: Tuple[float, ...]
    score: float
    seed: int
    wall_time_s: float = 0.0


@dataclass
class SearchTrace:
    method: str
    budget: int
    trials: List[TrialRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.trials)

    @property
    def incumbent(self) -> Optional[TrialRecord]:
        """Lowest score, earliest trial on ties."""
        if not self.trials:
            return None
        return min(self.trials, key=lambda t: (t.score, t.index))

    def incumbent_curve(self) -> List[float]:
        return list(np.minimum.accumulate([t.score for t in self.trials]))

    def signature(self) -> List[Tuple]:
        """Everything except wall time; equal for repeated seeded runs."""
        return [(t.index, t.phase, tuple(sorted(t.point.items())), t.score, t.seed) for t in self.trials]

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for t in self.trials:
            row = {"trial": t.index, "phase": t.phase, "seed": t.seed}
            row.update(t.point)
            row.update({"val_mae": t.score, "wall_time_s": t.wall_time_s})
            rows.append(row)
        return pd.DataFrame(rows)

    def write_csv(self, path: str, config_hash: str = "") -> None:
        frame = self.to_frame()
        if config_hash:
            frame["config_hash"] = config_hash
        frame.to_csv(path, index=False, lineterminator="\n")


def _evaluate(space: SearchSpace, objective: Objective, u: np.ndarray, index: int, phase: str, seed: int) -> TrialRecord:
    point = space.decode(u)
    trial_seed = derive_seed(seed, index)
    started = time.perf_counter()
    score = float(objective(point, trial_seed))
    elapsed = time.perf_counter() - started
    logger.info(f"Trial {index} ({phase}) score={score:.6f} point={point}")
    return TrialRecord(index, phase, point, tuple(float(x) for x in space.canonical(u)), score, trial_seed, elapsed)


def random_search(space: SearchSpace, budget: int, objective: Objective, seed: int = 0,
                  max_workers: int = 1) -> SearchTrace:
    """Evaluate ``budget`` i.i.d. uniform candidates; threads never change the result."""
    if budget < 1:
        raise ZeroBudget("search budget must be at least 1")
    units = space.sample(np.random.default_rng(seed), budget)
    trace = SearchTrace("random", budget)
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            trace.trials = list(pool.map(lambda i: _evaluate(space, objective, units[i], i, "random", seed), range(budget)))
    else:
        trace.trials = [_evaluate(space, objective, units[i], i, "random", seed) for i in range(budget)]
    return trace


class GaussianProcess:
    """Zero-mean GP regression with a squared-exponential kernel on standardized targets."""

    def __init__(self, length_scale: float, signal_variance: float = 1.0, noise: float = 1e-6):
        self.length_scale = length_scale
        self.signal_variance = signal_variance
        self.noise = noise
        self.jitter = 0.0

    def kernel(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        sq = ((A[:, None, :] - B[None, :, :]) ** 2).sum(axis=-1)
        return self.signal_variance * np.exp(-0.5 * sq / self.length_scale ** 2)

    def fit(self, X: np.ndarray, y: np.ndarray) -> "GaussianProcess":
        self.X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        self.y_mean = float(y.mean())
        self.y_std = float(y.std()) or 1.0
        self.y = (y - self.y_mean) / self.y_std
        K = self.kernel(self.X, self.X) + self.noise * np.eye(len(self.X))
        for jitter in JITTER_LADDER:
            try:
                self.factor = cho_factor(K + jitter * self.signal_variance * np.eye(len(self.X)), lower=True)
            except LinAlgError:
                continue
            if jitter > 0.0:
                logger.warning(f"Kernel matrix needed jitter {jitter:g}")
            self.jitter = jitter
            self.alpha = cho_solve(self.factor, self.y)
            return self
        raise SingularKernel(f"kernel matrix not positive definite after jitter {JITTER_LADDER[-1]:g}")

    def log_marginal_likelihood(self) -> float:
        L = self.factor[0]
        return float(-0.5 * self.y @ self.alpha - np.log(np.diag(L)).sum() - 0.5 * len(self.y) * np.log(2 * np.pi))

    def predict(self, Xs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Posterior mean and standard deviation on the original target scale."""
        Ks = self.kernel(np.asarray(Xs, dtype=float), self.X)
        mean = Ks @ self.alpha
        v = cho_solve(self.factor, Ks.T)
        var = np.maximum(self.signal_variance - (Ks * v.T).sum(axis=1), 0.0)
        return mean * self.y_std + self.y_mean, np.sqrt(var) * self.y_std


def fit_surrogate(X: np.ndarray, y: np.ndarray, config: SearchConfig) -> GaussianProcess:
    """Fixed length scale from config, else the grid value with the best marginal likelihood."""
    if config.length_scale is not None:
        return GaussianProcess(config.length_scale, config.signal_variance, config.noise).fit(X, y)
    best, best_lml = None, -np.inf
    for scale in LENGTH_SCALE_GRID:
        try:
            gp = GaussianProcess(scale, config.signal_variance, config.noise).fit(X, y)
        except SingularKernel:
            continue
        lml = gp.log_marginal_likelihood()
        if lml > best_lml:
            best, best_lml = gp, lml
    if best is None:
        raise SingularKernel("no length scale gave a positive definite kernel")
    return best


def expected_improvement(mean: np.ndarray, std: np.ndarray, best: float, xi: float = 0.0) -> np.ndarray:
    """EI for minimization; zero where the posterior is degenerate and no improvement is predicted."""
    improvement = best - mean - xi
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(std > 0, improvement / std, 0.0)
        ei = np.where(std > 0, improvement * norm.cdf(z) + std * norm.pdf(z), np.maximum(improvement, 0.0))
    return np.maximum(ei, 0.0)


def bayesian_search(space: SearchSpace, budget: int, objective: Objective, seed: int = 0,
                    config: Optional[SearchConfig] = None) -> SearchTrace:
    """
    GP + expected-improvement search.

    ``init_points`` random evaluations come first, then one surrogate-guided
    evaluation per remaining budget slot. Candidates that decode to an
    already-evaluated point are skipped.
    """
    config = config or SearchConfig()
    if budget < 1:
        raise ZeroBudget("search budget must be at least 1")
    if config.init_points < 2 or budget <= config.init_points:
        raise InvalidSearchConfig(f"bayesian search needs budget > init_points >= 2 "
                                  f"(budget={budget}, init_points={config.init_points})")
    rng = np.random.default_rng(seed)
    trace = SearchTrace("bayesian", budget)
    for i, u in enumerate(space.sample(rng, config.init_points)):
        trace.trials.append(_evaluate(space, objective, u, i, "init", seed))

    for i in range(config.init_points, budget):
        X = np.array([t.unit for t in trace.trials])
        y = np.array([t.score for t in trace.trials])
        gp = fit_surrogate(X, y, config)
        seen = {t.unit for t in trace.trials}
        pool, keys = [], set()
        for u in space.sample(rng, config.candidate_pool):
            c = space.canonical(u)
            key = tuple(float(x) for x in c)
            if key in seen or key in keys:
                continue
            keys.add(key)
            pool.append(c)
        if not pool:
            logger.warning("Every pooled candidate was already evaluated; sampling one at random")
            pool = [space.canonical(space.sample(rng, 1)[0])]
        pool = np.array(pool)
        mean, std = gp.predict(pool)
        ei = expected_improvement(mean, std, float(y.min()), config.xi)
        choice = int(np.argmax(ei))
        logger.info(f"Iteration {i}: length_scale={gp.length_scale} max EI={ei[choice]:.3e} pool={len(pool)}")
        trace.trials.append(_evaluate(space, objective, pool[choice], i, "guided", seed))
    return trace


def point_to_spec(point: Dict[str, Any], input_dim: int, look_back: int, horizon: int,
                  target_index: int = 0, dense_activation: str = "relu") -> Tuple[ModelSpec, Dict[str, float]]:
    """Map a decoded search point to a ModelSpec plus its optimizer settings."""
    units = int(point["lstm_units"])
    spec = ModelSpec(
        architecture="seq2seq",
        input_dim=input_dim,
        encoder_units=[units] * int(point["encoder_layers"]),
        decoder_units=[units] * int(point["decoder_layers"]),
        dense_units=[int(point["dense_units"])] * int(point["dense_layers"]),
        dense_activation=dense_activation,
        dropout_rate=float(point["dropout"]),
        look_back=look_back,
        horizon=horizon,
        target_index=target_index,
    )
    return spec, {"learning_rate": float(point["learning_rate"]), "dropout": float(point["dropout"])}


def run_pipeline_search(windows: "WindowedSet", config: SearchConfig, seed: int = 0,
                        dense_activation: str = "relu") -> Tuple[ModelSpec, NetworkWeights, SearchTrace]:
    """
    Search on train/val windows, then retrain the incumbent on train + val.

    Each candidate is scored by its best validation MAE under ``epoch_cap``
    epochs. The test split is never requested.
    """
    train_x, train_y = windows.split("train")
    val_x, val_y = windows.split("val")
    input_dim = train_x.shape[2]
    space = SearchSpace.from_config(config.space)

    def objective(point: Dict[str, Any], trial_seed: int) -> float:
        spec, opt = point_to_spec(point, input_dim, windows.look_back, windows.horizon,
                                  windows.target_index, dense_activation)
        hp = TrainHyperparams(learning_rate=opt["learning_rate"], batch_size=config.batch_size,
                              max_epochs=config.epoch_cap, patience=config.epoch_cap)
        weights, _ = train(spec, TrainingData(train_x, train_y, val_x, val_y), hp, trial_seed)
        return evaluate_mae(spec, weights, val_x, val_y)

    if config.method == "bayesian" and config.budget > config.init_points:
        trace = bayesian_search(space, config.budget, objective, seed, config)
    else:
        if config.method == "bayesian":
            logger.warning(f"Budget {config.budget} <= init_points {config.init_points}; using random search")
        trace = random_search(space, config.budget, objective, seed, config.max_workers)

    best = trace.incumbent
    spec, opt = point_to_spec(best.point, input_dim, windows.look_back, windows.horizon,
                              windows.target_index, dense_activation)
    logger.info(f"Incumbent trial {best.index} val_mae={best.score:.6f}; retraining on train+val")
    hp = TrainHyperparams(learning_rate=opt["learning_rate"], batch_size=config.batch_size,
                          max_epochs=config.final_epochs, patience=config.final_patience)
    data = TrainingData(np.concatenate([train_x, val_x]), np.concatenate([train_y, val_y]))
    weights, _ = train(spec, data, hp, best.seed)
    return spec, weights, trace
