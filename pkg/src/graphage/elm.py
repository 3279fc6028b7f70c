"""Closed-form estimators on frozen features.

A random-feature layer maps inputs through fixed uniform weights and a
sigmoid; only the output weights are learned, as the unique ridge
minimizer. Stacking sigmoid autoencoder layers of that kind and adding
an identity skip from the raw input gives the deeper variant used here
for both age-group classification and within-group regression.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import expit

from .errors import ConfigError, DataError, DomainError, ShapeError

__all__ = [
    "AgeEstimator",
    "ElmLayer",
    "EstimatorConfig",
    "MlIelmConfig",
    "MlIelmModel",
    "elm_forward",
    "elm_solve",
    "fit_age_estimator",
    "group_of",
    "init_elm_layer",
    "ml_ielm_fit",
    "ml_ielm_predict",
    "predict_age",
]

# condition estimates beyond this suggest the solve is dominated by
# rounding error even though the regularizer keeps it positive definite
_COND_LIMIT = 1.0 / np.sqrt(np.finfo(np.float64).eps)


def _as_2d(name: str, arr) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    if out.ndim == 1:
        out = out[:, None]
    if out.ndim != 2:
        raise ShapeError(f"{name} must be 1-D or 2-D, got shape {out.shape}")
    if not np.all(np.isfinite(out)):
        raise DataError(f"{name} contains non-finite values")
    return out


def elm_solve(h: np.ndarray, t: np.ndarray, lam: float) -> np.ndarray:
    """Ridge output weights: argmin ||h @ beta - t||^2 + ||beta||^2 / lam.

    Larger lam means a weaker penalty. Of the two equivalent normal-
    equation forms, the one whose Gram matrix is smaller is used; both
    are solved by Cholesky factorization, which the regularizer keeps
    positive definite. A severely ill-conditioned system still solves
    but emits a RuntimeWarning.
    """
    if lam <= 0.0 or not np.isfinite(lam):
        raise DomainError(f"lam must be a positive finite number, got {lam}")
    h = _as_2d("h", h)
    t = _as_2d("t", t)
    if h.shape[0] != t.shape[0]:
        raise ShapeError(f"row mismatch: h has {h.shape[0]}, t has {t.shape[0]}")
    n, width = h.shape
    reg = 1.0 / lam
    if width <= n:
        gram = h.T @ h + reg * np.eye(width)
        factor = _checked_factor(gram)
        return cho_solve(factor, h.T @ t)
    gram = h @ h.T + reg * np.eye(n)
    factor = _checked_factor(gram)
    return h.T @ cho_solve(factor, t)


def _checked_factor(gram: np.ndarray):
    factor = cho_factor(gram)
    diag = np.abs(np.diag(factor[0]))
    # cheap condition estimate from the Cholesky diagonal spread
    cond_est = (diag.max() / diag.min()) ** 2
    if cond_est > _COND_LIMIT:
        warnings.warn(
            f"ridge system condition estimate {cond_est:.2e} exceeds "
            f"{_COND_LIMIT:.2e}; solution may lose precision",
            RuntimeWarning,
            stacklevel=3,
        )
    return factor


@dataclass
class ElmLayer:
    """Random frozen features plus solved output weights."""

    a: np.ndarray  # (in_dim, hidden), uniform(-1, 1), never trained
    b: np.ndarray  # (hidden,)
    beta: np.ndarray | None = None  # (hidden, out_dim) ridge solution


def init_elm_layer(in_dim: int, hidden: int, rng: np.random.Generator) -> ElmLayer:
    if in_dim < 1 or hidden < 1:
        raise ConfigError("in_dim and hidden must be >= 1")
    return ElmLayer(
        a=rng.uniform(-1.0, 1.0, size=(in_dim, hidden)),
        b=rng.uniform(-1.0, 1.0, size=hidden),
    )


def _hidden_features(x: np.ndarray, layer: ElmLayer) -> np.ndarray:
    if x.shape[1] != layer.a.shape[0]:
        raise ShapeError(f"features have dim {x.shape[1]}, layer expects {layer.a.shape[0]}")
    return expit(x @ layer.a + layer.b)


def elm_forward(x: np.ndarray, layer: ElmLayer) -> np.ndarray:
    """sigmoid(x a + b) beta: the classic single-layer readout."""
    if layer.beta is None:
        raise ConfigError("layer has no solved output weights yet")
    return _hidden_features(_as_2d("x", x), layer) @ layer.beta


@dataclass
class MlIelmConfig:
    hidden: int = 200
    depth: int = 2
    lam: float = 1.0
    seed: int = 0
    use_hidden: bool = True  # False zeroes the hidden path (skip-only ablation)

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.hidden < 1:
            raise ConfigError(f"hidden must be >= 1, got {self.hidden}")
        if self.lam <= 0.0:
            raise ConfigError(f"lam must be positive, got {self.lam}")


@dataclass
class MlIelmModel:
    """Stacked sigmoid autoencoders plus a joint ridge readout over
    [input | last hidden | 1]."""

    layers: list[ElmLayer]
    w_in: np.ndarray  # (in_dim, out_dim)
    w_hidden: np.ndarray  # (hidden, out_dim); zero when use_hidden is off
    c: np.ndarray  # (out_dim,)
    config: MlIelmConfig
    in_dim: int
    out_dim: int


def _encode_stack(x: np.ndarray, layers: Sequence[ElmLayer]) -> np.ndarray:
    z = x
    for layer in layers:
        z = expit(z @ layer.beta.T)
    return z


def ml_ielm_fit(x: np.ndarray, t: np.ndarray, config: MlIelmConfig) -> MlIelmModel:
    """Fit the stack then the joint readout; deterministic under seed.

    Each autoencoder layer solves its output weights to reconstruct its
    own input from random sigmoid features, then re-encodes the input
    through the transpose of that solution. The final weights are one
    ridge solve over the concatenated [x, last hidden, 1] design.
    """
    x = _as_2d("x", x)
    t = _as_2d("t", t)
    if x.shape[0] < 2:
        raise ShapeError(f"need at least 2 samples, got {x.shape[0]}")
    if x.shape[0] != t.shape[0]:
        raise ShapeError(f"row mismatch: x has {x.shape[0]}, t has {t.shape[0]}")
    rng = np.random.default_rng(config.seed)
    layers: list[ElmLayer] = []
    z = x
    for _ in range(config.depth):
        layer = init_elm_layer(z.shape[1], config.hidden, rng)
        g = _hidden_features(z, layer)
        layer.beta = elm_solve(g, z, config.lam)
        layers.append(layer)
        z = expit(z @ layer.beta.T)

    n = x.shape[0]
    ones = np.ones((n, 1))
    if config.use_hidden:
        design = np.concatenate([x, z, ones], axis=1)
    else:
        design = np.concatenate([x, ones], axis=1)
    w = elm_solve(design, t, config.lam)
    d = x.shape[1]
    if config.use_hidden:
        w_in, w_hidden, c = w[:d], w[d : d + config.hidden], w[-1]
    else:
        w_in, c = w[:d], w[-1]
        w_hidden = np.zeros((config.hidden, t.shape[1]))
    return MlIelmModel(
        layers=layers,
        w_in=w_in,
        w_hidden=w_hidden,
        c=c,
        config=config,
        in_dim=d,
        out_dim=t.shape[1],
    )


def ml_ielm_predict(model: MlIelmModel, x: np.ndarray) -> np.ndarray:
    """Raw outputs x w_in + hidden(x) w_hidden + c, one row per sample."""
    x = _as_2d("x", x)
    if x.shape[1] != model.in_dim:
        raise ShapeError(f"features have dim {x.shape[1]}, model expects {model.in_dim}")
    out = x @ model.w_in + model.c
    if model.config.use_hidden:
        out = out + _encode_stack(x, model.layers) @ model.w_hidden
    return out


# ----------------------------------------------------------------------
# two-stage age pipeline

# contiguous eight-interval grouping (lower edges in years); the last
# interval is open-ended
DEFAULT_CUTS = (0.0, 4.0, 8.0, 15.0, 25.0, 38.0, 48.0, 60.0)


@dataclass
class EstimatorConfig:
    cuts: tuple = DEFAULT_CUTS
    overlap: float = 2.0  # years borrowed across group edges for regressors
    depth: int = 2
    seed: int = 0
    lam_grid: tuple = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3)
    hidden_grid: tuple = tuple(range(180, 401, 20))
    cv_folds: int = 5
    shared_regressor: bool = False  # one pooled regressor instead of per-group
    use_hidden: bool = True

    def __post_init__(self):
        cuts = tuple(float(c) for c in self.cuts)
        if len(cuts) < 1 or list(cuts) != sorted(set(cuts)):
            raise ConfigError("cuts must be strictly increasing lower edges")
        self.cuts = cuts
        if self.overlap < 0.0:
            raise ConfigError(f"overlap must be >= 0, got {self.overlap}")
        if not self.lam_grid or not self.hidden_grid:
            raise ConfigError("hyperparameter grids must be non-empty")
        if self.cv_folds < 2:
            raise ConfigError(f"cv_folds must be >= 2, got {self.cv_folds}")


@dataclass
class AgeEstimator:
    cuts: np.ndarray  # (G,) lower edges
    classifier: MlIelmModel
    regressors: list[MlIelmModel]  # one per group (shared mode repeats one)
    overlap: float
    age_min: float
    age_max: float
    lam: float
    hidden: int
    feature_mean: np.ndarray  # (D,) train-set stats, reapplied at predict time
    feature_std: np.ndarray  # (D,)


def group_of(ages: np.ndarray, cuts: np.ndarray) -> np.ndarray:
    """Index of the interval holding each age (intervals are [cut, next))."""
    ages = np.asarray(ages, dtype=np.float64)
    return np.searchsorted(np.asarray(cuts, dtype=np.float64), ages, side="right") - 1


def _cv_select(features: np.ndarray, ages: np.ndarray, cfg: EstimatorConfig) -> tuple[float, int]:
    """Pick (lam, hidden) by k-fold MAE of a single pooled regressor."""
    if len(cfg.lam_grid) == 1 and len(cfg.hidden_grid) == 1:
        return float(cfg.lam_grid[0]), int(cfg.hidden_grid[0])
    n = features.shape[0]
    folds = min(cfg.cv_folds, n)
    order = np.random.default_rng(cfg.seed).permutation(n)
    assignment = np.arange(n) % folds
    best_score = np.inf
    best = (float(cfg.lam_grid[0]), int(cfg.hidden_grid[0]))
    targets = ages[:, None]
    for hidden in cfg.hidden_grid:
        for lam in cfg.lam_grid:
            errors = []
            for f in range(folds):
                val = order[assignment == f]
                tr = order[assignment != f]
                model = ml_ielm_fit(
                    features[tr],
                    targets[tr],
                    MlIelmConfig(hidden=int(hidden), depth=cfg.depth, lam=float(lam),
                                 seed=cfg.seed, use_hidden=cfg.use_hidden),
                )
                pred = ml_ielm_predict(model, features[val])[:, 0]
                errors.append(np.abs(pred - ages[val]).mean())
            score = float(np.mean(errors))
            if score < best_score:
                best_score = score
                best = (float(lam), int(hidden))
    return best


def fit_age_estimator(
    features: np.ndarray, ages: np.ndarray, config: EstimatorConfig | None = None
) -> AgeEstimator:
    """Group classifier plus per-group regressors on frozen features.

    The classifier learns one-hot group targets; each group's regressor
    trains on the members of that interval widened by the overlap
    margin, so samples near an edge inform both neighbors. One (lam,
    hidden) pair is selected by cross-validated MAE of a pooled
    regressor and reused everywhere. Group g's regressor draws its
    random features from seed + 1 + g.

    Features are standardized column-wise first (train mean/std, kept
    on the estimator for predict time): the random sigmoid layers
    assume O(1) inputs and saturate on large-norm embeddings otherwise.
    """
    cfg = config if config is not None else EstimatorConfig()
    features = _as_2d("features", features)
    ages = np.asarray(ages, dtype=np.float64).reshape(-1)
    if ages.shape[0] != features.shape[0]:
        raise ShapeError(f"{features.shape[0]} feature rows but {ages.shape[0]} ages")
    cuts = np.asarray(cfg.cuts, dtype=np.float64)
    groups = group_of(ages, cuts)
    if np.any(groups < 0):
        bad = float(ages[groups < 0].min())
        raise DataError(f"age {bad} falls below the first group edge {cuts[0]}")
    for g in range(len(cuts)):
        count = int(np.sum(groups == g))
        if count < 2:
            hi = cuts[g + 1] if g + 1 < len(cuts) else np.inf
            raise ConfigError(
                f"age group [{cuts[g]}, {hi}) has {count} sample(s); need at least 2"
            )

    mean = features.mean(axis=0)
    std = features.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    features = (features - mean) / std

    lam, hidden = _cv_select(features, ages, cfg)
    base = MlIelmConfig(hidden=hidden, depth=cfg.depth, lam=lam, seed=cfg.seed,
                        use_hidden=cfg.use_hidden)

    onehot = np.zeros((ages.shape[0], len(cuts)))
    onehot[np.arange(ages.shape[0]), groups] = 1.0
    classifier = ml_ielm_fit(features, onehot, base)

    regressors: list[MlIelmModel] = []
    if cfg.shared_regressor:
        pooled = ml_ielm_fit(
            features, ages[:, None],
            MlIelmConfig(hidden=hidden, depth=cfg.depth, lam=lam, seed=cfg.seed + 1,
                         use_hidden=cfg.use_hidden),
        )
        regressors = [pooled] * len(cuts)
    else:
        for g in range(len(cuts)):
            lo = cuts[g] - cfg.overlap
            hi = (cuts[g + 1] + cfg.overlap) if g + 1 < len(cuts) else np.inf
            member = (ages >= lo) & (ages < hi)
            regressors.append(
                ml_ielm_fit(
                    features[member], ages[member, None],
                    MlIelmConfig(hidden=hidden, depth=cfg.depth, lam=lam,
                                 seed=cfg.seed + 1 + g, use_hidden=cfg.use_hidden),
                )
            )
    return AgeEstimator(
        cuts=cuts,
        classifier=classifier,
        regressors=regressors,
        overlap=cfg.overlap,
        age_min=float(ages.min()),
        age_max=float(ages.max()),
        lam=lam,
        hidden=hidden,
    )


def predict_age(estimator: AgeEstimator, features: np.ndarray) -> np.ndarray:
    """Route each row through its predicted group's regressor; clamp the
    result to the age range seen at fit time."""
    features = _as_2d("features", features)
    scores = ml_ielm_predict(estimator.classifier, features)
    routed = np.argmax(scores, axis=1)
    preds = np.empty(features.shape[0])
    for g in np.unique(routed):
        rows = routed == g
        preds[rows] = ml_ielm_predict(estimator.regressors[g], features[rows])[:, 0]
    return np.clip(preds, estimator.age_min, estimator.age_max)
