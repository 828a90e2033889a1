"""Simulation harness: Gaussian scenarios, grid validation, and the three studies.

Data are draws of ``Z = (Z1, Z2, Z3) ~ N(0, Sigma)`` with unit-fifth
standard deviations.  Prediction conditions ``Y = (Z1, Z2)`` on ``X = Z3``;
classification predicts ``sgn Z3`` from ``X = (Z1, Z2)``.  Training,
validation and test samples come from independent substreams spawned from
the run seed.
"""

from __future__ import annotations

import csv
import logging
import math
import multiprocessing as mp
import os
import resource
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .estimator import (
    VARIANTS,
    PairedSample,
    fit_from_basis,
    klr_fit,
    traditional_fit,
)
from .exceptions import ConfigError, JointEmbedError, NotPositiveDefiniteError
from .kernels import GaussianKernel
from .lowrank import TensorBasis, marginal_basis
from .numerics import make_rng, sample_mvn, std_normal_cdf, sym_eigen

log = logging.getLogger(__name__)

CSV_HEADER = (
    "scenario", "variant", "n_train", "seed", "sigma_x", "sigma_y", "eps", "lambda",
    "m_x", "m_y", "val_loss", "oracle_loss", "posfrac", "normdev", "fit_seconds",
)
ALL_VARIANTS = VARIANTS + ("traditional", "klr")
CORRELATIONS = {"low": (0.0, 0.0, 0.0), "med": (0.3, -0.3, 0.3), "high": (0.7, 0.7, -0.7)}
THRESHOLDS = (0.5, 0.6, 0.7)
POS_TOL = 1e-7
PROB_FLOOR = 1e-10


# --- scenarios and the Gaussian oracle -----------------------------------------


@dataclass(frozen=True)
class Scenario:
    name: str
    correlations: tuple  # (rho_12, rho_13, rho_23)
    mu: tuple = (0.0, 0.0, 0.0)
    variances: tuple = (1 / 25, 1 / 25, 1 / 25)

    @classmethod
    def named(cls, name: str) -> "Scenario":
        if name not in CORRELATIONS:
            raise ConfigError(f"unknown scenario {name!r}; expected one of {sorted(CORRELATIONS)}")
        return cls(name, CORRELATIONS[name])

    def correlation_matrix(self) -> np.ndarray:
        r12, r13, r23 = self.correlations
        return np.array([[1.0, r12, r13], [r12, 1.0, r23], [r13, r23, 1.0]])


def make_scenario_cov(s: Scenario, clip: bool = False) -> np.ndarray:
    """Covariance ``D C D`` with ``D = diag(sqrt(variances))``.

    An indefinite correlation matrix raises unless ``clip`` is set, in which
    case negative eigenvalues are replaced by zero (the diagonal then drifts
    above the nominal variances; see :func:`scenario_adjustment`).
    """
    corr = s.correlation_matrix()
    if np.any(np.abs(corr) > 1.0):
        raise ConfigError("correlations must lie in [-1, 1]")
    eig = sym_eigen(corr)
    if eig.values[-1] < -1e-12:
        if not clip:
            raise NotPositiveDefiniteError(
                f"scenario {s.name!r}: correlation matrix has eigenvalue {eig.values[-1]:.4g}"
            )
        corr = (eig.vectors * np.clip(eig.values, 0.0, None)) @ eig.vectors.T
    v = np.asarray(s.variances, dtype=float)
    cov = corr * np.sqrt(np.outer(v, v))
    return 0.5 * (cov + cov.T)


def scenario_adjustment(s: Scenario) -> dict:
    """Metadata describing whether, and how, the scenario covariance was clipped."""
    vals = sym_eigen(s.correlation_matrix()).values
    clipped = bool(vals[-1] < -1e-12)
    info = {"scenario": s.name, "correlation_eigenvalues": [float(v) for v in vals], "clipped": clipped}
    if clipped:
        info["clipped_covariance"] = make_scenario_cov(s, clip=True).tolist()
    return info


def true_conditional_prob(a, b, c, sigma, x):
    """``P(a Y1 <= b Y2 + c | X = x)`` for ``(Y1, Y2, X) ~ N(0, sigma)``."""
    sigma = np.asarray(sigma, dtype=float)
    s33 = sigma[2, 2]
    if not s33 > 0:
        raise ValueError("Var(X) must be positive")
    cov_wx = a * sigma[0, 2] - b * sigma[1, 2]
    var_w = a * a * sigma[0, 0] + b * b * sigma[1, 1] - 2 * a * b * sigma[0, 1]
    var_cond = max(var_w - cov_wx * cov_wx / s33, 0.0)
    x = np.asarray(x, dtype=float)
    mu_w = cov_wx * x / s33
    if var_cond <= 1e-15 * max(var_w, 1e-300):
        out = (mu_w <= c).astype(float)
    else:
        out = std_normal_cdf((c - mu_w) / math.sqrt(var_cond))
    return float(out) if np.ndim(out) == 0 else out


def classification_prob(sigma, x):
    """``P(Z3 > 0 | (Z1, Z2) = x)`` for ``Z ~ N(0, sigma)``; ``x`` has two columns."""
    sigma = np.asarray(sigma, dtype=float)
    s12 = sigma[:2, :2]
    c3 = sigma[2, :2]
    weights = np.linalg.pinv(s12, rcond=1e-12) @ c3
    var = max(sigma[2, 2] - c3 @ weights, 0.0)
    mean = np.atleast_2d(np.asarray(x, dtype=float)) @ weights
    if var <= 1e-15 * sigma[2, 2]:
        return (mean > 0).astype(float)
    return std_normal_cdf(mean / math.sqrt(var))


def test_function_matrix(y) -> np.ndarray:
    """Indicators ``Y1 <= Y2 - c`` for the three thresholds, then a column of ones."""
    y = np.asarray(y, dtype=float)
    if y.ndim != 2 or y.shape[1] != 2:
        raise ValueError(f"expected an n x 2 array, got shape {y.shape}")
    cols = [(y[:, 0] <= y[:, 1] - c) for c in THRESHOLDS]
    return np.column_stack(cols + [np.ones(len(y), dtype=bool)]).astype(float)


def oracle_matrix(sigma, x) -> np.ndarray:
    """True ``E[t(Y) | X = x]`` for the stacked test functions."""
    x = np.asarray(x, dtype=float).ravel()
    cols = [true_conditional_prob(1.0, 1.0, -c, sigma, x) for c in THRESHOLDS]
    return np.column_stack([np.atleast_1d(col) for col in cols] + [np.ones_like(x)])


# --- configuration and results ----------------------------------------------------


@dataclass
class ExperimentConfig:
    scenario: str = "low"
    n_train: tuple = (100,)
    n_val: int | None = None  # defaults to the training size
    n_test: int = 1000
    seeds: tuple = (0,)
    sigma_grid: tuple = (0.02, 0.05, 0.1, 0.2, 0.5)
    eps_grid: tuple = (1e-1, 1e-2, 1e-3)
    lambda_grid: tuple = (1e-6, 1e-4, 1e-2)
    variants: tuple = ("constrained", "normalized", "unconstrained", "traditional")
    output_path: str | None = None
    timeout: float = 600.0
    traditional_max_n: int = 4000
    record_time: bool = True
    timing_sigma: float = 0.2
    timing_eps: float = 1e-2
    workers: int = 1

    def validate(self, mode: str = "predict"):
        Scenario.named(self.scenario)
        for name in ("n_train", "seeds", "sigma_grid", "eps_grid", "variants"):
            if len(getattr(self, name)) == 0:
                raise ConfigError(f"{name} must not be empty")
        if any(n < 2 for n in self.n_train):
            raise ConfigError("n_train values must be at least 2")
        if self.n_test < 1 or (self.n_val is not None and self.n_val < 1):
            raise ConfigError("n_val and n_test must be at least 1")
        if any(not s > 0 for s in self.sigma_grid) or any(not e > 0 for e in self.eps_grid):
            raise ConfigError("kernel widths and tolerances must be positive")
        if any(lam < 0 for lam in self.lambda_grid):
            raise ConfigError("lambda values must be nonnegative")
        unknown = set(self.variants) - set(ALL_VARIANTS)
        if unknown:
            raise ConfigError(f"unknown variants {sorted(unknown)}")
        if mode == "classify" and "normalized" in self.variants:
            raise ConfigError("classification compares constrained, unconstrained, traditional and klr only")
        if {"traditional", "klr"} & set(self.variants) and not self.lambda_grid:
            raise ConfigError("lambda_grid must not be empty for traditional or klr")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        return self


@dataclass
class ResultRow:
    scenario: str
    variant: str
    n_train: int
    seed: int
    sigma_x: float
    sigma_y: float
    eps: float
    lam: float
    m_x: int
    m_y: int
    val_loss: float
    oracle_loss: float
    posfrac: float
    normdev: float
    fit_seconds: float
    peak_rss_mb: float = field(default=float("nan"), compare=False)

    def as_record(self):
        return (
            self.scenario, self.variant, self.n_train, self.seed, self.sigma_x, self.sigma_y,
            self.eps, self.lam, self.m_x, self.m_y, self.val_loss, self.oracle_loss,
            self.posfrac, self.normdev, self.fit_seconds,
        )


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def emit_csv(rows, path) -> None:
    """Write rows under the fixed header; floats carry 17 significant digits."""
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(CSV_HEADER)
            for row in rows:
                w.writerow([_fmt(v) for v in row.as_record()])
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write results to {path}: {exc.strerror}") from exc


def read_csv(path):
    """Parse a results file back into :class:`ResultRow` objects."""
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(
                ResultRow(
                    rec["scenario"], rec["variant"], int(rec["n_train"]), int(rec["seed"]),
                    float(rec["sigma_x"]), float(rec["sigma_y"]), float(rec["eps"]), float(rec["lambda"]),
                    int(rec["m_x"]), int(rec["m_y"]), float(rec["val_loss"]), float(rec["oracle_loss"]),
                    float(rec["posfrac"]), float(rec["normdev"]), float(rec["fit_seconds"]),
                )
            )
    return rows


# --- data ------------------------------------------------------------------------


@dataclass
class DataSplit:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    cov: np.ndarray
    mode: str = "predict"


def draw_split(cov, n_train, n_val, n_test, seed, mode="predict") -> DataSplit:
    """Sample the three splits from separate substreams of ``seed``."""
    streams = np.random.SeedSequence(int(seed)).spawn(3)
    z = [sample_mvn(np.zeros(3), cov, n, make_rng(ss)) for n, ss in zip((n_train, n_val, n_test), streams)]
    if mode == "predict":
        parts = [(zi[:, 2:3], zi[:, :2]) for zi in z]
    elif mode == "classify":
        parts = [(zi[:, :2], zi[:, 2:3]) for zi in z]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    (xt, yt), (xv, yv), (xs, ys) = parts
    return DataSplit(xt, yt, xv, yv, xs, ys, cov, mode)


def _targets(split: DataSplit, y):
    if split.mode == "predict":
        return test_function_matrix(y)
    up = (y[:, 0] > 0).astype(float)
    return np.column_stack([up, 1.0 - up])


# --- validation ------------------------------------------------------------------


@dataclass
class Selection:
    params: dict
    model: object
    val_loss: float
    m_x: int = 0
    m_y: int = 0
    losses: list = field(default_factory=list)  # (params, loss) for every grid point that fitted


class _BasisCache:
    """Marginal bases keyed by (side, sigma, eps), built lazily per data split."""

    def __init__(self, split: DataSplit):
        self.split = split
        self._store = {}

    def get(self, side, sigma, eps):
        key = (side, float(sigma), float(eps))
        if key not in self._store:
            pts = self.split.x_train if side == "x" else self.split.y_train
            self._store[key] = marginal_basis(pts, GaussianKernel(sigma), eps)
        return self._store[key]


def _predict(model, variant, targets, x):
    """Model estimate of ``E[targets | x]``; ``targets`` live on the training responses."""
    if variant == "klr":
        p = model.predict(x)
        return np.column_stack([p, 1.0 - p])
    return model.conditional_expectation(targets, x)


def _val_loss(split, variant, pred, truth):
    if split.mode == "predict":
        return float(np.mean(np.sum((truth - pred) ** 2, axis=1)))
    # logistic loss of the observed class; estimates are clipped into [floor, 1]
    up = truth[:, 0] > 0.5
    p = np.where(up, pred[:, 0], pred[:, 1])
    return float(np.mean(-np.log(np.clip(p, PROB_FLOOR, 1.0))))


def _grid(config, variant):
    if variant in VARIANTS:
        return [
            {"sigma_x": sx, "sigma_y": sy, "eps": e, "lam": 0.0}
            for sx in config.sigma_grid
            for sy in config.sigma_grid
            for e in config.eps_grid
        ]
    return [
        {"sigma_x": sx, "sigma_y": float("nan"), "eps": float("nan"), "lam": lam}
        for sx in config.sigma_grid
        for lam in config.lambda_grid
    ]


def _fit_one(split, variant, params, cache=None):
    s = PairedSample(split.x_train, split.y_train)
    if variant in VARIANTS:
        if cache is None:
            bx = marginal_basis(split.x_train, GaussianKernel(params["sigma_x"]), params["eps"])
            by = marginal_basis(split.y_train, GaussianKernel(params["sigma_y"]), params["eps"])
        else:
            bx = cache.get("x", params["sigma_x"], params["eps"])
            by = cache.get("y", params["sigma_y"], params["eps"])
        return fit_from_basis(s, TensorBasis(bx, by), params["lam"], variant)
    kx = GaussianKernel(params["sigma_x"])
    if variant == "traditional":
        return traditional_fit(s, kx, params["lam"])
    if variant == "klr":
        labels = np.where(split.y_train[:, 0] > 0, 1.0, -1.0)
        return klr_fit(split.x_train, labels, kx, params["lam"])
    raise ValueError(f"unknown variant {variant!r}")


def validate_and_fit(config: ExperimentConfig, split: DataSplit, variant: str, cache=None) -> Selection:
    """Fit every grid point, keep the one with the lowest validation loss (first wins ties)."""
    if variant == "klr" and split.mode != "classify":
        raise ConfigError("klr is only available for classification")
    cache = cache if cache is not None else _BasisCache(split)
    train_t = _targets(split, split.y_train)
    val_t = _targets(split, split.y_val)
    best = None
    failures = []
    losses = []
    for params in _grid(config, variant):
        try:
            model = _fit_one(split, variant, params, cache)
            loss = _val_loss(split, variant, _predict(model, variant, train_t, split.x_val), val_t)
        except (JointEmbedError, np.linalg.LinAlgError) as exc:
            failures.append((params, str(exc)))
            log.debug("grid point %s failed for %s: %s", params, variant, exc)
            continue
        if not np.isfinite(loss):
            failures.append((params, "non-finite validation loss"))
            continue
        losses.append((params, loss))
        if best is None or loss < best.val_loss:
            mx = model.basis.m_x if variant in VARIANTS else 0
            my = model.basis.m_y if variant in VARIANTS else 0
            best = Selection(dict(params), model, loss, mx, my)
    if best is None:
        detail = "; ".join(f"{p}: {msg}" for p, msg in failures[:10])
        raise JointEmbedError(f"every grid point failed for {variant}: {detail}")
    best.losses = losses
    return best


# --- studies ---------------------------------------------------------------------


def _evaluate(split, variant, model):
    """(oracle_loss, posfrac, normdev) on the test split."""
    train_t = _targets(split, split.y_train)
    pred = _predict(model, variant, train_t, split.x_test)
    if split.mode == "predict":
        truth = oracle_matrix(split.cov, split.x_test)
        oracle = float(np.mean(np.sum((pred - truth) ** 2, axis=1)))
        posfrac = float(np.mean(np.all(pred >= -POS_TOL, axis=1)))
        normdev = float(np.mean(np.abs(pred[:, 3] - 1.0)))
    else:
        up = (split.y_test[:, 0] > 0).astype(float)
        oracle = float(np.mean(np.abs(up - pred[:, 0])))  # mean absolute deviation from a perfect classifier
        posfrac = float(np.mean(np.all(pred >= -POS_TOL, axis=1)))
        normdev = float(np.mean(np.abs(pred.sum(axis=1) - 1.0)))
    return oracle, posfrac, normdev


def _timed_refit(split, variant, params):
    t0 = time.perf_counter()
    model = _fit_one(split, variant, params)
    return time.perf_counter() - t0, model


def _ranks(model):
    basis = getattr(model, "basis", None)
    return (basis.m_x, basis.m_y) if basis is not None else (0, 0)


def _run_task(args):
    config, mode, n_train, seed = args
    scen = Scenario.named(config.scenario)
    cov = make_scenario_cov(scen, clip=True)
    n_val = config.n_val if config.n_val is not None else n_train
    split = draw_split(cov, n_train, n_val, config.n_test, seed, mode)
    cache = _BasisCache(split)
    rows = []
    for variant in config.variants:
        sel = validate_and_fit(config, split, variant, cache)
        oracle, posfrac, normdev = _evaluate(split, variant, sel.model)
        secs = _timed_refit(split, variant, sel.params)[0] if config.record_time else float("nan")
        p = sel.params
        rows.append(
            ResultRow(config.scenario, variant, n_train, seed, p["sigma_x"], p["sigma_y"], p["eps"], p["lam"],
                      sel.m_x, sel.m_y, sel.val_loss, oracle, posfrac, normdev, secs)
        )
    return rows


def _workers(config):
    env = os.environ.get("JOINTEMBED_WORKERS")
    if env is None:
        return config.workers
    try:
        n = int(env)
    except ValueError as exc:
        raise ConfigError(f"JOINTEMBED_WORKERS must be an integer, got {env!r}") from exc
    if n < 1:
        raise ConfigError("JOINTEMBED_WORKERS must be at least 1")
    return n


def _fan_out(config, mode):
    tasks = [(config, mode, n, seed) for seed in config.seeds for n in config.n_train]
    workers = min(_workers(config), len(tasks))
    if workers <= 1:
        results = [_run_task(t) for t in tasks]
    else:
        with mp.get_context("fork").Pool(workers) as pool:
            results = pool.map(_run_task, tasks, chunksize=1)  # map keeps task order
    rows = [row for chunk in results for row in chunk]
    _maybe_write(config, rows)
    return rows


def _maybe_write(config, rows):
    if config.output_path:
        emit_csv(rows, config.output_path)
        write_metadata(config, config.output_path + ".meta.json")


def write_metadata(config, path):
    import json

    scen = Scenario.named(config.scenario)
    info = scenario_adjustment(scen)
    if info["clipped"]:
        log.warning("scenario %s has an indefinite correlation matrix; negative eigenvalues clipped", scen.name)
    meta = {"scenario_adjustment": info, "config": {k: _jsonable(v) for k, v in vars(config).items()}}
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    return v


def run_prediction_experiment(config: ExperimentConfig):
    config.validate("predict")
    if "klr" in config.variants:
        raise ConfigError("klr is only available for classification")
    return _fan_out(config, "predict")


def run_classification_experiment(config: ExperimentConfig):
    config.validate("classify")
    return _fan_out(config, "classify")


def _timing_child(conn, split, variant, params):
    try:
        secs, model = _timed_refit(split, variant, params)
        rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0
        conn.send(("ok", (secs, _ranks(model)), rss))
    except Exception as exc:  # reported to the parent, which flags the row
        conn.send(("error", repr(exc), float("nan")))
    finally:
        conn.close()


def timed_fit(split, variant, params, timeout):
    """Wall time of one fit in a forked child; ``inf`` when it exceeds ``timeout``.

    Returns ``(seconds, (m_x, m_y), peak_rss_mb)``.  Without a timeout the
    fit runs in-process and the memory figure is not measured.
    """
    if not timeout:
        secs, model = _timed_refit(split, variant, params)
        return secs, _ranks(model), float("nan")
    ctx = mp.get_context("fork")
    parent, child = ctx.Pipe(duplex=False)
    proc = ctx.Process(target=_timing_child, args=(child, split, variant, params))
    proc.start()
    child.close()
    if parent.poll(timeout):
        status, value, rss = parent.recv()
        proc.join()
        if status != "ok":
            raise JointEmbedError(f"{variant} fit failed: {value}")
        return value[0], value[1], rss
    proc.kill()
    proc.join()
    return float("inf"), (0, 0), float("nan")


def run_timing_experiment(config: ExperimentConfig):
    """Coefficient-computation times at fixed kernel widths and tolerance.

    The traditional baseline above ``traditional_max_n`` points is skipped
    (``fit_seconds`` is NaN); a fit that exceeds ``timeout`` gets ``inf``.
    """
    config.validate("predict")
    if "klr" in config.variants:
        raise ConfigError("timing covers the embedding variants and the traditional baseline")
    scen = Scenario.named(config.scenario)
    cov = make_scenario_cov(scen, clip=True)
    nan = float("nan")
    rows = []
    for seed in config.seeds:
        for n in config.n_train:
            split = draw_split(cov, n, 1, 1, seed, "predict")
            for variant in config.variants:
                if variant in VARIANTS:
                    params = {"sigma_x": config.timing_sigma, "sigma_y": config.timing_sigma,
                              "eps": config.timing_eps, "lam": 0.0}
                else:
                    params = {"sigma_x": config.timing_sigma, "sigma_y": nan, "eps": nan,
                              "lam": config.lambda_grid[0]}
                if variant == "traditional" and n > config.traditional_max_n:
                    secs, ranks, rss = nan, (0, 0), nan
                    log.info("traditional baseline skipped at n=%d (cap %d)", n, config.traditional_max_n)
                else:
                    secs, ranks, rss = timed_fit(split, variant, params, config.timeout)
                    if math.isinf(secs):
                        log.warning("%s fit at n=%d exceeded %.0f s", variant, n, config.timeout)
                rows.append(
                    ResultRow(config.scenario, variant, n, seed, params["sigma_x"], params["sigma_y"],
                              params["eps"], params["lam"], *ranks, nan, nan, nan, nan, secs, rss)
                )
    _maybe_write(config, rows)
    return rows


def with_overrides(config: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(config, **kw)
