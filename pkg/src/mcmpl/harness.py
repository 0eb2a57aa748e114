"""Deterministic data generators, the trial loop, and table metrics.

Every simulation setup studied here is reproducible from an experiment
spec and a master seed: trial ``s`` draws from the Philox substream keyed
by ``(s, 0)`` and the replicate bank of method ``k`` from the substream
keyed by ``(s, 1 + k)``, so results are independent of the execution
order and of the number of worker processes.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from . import ar1, binary, core, optim, weibull
from .core import ClusteredDataset, MonteCarloConfig, substream


class InsufficientTrialsError(ValueError):
    """Fewer than two usable trials; spread metrics are undefined."""


class OddClusterSizeError(ValueError):
    """The survival design needs an even number of periods per cluster."""


VALID_MODELS = ("binary", "weibull", "ar1")
VALID_LAMBDA_GENERATORS = ("normal", "covariate-correlated")


@dataclass(frozen=True)
class ExperimentSpec:
    """One simulation study: design sizes, truth, methods and seed."""

    model: str
    n_clusters: int
    t_periods: int
    n_trials: int
    methods: tuple[str, ...]
    replicates: int = 500
    seed: int = core.DEFAULT_SEED
    link: str = "logit"
    mechanism: str = "mcar"
    beta: tuple[float, ...] = (1.0,)
    gamma1: tuple[float, ...] = (2.5,)
    gamma2: float = 0.0
    xi: float = 1.5
    censoring_share: float | None = None
    rho: float = 0.5
    sigma2: float = 1.0
    lambda_generator: str = "normal"
    level: float = 0.95

    def __post_init__(self):
        if self.model not in VALID_MODELS:
            raise ValueError(f"unknown model {self.model!r}")
        if min(self.n_clusters, self.t_periods, self.n_trials, self.replicates) < 1:
            raise ValueError("design counts must be >= 1")
        if self.lambda_generator not in VALID_LAMBDA_GENERATORS:
            raise ValueError(f"unknown lambda generator {self.lambda_generator!r}")
        if self.model == "weibull":
            if self.censoring_share is None or not 0.0 < self.censoring_share < 1.0:
                raise ValueError("weibull experiments need censoring_share in (0, 1)")
            if self.t_periods % 2:
                raise OddClusterSizeError("t_periods must be even for the "
                                          "half-and-half covariate design")
            if len(self.beta) != 2:
                raise ValueError("the survival design has two covariates; "
                                 "beta needs two components")
        if self.model == "binary" and (len(self.beta) != 1 or len(self.gamma1) != 1):
            raise ValueError("the binary design has one covariate; beta and "
                             "gamma1 need one component each")
        if not self.methods:
            raise ValueError("at least one method is required")
        for m in self.methods:
            _parse_method(self.model, m)


def _parse_method(model: str, method: str):
    """Split an optional analysis-mechanism prefix off a binary method tag."""
    mechanism = None
    name = method
    if ":" in method:
        prefix, name = method.split(":", 1)
        if model != "binary":
            raise ValueError(f"method prefix only applies to binary: {method!r}")
        if prefix not in ("mcar", "mnar"):
            raise ValueError(f"unknown mechanism prefix in {method!r}")
        mechanism = prefix
    if name not in core.FIT_METHODS:
        raise ValueError(f"unknown method {name!r}")
    return mechanism, name


@dataclass
class MetricsRow:
    method: str
    parameter: str
    bias: float
    median_bias: float
    sd: float
    rmse: float
    mae: float
    se_over_sd: float
    coverage: float
    n_failed_trials: int


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    rows: list[MetricsRow]
    trials: list | None = None


# ---------------------------------------------------------------------------
# data generators
# ---------------------------------------------------------------------------

def _draw_lambda(spec, x, rng, mean, sd):
    if spec.lambda_generator == "covariate-correlated":
        return x.mean(axis=1) + rng.standard_normal(spec.n_clusters)
    return mean + sd * rng.standard_normal(spec.n_clusters)


def generate_binary_dataset(spec: ExperimentSpec, rng) -> tuple[ClusteredDataset, dict]:
    """Response and missingness draws for the binary selection design."""
    n, t = spec.n_clusters, spec.t_periods
    link = binary.get_link(spec.link)
    x = -0.35 + rng.standard_normal((n, t))
    if spec.link == "probit":
        lam = _draw_lambda(spec, x, rng, -0.22, np.sqrt(0.39))
    else:
        lam = _draw_lambda(spec, x, rng, -0.35, 1.0)
    beta = np.asarray(spec.beta, dtype=float)
    eta = lam[:, None] + beta[0] * x
    y = (rng.random((n, t)) < link.cdf(eta)).astype(float)
    zeta = expit(np.asarray(spec.gamma1)[0] * x + spec.gamma2 * y)
    miss = (rng.random((n, t)) < zeta).astype(float)
    data = binary.make_binary_dataset(np.where(miss == 1.0, np.nan, y), x, miss)
    truth = {"beta1": beta[0], "gamma1_1": float(np.asarray(spec.gamma1)[0]),
             "gamma2": spec.gamma2}
    return data, truth


def generate_survival_dataset(spec: ExperimentSpec, rng) -> tuple[ClusteredDataset, dict]:
    """Censored Weibull draws with the rate calibrated to the target share."""
    n, t = spec.n_clusters, spec.t_periods
    if t % 2:
        raise OddClusterSizeError("cluster size must be even")
    x1 = np.zeros((n, t))
    x1[:, t // 2:] = 1.0
    x2 = rng.standard_normal((n, t))
    covariates = np.stack([x1, x2], axis=2)
    lam = 0.5 + 0.5 * rng.standard_normal(n)
    beta = np.asarray(spec.beta, dtype=float)
    skeleton = core.make_dataset(np.ones((n, t)), covariates)
    rate = weibull.calibrate_censoring_rate(spec.xi, beta, lam, skeleton,
                                            spec.censoring_share)
    eta = np.exp(-(lam[:, None] + covariates @ beta))
    fail = rng.standard_exponential((n, t)) ** (1.0 / spec.xi) / eta
    cens = rng.exponential(1.0 / rate, (n, t))
    times = np.minimum(fail, cens)
    events = (fail <= cens).astype(float)
    data = weibull.make_survival_dataset(times, events, covariates)
    truth = {"xi": spec.xi, "beta1": beta[0], "beta2": beta[1],
             "rr1": weibull.relative_risk(spec.xi, beta[0]),
             "rr2": weibull.relative_risk(spec.xi, beta[1]),
             "censoring_rate": rate}
    return data, truth


def generate_ar1_dataset(spec: ExperimentSpec, rng) -> tuple[ClusteredDataset, dict]:
    """Recursive AR(1) draws with all initial conditions at zero."""
    n, t = spec.n_clusters, spec.t_periods
    lam = 1.0 + rng.standard_normal(n)
    eps = rng.standard_normal((n, t))
    sigma = np.sqrt(spec.sigma2)
    y = np.empty((n, t))
    prev = np.zeros(n)
    for k in range(t):
        prev = lam + spec.rho * prev + sigma * eps[:, k]
        y[:, k] = prev
    data = ar1.make_panel_dataset(y, np.zeros(n))
    return data, {"rho": spec.rho, "sigma2": spec.sigma2}


_GENERATORS = {"binary": generate_binary_dataset,
               "weibull": generate_survival_dataset,
               "ar1": generate_ar1_dataset}


def generate_dataset(spec: ExperimentSpec, rng):
    return _GENERATORS[spec.model](spec, rng)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _order_stat_median(values):
    v = np.sort(np.asarray(values, dtype=float))
    s = v.size
    if s % 2:
        return float(v[s // 2])
    return float(0.5 * (v[s // 2 - 1] + v[s // 2]))


def compute_metrics(estimates, ses, truth: float, level: float = 0.95,
                    method: str = "", parameter: str = "",
                    n_failed: int = 0) -> MetricsRow:
    """Bias, spread and coverage summaries for one estimator.

    The empirical standard deviation uses the S-1 divisor while the root
    mean squared error uses S, matching the reported table conventions;
    an interval with infinite standard error counts as covering.
    """
    est = np.asarray(estimates, dtype=float)
    ses = np.asarray(ses, dtype=float)
    s = est.size
    if s < 2:
        raise InsufficientTrialsError("need at least two usable trials")
    err = est - truth
    bias = float(err.mean())
    sd = float(np.sqrt(((est - est.mean()) ** 2).sum() / (s - 1)))
    rmse = float(np.sqrt((err ** 2).mean()))
    z = norm.ppf(0.5 * (1.0 + level))
    with np.errstate(invalid="ignore"):
        covered = np.abs(err) <= z * ses
    covered = covered | np.isinf(ses)
    return MetricsRow(method=method, parameter=parameter, bias=bias,
                      median_bias=_order_stat_median(est) - truth, sd=sd,
                      rmse=rmse, mae=_order_stat_median(np.abs(err)),
                      se_over_sd=float(ses.mean() / sd) if sd > 0 else np.inf,
                      coverage=float(covered.mean()), n_failed_trials=n_failed)


# ---------------------------------------------------------------------------
# the trial loop
# ---------------------------------------------------------------------------

@dataclass
class TrialOutcome:
    """Per-method parameter estimates of one trial (None marks a failure)."""

    estimates: dict = field(default_factory=dict)


def _mc_for(spec: ExperimentSpec, trial: int, k: int) -> MonteCarloConfig:
    child = np.random.SeedSequence(entropy=int(spec.seed),
                                   spawn_key=(trial, 1 + k)).generate_state(1)[0]
    return MonteCarloConfig(replicates=spec.replicates, master_seed=int(child))


def _fit_binary_method(spec, method, data, mc, psi0=None):
    mechanism, name = _parse_method(spec.model, method)
    model = binary.BinaryMissingModel(link=spec.link,
                                      mechanism=mechanism or spec.mechanism)
    fit = core.fit(model, data, name, mc, psi0=psi0)
    return fit, model


def _run_method(spec, method, data, mc, rng_retry):
    """Fit one method; a failed selection-model fit is retried once from a
    perturbed start before the trial is flagged."""
    if spec.model == "ar1":
        _, name = _parse_method(spec.model, method)
        fit = ar1.fit_bounded(data, mc, method=name)
        model = None
    elif spec.model == "weibull":
        _, name = _parse_method(spec.model, method)
        fit = core.fit(weibull.WeibullSurvivalModel(), data, name, mc)
        model = None
    else:
        fit, model = _fit_binary_method(spec, method, data, mc)
        if _failed(fit) and model.mechanism == "mnar":
            psi0 = model.initial_psi(data)
            psi0 = psi0 + 0.25 * rng_retry.standard_normal(psi0.size)
            fit, model = _fit_binary_method(spec, method, data, mc, psi0=psi0)
    return fit


def _failed(fit) -> bool:
    if not fit.converged or "gamma2_at_bound" in fit.warnings:
        return True
    return bool(np.any(~np.isfinite(fit.std_errors)))


def _collect(spec, method, fit):
    """Map a fit to {parameter: (estimate, se)}, adding derived risks."""
    out = {name: (float(e), float(s))
           for name, e, s in zip(fit.param_names, fit.psi_hat, fit.std_errors)}
    if spec.model == "weibull":
        for j, name in enumerate(("rr1", "rr2")):
            if j < len(fit.param_names) - 1:
                out[name] = weibull.relative_risk_with_se(fit, j)
    return out


def run_trial(spec: ExperimentSpec, trial: int) -> TrialOutcome:
    data, _ = generate_dataset(spec, substream(spec.seed, trial, 0))
    outcome = TrialOutcome()
    for k, method in enumerate(spec.methods):
        mc = _mc_for(spec, trial, k)
        try:
            fit = _run_method(spec, method, data, mc,
                              substream(spec.seed, trial, 100 + k))
        except (core.NoInformativeClustersError, optim.NoFinitePointError):
            outcome.estimates[method] = None
            continue
        outcome.estimates[method] = None if _failed(fit) else _collect(spec, method, fit)
    return outcome


def truth_values(spec: ExperimentSpec) -> dict:
    """True parameter values implied by the spec (keyed like fit output)."""
    if spec.model == "ar1":
        return {"rho": spec.rho, "sigma2": spec.sigma2}
    if spec.model == "weibull":
        beta = np.asarray(spec.beta, dtype=float)
        return {"xi": spec.xi, "beta1": beta[0], "beta2": beta[1],
                "rr1": weibull.relative_risk(spec.xi, beta[0]),
                "rr2": weibull.relative_risk(spec.xi, beta[1])}
    return {"beta1": float(np.asarray(spec.beta)[0]),
            "gamma1_1": float(np.asarray(spec.gamma1)[0]),
            "gamma2": spec.gamma2}


def run_experiment(spec: ExperimentSpec, threads: int = 1,
                   keep_trials: bool = False) -> ExperimentResult:
    """Generate, fit and summarize ``spec.n_trials`` independent trials.

    Trials whose fit does not converge (or hits a search bound) are
    excluded from the metrics and counted per method. Aggregation follows
    trial order, so the output is byte-identical for any ``threads``.
    """
    truth = truth_values(spec)
    indices = range(spec.n_trials)
    if threads > 1 and spec.n_trials > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(_trial_worker,
                                     ((spec, s) for s in indices),
                                     chunksize=max(1, spec.n_trials // (4 * threads))))
    else:
        outcomes = [run_trial(spec, s) for s in indices]

    rows = []
    for method in spec.methods:
        per_trial = [o.estimates[method] for o in outcomes]
        usable = [p for p in per_trial if p is not None]
        n_failed = len(per_trial) - len(usable)
        if len(usable) < 2:
            raise InsufficientTrialsError(
                f"method {method!r} produced {len(usable)} usable trials")
        for parameter in usable[0]:
            est = [p[parameter][0] for p in usable]
            ses = [p[parameter][1] for p in usable]
            rows.append(compute_metrics(est, ses, truth.get(parameter, np.nan),
                                        spec.level, method, parameter, n_failed))
    return ExperimentResult(spec=spec, rows=rows,
                            trials=outcomes if keep_trials else None)


def _trial_worker(args):
    spec, s = args
    return run_trial(spec, s)
