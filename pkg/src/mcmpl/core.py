"""Model-agnostic engine: profile likelihood, its Monte Carlo modification,
fitting, standard errors and Wald intervals.

A model plugs in through :class:`ClusteredModel`, which supplies per-cluster
log-likelihoods, nuisance scores and observed information, constrained
nuisance estimates, and a replicate simulator. Everything here operates on
whole datasets at once; per-cluster values come back as length-``N`` arrays.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from . import optim
from .optim import Tolerances


class NoInformativeClustersError(ValueError):
    """Every cluster of the dataset is non-informative."""


class NonPositiveSEError(ValueError):
    """A Wald interval was requested with a non-positive standard error."""


DEFAULT_SEED = 1729

#: methods recognised by :func:`fit`
FIT_METHODS = ("profile", "mpl-exact", "mcmpl")


def substream(master_seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator for the substream identified by ``key``.

    Distinct keys produce non-overlapping Philox streams, so parallel
    consumers derived from the same master seed never share draws.
    """
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class ClusteredDataset:
    """Clustered observations in padded array form.

    ``responses`` holds NaN at padded slots and, for the missing-response
    model, at unobserved units. ``indicators`` carries the model-dependent
    0/1 flag (missingness or event). ``unit_mask`` marks real units, so
    ragged cluster sizes are supported.
    """

    responses: np.ndarray            # (N, T) float
    covariates: np.ndarray           # (N, T, p) float
    indicators: np.ndarray           # (N, T) float 0/1
    unit_mask: np.ndarray            # (N, T) bool
    initial_conditions: np.ndarray | None = None   # (N,) for AR(1)
    cluster_labels: tuple | None = None

    def __post_init__(self):
        n, t = self.responses.shape
        if self.covariates.shape[:2] != (n, t) or self.indicators.shape != (n, t):
            raise ValueError("array shapes disagree")
        if self.unit_mask.shape != (n, t):
            raise ValueError("unit_mask shape disagrees")
        ind = self.indicators[self.unit_mask]
        if ind.size and not np.isin(ind, (0.0, 1.0)).all():
            raise ValueError("indicators must be 0/1")
        if self.initial_conditions is not None and len(self.initial_conditions) != n:
            raise ValueError("one initial condition per cluster required")

    @property
    def n_clusters(self) -> int:
        return self.responses.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[2]

    @property
    def cluster_sizes(self) -> np.ndarray:
        return self.unit_mask.sum(axis=1)

    def subset(self, keep) -> "ClusteredDataset":
        keep = np.asarray(keep)
        labels = None
        if self.cluster_labels is not None:
            labels = tuple(np.asarray(self.cluster_labels, dtype=object)[keep])
        return ClusteredDataset(
            responses=self.responses[keep],
            covariates=self.covariates[keep],
            indicators=self.indicators[keep],
            unit_mask=self.unit_mask[keep],
            initial_conditions=None if self.initial_conditions is None
            else self.initial_conditions[keep],
            cluster_labels=labels,
        )

    def cluster(self, i: int) -> "ClusteredDataset":
        return self.subset([i])


def make_dataset(responses, covariates=None, indicators=None, unit_mask=None,
                 initial_conditions=None, cluster_labels=None) -> ClusteredDataset:
    """Build a :class:`ClusteredDataset`, normalizing shapes.

    ``covariates`` may be omitted (no regressors), 2-d (single regressor)
    or 3-d; missing pieces default to fully-present units and zero
    indicators.
    """
    responses = np.asarray(responses, dtype=float)
    if responses.ndim == 1:
        responses = responses[None, :]
    n, t = responses.shape
    if covariates is None:
        covariates = np.zeros((n, t, 0))
    else:
        covariates = np.asarray(covariates, dtype=float)
        if covariates.ndim == 2:
            covariates = covariates[:, :, None]
    if indicators is None:
        indicators = np.zeros((n, t))
    indicators = np.asarray(indicators, dtype=float)
    if indicators.ndim == 1:
        indicators = indicators[None, :]
    if unit_mask is None:
        unit_mask = np.ones((n, t), dtype=bool)
    unit_mask = np.asarray(unit_mask, dtype=bool)
    init = None if initial_conditions is None else np.asarray(initial_conditions, dtype=float)
    return ClusteredDataset(responses=responses, covariates=covariates,
                            indicators=indicators, unit_mask=unit_mask,
                            initial_conditions=init, cluster_labels=cluster_labels)


@dataclass(frozen=True)
class MonteCarloConfig:
    """Replicate count, master seed and the substream derivation rule."""

    replicates: int = 500
    master_seed: int = DEFAULT_SEED
    substream_policy: str = "philox-spawn"

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("need at least one replicate")
        if self.substream_policy != "philox-spawn":
            raise ValueError(f"unknown substream policy {self.substream_policy!r}")

    def generator(self, *key: int) -> np.random.Generator:
        return substream(self.master_seed, *key)


@dataclass
class FitResult:
    """Estimates and diagnostics for one maximized objective."""

    psi_hat: np.ndarray
    std_errors: np.ndarray
    lambda_hat: np.ndarray
    max_value: float
    method: str
    converged: bool
    dropped_clusters: int
    param_names: tuple[str, ...]
    cov: np.ndarray | None = None
    iterations: int = 0
    warnings: tuple[str, ...] = ()


@dataclass(frozen=True)
class WaldInterval:
    lo: float
    hi: float
    level: float

    def __post_init__(self):
        if not 0.0 < self.level < 1.0:
            raise ValueError("level must be inside (0, 1)")
        if self.lo > self.hi:
            raise ValueError("need lo <= hi")

    def contains(self, value: float) -> bool:
        return self.lo <= value <= self.hi


class ClusteredModel(ABC):
    """Behavior a clustered-data model supplies to the engine.

    All array-returning methods are vectorized over clusters: ``lam`` and
    the return values are length-``N`` arrays aligned with the dataset.
    """

    @abstractmethod
    def param_names(self, data: ClusteredDataset) -> tuple[str, ...]: ...

    @abstractmethod
    def initial_psi(self, data: ClusteredDataset) -> np.ndarray: ...

    @abstractmethod
    def informative_mask(self, data: ClusteredDataset) -> np.ndarray: ...

    @abstractmethod
    def cluster_logliks(self, psi, lam, data) -> np.ndarray: ...

    @abstractmethod
    def nuisance_score(self, psi, lam, data) -> np.ndarray: ...

    @abstractmethod
    def nuisance_obs_info(self, psi, lam, data) -> np.ndarray: ...

    @abstractmethod
    def constrained_nuisance(self, psi, data) -> np.ndarray: ...

    @abstractmethod
    def simulate_replicate(self, psi, lam, data, rng) -> ClusteredDataset: ...

    def params_feasible(self, psi) -> bool:
        """Hard feasibility wall; infeasible psi makes every objective -inf."""
        return bool(np.all(np.isfinite(psi)))

    def build_replicates(self, psi, lam, data, rng, n_replicates: int):
        """Simulate the replicate bank used by the Monte Carlo expectation.

        The default stores the replicate datasets plus their nuisance
        scores at the maximum likelihood fit; models override this with
        packed-array banks when profitable.
        """
        reps = [self.simulate_replicate(psi, lam, data, rng)
                for _ in range(n_replicates)]
        scores = np.stack([self.nuisance_score(psi, lam, rep) for rep in reps])
        return _GenericReplicateBank(replicates=reps, scores_at_mle=scores)

    def replicate_expectation(self, bank, psi, lam_psi, data) -> np.ndarray:
        """Per-cluster mean over replicates of the two-point score product."""
        scores_psi = np.stack([self.nuisance_score(psi, lam_psi, rep)
                               for rep in bank.replicates])
        return (scores_psi * bank.scores_at_mle).mean(axis=0)

    def exact_expectation(self, psi_mle, lam_mle, psi, lam_psi, data) -> np.ndarray:
        raise NotImplementedError(
            f"{type(self).__name__} supplies no exact expectation formula")

    def has_exact_expectation(self) -> bool:
        return type(self).exact_expectation is not ClusteredModel.exact_expectation


@dataclass
class _GenericReplicateBank:
    replicates: list
    scores_at_mle: np.ndarray


def drop_noninformative(model: ClusteredModel, data: ClusteredDataset):
    """Remove clusters that cannot contribute to the interest parameter."""
    mask = model.informative_mask(data)
    dropped = int((~mask).sum())
    return (data if dropped == 0 else data.subset(mask)), dropped


def profile_loglik(model: ClusteredModel, data: ClusteredDataset, psi) -> float:
    """Sum of cluster log-likelihoods at the constrained nuisance estimates.

    Returns ``-inf`` when psi is infeasible or some constrained estimate is
    non-finite (a cluster that should have been dropped).
    """
    if data.n_clusters == 0:
        raise NoInformativeClustersError("no clusters left to profile")
    psi = np.atleast_1d(np.asarray(psi, dtype=float))
    if not model.params_feasible(psi):
        return -np.inf
    lam = model.constrained_nuisance(psi, data)
    if not np.all(np.isfinite(lam)):
        return -np.inf
    return float(model.cluster_logliks(psi, lam, data).sum())


def mc_expectation_term(model, data, fit_at_mle, psi, mc: MonteCarloConfig,
                        bank=None) -> np.ndarray:
    """Monte Carlo estimate of the per-cluster score-product expectation.

    ``fit_at_mle`` is the pair ``(psi_hat, lambda_hat)`` from the full ML
    fit. Replicates depend only on the fit and ``mc.master_seed``; passing
    the same configuration therefore reproduces them bit-for-bit, and a
    prebuilt ``bank`` can be supplied to share them across many psi
    evaluations (common random numbers).
    """
    psi_mle, lam_mle = fit_at_mle
    if bank is None:
        bank = model.build_replicates(psi_mle, lam_mle, data,
                                      mc.generator(0), mc.replicates)
    psi = np.atleast_1d(np.asarray(psi, dtype=float))
    lam_psi = model.constrained_nuisance(psi, data)
    return model.replicate_expectation(bank, psi, lam_psi, data)


def modified_profile_loglik(model, data, fit_at_mle, psi,
                            expectation_source="exact", mc=None, bank=None) -> float:
    """Profile log-likelihood plus the score-expectation modification.

    ``expectation_source`` is either ``"exact"`` (the model supplies a
    closed form) or a replicate bank / ``"mc"``; with ``"mc"`` and no bank
    the replicates are generated from ``mc``. Returns ``-inf`` whenever the
    observed information or the expectation is non-positive for some
    cluster, which marks the modification as undefined there.
    """
    if data.n_clusters == 0:
        raise NoInformativeClustersError("no clusters left to profile")
    psi = np.atleast_1d(np.asarray(psi, dtype=float))
    if not model.params_feasible(psi):
        return -np.inf
    lam_psi = model.constrained_nuisance(psi, data)
    if not np.all(np.isfinite(lam_psi)):
        return -np.inf
    lp = float(model.cluster_logliks(psi, lam_psi, data).sum())
    if not np.isfinite(lp):
        return -np.inf
    info = model.nuisance_obs_info(psi, lam_psi, data)
    if np.any(info <= 0.0) or not np.all(np.isfinite(info)):
        return -np.inf
    psi_mle, lam_mle = fit_at_mle
    if isinstance(expectation_source, str) and expectation_source == "exact":
        expect = model.exact_expectation(psi_mle, lam_mle, psi, lam_psi, data)
    else:
        if isinstance(expectation_source, str):  # "mc" without a prebuilt bank
            if bank is None:
                bank = model.build_replicates(psi_mle, lam_mle, data,
                                              mc.generator(0), mc.replicates)
            source = bank
        else:
            source = expectation_source
        expect = model.replicate_expectation(source, psi, lam_psi, data)
    if np.any(expect <= 0.0) or not np.all(np.isfinite(expect)):
        return -np.inf
    return lp + float(0.5 * np.log(info).sum() - np.log(expect).sum())


def fit(model: ClusteredModel, data: ClusteredDataset, method: str = "mcmpl",
        mc: MonteCarloConfig | None = None, tol: Tolerances | None = None,
        psi0=None) -> FitResult:
    """Drop non-informative clusters and maximize the requested objective.

    The profile likelihood is always fitted first; its maximizer seeds the
    modified-likelihood search, whose correction is O(1) against the
    O(NT) likelihood. Standard errors come from the numerical Hessian of
    the maximized objective itself.
    """
    if method not in FIT_METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {FIT_METHODS}")
    if method == "mpl-exact" and not model.has_exact_expectation():
        raise ValueError("model supplies no exact expectation; use mcmpl")
    tol = tol or optim.DEFAULT_MULTI_TOL
    mc = mc or MonteCarloConfig()

    kept, dropped = drop_noninformative(model, data)
    if kept.n_clusters == 0:
        raise NoInformativeClustersError("all clusters are non-informative")

    def lp(psi):
        return profile_loglik(model, kept, psi)

    start = np.atleast_1d(np.asarray(
        model.initial_psi(kept) if psi0 is None else psi0, dtype=float))
    prof = optim.maximize_multivariate(lp, start, tol)
    warnings_: list[str] = []

    if method == "profile":
        objective, opt = lp, prof
    else:
        psi_mle = np.atleast_1d(np.asarray(prof.argmax, dtype=float))
        lam_mle = model.constrained_nuisance(psi_mle, kept)
        fit_at_mle = (psi_mle, lam_mle)
        if method == "mpl-exact":
            def objective(psi):
                return modified_profile_loglik(model, kept, fit_at_mle, psi, "exact")
        else:
            bank = model.build_replicates(psi_mle, lam_mle, kept,
                                          mc.generator(0), mc.replicates)

            def objective(psi):
                return modified_profile_loglik(model, kept, fit_at_mle, psi, bank)
        opt = optim.maximize_multivariate(objective, psi_mle, tol)
        if not prof.converged:
            warnings_.append("profile_stage_not_converged")

    psi_hat = np.atleast_1d(np.asarray(opt.argmax, dtype=float))
    names = model.param_names(kept)
    bound_hits = getattr(model, "bound_hits", lambda psi: ())(psi_hat)
    warnings_.extend(bound_hits)

    se, cov = _standard_errors(objective, psi_hat, frozen=bound_hits and
                               getattr(model, "bound_components", lambda d: ())(kept))
    if np.any(~np.isfinite(se)) and not bound_hits:
        warnings_.append("hessian_not_negative_definite")

    lam_hat = model.constrained_nuisance(psi_hat, kept)
    return FitResult(psi_hat=psi_hat, std_errors=se, lambda_hat=lam_hat,
                     max_value=float(opt.value), method=method,
                     converged=bool(opt.converged), dropped_clusters=dropped,
                     param_names=tuple(names), cov=cov,
                     iterations=opt.iterations, warnings=tuple(warnings_))


def _standard_errors(objective, psi_hat, frozen=()):
    """SEs from the inverse negative Hessian; frozen components get NaN.

    ``frozen`` lists indices pinned at a search bound (separation); the
    Hessian is then taken over the free block only, so the remaining
    components are still reported.
    """
    n = psi_hat.size
    free = [j for j in range(n) if j not in set(frozen)]

    def restricted(z):
        full = psi_hat.copy()
        full[free] = z
        return objective(full)

    se = np.full(n, np.nan)
    cov_full = None
    try:
        H = optim.numerical_hessian(restricted, psi_hat[free])
        cov = np.linalg.inv(-H)
        diag = np.diag(cov).copy()
        good = diag > 0
        diag[~good] = np.nan
        se[free] = np.sqrt(diag)
        cov_full = np.full((n, n), np.nan)
        cov_full[np.ix_(free, free)] = cov
    except (optim.NonFiniteEvaluationError, np.linalg.LinAlgError):
        pass
    return se, cov_full


def wald_interval(fit_result: FitResult, component: int, level: float = 0.95) -> WaldInterval:
    """Estimate +/- normal quantile times standard error."""
    se = float(fit_result.std_errors[component])
    if not se > 0.0:
        raise NonPositiveSEError(f"standard error {se} is not positive")
    z = norm.ppf(0.5 * (1.0 + level))
    est = float(fit_result.psi_hat[component])
    return WaldInterval(lo=est - z * se, hi=est + z * se, level=level)
