"""Binary fixed-effects regression with possibly missing response.

Logit or probit link for the response, logistic link for the missingness
probability. Two mechanisms are supported: missing completely at random
(the missingness model carries no response term, so estimation of the
regression coefficients uses the recorded units only) and missing not at
random (a selection model whose interest parameter stacks the regression
and missingness coefficients).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit, log_ndtr, ndtr

from . import core, optim
from .core import ClusteredDataset, ClusteredModel, make_dataset

#: linear predictors are clamped here before any link evaluation; beyond
#: this the probabilities are numerically 0/1 in double precision
PREDICTOR_CLAMP = 35.0

#: search bound on the response coefficient of the missingness model;
#: hitting it signals separation
GAMMA2_BOUND = 30.0

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


class ProbabilityUnderflowError(FloatingPointError):
    """A log-likelihood term had a non-positive argument after clamping."""


class Link:
    """Response link: CDF, density, and tail-stable derived ratios.

    ``pdf_ratio`` is f'/f, ``mills_lower`` is f/F and ``mills_upper`` is
    f/(1-F); the Mills ratios stay finite in double precision at any
    clamped predictor, which keeps scores and information stable where F
    underflows.
    """

    kind: str

    def cdf(self, eta): ...
    def log_cdf(self, eta): ...
    def pdf(self, eta): ...
    def log_pdf(self, eta): ...
    def pdf_ratio(self, eta): ...
    def mills_lower(self, eta): ...
    def mills_upper(self, eta): ...


class LogitLink(Link):
    kind = "logit"

    def cdf(self, eta):
        return expit(eta)

    def log_cdf(self, eta):
        return log_expit(eta)

    def pdf(self, eta):
        p = expit(eta)
        return p * (1.0 - p)

    def log_pdf(self, eta):
        return log_expit(eta) + log_expit(-eta)

    def pdf_ratio(self, eta):
        return 1.0 - 2.0 * expit(eta)

    def mills_lower(self, eta):
        return expit(-eta)

    def mills_upper(self, eta):
        return expit(eta)


class ProbitLink(Link):
    kind = "probit"

    def cdf(self, eta):
        return ndtr(eta)

    def log_cdf(self, eta):
        return log_ndtr(eta)

    def pdf(self, eta):
        return np.exp(-0.5 * eta ** 2) / np.sqrt(2.0 * np.pi)

    def log_pdf(self, eta):
        return -0.5 * eta ** 2 - _LOG_SQRT_2PI

    def pdf_ratio(self, eta):
        return -eta

    def mills_lower(self, eta):
        return np.exp(self.log_pdf(eta) - log_ndtr(eta))

    def mills_upper(self, eta):
        return np.exp(self.log_pdf(eta) - log_ndtr(-eta))


LOGIT = LogitLink()
PROBIT = ProbitLink()
_LINKS = {"logit": LOGIT, "probit": PROBIT}

#: the missingness probability always uses the logistic CDF
G = LOGIT


def get_link(link) -> Link:
    if isinstance(link, Link):
        return link
    try:
        return _LINKS[link]
    except KeyError:
        raise ValueError(f"unknown link {link!r}; expected logit or probit") from None


@dataclass
class BinaryMissingParams:
    """Parameter record for one evaluation of the selection model."""

    beta: np.ndarray
    gamma1: np.ndarray | None = None
    gamma2: float = 0.0
    lam: np.ndarray | float = 0.0
    mechanism: str = "mcar"
    link: str = "logit"

    def __post_init__(self):
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        if self.gamma1 is not None:
            self.gamma1 = np.atleast_1d(np.asarray(self.gamma1, dtype=float))
        if self.mechanism not in ("mcar", "mnar"):
            raise ValueError("mechanism must be mcar or mnar")
        if self.mechanism == "mcar" and self.gamma2 != 0.0:
            raise ValueError("MCAR requires gamma2 = 0")


@dataclass
class CellProbabilities:
    """Response and missingness probabilities for a block of units."""

    pi: np.ndarray
    zeta0: np.ndarray
    zeta1: np.ndarray

    def __post_init__(self):
        for name in ("pi", "zeta0", "zeta1"):
            v = np.asarray(getattr(self, name), dtype=float)
            setattr(self, name, v)
            if np.any((v <= 0.0) | (v >= 1.0)):
                raise ValueError(f"{name} must lie strictly inside (0, 1)")

    def mixture(self) -> np.ndarray:
        """P(unit missing) marginalized over the unobserved response."""
        return (1.0 - self.pi) * self.zeta0 + self.pi * self.zeta1


def cell_probabilities(params: BinaryMissingParams, data: ClusteredDataset) -> CellProbabilities:
    link = get_link(params.link)
    lam = np.broadcast_to(np.atleast_1d(np.asarray(params.lam, float)), (data.n_clusters,))
    eta = _clamp(lam[:, None] + data.covariates @ params.beta)
    g1 = params.gamma1 if params.gamma1 is not None else np.zeros(data.n_covariates)
    u0 = _clamp(data.covariates @ g1)
    return CellProbabilities(pi=link.cdf(eta), zeta0=G.cdf(u0),
                             zeta1=G.cdf(_clamp(u0 + params.gamma2)))


def _clamp(eta):
    return np.clip(eta, -PREDICTOR_CLAMP, PREDICTOR_CLAMP)


def _masks(data: ClusteredDataset):
    obs = (data.indicators == 0.0) & data.unit_mask
    mis = (data.indicators == 1.0) & data.unit_mask
    return obs, mis


def _eta(link, beta, lam, data):
    lam = np.asarray(lam, dtype=float)
    if lam.ndim == 0:
        lam = np.full(data.n_clusters, float(lam))
    return _clamp(lam[:, None] + data.covariates @ beta)


# ---------------------------------------------------------------------------
# vectorized kernels (per-cluster results as length-N arrays)
# ---------------------------------------------------------------------------

def _loglik_terms(link, mechanism, beta, gamma1, gamma2, lam, data):
    obs, mis = _masks(data)
    eta = _eta(link, beta, lam, data)
    y = np.where(obs, np.nan_to_num(data.responses), 0.0)
    ll = np.where(obs, y * link.log_cdf(eta) + (1.0 - y) * link.log_cdf(-eta), 0.0)
    if mechanism == "mnar":
        u0 = _clamp(data.covariates @ gamma1)
        # observed units contribute log(1 - zeta) at their recorded response
        u_at_y = _clamp(u0 + gamma2 * y)
        ll = ll + np.where(obs, G.log_cdf(-u_at_y), 0.0)
        pi = link.cdf(eta)
        mix = pi * G.cdf(_clamp(u0 + gamma2)) + (1.0 - pi) * G.cdf(u0)
        if np.any(mix[mis] <= 0.0):
            raise ProbabilityUnderflowError("mixture probability underflowed to 0")
        ll = ll + np.where(mis, np.log(np.maximum(mix, 1e-300)), 0.0)
    return ll.sum(axis=1)


def _score_info_terms(link, mechanism, beta, gamma1, gamma2, lam, data,
                      want_info=True):
    """Per-cluster nuisance score and observed information."""
    obs, mis = _masks(data)
    eta = _eta(link, beta, lam, data)
    y = np.where(obs, np.nan_to_num(data.responses), 0.0)
    r_lo = link.mills_lower(eta)    # f/F
    r_hi = link.mills_upper(eta)    # f/(1-F)
    g = link.pdf_ratio(eta)         # f'/f
    score = np.where(obs, y * r_lo - (1.0 - y) * r_hi, 0.0)
    info = None
    if want_info:
        info = np.where(obs, y * r_lo * (r_lo - g) + (1.0 - y) * r_hi * (r_hi + g), 0.0)
    if mechanism == "mnar":
        s_mis = _missing_score_weight(link, beta, gamma1, gamma2, eta, data)
        score = score + np.where(mis, s_mis, 0.0)
        if want_info:
            info = info + np.where(mis, s_mis * (s_mis - g), 0.0)
    return score.sum(axis=1), (info.sum(axis=1) if want_info else None)


def _missing_score_weight(link, beta, gamma1, gamma2, eta, data):
    """Per-unit score contribution of a missing response: f(z1-z0)/D."""
    u0 = _clamp(data.covariates @ gamma1)
    z0, z1 = G.cdf(u0), G.cdf(_clamp(u0 + gamma2))
    pi = link.cdf(eta)
    d = pi * z1 + (1.0 - pi) * z0
    return link.pdf(eta) * (z1 - z0) / np.maximum(d, 1e-300)


def _observed_counts(data):
    obs, _ = _masks(data)
    n_obs = obs.sum(axis=1)
    s_obs = np.where(obs, np.nan_to_num(data.responses), 0.0).sum(axis=1)
    return n_obs, s_obs


def _solve_constrained(link, mechanism, beta, gamma1, gamma2, data,
                       score_tol=1e-11, max_iter=80):
    """Per-cluster root of the nuisance score, safeguarded Newton/bisection.

    Non-informative clusters get +/-inf (separation) or NaN (no observed
    units); informative ones always bracket a root because the observed
    part of the score dominates both tails.
    """
    n = data.n_clusters
    n_obs, s_obs = _observed_counts(data)
    lam = np.full(n, np.nan)
    lam[(n_obs > 0) & (s_obs == 0)] = -np.inf
    lam[(n_obs > 0) & (s_obs == n_obs)] = np.inf
    active = (n_obs > 0) & (s_obs > 0) & (s_obs < n_obs)
    if not active.any():
        return lam

    def score_at(x):
        s, _ = _score_info_terms(link, mechanism, beta, gamma1, gamma2, x, data,
                                 want_info=False)
        return s

    lo = np.full(n, -20.0)
    hi = np.full(n, 20.0)
    for _ in range(5):
        bad_lo = active & (score_at(lo) <= 0.0)
        bad_hi = active & (score_at(hi) >= 0.0)
        if not (bad_lo.any() or bad_hi.any()):
            break
        lo = np.where(bad_lo, 2.0 * lo, lo)
        hi = np.where(bad_hi, 2.0 * hi, hi)
    else:
        still = active & ((score_at(lo) <= 0.0) | (score_at(hi) >= 0.0))
        active = active & ~still  # leave NaN: cluster should have been dropped

    x = 0.5 * (lo + hi)
    live = active.copy()
    for _ in range(max_iter):
        if not live.any():
            break
        s, j = _score_info_terms(link, mechanism, beta, gamma1, gamma2, x, data)
        done = np.abs(s) <= score_tol
        live = live & ~done
        pos = s > 0.0
        lo = np.where(live & pos, x, lo)
        hi = np.where(live & ~pos, x, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = x + s / j
        usable = live & (j > 0.0) & np.isfinite(newton) & (newton > lo) & (newton < hi)
        x = np.where(live, np.where(usable, newton, 0.5 * (lo + hi)), x)
        live = live & ((hi - lo) > 1e-14 * (1.0 + np.abs(x)))
    lam[active] = x[active]
    return lam


# ---------------------------------------------------------------------------
# operations in the parameter-record form
# ---------------------------------------------------------------------------

def cluster_obs_loglik(params: BinaryMissingParams, cluster: ClusteredDataset) -> float:
    """Observed-data log-likelihood of one cluster under the selection model."""
    if params.gamma1 is None:
        raise ValueError("the selection likelihood needs gamma1")
    terms = _loglik_terms(get_link(params.link), "mnar", params.beta,
                          params.gamma1, params.gamma2, params.lam, cluster)
    return float(terms.sum())


def mcar_cluster_loglik(params: BinaryMissingParams, cluster: ClusteredDataset) -> float:
    """Binary-regression log-likelihood computed on the recorded units only."""
    terms = _loglik_terms(get_link(params.link), "mcar", params.beta,
                          None, 0.0, params.lam, cluster)
    return float(terms.sum())


def nuisance_score(params: BinaryMissingParams, cluster: ClusteredDataset) -> float:
    s, _ = _score_info_terms(get_link(params.link), params.mechanism, params.beta,
                             params.gamma1, params.gamma2, params.lam, cluster,
                             want_info=False)
    return float(s.sum())


def nuisance_obs_info(params: BinaryMissingParams, cluster: ClusteredDataset) -> float:
    _, j = _score_info_terms(get_link(params.link), params.mechanism, params.beta,
                             params.gamma1, params.gamma2, params.lam, cluster)
    return float(j.sum())


def constrained_nuisance(params: BinaryMissingParams, cluster: ClusteredDataset) -> float:
    """Root of the nuisance score in the cluster intercept.

    Returns +/-inf under separation (all observed responses equal) and NaN
    for a fully missing cluster; both mark a cluster that should have been
    dropped.
    """
    lam = _solve_constrained(get_link(params.link), params.mechanism, params.beta,
                             params.gamma1, params.gamma2, cluster)
    return float(lam[0])


def exact_expectation_mcar(fit_at_mle: BinaryMissingParams, beta,
                           cluster: ClusteredDataset, lam_beta=None) -> float:
    """Closed-form MCAR expectation of the two-point score product.

    Conditions on the recorded units of the cluster at hand. With the
    logit link it reduces to the fit-only sum of variances
    pi_hat (1 - pi_hat) and is constant in ``beta``. ``lam_beta`` overrides
    the constrained intercept (otherwise solved from the score).
    """
    link = get_link(fit_at_mle.link)
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    if lam_beta is None:
        lam_beta = _solve_constrained(link, "mcar", beta, None, 0.0, cluster)
    obs, _ = _masks(cluster)
    eta_b = _eta(link, beta, lam_beta, cluster)
    eta_hat = _eta(link, fit_at_mle.beta, fit_at_mle.lam, cluster)
    log_b = link.log_pdf(eta_b) - link.log_cdf(eta_b) - link.log_cdf(-eta_b)
    terms = np.where(obs, np.exp(log_b + link.log_pdf(eta_hat)), 0.0)
    return float(terms.sum())


def drop_noninformative(data: ClusteredDataset):
    """Remove clusters with constant or fully missing observed responses."""
    n_obs, s_obs = _observed_counts(data)
    keep = (n_obs > 0) & (s_obs > 0) & (s_obs < n_obs)
    dropped = int((~keep).sum())
    return (data if dropped == 0 else data.subset(keep)), dropped


def fit_missingness_regression(data: ClusteredDataset, tol=None):
    """ML fit of the missingness indicator on the covariates, no intercept.

    Parameterizes stage-two deletion when simulating MCAR replicates.
    Separation drives components beyond the cap, which is reported as
    non-convergence with the capped estimate.
    """
    mask = data.unit_mask
    x = data.covariates[mask]
    m = data.indicators[mask]

    def loglik(gamma):
        u = _clamp(x @ gamma)
        return float(np.sum(m * G.log_cdf(u) + (1.0 - m) * G.log_cdf(-u)))

    res = optim.maximize_multivariate(loglik, np.zeros(data.n_covariates),
                                      tol or optim.DEFAULT_MULTI_TOL)
    gamma = np.atleast_1d(np.asarray(res.argmax, dtype=float))
    converged = bool(res.converged)
    if np.any(np.abs(gamma) > GAMMA2_BOUND):
        gamma = np.clip(gamma, -GAMMA2_BOUND, GAMMA2_BOUND)
        converged = False
    return gamma, converged


def make_binary_dataset(responses, covariates, missing=None, unit_mask=None,
                        cluster_labels=None) -> ClusteredDataset:
    """Dataset builder enforcing the response/missing-indicator pairing."""
    responses = np.asarray(responses, dtype=float)
    if responses.ndim == 1:
        responses = responses[None, :]
    if missing is None:
        missing = np.isnan(responses).astype(float)
    missing = np.asarray(missing, dtype=float)
    if missing.ndim == 1:
        missing = missing[None, :]
    responses = np.where(missing == 1.0, np.nan, responses)
    if unit_mask is None:
        unit_mask = np.ones(responses.shape, dtype=bool)
    present = np.asarray(unit_mask, dtype=bool) & (missing == 0.0)
    vals = responses[present]
    if vals.size and not np.isin(vals, (0.0, 1.0)).all():
        raise ValueError("observed responses must be 0/1")
    return make_dataset(responses, covariates, missing, unit_mask,
                        cluster_labels=cluster_labels)


# ---------------------------------------------------------------------------
# engine-facing model
# ---------------------------------------------------------------------------

@dataclass
class _BinaryReplicateBank:
    miss: np.ndarray          # (R, N, T) missing indicator
    obs: np.ndarray           # (R, N, T) observed indicator
    obs_y: np.ndarray         # (R, N, T) observed response (0 elsewhere)
    scores_at_mle: np.ndarray  # (R, N)


class BinaryMissingModel(ClusteredModel):
    """Engine adapter for the binary regression with missing responses.

    ``mechanism`` selects the interest parameter: the regression
    coefficients alone (mcar) or those stacked with the missingness
    coefficients (mnar). ``fixed_gamma2`` pins the response coefficient of
    the missingness model, shrinking the search space accordingly.
    """

    def __init__(self, link="logit", mechanism="mcar", fixed_gamma2=None):
        self.link = get_link(link)
        if mechanism not in ("mcar", "mnar"):
            raise ValueError("mechanism must be mcar or mnar")
        self.mechanism = mechanism
        self.fixed_gamma2 = fixed_gamma2
        if mechanism == "mcar" and fixed_gamma2 not in (None, 0.0):
            raise ValueError("MCAR has no free gamma2")

    # -- parameter packing ---------------------------------------------------

    def _split(self, psi, p):
        psi = np.atleast_1d(np.asarray(psi, dtype=float))
        if self.mechanism == "mcar":
            return psi[:p], None, 0.0
        gamma1 = psi[p:2 * p]
        if self.fixed_gamma2 is not None:
            return psi[:p], gamma1, float(self.fixed_gamma2)
        return psi[:p], gamma1, float(psi[2 * p])

    def param_names(self, data):
        p = data.n_covariates
        betas = tuple(f"beta{j + 1}" for j in range(p))
        if self.mechanism == "mcar":
            return betas
        gammas = tuple(f"gamma1_{j + 1}" for j in range(p))
        if self.fixed_gamma2 is not None:
            return betas + gammas
        return betas + gammas + ("gamma2",)

    def initial_psi(self, data):
        p = data.n_covariates
        if self.mechanism == "mcar":
            return np.zeros(p)
        gamma1, _ = fit_missingness_regression(data)
        gamma1 = np.clip(gamma1, -5.0, 5.0)
        if self.fixed_gamma2 is not None:
            return np.concatenate([np.zeros(p), gamma1])
        return np.concatenate([np.zeros(p), gamma1, [0.0]])

    def params_feasible(self, psi):
        psi = np.atleast_1d(np.asarray(psi, dtype=float))
        if not np.all(np.isfinite(psi)):
            return False
        if self.mechanism == "mnar" and self.fixed_gamma2 is None:
            return abs(psi[-1]) <= GAMMA2_BOUND
        return True

    def bound_hits(self, psi):
        if self.mechanism == "mnar" and self.fixed_gamma2 is None \
                and abs(psi[-1]) >= GAMMA2_BOUND - 0.5:
            return ("gamma2_at_bound",)
        return ()

    def bound_components(self, data):
        if self.mechanism == "mnar" and self.fixed_gamma2 is None:
            return (2 * data.n_covariates,)
        return ()

    # -- likelihood pieces ----------------------------------------------------

    def informative_mask(self, data):
        n_obs, s_obs = _observed_counts(data)
        return (n_obs > 0) & (s_obs > 0) & (s_obs < n_obs)

    def cluster_logliks(self, psi, lam, data):
        beta, gamma1, gamma2 = self._split(psi, data.n_covariates)
        return _loglik_terms(self.link, self.mechanism, beta, gamma1, gamma2, lam, data)

    def nuisance_score(self, psi, lam, data):
        beta, gamma1, gamma2 = self._split(psi, data.n_covariates)
        s, _ = _score_info_terms(self.link, self.mechanism, beta, gamma1, gamma2,
                                 lam, data, want_info=False)
        return s

    def nuisance_obs_info(self, psi, lam, data):
        beta, gamma1, gamma2 = self._split(psi, data.n_covariates)
        _, j = _score_info_terms(self.link, self.mechanism, beta, gamma1, gamma2,
                                 lam, data)
        return j

    def constrained_nuisance(self, psi, data):
        beta, gamma1, gamma2 = self._split(psi, data.n_covariates)
        return _solve_constrained(self.link, self.mechanism, beta, gamma1, gamma2, data)

    def exact_expectation(self, psi_mle, lam_mle, psi, lam_psi, data):
        if self.mechanism != "mcar":
            raise NotImplementedError("closed form exists under MCAR only")
        beta_mle, _, _ = self._split(psi_mle, data.n_covariates)
        beta, _, _ = self._split(psi, data.n_covariates)
        obs, _ = _masks(data)
        eta_b = _eta(self.link, beta, lam_psi, data)
        eta_hat = _eta(self.link, beta_mle, lam_mle, data)
        log_b = (self.link.log_pdf(eta_b) - self.link.log_cdf(eta_b)
                 - self.link.log_cdf(-eta_b))
        terms = np.where(obs, np.exp(log_b + self.link.log_pdf(eta_hat)), 0.0)
        return terms.sum(axis=1)

    # -- replicate machinery ----------------------------------------------------

    def _deletion_gamma(self, psi, data):
        """(gamma1, gamma2) of the stage-two deletion model."""
        if self.mechanism == "mnar":
            beta, gamma1, gamma2 = self._split(psi, data.n_covariates)
            return gamma1, gamma2
        if not (data.indicators[data.unit_mask] == 1.0).any():
            return None, 0.0  # complete data: nothing to delete
        gamma1, _ = fit_missingness_regression(data)
        return gamma1, 0.0

    def simulate_replicate(self, psi, lam, data, rng, deletion_gamma=None):
        """Two-stage replicate: complete responses, then random deletion."""
        beta, _, _ = self._split(psi, data.n_covariates)
        eta = _eta(self.link, beta, lam, data)
        y = (rng.random(eta.shape) < self.link.cdf(eta)).astype(float)
        if deletion_gamma is None:
            gamma1, gamma2 = self._deletion_gamma(psi, data)
        else:
            gamma1, gamma2 = deletion_gamma
        if gamma1 is None:
            miss = np.zeros(eta.shape)
        else:
            zeta = G.cdf(_clamp(data.covariates @ gamma1 + gamma2 * y))
            miss = (rng.random(eta.shape) < zeta).astype(float)
        miss = np.where(data.unit_mask, miss, 0.0)
        responses = np.where(miss == 1.0, np.nan, y)
        responses = np.where(data.unit_mask, responses, np.nan)
        return ClusteredDataset(responses=responses, covariates=data.covariates,
                                indicators=miss, unit_mask=data.unit_mask,
                                initial_conditions=data.initial_conditions,
                                cluster_labels=data.cluster_labels)

    def build_replicates(self, psi, lam, data, rng, n_replicates):
        beta, _, _ = self._split(psi, data.n_covariates)
        gamma1, gamma2 = self._deletion_gamma(psi, data)
        eta = _eta(self.link, beta, lam, data)
        shape = (n_replicates,) + eta.shape
        y = (rng.random(shape) < self.link.cdf(eta)[None]).astype(float)
        if gamma1 is None:
            miss = np.zeros(shape)
        else:
            zeta = G.cdf(_clamp((data.covariates @ gamma1)[None] + gamma2 * y))
            miss = (rng.random(shape) < zeta).astype(float)
        valid = data.unit_mask[None]
        miss = np.where(valid, miss, 0.0)
        obs = np.where(valid, 1.0 - miss, 0.0)
        bank = _BinaryReplicateBank(miss=miss, obs=obs, obs_y=obs * y,
                                    scores_at_mle=np.empty(0))
        bank.scores_at_mle = self._replicate_scores(bank, psi, lam, data)
        return bank

    def _replicate_scores(self, bank, psi, lam, data):
        """Nuisance scores of every replicate at (psi, lam), shape (R, N).

        The per-unit weights depend on the parameters and covariates only,
        so one (N, T) weight array serves all replicates.
        """
        beta, gamma1, gamma2 = self._split(psi, data.n_covariates)
        eta = _eta(self.link, beta, lam, data)
        w_obs = np.exp(self.link.log_pdf(eta) - self.link.log_cdf(eta)
                       - self.link.log_cdf(-eta))
        pi = self.link.cdf(eta)
        scores = (np.einsum("rnt,nt->rn", bank.obs_y, w_obs)
                  - np.einsum("rnt,nt->rn", bank.obs, pi * w_obs))
        if self.mechanism == "mnar":
            s_mis = _missing_score_weight(self.link, beta, gamma1, gamma2, eta, data)
            scores = scores + np.einsum("rnt,nt->rn", bank.miss, s_mis)
        return scores

    def replicate_expectation(self, bank, psi, lam_psi, data):
        scores_psi = self._replicate_scores(bank, psi, lam_psi, data)
        return (scores_psi * bank.scores_at_mle).mean(axis=0)
