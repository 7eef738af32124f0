"""Constrained MALA kernels, the nested two-stage sampler, and exact oracles.

The outer stage samples the auxiliary matrix xi from its induced marginal
(score estimated by inner chains over w | xi); the second stage samples w
from the log-concave reverse conditional at retained xi values.  Small-scale
quadrature oracles provide ground truth for both stages.

Reproducibility: every random draw comes from a counter-based Philox stream
keyed by (seed, chain id) with the step index as counter, so identical seeds
and configs give bit-identical chains regardless of scheduling.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .nnmodel import Dataset, NetworkConfig
from .coupling import (
    CouplingParams,
    in_B,
    reverse_logdensity_unnorm,
    reverse_score,
)

__all__ = [
    "SamplerError",
    "TargetDensity",
    "ChainConfig",
    "ChainDiagnostics",
    "ChainRng",
    "step_rng",
    "mala_chain",
    "independence_chain",
    "sample_reverse_conditional",
    "sample_reverse_conditional_prior_mh",
    "sample_marginal_xi",
    "TwoStageBudgets",
    "two_stage_sample",
    "PosteriorQuadrature",
    "reference_posterior_quadrature",
    "quadrature_convergence_report",
    "CouplingOracle1D",
    "ess_estimate",
    "write_chain_jsonl",
]


class SamplerError(RuntimeError):
    """Chain failure: bad initial state, NaN score, or inner-chain abort."""


def step_rng(seed: int, chain_id: int, step: int) -> np.random.Generator:
    """Counter-based generator for one chain step.

    Philox keyed by (seed, chain_id) with the step index in the counter
    block, so each step draws from its own stream.
    """
    bg = np.random.Philox(key=np.array([seed, chain_id], dtype=np.uint64),
                          counter=np.array([0, 0, 0, step], dtype=np.uint64))
    return np.random.Generator(bg)


class ChainRng:
    """Reusable counter-based stream: at(step) == step_rng(seed, id, step).

    One Philox instance is repositioned per step instead of constructed,
    which keeps the per-step cost low without changing the stream.
    """

    def __init__(self, seed: int, chain_id: int):
        self._bg = np.random.Philox(key=np.array([seed, chain_id], dtype=np.uint64))
        self.gen = np.random.Generator(self._bg)

    def at(self, step: int) -> np.random.Generator:
        state = self._bg.state
        state["state"]["counter"][:] = 0
        state["state"]["counter"][3] = step
        state["buffer_pos"] = 4
        self._bg.state = state
        return self.gen


@dataclass
class TargetDensity:
    """Density interface for the generic chain.

    score must be the gradient of log_density on the support interior, up to
    any documented estimation error.  log_density_and_score, when provided,
    fuses both evaluations (one pass over the data) for the hot loop.
    """

    log_density: callable
    score: callable
    support_test: callable
    dimension: int
    log_density_and_score: callable = None

    def evaluate(self, x):
        if self.log_density_and_score is not None:
            return self.log_density_and_score(x)
        return self.log_density(x), np.asarray(self.score(x), dtype=float)


@dataclass
class ChainConfig:
    step_size: float
    iterations: int
    burn_in: int = 0
    thinning: int = 1
    seed: int = 0
    adapt_step: bool = True

    def __post_init__(self):
        if self.burn_in >= self.iterations:
            raise ValueError("burn_in must be smaller than iterations")
        if self.thinning < 1 or self.step_size <= 0:
            raise ValueError("need thinning >= 1 and a positive step size")


@dataclass
class ChainDiagnostics:
    acceptance_rate: float
    final_step_size: float
    ess_estimate: float
    support_rejections: int
    extras: dict = field(default_factory=dict)


class _DualAveraging:
    """Step-size adaptation toward a target acceptance rate.

    Runs during burn-in only and is frozen afterwards, keeping the retained
    portion of the chain Markovian.
    """

    def __init__(self, eps0: float, target: float = 0.574,
                 gamma: float = 0.05, t0: float = 10.0, kappa: float = 0.75):
        self.mu = math.log(10.0 * eps0)
        self.target = target
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.h_bar = 0.0
        self.log_eps_bar = math.log(eps0)
        self.t = 0

    def update(self, alpha: float) -> float:
        self.t += 1
        frac = 1.0 / (self.t + self.t0)
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (self.target - alpha)
        log_eps = self.mu - math.sqrt(self.t) / self.gamma * self.h_bar
        log_eps = min(max(log_eps, -20.0), 5.0)  # keep proposals finite
        eta = self.t ** (-self.kappa)
        self.log_eps_bar = eta * log_eps + (1.0 - eta) * self.log_eps_bar
        return math.exp(log_eps)

    @property
    def frozen(self) -> float:
        return math.exp(self.log_eps_bar)


def ess_estimate(samples: np.ndarray) -> float:
    """Effective sample size: Geyer initial-positive-sequence, min over dims."""
    x = np.atleast_2d(np.asarray(samples, dtype=float).T)  # (dim, S)
    S = x.shape[1]
    if S < 4:
        return float(S)
    out = []
    for row in x:
        row = row - row.mean()
        var = row @ row / S
        if var <= 0:
            out.append(float(S))
            continue
        nfft = 1 << (2 * S - 1).bit_length()
        f = np.fft.rfft(row, nfft)
        acov = np.fft.irfft(f * np.conj(f), nfft)[:S].real / S
        gamma = acov / acov[0]
        tau = 1.0
        m = 0
        while 2 * m + 2 < min(S, 2000):
            pair = gamma[2 * m + 1] + gamma[2 * m + 2]
            if pair <= 0:
                break
            tau += 2.0 * pair
            m += 1
        out.append(S / tau)
    return float(min(out))


def mala_chain(target: TargetDensity, cfg: ChainConfig, x0: np.ndarray,
               chain_id: int = 0):
    """Metropolis-adjusted Langevin chain with support rejection.

    Proposals outside the support are rejected outright (counted separately
    from Metropolis rejections).  With adapt_step, dual averaging targets
    acceptance 0.574 during burn-in and the step size is frozen afterwards.

    Returns (samples, diagnostics); diagnostics.extras carries the kept-step
    log densities and running acceptance snapshots.
    """
    x = np.asarray(x0, dtype=float).reshape(-1)
    if x.shape[0] != target.dimension:
        raise SamplerError("initial state has wrong dimension")
    if not target.support_test(x):
        raise SamplerError("initial state outside the target support")
    logp, grad = target.evaluate(x)
    if not np.all(np.isfinite(grad)):
        raise SamplerError("NaN in score at the initial state")

    eps = cfg.step_size
    adapter = _DualAveraging(eps) if cfg.adapt_step else None
    kept = []
    kept_logp = []
    kept_accept = []
    accepts = 0
    post_accepts = 0
    post_steps = 0
    support_rejections = 0
    chain_rng = ChainRng(cfg.seed, chain_id)

    for step in range(cfg.iterations):
        rng = chain_rng.at(step)
        noise = rng.standard_normal(target.dimension)
        prop = x + 0.5 * eps * eps * grad + eps * noise
        alpha = 0.0
        if target.support_test(prop):
            logp_prop, grad_prop = target.evaluate(prop)
            if not np.all(np.isfinite(grad_prop)):
                raise SamplerError("NaN in score at a proposal")
            fwd = prop - x - 0.5 * eps * eps * grad
            rev = x - prop - 0.5 * eps * eps * grad_prop
            log_ratio = (logp_prop - logp
                         + (-(rev @ rev) + (fwd @ fwd)) / (2.0 * eps * eps))
            alpha = min(1.0, math.exp(min(log_ratio, 0.0)))
            if rng.uniform() < alpha:
                x, logp, grad = prop, logp_prop, grad_prop
                accepts += 1
                if step >= cfg.burn_in:
                    post_accepts += 1
        else:
            support_rejections += 1

        if step < cfg.burn_in and adapter is not None:
            eps = adapter.update(alpha)
        elif step == cfg.burn_in and adapter is not None:
            eps = adapter.frozen
        if step >= cfg.burn_in:
            post_steps += 1
            if (step - cfg.burn_in) % cfg.thinning == 0:
                kept.append(x.copy())
                kept_logp.append(logp)
                kept_accept.append(accepts / (step + 1))

    samples = np.array(kept)
    diag = ChainDiagnostics(
        acceptance_rate=post_accepts / max(post_steps, 1),
        final_step_size=eps,
        ess_estimate=ess_estimate(samples) if len(samples) > 3 else float(len(samples)),
        support_rejections=support_rejections,
        extras={"log_density": np.array(kept_logp),
                "running_acceptance": np.array(kept_accept)},
    )
    return samples, diag


def independence_chain(target: TargetDensity, cfg: ChainConfig, proposal,
                       x0: np.ndarray, chain_id: int = 0):
    """Independence Metropolis chain with a user-supplied proposal sampler.

    proposal(rng) must return draws from a fixed distribution that is
    uniform over the target support (so the Hastings ratio reduces to the
    target ratio).  Useful when the target is a light tilt of the prior,
    e.g. the reverse conditional in the small-beta*N regime, where gradient
    kernels fight the l1 boundary.
    """
    x = np.asarray(x0, dtype=float).reshape(-1)
    if not target.support_test(x):
        raise SamplerError("initial state outside the target support")
    logp = target.log_density(x)
    kept = []
    kept_logp = []
    accepts = 0
    post_accepts = 0
    post_steps = 0
    chain_rng = ChainRng(cfg.seed, chain_id)
    for step in range(cfg.iterations):
        rng = chain_rng.at(step)
        prop = np.asarray(proposal(rng), dtype=float).reshape(-1)
        logp_prop = target.log_density(prop)
        if math.log(max(rng.uniform(), 1e-300)) < logp_prop - logp:
            x, logp = prop, logp_prop
            accepts += 1
            if step >= cfg.burn_in:
                post_accepts += 1
        if step >= cfg.burn_in:
            post_steps += 1
            if (step - cfg.burn_in) % cfg.thinning == 0:
                kept.append(x.copy())
                kept_logp.append(logp)
    samples = np.array(kept)
    diag = ChainDiagnostics(
        acceptance_rate=post_accepts / max(post_steps, 1),
        final_step_size=0.0,
        ess_estimate=ess_estimate(samples) if len(samples) > 3 else float(len(samples)),
        support_rejections=0,
        extras={"log_density": np.array(kept_logp)},
    )
    return samples, diag


def sample_reverse_conditional_prior_mh(cfg: NetworkConfig, data: Dataset,
                                        params: CouplingParams, xi: np.ndarray,
                                        chain_cfg: ChainConfig, chain_id: int = 0):
    """Reverse-conditional draws via independence MH with prior proposals.

    Exact MCMC for p*(w|xi); efficient when beta*l_n and the coupling
    quadratic vary by O(1) over the prior support (the marginal-concavity
    probe regime, where d is large and beta N is small).
    """
    from .priors import ContinuousL1Prior, sample_continuous

    if not in_B(xi, data.X[: params.n], params):
        raise ValueError("xi must lie in the constraint set B")
    target = reverse_conditional_target(cfg, data, params, xi)
    prior = ContinuousL1Prior(d=cfg.d, K=cfg.K)

    def proposal(rng):
        return sample_continuous(prior, rng).reshape(-1)

    samples, diag = independence_chain(target, chain_cfg, proposal,
                                       np.zeros(cfg.K * cfg.d), chain_id=chain_id)
    return samples.reshape(-1, cfg.K, cfg.d), diag


def _l1_rows_ok(flat: np.ndarray, K: int, d: int) -> bool:
    w = flat.reshape(K, d)
    return bool(np.all(np.abs(w).sum(axis=1) <= 1.0))


def reverse_conditional_target(cfg: NetworkConfig, data: Dataset,
                               params: CouplingParams, xi: np.ndarray) -> TargetDensity:
    """TargetDensity for p*(w | xi) with Z treated as constant."""
    K, d = cfg.K, cfg.d
    n = params.n
    X = np.ascontiguousarray(data.X[:n])
    XT = X.T
    y = data.y[:n]
    c = cfg.outer_weights
    act = cfg.activation
    beta, rho = params.beta, params.rho
    xi = np.asarray(xi, dtype=float)
    xiT = xi.T  # (K, n)

    def logd(flat):
        return reverse_logdensity_unnorm(cfg, flat.reshape(K, d), xi, data, params)

    def score(flat):
        return reverse_score(cfg, flat.reshape(K, d), xi, data, params)

    def fused(flat):
        w = flat.reshape(K, d)
        z = w @ XT                       # (K, n) preactivations
        res = y - c @ act.psi(z)
        quad = xiT - z                   # (K, n)
        logp = -0.5 * beta * (res @ res) - 0.5 * rho * np.sum(quad * quad)
        coef = (beta * c[:, None]) * act.dpsi(z) * res[None, :] + rho * quad
        return logp, (coef @ X).reshape(-1)

    return TargetDensity(
        log_density=logd,
        score=score,
        support_test=lambda flat: _l1_rows_ok(flat, K, d),
        dimension=K * d,
        log_density_and_score=fused,
    )


def sample_reverse_conditional(cfg: NetworkConfig, data: Dataset,
                               params: CouplingParams, xi: np.ndarray,
                               chain_cfg: ChainConfig, w0: np.ndarray = None,
                               chain_id: int = 0):
    """MALA over (S^d_1)^K targeting the reverse conditional at xi.

    Support is the per-row l1 constraint; proposals violating it are
    rejected.  Returns (samples shaped (S, K, d), diagnostics).
    """
    if not in_B(xi, data.X[: params.n], params):
        raise ValueError("xi must lie in the constraint set B")
    target = reverse_conditional_target(cfg, data, params, xi)
    if w0 is None:
        w0 = np.zeros(cfg.K * cfg.d)
    samples, diag = mala_chain(target, chain_cfg, np.asarray(w0).reshape(-1),
                               chain_id=chain_id)
    return samples.reshape(-1, cfg.K, cfg.d), diag


def _log_ratio_estimate(rho: float, xi_a: np.ndarray, xi_b: np.ndarray,
                        proj: np.ndarray) -> float:
    """Estimate log p*(xi_b) - log p*(xi_a) from reverse draws at xi_a.

    Uses log E_{w|xi_a} exp(-rho/2 (||xi_b - T||^2 - ||xi_a - T||^2)) with
    T the stacked projection of each draw.
    """
    da = xi_a - proj  # (S, n, K)
    db = xi_b - proj
    expo = -0.5 * rho * (np.sum(db * db, axis=(1, 2)) - np.sum(da * da, axis=(1, 2)))
    m = np.max(expo)
    return float(m + math.log(np.mean(np.exp(expo - m))))


def _inner_batch(cfg, data, params, xi, inner_cfg, w_start, seed, inner_id):
    icfg = ChainConfig(step_size=inner_cfg.step_size, iterations=inner_cfg.iterations,
                       burn_in=inner_cfg.burn_in, thinning=inner_cfg.thinning,
                       seed=seed, adapt_step=inner_cfg.adapt_step)
    try:
        samples, diag = sample_reverse_conditional(cfg, data, params, xi, icfg,
                                                   w0=w_start, chain_id=inner_id)
    except SamplerError as exc:
        raise SamplerError(f"inner chain failed: {exc}") from exc
    X = data.X[: params.n]
    proj = np.einsum("ij,skj->sik", X, samples)  # (S, n, K)
    return samples, proj, diag


def sample_marginal_xi(cfg: NetworkConfig, data: Dataset, params: CouplingParams,
                       outer_cfg: ChainConfig, inner_cfg: ChainConfig,
                       xi0: np.ndarray = None, w0: np.ndarray = None,
                       score_oracle=None, chain_id: int = 0):
    """Outer MALA over xi with support test in_B.

    The score rho*(-xi + X E[w|xi]) is estimated per step from a fresh inner
    chain warm-started at the previous inner state.  The Metropolis ratio
    uses a bridge estimate of the marginal log-density difference built from
    the inner batches at the current and proposed states (the exact marginal
    density is available only through these conditional expectations).

    score_oracle, when given, must expose score(xi)->(n,K) and
    log_marginal(xi)->float; it replaces the inner chains (used to validate
    the nested construction against exact quadrature).

    Returns (xi samples shaped (S, n, K), diagnostics).
    """
    n, K = params.n, cfg.K
    X = data.X[:n]
    if xi0 is None:
        xi0 = np.zeros((n, K))
    if not in_B(xi0, X, params):
        raise SamplerError("initial xi outside the constraint set B")
    xi = np.asarray(xi0, dtype=float)
    w_cur = np.zeros((cfg.K, cfg.d)) if w0 is None else np.asarray(w0, dtype=float)

    rho = params.rho
    seed = outer_cfg.seed

    def evaluate(xi_val, step, which):
        if score_oracle is not None:
            sc = np.asarray(score_oracle.score(xi_val))
            return None, None, sc, 0.0
        inner_id = (chain_id + 1) * 10_000_000 + 2 * step + which
        samples, proj, idiag = _inner_batch(cfg, data, params, xi_val, inner_cfg,
                                            w_cur.reshape(-1), seed, inner_id)
        sc = rho * (-xi_val + proj.mean(axis=0))
        se = float(np.mean(np.std(proj, axis=0) / math.sqrt(len(proj)))) * rho
        return samples, proj, sc, se

    eps = outer_cfg.step_size
    adapter = _DualAveraging(eps) if outer_cfg.adapt_step else None
    kept = []
    kept_se = []
    accepts = 0
    post_accepts = 0
    post_steps = 0
    support_rejections = 0

    samples_cur, proj_cur, score_cur, se_cur = evaluate(xi, 0, 0)
    if samples_cur is not None:
        w_cur = samples_cur[-1]
    chain_rng = ChainRng(seed, chain_id)

    for step in range(outer_cfg.iterations):
        rng = chain_rng.at(step)
        noise = rng.standard_normal((n, K))
        prop = xi + 0.5 * eps * eps * score_cur + eps * noise
        alpha = 0.0
        if in_B(prop, X, params):
            samples_p, proj_p, score_p, se_p = evaluate(prop, step, 1)
            if score_oracle is not None:
                log_target_diff = (score_oracle.log_marginal(prop)
                                   - score_oracle.log_marginal(xi))
            else:
                d_fwd = _log_ratio_estimate(rho, xi, prop, proj_cur)
                d_rev = -_log_ratio_estimate(rho, prop, xi, proj_p)
                log_target_diff = 0.5 * (d_fwd + d_rev)
            fwd = (prop - xi - 0.5 * eps * eps * score_cur).ravel()
            rev = (xi - prop - 0.5 * eps * eps * score_p).ravel()
            log_ratio = log_target_diff + (fwd @ fwd - rev @ rev) / (2.0 * eps * eps)
            alpha = min(1.0, math.exp(min(log_ratio, 0.0)))
            if rng.uniform() < alpha:
                xi = prop
                samples_cur, proj_cur, score_cur, se_cur = samples_p, proj_p, score_p, se_p
                if samples_cur is not None:
                    w_cur = samples_cur[-1]
                accepts += 1
                if step >= outer_cfg.burn_in:
                    post_accepts += 1
        else:
            support_rejections += 1

        if step < outer_cfg.burn_in and adapter is not None:
            eps = adapter.update(alpha)
        elif step == outer_cfg.burn_in and adapter is not None:
            eps = adapter.frozen
        if step >= outer_cfg.burn_in:
            post_steps += 1
            if (step - outer_cfg.burn_in) % outer_cfg.thinning == 0:
                kept.append(xi.copy())
                kept_se.append(se_cur)

    samples = np.array(kept)
    flat = samples.reshape(len(samples), -1) if len(samples) else samples
    diag = ChainDiagnostics(
        acceptance_rate=post_accepts / max(post_steps, 1),
        final_step_size=eps,
        ess_estimate=ess_estimate(flat) if len(samples) > 3 else float(len(samples)),
        support_rejections=support_rejections,
        extras={"inner_score_se": np.array(kept_se),
                "final_inner_state": w_cur},
    )
    return samples, diag


@dataclass
class TwoStageBudgets:
    outer: ChainConfig
    inner: ChainConfig
    conditional: ChainConfig
    n_xi: int = None  # retained xi draws (default: all kept by the outer chain)


def two_stage_sample(cfg: NetworkConfig, data: Dataset, params: CouplingParams,
                     budgets: TwoStageBudgets, chain_id: int = 0):
    """Draw xi from its marginal, then w from the reverse conditional.

    Output w draws are tagged with the index of the generating xi.  The
    w-marginal of the two-stage draw is the posterior p_n (up to the O(delta)
    bias of the omitted Z, quantified elsewhere).

    Returns (w draws (S, K, d), xi_index tags, diagnostics dict).
    """
    xi_samples, outer_diag = sample_marginal_xi(
        cfg, data, params, budgets.outer, budgets.inner, chain_id=chain_id)
    if budgets.n_xi is not None and budgets.n_xi < len(xi_samples):
        idx = np.linspace(0, len(xi_samples) - 1, budgets.n_xi).astype(int)
        xi_samples = xi_samples[idx]

    w_start = outer_diag.extras["final_inner_state"]
    draws = []
    tags = []
    cond_accepts = []
    for j, xi in enumerate(xi_samples):
        ccfg = ChainConfig(step_size=budgets.conditional.step_size,
                           iterations=budgets.conditional.iterations,
                           burn_in=budgets.conditional.burn_in,
                           thinning=budgets.conditional.thinning,
                           seed=budgets.conditional.seed,
                           adapt_step=budgets.conditional.adapt_step)
        cid = (chain_id + 1) * 100_000_000 + j
        samples, cdiag = sample_reverse_conditional(
            cfg, data, params, xi, ccfg, w0=w_start.reshape(-1), chain_id=cid)
        w_start = samples[-1]
        draws.append(samples)
        tags.extend([j] * len(samples))
        cond_accepts.append(cdiag.acceptance_rate)

    w_draws = np.concatenate(draws, axis=0) if draws else np.zeros((0, cfg.K, cfg.d))
    diagnostics = {
        "outer": outer_diag,
        "n_xi": len(xi_samples),
        "conditional_acceptance_mean": float(np.mean(cond_accepts)) if cond_accepts else 0.0,
    }
    return w_draws, np.array(tags), diagnostics


# ----------------------------------------------------------------------
# Exact small-scale oracles
# ----------------------------------------------------------------------

def _row_grid(d: int, m: int):
    """Midpoint quadrature nodes and cell volumes for the l1 ball in R^d.

    The ball is the nested box {|w_1| <= 1, |w_2| <= 1 - |w_1|, ...}; each
    level uses m midpoint cells over its exact (budget-dependent) range, so
    no cell straddles the boundary and the rule converges at second order.
    """
    def recurse(budget, depth):
        if depth == d:
            return [np.zeros(0)], [1.0]
        h = 2.0 * budget / m
        pts_out, wts_out = [], []
        for i in range(m):
            w1 = -budget + (i + 0.5) * h
            sub_pts, sub_wts = recurse(budget - abs(w1), depth + 1)
            for p, wt in zip(sub_pts, sub_wts):
                pts_out.append(np.concatenate([[w1], p]))
                wts_out.append(h * wt)
        return pts_out, wts_out

    pts, wts = recurse(1.0, 0)
    return np.array(pts), np.array(wts)


class PosteriorQuadrature:
    """Tabulated posterior over (S^d_1)^K on a deterministic product grid."""

    def __init__(self, cfg: NetworkConfig, data: Dataset, n: int, beta: float,
                 grid_resolution: int):
        if cfg.K * cfg.d > 3:
            raise ValueError("quadrature oracle requires K*d <= 3")
        self.cfg = cfg
        self.n = n
        self.beta = beta
        row_pts, row_wts = _row_grid(cfg.d, grid_resolution)
        m = len(row_pts)
        X = data.X[:n]
        y = data.y[:n]
        psi_tab = cfg.activation.psi(row_pts @ X.T)  # (m, n)
        idx = np.indices((m,) * cfg.K).reshape(cfg.K, -1)  # (K, m^K)
        f_tab = np.zeros((idx.shape[1], n))
        log_wt = np.zeros(idx.shape[1])
        for k in range(cfg.K):
            f_tab += cfg.outer_weights[k] * psi_tab[idx[k]]
            log_wt += np.log(row_wts[idx[k]])
        res = y[None, :] - f_tab
        self.log_density = -0.5 * beta * np.sum(res * res, axis=1)  # vs prior, unnorm
        logz = _logsumexp(self.log_density + log_wt)
        self.log_density -= logz  # now a normalized density wrt Lebesgue
        self.cell_volume = np.exp(log_wt)
        self.probs = np.exp(self.log_density) * self.cell_volume
        self.points = np.stack([row_pts[idx[k]] for k in range(cfg.K)], axis=1)  # (m^K, K, d)
        self._row_pts = row_pts
        self._psi_tab = psi_tab
        self._idx = idx

    def total_mass(self) -> float:
        return float(self.probs.sum())

    def mean_w(self) -> np.ndarray:
        return np.einsum("p,pkd->kd", self.probs, self.points)

    def mean_f(self, x: np.ndarray) -> float:
        psi_x = self.cfg.activation.psi(self._row_pts @ np.asarray(x))
        f_vals = np.zeros(self._idx.shape[1])
        for k in range(self.cfg.K):
            f_vals += self.cfg.outer_weights[k] * psi_x[self._idx[k]]
        return float(self.probs @ f_vals)

    def moment(self, fn) -> float:
        vals = np.array([fn(p) for p in self.points])
        return float(self.probs @ vals)

    def coordinate_cdf(self, k: int = 0, j: int = 0):
        """Marginal CDF of w_{k,j} on its grid (for distribution tests)."""
        coords = self.points[:, k, j]
        order = np.argsort(coords, kind="stable")
        return coords[order], np.cumsum(self.probs[order])


def reference_posterior_quadrature(cfg: NetworkConfig, data: Dataset, n: int,
                                   beta: float, grid_resolution: int = 200) -> PosteriorQuadrature:
    """Normalized posterior table over a regular grid; K*d <= 3 only."""
    return PosteriorQuadrature(cfg, data, n, beta, grid_resolution)


def quadrature_convergence_report(cfg: NetworkConfig, data: Dataset, n: int,
                                  beta: float, grid_resolution: int,
                                  x: np.ndarray) -> dict:
    """Posterior-mean convergence under resolution doubling.

    Midpoint rules on the exact nested-interval parametrization of the l1
    ball converge at second order, so the coarse/fine error ratio should sit
    near 4 and the Richardson value gives the extrapolated limit.
    """
    vals = {}
    for label, res in (("coarse", grid_resolution), ("fine", 2 * grid_resolution),
                       ("finest", 4 * grid_resolution)):
        vals[label] = PosteriorQuadrature(cfg, data, n, beta, res).mean_f(x)
    err_coarse = abs(vals["coarse"] - vals["finest"])
    err_fine = abs(vals["fine"] - vals["finest"])
    richardson = vals["fine"] + (vals["fine"] - vals["coarse"]) / 3.0
    return {
        "values": vals,
        "error_ratio": err_coarse / err_fine if err_fine > 0 else math.inf,
        "richardson": richardson,
    }


def _logsumexp(v: np.ndarray) -> float:
    m = np.max(v)
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.sum(np.exp(v - m))))


class CouplingOracle1D:
    """Quadrature oracle for the full coupling at d = 1, K = 1.

    At this scale Z(w) = ln P(xi in B | w) is exact: the single constraint
    sum_i x_i xi_i is Normal(w * sxx, sxx / rho) given w.  The oracle
    tabulates p_n(w), the reverse conditional, the xi-marginal and its score
    on dense grids; include_Z=False reproduces the density the samplers
    actually target (Z treated as constant).
    """

    def __init__(self, cfg: NetworkConfig, data: Dataset, params: CouplingParams,
                 n_w: int = 2001, include_Z: bool = True):
        if cfg.K != 1 or cfg.d != 1:
            raise ValueError("this oracle is for K = 1, d = 1 only")
        self.cfg = cfg
        self.data = data
        self.params = params
        self.include_Z = include_Z
        n = params.n
        self.X = data.X[:n]  # (n, 1)
        self.y = data.y[:n]
        self.h = 2.0 / n_w
        self.w = -1.0 + (np.arange(n_w) + 0.5) * self.h
        # network outputs for each grid w at each data row
        psi = cfg.activation.psi(np.outer(self.w, self.X[:, 0]))
        fvals = cfg.outer_weights[0] * psi  # (n_w, n)
        res = self.y[None, :] - fvals
        self.loss_vec = 0.5 * np.sum(res * res, axis=1)
        self.log_post = -params.beta * self.loss_vec
        self.sxx = float(np.sum(self.X[:, 0] ** 2))
        self.sd_T = math.sqrt(self.sxx / params.rho)
        self.Z = self._z_exact(self.w) if include_Z else np.zeros(n_w)
        logz = _logsumexp(self.log_post) + math.log(self.h)
        self.log_post -= logz  # normalized posterior density p_n(w)

    def _z_exact(self, w):
        from scipy.stats import norm
        m = w * self.sxx
        b = self.params.b_threshold
        hi = norm.cdf((b - m) / self.sd_T)
        lo = norm.cdf((-b - m) / self.sd_T)
        return np.log(np.maximum(hi - lo, 1e-300))

    def posterior_density(self) -> np.ndarray:
        """Normalized p_n(w) on the w grid."""
        return np.exp(self.log_post)

    def _log_joint_w(self, xi) -> np.ndarray:
        """Log joint over the w grid at fixed xi, up to the xi-independent norm."""
        xi = np.asarray(xi, dtype=float).reshape(-1)
        quad = xi[None, :] - np.outer(self.w, self.X[:, 0])
        return (self.log_post - 0.5 * self.params.rho * np.sum(quad * quad, axis=1)
                - self.Z)

    def log_marginal(self, xi) -> float:
        """log p*(xi) up to one additive constant shared by all xi."""
        if not in_B(np.asarray(xi, dtype=float).reshape(-1, 1), self.X, self.params):
            return -math.inf
        return _logsumexp(self._log_joint_w(xi)) + math.log(self.h)

    def conditional_mean(self, xi) -> float:
        lj = self._log_joint_w(xi)
        p = np.exp(lj - np.max(lj))
        p /= p.sum()
        return float(p @ self.w)

    def conditional_density(self, xi) -> np.ndarray:
        lj = self._log_joint_w(xi)
        p = np.exp(lj - _logsumexp(lj) - math.log(self.h))
        return p

    def score(self, xi) -> np.ndarray:
        """Exact marginal score rho * (-xi + x_i E[w|xi]) as an (n,1) array."""
        xi = np.asarray(xi, dtype=float).reshape(-1)
        ew = self.conditional_mean(xi)
        return (self.params.rho * (-xi + self.X[:, 0] * ew)).reshape(-1, 1)

    def xi_grid(self, points_per_dim: int = 48, span: float = 6.0):
        """Midpoint grid covering the forward coupling's effective support."""
        sd = 1.0 / math.sqrt(self.params.rho)
        lo, hi = -1.0 - span * sd, 1.0 + span * sd
        step = (hi - lo) / points_per_dim
        axis = lo + (np.arange(points_per_dim) + 0.5) * step
        n = self.params.n
        mesh = np.meshgrid(*([axis] * n), indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)  # (m^n, n)
        return pts, step ** n

    def marginal_on_grid(self, pts: np.ndarray, cell: float):
        """Normalized p*(xi) masses on a grid (zero outside B)."""
        logs = np.full(len(pts), -math.inf)
        for i, xi in enumerate(pts):
            logs[i] = self.log_marginal(xi)
        m = np.max(logs)
        mass = np.exp(logs - m)
        mass /= mass.sum()
        return mass

    def mixture_density(self, pts: np.ndarray, cell: float) -> np.ndarray:
        """integral p*(w|xi) p*(xi) dxi on the w grid via the xi grid."""
        mass = self.marginal_on_grid(pts, cell)
        out = np.zeros_like(self.w)
        for xi, p in zip(pts, mass):
            if p > 0.0:
                out += p * self.conditional_density(xi)
        return out


def write_chain_jsonl(path, samples, diagnostics: ChainDiagnostics, meta: dict = None):
    """One JSON record per retained sample: vector, log-density, step, snapshot."""
    logd = diagnostics.extras.get("log_density")
    run_acc = diagnostics.extras.get("running_acceptance")
    with open(path, "w") as fh:
        if meta is not None:
            fh.write(json.dumps({"meta": meta}, sort_keys=True) + "\n")
        for i, s in enumerate(np.asarray(samples).reshape(len(samples), -1)):
            rec = {
                "step": i,
                "sample": [float(v) for v in s],
                "log_density": float(logd[i]) if logd is not None and i < len(logd) else None,
                "diagnostics": {
                    "running_acceptance": float(run_acc[i]) if run_acc is not None and i < len(run_acc) else None,
                    "step_size": diagnostics.final_step_size,
                },
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
