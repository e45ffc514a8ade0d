#!/usr/bin/env python3
"""
Objective Service

Training losses for plain diffusion (noise / image / mean parameterization
under ELBO or simple weighting), the representation-conditional LRDM and
t-LRDM objectives, the LVAE baseline, the per-term variational bound and the
Gaussian KL terms they share.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .lrdm_autodiff import Tensor, as_tensor, no_grad
from .lrdm_models import reparameterize
from .lrdm_process import DiffusionProcess
from .lrdm_schedule import Parameterization, Schedule, Weighting, loss_weight


LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class LossBreakdown:
    """
    Loss of one batch split into its diffusion and KL parts.

    ``weight_applied`` holds the per-example timestep weight that was folded
    into ``diffusion_term`` (one t per example), so that
    ``total == diffusion_term + lam * kl_term``.
    """
    loss: Tensor
    total: float
    diffusion_term: float
    kl_term: float
    t: np.ndarray
    weight_applied: np.ndarray
    lam: float = 0.0
    kl_per_dim: float = 0.0

    def as_row(self) -> dict:
        return {"loss_total": self.total, "loss_diffusion": self.diffusion_term, "loss_kl": self.kl_term}


@dataclass
class RegularizationConfig:
    """KL weight of the representation prior term."""
    lam: float = 1e-3

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0.0:
            raise ValueError(f"KL weight lambda must be a finite non-negative number, got {self.lam}")


@dataclass
class VlbTerms:
    """Per-timestep terms of the variational bound, averaged over a batch."""
    terms: List[Tuple[int, float]] = field(default_factory=list)
    prior_term: float = 0.0

    @property
    def total(self) -> float:
        return float(sum(v for _, v in self.terms) + self.prior_term)


def kl_standard_normal(mu, logvar) -> Tensor:
    """
    KL(N(mu, exp(logvar)) || N(0, I)), summed over dims, averaged over the batch.

    Args:
        mu: Posterior mean, shape (B, R) or (R,)
        logvar: Posterior log-variance, same shape

    Returns:
        Scalar tensor
    """
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    if tuple(mu.shape) != tuple(logvar.shape):
        raise ValueError(f"kl_standard_normal: shapes {mu.shape} and {logvar.shape} disagree")
    per_dim = (mu.square() + logvar.exp() - 1.0 - logvar) * 0.5
    per_example = per_dim.sum(-1)
    return per_example.mean() if per_example.ndim else per_example


def kl_standard_normal_values(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """Per-example KL to the standard normal prior as plain arrays."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    return 0.5 * np.sum(mu ** 2 + np.exp(logvar) - 1.0 - logvar, axis=-1)


def kl_gaussians(mean_q, var_q, mean_p, var_p) -> np.ndarray:
    """Analytic KL between diagonal Gaussians, summed over the last axis."""
    mean_q, mean_p = np.asarray(mean_q), np.asarray(mean_p)
    var_q, var_p = np.asarray(var_q, dtype=np.float64), np.asarray(var_p, dtype=np.float64)
    per_dim = 0.5 * (np.log(var_p / var_q) + (var_q + (mean_q - mean_p) ** 2) / var_p - 1.0)
    return np.sum(np.broadcast_to(per_dim, np.broadcast(mean_q, mean_p).shape), axis=-1)


def gaussian_log_density(x, mean, var) -> np.ndarray:
    """log N(x; mean, var I) summed over the last axis."""
    x, mean = np.asarray(x), np.asarray(mean)
    var = np.asarray(var, dtype=np.float64)
    per_dim = -0.5 * (LOG_2PI + np.log(var) + (x - mean) ** 2 / var)
    return np.sum(np.broadcast_to(per_dim, np.broadcast(x, mean).shape), axis=-1)


def _class_arg(module, class_ids):
    return class_ids if getattr(module, "num_classes", 0) else None


class ObjectiveService:
    """Loss functions bound to one noise schedule."""

    def __init__(self, schedule: Schedule):
        self.schedule = schedule
        self.process = DiffusionProcess(schedule)

    # ------------------------------------------------------------------
    # shared pieces
    # ------------------------------------------------------------------
    def draw(self, x0: np.ndarray, rng: Optional[np.random.Generator], t=None, eps=None,
             t_range: Optional[Tuple[int, int]] = None) -> Tuple[np.ndarray, np.ndarray]:
        """Sample one timestep per example (uniform over the window) and the noise."""
        batch = x0.shape[0]
        if t is None:
            lo, hi = t_range or (1, self.schedule.T)
            t = rng.integers(lo, hi + 1, size=batch)
        else:
            t = np.broadcast_to(np.asarray(t, dtype=np.int64), (batch,)).copy()
        self.schedule.check_t(t)
        if eps is None:
            eps = rng.standard_normal(x0.shape)
        return t, np.asarray(eps, dtype=np.float64)

    def target(self, x0: np.ndarray, x_t: np.ndarray, eps: np.ndarray, t,
               parameterization: Parameterization) -> np.ndarray:
        """Regression target implied by a parameterization."""
        parameterization = Parameterization(parameterization)
        if parameterization is Parameterization.NOISE:
            return eps
        if parameterization is Parameterization.IMAGE:
            return x0
        return self.process.x0_to_mu(x_t, x0, t)

    @staticmethod
    def _as_batch(x0) -> np.ndarray:
        x0 = np.asarray(x0, dtype=np.float64)
        return x0.reshape(1, -1) if x0.ndim == 1 else x0

    # ------------------------------------------------------------------
    # plain diffusion
    # ------------------------------------------------------------------
    def dm_loss(self, net, x0, parameterization: Parameterization, weighting: Weighting,
                rng: Optional[np.random.Generator] = None, class_ids=None, t=None, eps=None,
                t_range: Optional[Tuple[int, int]] = None, train_mode: bool = True) -> LossBreakdown:
        """
        Weighted denoising MSE for one batch.

        Args:
            net: Denoiser (no representation conditioning)
            x0: Clean batch, shape (B, D)
            parameterization: What the net predicts
            weighting: Vlb (ELBO prefactors) or Simple (unit weight)
            rng: Generator for t, noise and dropout
            class_ids: Labels for a class-conditional net
            t, eps: Optional fixed draws
            t_range: Inclusive timestep window for curriculum training
            train_mode: Apply dropout

        Returns:
            LossBreakdown with the differentiable loss
        """
        if getattr(net, "repr_dim", 0):
            raise ValueError("dm_loss needs a denoiser without representation conditioning")
        x0 = self._as_batch(x0)
        t, eps = self.draw(x0, rng, t, eps, t_range)
        x_t = self.process.q_sample(x0, t, eps).x_t
        pred = net(x_t, t, class_id=_class_arg(net, class_ids), train_mode=train_mode, rng=rng)
        target = self.target(x0, x_t, eps, t, parameterization)
        weights = loss_weight(self.schedule, t, parameterization, weighting)
        loss = ((as_tensor(pred) - target).square().sum(-1) * weights).mean()
        value = loss.item()
        return LossBreakdown(loss=loss, total=value, diffusion_term=value, kl_term=0.0,
                             t=t, weight_applied=np.asarray(weights))

    # ------------------------------------------------------------------
    # representation-conditional objectives
    # ------------------------------------------------------------------
    def _representation_loss(self, net, enc, x0, lam: float, rng, class_ids, t, eps, noise,
                             t_range, train_mode: bool, timestep_conditional: bool) -> LossBreakdown:
        RegularizationConfig(lam)
        if not getattr(net, "repr_dim", 0):
            raise ValueError("Representation objectives need a representation-conditional denoiser")
        if enc.repr_dim != net.repr_dim:
            raise ValueError(f"Encoder repr_dim {enc.repr_dim} does not match denoiser repr_dim {net.repr_dim}")
        if enc.timestep_conditional != timestep_conditional:
            kind = "timestep-conditional" if timestep_conditional else "non-timestep-conditional"
            raise ValueError(f"This objective needs a {kind} encoder")

        x0 = self._as_batch(x0)
        t, eps = self.draw(x0, rng, t, eps, t_range)
        if noise is None:
            noise = rng.standard_normal((x0.shape[0], enc.repr_dim))

        mu, logvar = enc(x0, t if timestep_conditional else None, _class_arg(enc, class_ids))
        r = reparameterize(mu, logvar, noise)
        x_t = self.process.q_sample(x0, t, eps).x_t
        pred = net(x_t, t, cond=r, class_id=_class_arg(net, class_ids), train_mode=train_mode, rng=rng)

        diffusion = (as_tensor(pred) - x0).square().sum(-1).mean()
        kl = kl_standard_normal(mu, logvar)
        loss = diffusion + kl * lam
        kl_value = kl.item()
        return LossBreakdown(loss=loss, total=loss.item(), diffusion_term=diffusion.item(),
                             kl_term=kl_value, t=t, weight_applied=np.ones(x0.shape[0]),
                             lam=lam, kl_per_dim=kl_value / enc.repr_dim)

    def lrdm_loss(self, net, enc, x0, lam: float, rng: Optional[np.random.Generator] = None,
                  class_ids=None, t=None, eps=None, noise=None,
                  t_range: Optional[Tuple[int, int]] = None, train_mode: bool = True) -> LossBreakdown:
        """
        Image-parameterized LRDM loss: ||z0 - z0_theta(z_t, t, r)||^2 + lam KL(q(r|z0) || N(0, I)).

        Args:
            net: Representation-conditional denoiser (image parameterization)
            enc: Non-timestep-conditional encoder
            x0: Clean latents, shape (B, D)
            lam: KL weight
            rng: Generator for t, noise, reparameterization and dropout
            class_ids: Labels when either network is class-conditional
            t, eps, noise: Optional fixed draws
            t_range: Inclusive timestep window
            train_mode: Apply dropout

        Returns:
            LossBreakdown
        """
        return self._representation_loss(net, enc, x0, lam, rng, class_ids, t, eps, noise,
                                         t_range, train_mode, timestep_conditional=False)

    def t_lrdm_loss(self, net, enc_t, x0, lam: float, rng: Optional[np.random.Generator] = None,
                    class_ids=None, t=None, eps=None, noise=None,
                    t_range: Optional[Tuple[int, int]] = None, train_mode: bool = True) -> LossBreakdown:
        """As ``lrdm_loss`` with r_t encoded at each example's sampled timestep."""
        return self._representation_loss(net, enc_t, x0, lam, rng, class_ids, t, eps, noise,
                                         t_range, train_mode, timestep_conditional=True)

    def lvae_loss(self, net, enc, x0, lam: float, rng: Optional[np.random.Generator] = None,
                  class_ids=None, eps=None, noise=None, train_mode: bool = True) -> LossBreakdown:
        """LRDM loss with every example at t=T (an unconditional VAE)."""
        x0 = self._as_batch(x0)
        t = np.full(x0.shape[0], self.schedule.T, dtype=np.int64)
        return self._representation_loss(net, enc, x0, lam, rng, class_ids, t, eps, noise,
                                         None, train_mode, timestep_conditional=enc.timestep_conditional)

    # ------------------------------------------------------------------
    # variational bound
    # ------------------------------------------------------------------
    def _model_mean(self, net, x_t, t, parameterization, cond, class_ids) -> np.ndarray:
        kwargs = {"class_id": _class_arg(net, class_ids)}
        if cond is not None:
            kwargs["cond"] = cond
        with no_grad():
            pred = as_tensor(net(x_t, t, train_mode=False, **kwargs)).values
        return self.process.prediction_to_mu(x_t, pred, t, parameterization)

    def vlb_terms(self, net, x0, rng: np.random.Generator, n_mc: int = 1,
                  parameterization: Parameterization = Parameterization.NOISE,
                  cond=None, class_ids=None) -> VlbTerms:
        """
        Per-timestep terms of the variational bound.

        For t >= 2 each term is the analytic KL between q(x_{t-1}|x_t, x0) and
        p_theta(x_{t-1}|x_t), averaged over ``n_mc`` draws of x_t. The t=1 term
        is the continuous Gaussian NLL -log N(x0; mu_theta(x_1, 1), sigma_1^2),
        and the prior term is KL(q(x_T|x0) || N(0, I)) in closed form.

        Args:
            net: Denoiser
            x0: Clean batch (B, D)
            rng: Generator for the x_t draws
            n_mc: Draws per example and timestep
            parameterization: What the net predicts
            cond: Representation (B, R) for conditional nets
            class_ids: Labels for class-conditional nets

        Returns:
            VlbTerms with (t, value) pairs for t = 1..T
        """
        if n_mc < 1:
            raise ValueError(f"n_mc must be >= 1, got {n_mc}")
        s = self.schedule
        x0 = self._as_batch(x0)
        x_rep = np.repeat(x0, n_mc, axis=0)
        cond_rep = None if cond is None else np.repeat(np.asarray(cond, dtype=np.float64), n_mc, axis=0)
        class_rep = None if class_ids is None else np.repeat(
            np.broadcast_to(np.asarray(class_ids), (x0.shape[0],)), n_mc)

        result = VlbTerms()
        for t in range(1, s.T + 1):
            eps = rng.standard_normal(x_rep.shape)
            x_t = self.process.q_sample(x_rep, t, eps).x_t
            mu_theta = self._model_mean(net, x_t, t, parameterization, cond_rep, class_rep)
            if t == 1:
                values = -gaussian_log_density(x_rep, mu_theta, s.sigma2[1])
            else:
                mean_q, var_q = self.process.q_posterior(x_t, x_rep, t)
                values = kl_gaussians(mean_q, var_q, mu_theta, s.sigma2[t])
            result.terms.append((t, float(values.mean())))

        mean_T, var_T = self.process.q_mean_var(x0, s.T)
        result.prior_term = float(kl_gaussians(mean_T, var_T, 0.0, 1.0).mean())
        return result

    def vlb_single_sample(self, net, x0, rng: np.random.Generator,
                          parameterization: Parameterization = Parameterization.NOISE,
                          cond=None, class_ids=None) -> np.ndarray:
        """
        Direct estimator -log p(x_{0:T}) / q(x_{1:T}|x0) over one forward chain per example.

        Returns:
            Per-example values; their expectation equals ``vlb_terms(...).total``
        """
        s = self.schedule
        x0 = self._as_batch(x0)
        chain = [x0]
        log_q = np.zeros(x0.shape[0])
        for t in range(1, s.T + 1):
            eps = rng.standard_normal(x0.shape)
            x_t = self.process.q_step(chain[-1], t, eps)
            log_q += gaussian_log_density(x_t, np.sqrt(s.alpha[t]) * chain[-1], s.beta[t])
            chain.append(x_t)

        log_p = gaussian_log_density(chain[-1], 0.0, 1.0)
        for t in range(s.T, 0, -1):
            mu_theta = self._model_mean(net, chain[t], t, parameterization, cond, class_ids)
            log_p += gaussian_log_density(chain[t - 1], mu_theta, s.sigma2[t])
        return log_q - log_p
