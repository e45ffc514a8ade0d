#!/usr/bin/env python3
"""
Diffusion Process

Closed-form forward-process sampling, the tractable posterior q(x_{t-1}|x_t, x0)
and the algebraic conversions between noise, image and mean predictions.

Every function accepts a single vector with an integer t, or a batch of row
vectors with either one t or a per-row array of timesteps. Predictions may be
numpy arrays or autodiff tensors; the coefficients are plain numpy constants.
"""

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from .lrdm_autodiff import Tensor
from .lrdm_schedule import Parameterization, Schedule


Vector = Union[np.ndarray, Tensor]


@dataclass
class NoisySample:
    """A forward-process draw together with the noise that produced it."""
    x_t: np.ndarray
    t: Union[int, np.ndarray]
    eps: Optional[np.ndarray] = None


def _check_dims(name: str, a: Vector, b: Vector):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{name}: dimension mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


class DiffusionProcess:
    """Pure forward-process math over an immutable schedule."""

    def __init__(self, schedule: Schedule):
        self.schedule = schedule

    # ------------------------------------------------------------------
    # coefficient helpers
    # ------------------------------------------------------------------
    def _coef(self, table: np.ndarray, t, like: Vector):
        """
        Gather ``table[t]`` in a form that multiplies ``like`` elementwise.

        Scalar t gives a float; a per-row t array gives a full-shape array so
        tensors never need non-trailing broadcasting.
        """
        t_arr = np.asarray(t)
        if t_arr.ndim == 0:
            return float(table[int(t_arr)])
        values = table[t_arr].reshape(-1, *([1] * (len(like.shape) - 1)))
        return np.broadcast_to(values, tuple(like.shape)).copy()

    def _posterior_coefs(self, t, like: Vector):
        s = self.schedule
        t_arr = np.asarray(t)
        ab_prev = s.alpha_bar[t_arr - 1]
        one_minus_ab = 1.0 - s.alpha_bar[t_arr]
        c_x0 = np.sqrt(ab_prev) * s.beta[t_arr] / one_minus_ab
        c_xt = np.sqrt(s.alpha[t_arr]) * (1.0 - ab_prev) / one_minus_ab
        if t_arr.ndim == 0:
            return float(c_x0), float(c_xt)
        full = (-1, *([1] * (len(like.shape) - 1)))
        return (np.broadcast_to(c_x0.reshape(full), tuple(like.shape)).copy(),
                np.broadcast_to(c_xt.reshape(full), tuple(like.shape)).copy())

    # ------------------------------------------------------------------
    # forward process
    # ------------------------------------------------------------------
    def q_sample(self, x0: np.ndarray, t, eps: np.ndarray) -> NoisySample:
        """
        Draw x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.

        Args:
            x0: Clean data (vector or batch)
            t: Timestep(s) in 1..T
            eps: Standard normal noise of the same shape

        Returns:
            NoisySample with the noise retained
        """
        self.schedule.check_t(t)
        x0 = np.asarray(x0, dtype=np.float64)
        eps = np.asarray(eps, dtype=np.float64)
        _check_dims("q_sample", x0, eps)
        sqrt_ab = self._coef(np.sqrt(self.schedule.alpha_bar), t, x0)
        sqrt_1mab = self._coef(np.sqrt(1.0 - self.schedule.alpha_bar), t, x0)
        return NoisySample(x_t=sqrt_ab * x0 + sqrt_1mab * eps, t=t, eps=eps)

    def q_mean_var(self, x0: np.ndarray, t) -> Tuple[np.ndarray, np.ndarray]:
        """Moments of q(x_t | x0): (sqrt(alpha_bar) x0, 1 - alpha_bar)."""
        self.schedule.check_t(t, low=0)
        x0 = np.asarray(x0, dtype=np.float64)
        mean = self._coef(np.sqrt(self.schedule.alpha_bar), t, x0) * x0
        var = self._coef(1.0 - self.schedule.alpha_bar, t, x0)
        return mean, np.asarray(var)

    def q_step(self, x_prev: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
        """Single forward transition x_t = sqrt(alpha_t) x_{t-1} + sqrt(beta_t) eps."""
        self.schedule.check_t(t)
        x_prev = np.asarray(x_prev, dtype=np.float64)
        _check_dims("q_step", x_prev, eps)
        return (self._coef(np.sqrt(self.schedule.alpha), t, x_prev) * x_prev
                + self._coef(np.sqrt(self.schedule.beta), t, x_prev) * eps)

    def q_posterior(self, x_t: Vector, x0: Vector, t) -> Tuple[Vector, Union[float, np.ndarray]]:
        """
        Mean and variance of q(x_{t-1} | x_t, x0).

        At t=1 the mean is x0 itself and the variance is zero.

        Args:
            x_t: Noisy sample
            x0: Clean sample (or prediction)
            t: Timestep(s) in 1..T

        Returns:
            Tuple of (mean, beta_tilde_t)
        """
        self.schedule.check_t(t)
        _check_dims("q_posterior", x_t, x0)
        c_x0, c_xt = self._posterior_coefs(t, x_t)
        var = self.schedule.beta_tilde[np.asarray(t)]
        var = float(var) if np.ndim(var) == 0 else var
        return x0 * c_x0 + x_t * c_xt, var

    # ------------------------------------------------------------------
    # parameterization conversions
    # ------------------------------------------------------------------
    def eps_to_x0(self, x_t: Vector, eps_hat: Vector, t) -> Vector:
        """x0 = (x_t - sqrt(1 - alpha_bar) eps) / sqrt(alpha_bar)."""
        self.schedule.check_t(t)
        _check_dims("eps_to_x0", x_t, eps_hat)
        sqrt_ab = self._coef(np.sqrt(self.schedule.alpha_bar), t, x_t)
        sqrt_1mab = self._coef(np.sqrt(1.0 - self.schedule.alpha_bar), t, x_t)
        return (x_t - eps_hat * sqrt_1mab) * (1.0 / sqrt_ab)

    def x0_to_eps(self, x_t: Vector, x0_hat: Vector, t) -> Vector:
        """eps = (x_t - sqrt(alpha_bar) x0) / sqrt(1 - alpha_bar)."""
        self.schedule.check_t(t)
        _check_dims("x0_to_eps", x_t, x0_hat)
        sqrt_ab = self._coef(np.sqrt(self.schedule.alpha_bar), t, x_t)
        sqrt_1mab = self._coef(np.sqrt(1.0 - self.schedule.alpha_bar), t, x_t)
        return (x_t - x0_hat * sqrt_ab) * (1.0 / sqrt_1mab)

    def x0_to_mu(self, x_t: Vector, x0_hat: Vector, t) -> Vector:
        """Reverse-transition mean from an image prediction (posterior mean)."""
        mean, _ = self.q_posterior(x_t, x0_hat, t)
        return mean

    def eps_to_mu(self, x_t: Vector, eps_hat: Vector, t) -> Vector:
        """mu = (x_t - beta_t / sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_t)."""
        self.schedule.check_t(t)
        _check_dims("eps_to_mu", x_t, eps_hat)
        s = self.schedule
        coef = self._coef(s.beta / np.sqrt(np.where(s.alpha_bar < 1.0, 1.0 - s.alpha_bar, 1.0)), t, x_t)
        inv_sqrt_alpha = self._coef(1.0 / np.sqrt(s.alpha), t, x_t)
        return (x_t - eps_hat * coef) * inv_sqrt_alpha

    def mu_to_x0(self, x_t: Vector, mu_hat: Vector, t) -> Vector:
        """Invert the posterior mean for x0 (inverse of ``x0_to_mu``)."""
        self.schedule.check_t(t)
        _check_dims("mu_to_x0", x_t, mu_hat)
        c_x0, c_xt = self._posterior_coefs(t, x_t)
        return (mu_hat - x_t * c_xt) * (1.0 / c_x0)

    def prediction_to_x0(self, x_t: Vector, prediction: Vector, t,
                         parameterization: Parameterization) -> Vector:
        """Convert any parameterization's output to an x0 estimate."""
        parameterization = Parameterization(parameterization)
        if parameterization is Parameterization.IMAGE:
            return prediction
        if parameterization is Parameterization.NOISE:
            return self.eps_to_x0(x_t, prediction, t)
        return self.mu_to_x0(x_t, prediction, t)

    def prediction_to_eps(self, x_t: Vector, prediction: Vector, t,
                          parameterization: Parameterization) -> Vector:
        """Convert any parameterization's output to a noise estimate."""
        parameterization = Parameterization(parameterization)
        if parameterization is Parameterization.NOISE:
            return prediction
        return self.x0_to_eps(x_t, self.prediction_to_x0(x_t, prediction, t, parameterization), t)

    def prediction_to_mu(self, x_t: Vector, prediction: Vector, t,
                         parameterization: Parameterization) -> Vector:
        """Convert any parameterization's output to the reverse-transition mean."""
        parameterization = Parameterization(parameterization)
        if parameterization is Parameterization.MEAN:
            return prediction
        if parameterization is Parameterization.NOISE:
            return self.eps_to_mu(x_t, prediction, t)
        return self.x0_to_mu(x_t, prediction, t)
