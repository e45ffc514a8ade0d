#!/usr/bin/env python3
"""
Noise Schedule

Linear variance schedule and every derived per-timestep coefficient:
alpha, alpha_bar, posterior variance, reverse variance, SNR and the
ELBO loss weights for each reverse-process parameterization.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence

import numpy as np


class Parameterization(str, Enum):
    """Quantity predicted by the denoiser."""
    NOISE = "noise"
    IMAGE = "image"
    MEAN = "mean"


class Weighting(str, Enum):
    """Per-timestep weighting of the denoising MSE."""
    VLB = "vlb"
    SIMPLE = "simple"


SCHEDULE_CSV_HEADER = ["t", "beta", "alpha_bar", "beta_tilde", "snr",
                       "w_vlb_noise", "w_vlb_image", "w_vlb_mean"]

REVERSE_VARIANCES = ("beta", "beta_tilde")


def desk_linear_endpoints(T: int) -> tuple:
    """
    Linear-schedule endpoints scaled to the number of timesteps.

    At T=1000 these are the standard (1e-4, 0.02); shorter chains scale both
    endpoints by 1000/T so that alpha_bar[T] stays close to zero.
    """
    scale = 1000.0 / T
    return 1e-4 * scale, min(0.02 * scale, 0.999)


@dataclass(frozen=True)
class Schedule:
    """
    Immutable per-timestep coefficients.

    Arrays have length T+1 and are indexed directly by t; index 0 holds the
    clean-data convention (beta=0, alpha_bar=1, beta_tilde=0).
    """
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_tilde: np.ndarray
    sigma2: np.ndarray
    snr: np.ndarray
    reverse_variance: str = "beta"

    @classmethod
    def from_betas(cls, betas: Sequence[float], reverse_variance: str = "beta") -> "Schedule":
        """
        Build a schedule from an explicit variance sequence beta_1..beta_T.

        Args:
            betas: Forward-process variances, each in (0, 1)
            reverse_variance: "beta" (sigma_t^2 = beta_t) or "beta_tilde"

        Returns:
            Populated schedule
        """
        betas = np.asarray(betas, dtype=np.float64).reshape(-1)
        if betas.size < 1:
            raise ValueError("Schedule needs at least one timestep")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError(f"Every beta must lie in (0, 1), got range [{betas.min()}, {betas.max()}]")
        if reverse_variance not in REVERSE_VARIANCES:
            raise ValueError(f"reverse_variance must be one of {REVERSE_VARIANCES}, got {reverse_variance!r}")

        T = betas.size
        beta = np.concatenate([[0.0], betas])
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)

        beta_tilde = np.zeros(T + 1)
        beta_tilde[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]

        if reverse_variance == "beta":
            sigma2 = beta.copy()
        else:
            sigma2 = beta_tilde.copy()
            # t=1 has zero posterior variance; borrow the next step's
            sigma2[1] = beta_tilde[2] if T >= 2 else beta[1]

        snr = np.full(T + 1, np.inf)
        snr[1:] = alpha_bar[1:] / (1.0 - alpha_bar[1:])

        for arr in (beta, alpha, alpha_bar, beta_tilde, sigma2, snr):
            arr.setflags(write=False)
        return cls(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, beta_tilde=beta_tilde,
                   sigma2=sigma2, snr=snr, reverse_variance=reverse_variance)

    def check_t(self, t, low: int = 1):
        """Raise if any timestep lies outside [low, T]."""
        arr = np.asarray(t)
        if arr.size and (arr.min() < low or arr.max() > self.T):
            raise ValueError(f"Timestep out of range [{low}, {self.T}]: {arr.min()}..{arr.max()}")

    def to_config(self) -> Dict[str, Any]:
        return {"T": self.T, "reverse_variance": self.reverse_variance}


def build_linear(T: int, beta1: Optional[float] = None, betaT: Optional[float] = None,
                 reverse_variance: str = "beta") -> Schedule:
    """
    Linear schedule beta_t = ((T - t) beta_1 + (t - 1) beta_T) / (T - 1).

    Args:
        T: Number of timesteps (>= 2)
        beta1: First variance (defaults to the desk-scaled endpoint)
        betaT: Last variance (defaults to the desk-scaled endpoint)
        reverse_variance: "beta" or "beta_tilde"

    Returns:
        Schedule
    """
    if not isinstance(T, (int, np.integer)) or T < 2:
        raise ValueError(f"Linear schedule needs integer T >= 2, got {T!r}")
    default1, defaultT = desk_linear_endpoints(T)
    beta1 = default1 if beta1 is None else float(beta1)
    betaT = defaultT if betaT is None else float(betaT)
    if not (0.0 < beta1 <= betaT < 1.0):
        raise ValueError(f"Linear schedule needs 0 < beta1 <= betaT < 1, got beta1={beta1}, betaT={betaT}")

    t = np.arange(1, T + 1, dtype=np.float64)
    betas = ((T - t) * beta1 + (t - 1) * betaT) / (T - 1)
    return Schedule.from_betas(betas, reverse_variance=reverse_variance)


def loss_weight(schedule: Schedule, t, parameterization: Parameterization, weighting: Weighting):
    """
    Multiplicative weight on the per-example MSE for a parameterization.

    Simple weighting is 1 everywhere. The ELBO weights are
    1/(2 sigma^2) for the mean, beta^2/(2 sigma^2 alpha (1 - alpha_bar)) for the
    noise and alpha_bar_{t-1} beta^2/(2 sigma^2 (1 - alpha_bar)^2) for the image.

    Args:
        schedule: Noise schedule
        t: Timestep or array of timesteps in 1..T
        parameterization: Noise, Image or Mean
        weighting: Vlb or Simple

    Returns:
        Scalar weight, or an array matching ``t``
    """
    schedule.check_t(t)
    parameterization = Parameterization(parameterization)
    t_arr = np.asarray(t)
    if Weighting(weighting) is Weighting.SIMPLE:
        weight = np.ones(t_arr.shape)
    else:
        beta = schedule.beta[t_arr]
        sigma2 = schedule.sigma2[t_arr]
        one_minus_ab = 1.0 - schedule.alpha_bar[t_arr]
        if parameterization is Parameterization.MEAN:
            weight = 1.0 / (2.0 * sigma2)
        elif parameterization is Parameterization.NOISE:
            weight = beta ** 2 / (2.0 * sigma2 * schedule.alpha[t_arr] * one_minus_ab)
        else:
            weight = schedule.alpha_bar[t_arr - 1] * beta ** 2 / (2.0 * sigma2 * one_minus_ab ** 2)
    return float(weight) if t_arr.ndim == 0 else weight


def dump_schedule(schedule: Schedule) -> List[Dict[str, float]]:
    """
    One row per timestep with the schedule coefficients and ELBO weights.

    Args:
        schedule: Noise schedule

    Returns:
        Rows keyed by ``SCHEDULE_CSV_HEADER``
    """
    t = np.arange(1, schedule.T + 1)
    w_noise = loss_weight(schedule, t, Parameterization.NOISE, Weighting.VLB)
    w_image = loss_weight(schedule, t, Parameterization.IMAGE, Weighting.VLB)
    w_mean = loss_weight(schedule, t, Parameterization.MEAN, Weighting.VLB)
    rows = []
    for i, step in enumerate(t):
        rows.append({
            "t": int(step),
            "beta": float(schedule.beta[step]),
            "alpha_bar": float(schedule.alpha_bar[step]),
            "beta_tilde": float(schedule.beta_tilde[step]),
            "snr": float(schedule.snr[step]),
            "w_vlb_noise": float(w_noise[i]),
            "w_vlb_image": float(w_image[i]),
            "w_vlb_mean": float(w_mean[i]),
        })
    return rows
