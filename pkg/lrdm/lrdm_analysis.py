#!/usr/bin/env python3
"""
Analysis Service

Diagnostics on trained models: distortion and per-timestep KL curves, Slerp
interpolation, PCA grids in representation space, reconstructions and the
energy-distance two-sample metric.
"""

from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import spearmanr
from sklearn.decomposition import PCA
from sklearn.metrics import pairwise_distances

from .lrdm_autodiff import no_grad
from .lrdm_objectives import kl_standard_normal_values
from .lrdm_process import DiffusionProcess
from .lrdm_samplers import SamplerConfig, SamplerService
from .lrdm_schedule import Parameterization, Schedule
from .lrdm_trainer import ModelBundle


SLERP_LINEAR_THRESHOLD = 1e-6
ENERGY_MAX_POINTS = 5000


@dataclass
class DistortionCurve:
    t: np.ndarray
    z_rmse: np.ndarray
    x_rmse: Optional[np.ndarray] = None
    counts: Optional[np.ndarray] = None

    def to_rows(self) -> List[Dict[str, Any]]:
        rows = []
        for i, t in enumerate(self.t):
            rows.append({"t": int(t), "z_rmse": float(self.z_rmse[i]),
                         "x_rmse": "" if self.x_rmse is None else float(self.x_rmse[i]),
                         "count": int(self.counts[i])})
        return rows


@dataclass
class KlCurve:
    t: np.ndarray
    kl: np.ndarray

    def to_rows(self) -> List[Dict[str, Any]]:
        return [{"t": int(t), "kl": float(k)} for t, k in zip(self.t, self.kl)]


@dataclass
class PcaGrid:
    points: np.ndarray
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray


def default_t_grid(T: int, points: int = 20) -> np.ndarray:
    """Evenly spaced timesteps covering 1..T."""
    return np.unique(np.round(np.linspace(1, T, min(points, T))).astype(np.int64))


def _conditioning(encoder, z0: np.ndarray, t: int, class_ids):
    if encoder is None:
        return None
    t_arg = t if encoder.timestep_conditional else None
    return encoder.posterior_mode(z0, t_arg, class_ids if encoder.num_classes else None)


def distortion_curve(schedule: Schedule, net, points: np.ndarray, parameterization: Parameterization,
                     first_stage=None, t_grid: Optional[Sequence[int]] = None, n_mc: int = 1,
                     rng: Optional[np.random.Generator] = None, encoder=None,
                     class_ids=None) -> DistortionCurve:
    """
    RMSE of the one-shot clean estimate at each timestep.

    Args:
        schedule: Noise schedule
        net: Denoiser (frozen)
        points: Data points (decoded through ``first_stage`` when given)
        parameterization: What the net predicts; noise predictions go through eps_to_x0
        first_stage: Optional autoencoder; adds the data-space curve
        t_grid: Timesteps to evaluate (default: 20 evenly spaced)
        n_mc: Noise draws per point and timestep
        rng: Generator for the noise draws
        encoder: Representation encoder for conditional nets (posterior mode is used)
        class_ids: Labels for class-conditional nets

    Returns:
        DistortionCurve
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    process = DiffusionProcess(schedule)
    sampler = SamplerService(schedule)
    x = np.asarray(points, dtype=np.float64)
    z0 = x if first_stage is None else first_stage.encode(x)
    t_grid = default_t_grid(schedule.T) if t_grid is None else np.asarray(t_grid, dtype=np.int64)
    net_classes = class_ids if getattr(net, "num_classes", 0) else None

    z_rmse, x_rmse = [], []
    for t in t_grid:
        t = int(t)
        cond = _conditioning(encoder, z0, t, class_ids)
        z_err = x_err = 0.0
        for _ in range(n_mc):
            z_t = process.q_sample(z0, t, rng.standard_normal(z0.shape)).x_t
            pred = sampler.predict(net, z_t, t, cond, net_classes)
            z_hat = process.prediction_to_x0(z_t, pred, t, parameterization)
            z_err += float(np.mean(np.sum((z0 - z_hat) ** 2, axis=-1)))
            if first_stage is not None:
                x_err += float(np.mean(np.sum((x - first_stage.decode(z_hat)) ** 2, axis=-1)))
        z_rmse.append(np.sqrt(z_err / n_mc))
        x_rmse.append(np.sqrt(x_err / n_mc))
    counts = np.full(len(t_grid), z0.shape[0] * n_mc)
    return DistortionCurve(t=t_grid, z_rmse=np.asarray(z_rmse),
                           x_rmse=None if first_stage is None else np.asarray(x_rmse), counts=counts)


def kl_curve(encoder, points: np.ndarray, t_grid: Sequence[int], class_ids=None) -> KlCurve:
    """Mean KL(q(r_t | z0) || N(0, I)) over ``points`` at every grid timestep."""
    if not getattr(encoder, "timestep_conditional", False):
        raise ValueError("kl_curve needs a timestep-conditional encoder")
    t_grid = np.asarray(t_grid, dtype=np.int64)
    values = []
    for t in t_grid:
        with no_grad():
            mu, logvar = encoder.encode(points, int(t), class_ids if encoder.num_classes else None)
        values.append(float(np.mean(kl_standard_normal_values(mu.values, logvar.values))))
    return KlCurve(t=t_grid, kl=np.asarray(values))


def slerp(a: np.ndarray, b: np.ndarray, tau: float) -> np.ndarray:
    """
    Spherical linear interpolation between two vectors.

    Falls back to linear interpolation when the angle is below 1e-6.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"slerp: shapes {a.shape} and {b.shape} differ")
    norm_a, norm_b = np.linalg.norm(a), np.linalg.norm(b)
    if norm_a == 0.0 or norm_b == 0.0:
        raise ValueError("slerp: endpoints must be nonzero vectors")
    cos = np.clip(np.dot(a.ravel(), b.ravel()) / (norm_a * norm_b), -1.0, 1.0)
    omega = np.arccos(cos)
    if omega < SLERP_LINEAR_THRESHOLD:
        return (1.0 - tau) * a + tau * b
    sin_omega = np.sin(omega)
    return (np.sin((1.0 - tau) * omega) / sin_omega) * a + (np.sin(tau * omega) / sin_omega) * b


def pca_grid(encoder, points: np.ndarray, grid_n: int, extent: float = 2.0, class_ids=None) -> PcaGrid:
    """
    Grid on the plane of the two leading principal directions of posterior means.

    Coordinates run over [-extent, extent] standard deviations along each
    direction, centred at the mean. The per-direction scale is
    sqrt(explained_variance_), not the singular value, so the grid does not
    grow with the number of points.

    Args:
        encoder: Non-timestep-conditional encoder, or None when ``points`` are representations
        points: Inputs to encode
        grid_n: Points per axis
        extent: Half-width in units of the per-direction standard deviation
        class_ids: Labels for a class-conditional encoder

    Returns:
        PcaGrid with grid_n**2 points
    """
    if grid_n < 1:
        raise ValueError(f"grid_n must be >= 1, got {grid_n}")
    if encoder is None:
        reps = np.asarray(points, dtype=np.float64)
    else:
        if encoder.timestep_conditional:
            raise ValueError("pca_grid needs a non-timestep-conditional encoder")
        reps = encoder.posterior_mode(points, None, class_ids if encoder.num_classes else None)
    if reps.shape[0] < reps.shape[1]:
        raise ValueError(f"pca_grid needs at least {reps.shape[1]} encoded points, got {reps.shape[0]}")
    rank = int(np.linalg.matrix_rank(reps - reps.mean(axis=0)))
    if rank < 2:
        raise ValueError(f"Representation covariance is degenerate (rank {rank}); need rank >= 2")

    pca = PCA(n_components=2).fit(reps)
    scales = np.sqrt(pca.explained_variance_)
    coords = np.zeros(1) if grid_n == 1 else np.linspace(-extent, extent, grid_n)
    grid = [pca.mean_ + (u * scales[0]) * pca.components_[0] + (v * scales[1]) * pca.components_[1]
            for u in coords for v in coords]
    return PcaGrid(points=np.asarray(grid), mean=pca.mean_.copy(), components=pca.components_.copy(),
                   explained_variance=pca.explained_variance_.copy())


# ----------------------------------------------------------------------
# reconstruction and interpolation
# ----------------------------------------------------------------------
def _require_representation(bundle: ModelBundle):
    if bundle.encoder is None:
        raise ValueError(f"Mode {bundle.mode} has no representation encoder")


def _net_classes(bundle: ModelBundle, class_ids):
    return class_ids if bundle.denoiser.num_classes else None


def reconstruct(bundle: ModelBundle, x: np.ndarray, mode: str = "ddim", steps: Optional[List[int]] = None,
                seed: int = 0, class_ids=None, resample_r: bool = False,
                x_T: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Encode and decode points through the representation-conditional reverse process.

    r is the posterior mode (or a posterior draw with ``resample_r``); z_T comes
    from DDIM inversion in ``ddim`` mode and from the prior in ``ancestral``
    mode. Plain diffusion bundles have no encoder and always start from a
    prior draw.

    Args:
        bundle: Trained models
        x: Data points
        mode: "ddim" or "ancestral"
        steps: DDIM step subset
        seed: Generator seed for prior draws and ancestral noise
        class_ids: Labels for class-conditional models
        resample_r: Draw r from the posterior instead of its mode
        x_T: Start state overriding inversion/prior draws

    Returns:
        Reconstructions in data space
    """
    if mode not in ("ddim", "ancestral"):
        raise ValueError(f"Reconstruction mode must be ddim or ancestral, got {mode!r}")
    rng = np.random.default_rng(seed)
    net = bundle.eval_denoiser()
    sampler = SamplerService(bundle.schedule)
    p = bundle.parameterization
    z0 = bundle.latents(x)
    n, dim = z0.shape
    net_classes = _net_classes(bundle, class_ids)
    cfg = SamplerConfig(kind=mode, steps=steps if mode == "ddim" else None, seed=seed)

    cond, cond_fn = None, None
    enc = bundle.encoder
    if enc is not None:
        enc_classes = class_ids if enc.num_classes else None
        if enc.timestep_conditional:
            cond_fn = lambda t: _encode_r(enc, z0, t, enc_classes, resample_r, rng)
        else:
            cond = _encode_r(enc, z0, None, enc_classes, resample_r, rng)

    if x_T is None:
        if mode == "ddim" and enc is not None:
            x_T = sampler.ddim_invert(net, z0, cfg.resolved_steps(bundle.schedule.T), p, cond=cond,
                                      class_id=net_classes, cond_fn=cond_fn)
        else:
            x_T = rng.standard_normal((n, dim))
    trace = sampler.sample_loop(net, cfg, n, dim, p, cond=cond, cond_fn=cond_fn, class_id=net_classes,
                                rng=rng, x_T=x_T)
    return bundle.decode(trace.final)


def _encode_r(encoder, z0, t, class_ids, resample: bool, rng: np.random.Generator) -> np.ndarray:
    with no_grad():
        mu, logvar = encoder.encode(z0, t, class_ids)
    if not resample:
        return mu.values
    return mu.values + np.exp(0.5 * logvar.values) * rng.standard_normal(mu.shape)


def reconstruction_metrics(bundle: ModelBundle, x: np.ndarray, class_ids=None, seed: int = 0,
                           steps: Optional[List[int]] = None, n_resample: int = 4) -> Dict[str, float]:
    """
    Reconstruction MSE/RMSE (mode encoding, DDIM) and the variance across
    reconstructions with posterior-resampled r from the same inverted z_T.
    """
    x = np.asarray(x, dtype=np.float64)
    x_hat = reconstruct(bundle, x, "ddim", steps, seed, class_ids)
    mse = float(np.mean(np.sum((x - x_hat) ** 2, axis=-1)))
    metrics = {"mse": mse, "rmse": float(np.sqrt(mse)), "variance": 0.0}
    if bundle.encoder is None or n_resample < 2:
        return metrics

    z0 = bundle.latents(x)
    enc = bundle.encoder
    sampler = SamplerService(bundle.schedule)
    enc_classes = class_ids if enc.num_classes else None
    cfg_steps = SamplerConfig(kind="ddim", steps=steps).resolved_steps(bundle.schedule.T)
    if enc.timestep_conditional:
        x_T = sampler.ddim_invert(bundle.eval_denoiser(), z0, cfg_steps, bundle.parameterization,
                                  class_id=_net_classes(bundle, class_ids),
                                  cond_fn=lambda t: _encode_r(enc, z0, t, enc_classes, False, None))
    else:
        x_T = sampler.ddim_invert(bundle.eval_denoiser(), z0, cfg_steps, bundle.parameterization,
                                  cond=_encode_r(enc, z0, None, enc_classes, False, None),
                                  class_id=_net_classes(bundle, class_ids))
    draws = np.stack([reconstruct(bundle, x, "ddim", steps, seed + 1 + k, class_ids, resample_r=True, x_T=x_T)
                      for k in range(n_resample)])
    metrics["variance"] = float(np.mean(np.sum(draws.var(axis=0, ddof=1), axis=-1)))
    return metrics


def interpolate_pair(bundle: ModelBundle, x_a: np.ndarray, x_b: np.ndarray, n_points: int,
                     mode: str = "ddim", steps: Optional[List[int]] = None, seed: int = 0,
                     class_id=None) -> np.ndarray:
    """
    Decode points along the Slerp path between two encoded inputs.

    Both r and z_T are interpolated. In ``ddim`` mode z_T comes from DDIM
    inversion; in ``ancestral`` mode both endpoints draw z_T from the prior and
    every path point reuses the same sampling noise.

    Args:
        bundle: Trained LRDM or LVAE
        x_a, x_b: The two inputs (vectors)
        n_points: Points on the path including both endpoints (>= 2)
        mode: "ddim" or "ancestral"
        steps: DDIM step subset
        seed: Generator seed
        class_id: Class label for class-conditional models

    Returns:
        Array (n_points, data_dim)
    """
    _require_representation(bundle)
    if bundle.encoder.timestep_conditional:
        raise ValueError("Interpolation needs a single representation per input (lrdm or lvae mode)")
    if n_points < 2:
        raise ValueError(f"Interpolation needs at least 2 points, got {n_points}")
    if mode not in ("ddim", "ancestral"):
        raise ValueError(f"Interpolation mode must be ddim or ancestral, got {mode!r}")

    net = bundle.eval_denoiser()
    sampler = SamplerService(bundle.schedule)
    p = bundle.parameterization
    enc = bundle.encoder
    z = bundle.latents(np.stack([np.asarray(x_a, dtype=np.float64), np.asarray(x_b, dtype=np.float64)]))
    net_class = None if class_id is None or not bundle.denoiser.num_classes else np.full(2, class_id)
    enc_class = None if class_id is None or not enc.num_classes else np.full(2, class_id)
    r = enc.posterior_mode(z, None, enc_class)
    cfg = SamplerConfig(kind=mode, steps=steps if mode == "ddim" else None, seed=seed)
    if mode == "ddim":
        z_T = sampler.ddim_invert(net, z, cfg.resolved_steps(bundle.schedule.T), p, cond=r, class_id=net_class)
    else:
        z_T = np.random.default_rng(seed).standard_normal(z.shape)

    single_class = None if net_class is None else net_class[:1]
    path = []
    for tau in np.linspace(0.0, 1.0, n_points):
        r_tau = slerp(r[0], r[1], tau)[None, :]
        z_tau = slerp(z_T[0], z_T[1], tau)[None, :]
        trace = sampler.sample_loop(net, cfg, 1, z.shape[1], p, cond=r_tau, class_id=single_class,
                                    rng=np.random.default_rng(seed + 1), x_T=z_tau)
        path.append(bundle.decode(trace.final)[0])
    return np.asarray(path)


def decode_representations(bundle: ModelBundle, reps: np.ndarray, seed: int = 0, kind: str = "ddim",
                           steps: Optional[List[int]] = None, class_id=None) -> np.ndarray:
    """Sample one output per representation from a shared prior draw of z_T."""
    _require_representation(bundle)
    reps = np.asarray(reps, dtype=np.float64)
    n = reps.shape[0]
    rng = np.random.default_rng(seed)
    x_T = np.broadcast_to(rng.standard_normal((1, bundle.latent_dim)), (n, bundle.latent_dim)).copy()
    net_class = None if class_id is None or not bundle.denoiser.num_classes else np.full(n, class_id)
    cfg = SamplerConfig(kind=kind, steps=steps if kind == "ddim" else None, seed=seed)
    trace = SamplerService(bundle.schedule).sample_loop(bundle.eval_denoiser(), cfg, n, bundle.latent_dim,
                                                        bundle.parameterization, cond=reps,
                                                        class_id=net_class, rng=rng, x_T=x_T)
    return bundle.decode(trace.final)


# ----------------------------------------------------------------------
# two-sample metrics and summaries
# ----------------------------------------------------------------------
def _subsample(points: np.ndarray, max_points: int, seed: int) -> np.ndarray:
    if points.shape[0] <= max_points:
        return points
    idx = np.random.default_rng(seed).choice(points.shape[0], size=max_points, replace=False)
    return points[np.sort(idx)]


def energy_distance(a: np.ndarray, b: np.ndarray, max_points: int = ENERGY_MAX_POINTS, seed: int = 0) -> float:
    """
    2 E|a - b| - E|a - a'| - E|b - b'| over all pairs.

    Sets larger than ``max_points`` are subsampled with a seeded generator.
    The two sets are put in a canonical order first so the result is exactly
    symmetric.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("energy_distance needs nonempty sets")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"energy_distance: dimension mismatch {a.shape[1]} vs {b.shape[1]}")
    if (b.shape[0], b.tobytes()) < (a.shape[0], a.tobytes()):
        a, b = b, a
    a = _subsample(a, max_points, seed)
    b = _subsample(b, max_points, seed + 1)
    cross = pairwise_distances(a, b).mean()
    within_a = pairwise_distances(a).mean()
    within_b = pairwise_distances(b).mean()
    return float(2.0 * cross - within_a - within_b)


def energy_null(points: np.ndarray, n_resamples: int = 20, seed: int = 0,
                max_points: int = ENERGY_MAX_POINTS) -> Dict[str, Any]:
    """Energy distances between random half splits of one sample set."""
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] < 4:
        raise ValueError("energy_null needs at least 4 points")
    rng = np.random.default_rng(seed)
    values = []
    for k in range(n_resamples):
        perm = rng.permutation(points.shape[0])
        half = points.shape[0] // 2
        values.append(energy_distance(points[perm[:half]], points[perm[half:2 * half]], max_points, seed + k))
    return {"median": float(np.median(values)), "values": values}


def class_mode_fraction(samples: np.ndarray, centers: np.ndarray, labels, std: float, k: float = 3.0) -> float:
    """Fraction of samples within k*std of the centre of their requested mode."""
    samples = np.asarray(samples, dtype=np.float64)
    labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (samples.shape[0],))
    dist = np.linalg.norm(samples - np.asarray(centers)[labels], axis=-1)
    return float(np.mean(dist <= k * std))


def spearman_rho(t: Sequence[int], values: Sequence[float]) -> float:
    """Rank correlation of a curve with its timestep axis."""
    rho, _ = spearmanr(np.asarray(t), np.asarray(values))
    return float(rho)


def _inversions(values: Sequence[float], increasing: bool) -> int:
    pairs = zip(values, values[1:])
    return sum(1 for a, b in pairs if (b < a if increasing else b > a))


def lambda_sweep_summary(rows: List[Dict[str, float]], dm_energy: Optional[float] = None) -> Dict[str, Any]:
    """
    Trend checks across a KL-weight sweep.

    Rows (keys ``lam``, ``rmse``, ``kl_per_dim`` and optionally ``energy``) are
    ordered by decreasing lambda. RMSE should not increase and per-dim KL
    should not decrease along that order; one adjacent inversion is tolerated.
    """
    ordered = sorted(rows, key=lambda r: -r["lam"])
    rmse = [r["rmse"] for r in ordered]
    kl = [r["kl_per_dim"] for r in ordered]
    summary = {
        "lambdas": [r["lam"] for r in ordered],
        "rmse_inversions": _inversions(rmse, increasing=False),
        "kl_inversions": _inversions(kl, increasing=True),
    }
    summary["rmse_trend_ok"] = summary["rmse_inversions"] <= 1
    summary["kl_trend_ok"] = summary["kl_inversions"] <= 1
    if dm_energy is not None and ordered and "energy" in ordered[0]:
        summary["largest_lambda_energy_ratio"] = float(ordered[0]["energy"] / dm_energy)
    return summary
