#!/usr/bin/env python3
"""
Sampler Service

Ancestral and deterministic (DDIM) reverse-process sampling, DDIM inversion
of clean latents to x_T, sharded multi-chain sampling and trajectory traces.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .lrdm_autodiff import as_tensor, no_grad
from .lrdm_process import DiffusionProcess
from .lrdm_schedule import Parameterization, Schedule


SAMPLER_KINDS = ("ancestral", "ddim")
PRIOR_MODES = ("none", "once", "per_step")
DEFAULT_SHARD_SIZE = 256


def uniform_steps(T: int, num_steps: int) -> List[int]:
    """Strictly increasing subsequence of 1..T with uniform stride, ending at T."""
    if not 1 <= num_steps <= T:
        raise ValueError(f"Number of steps must be in [1, {T}], got {num_steps}")
    return [int(round(k * T / num_steps)) for k in range(1, num_steps + 1)]


@dataclass
class SamplerConfig:
    """
    Sampler choice and step set.

    ``steps`` defaults to every timestep 1..T; ancestral sampling needs the
    full set, DDIM accepts any strictly increasing subsequence ending at T.
    """
    kind: str = "ancestral"
    steps: Optional[List[int]] = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SAMPLER_KINDS:
            raise ValueError(f"Sampler kind must be one of {SAMPLER_KINDS}, got {self.kind!r}")

    def resolved_steps(self, T: int) -> List[int]:
        if self.steps is None:
            return list(range(1, T + 1))
        steps = [int(s) for s in self.steps]
        if not steps or steps[0] < 1 or steps[-1] != T or any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError(f"Sampler steps must be strictly increasing within [1, {T}] and end at {T}")
        if self.kind == "ancestral" and steps != list(range(1, T + 1)):
            raise ValueError("Ancestral sampling needs every timestep; use ddim for strided steps")
        return steps


@dataclass
class SampleTrace:
    """Per-step records (t after the transition, x_t, x0_hat) and the final sample."""
    records: List[Tuple[int, np.ndarray, np.ndarray]] = field(default_factory=list)
    final: Optional[np.ndarray] = None

    def add(self, t: int, x_t: np.ndarray, x0_hat: np.ndarray):
        if self.records and t >= self.records[-1][0]:
            raise ValueError(f"Trace timesteps must strictly decrease: {self.records[-1][0]} then {t}")
        self.records.append((int(t), np.array(x_t, copy=True), np.array(x0_hat, copy=True)))

    def __len__(self) -> int:
        return len(self.records)

    def to_rows(self) -> List[List]:
        """CSV rows ``step_index, chain, t, x_t..., x0_hat...`` for every chain."""
        rows = []
        for index, (t, x_t, x0_hat) in enumerate(self.records):
            x_t = np.atleast_2d(x_t)
            x0_hat = np.atleast_2d(x0_hat)
            for chain in range(x_t.shape[0]):
                rows.append([index, chain, t, *map(repr, map(float, x_t[chain])),
                             *map(repr, map(float, x0_hat[chain]))])
        return rows

    @staticmethod
    def header(dim: int) -> List[str]:
        return (["step_index", "chain", "t"] + [f"x_t_{i}" for i in range(dim)]
                + [f"x0_hat_{i}" for i in range(dim)])


class SamplerService:
    """Reverse-process sampling bound to one noise schedule."""

    def __init__(self, schedule: Schedule):
        self.schedule = schedule
        self.process = DiffusionProcess(schedule)

    def predict(self, net, x_t: np.ndarray, t: int, cond=None, class_id=None) -> np.ndarray:
        """Raw network output without recording a tape."""
        kwargs = {}
        if cond is not None:
            kwargs["cond"] = cond
        if class_id is not None:
            kwargs["class_id"] = class_id
        with no_grad():
            return np.asarray(as_tensor(net(x_t, t, train_mode=False, **kwargs)).values)

    # ------------------------------------------------------------------
    # single transitions
    # ------------------------------------------------------------------
    def ancestral_step(self, net, x_t: np.ndarray, t: int, parameterization: Parameterization,
                       z: Optional[np.ndarray], cond=None, class_id=None,
                       return_x0: bool = False):
        """
        One stochastic reverse transition x_t -> x_{t-1}.

        Args:
            net: Denoiser
            x_t: Current state
            t: Timestep in 1..T
            parameterization: What the net predicts
            z: Standard normal noise (ignored at t=1)
            cond: Representation for conditional nets
            class_id: Class label(s)
            return_x0: Also return the implied x0 estimate

        Returns:
            x_{t-1}, or (x_{t-1}, x0_hat)
        """
        self.schedule.check_t(t)
        x_t = np.asarray(x_t, dtype=np.float64)
        parameterization = Parameterization(parameterization)
        pred = self.predict(net, x_t, t, cond, class_id)
        if parameterization is Parameterization.NOISE:
            mean = self.process.eps_to_mu(x_t, pred, t)
        elif parameterization is Parameterization.IMAGE:
            mean = self.process.x0_to_mu(x_t, pred, t)
        else:
            mean = pred
        if t > 1 and z is not None:
            x_prev = mean + np.sqrt(self.schedule.sigma2[t]) * np.asarray(z)
        else:
            x_prev = mean
        if return_x0:
            return x_prev, self.process.prediction_to_x0(x_t, pred, t, parameterization)
        return x_prev

    def ddim_step(self, net, x_t: np.ndarray, t: int, t_prev: int, parameterization: Parameterization,
                  cond=None, class_id=None, return_x0: bool = False):
        """
        Deterministic DDIM transition x_t -> x_{t_prev} with t_prev <= t.

        Image predictions are converted to noise first.
        """
        self.schedule.check_t(t)
        if not 0 <= t_prev <= t:
            raise ValueError(f"DDIM step needs 0 <= t_prev <= t, got t={t}, t_prev={t_prev}")
        x_t = np.asarray(x_t, dtype=np.float64)
        pred = self.predict(net, x_t, t, cond, class_id)
        eps_hat = self.process.prediction_to_eps(x_t, pred, t, parameterization)
        x0_hat = self.process.eps_to_x0(x_t, eps_hat, t)
        ab_prev = self.schedule.alpha_bar[t_prev]
        x_prev = np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_hat
        return (x_prev, x0_hat) if return_x0 else x_prev

    def ddim_invert(self, net, x0: np.ndarray, steps: Optional[Sequence[int]],
                    parameterization: Parameterization, cond=None, class_id=None,
                    cond_fn: Optional[Callable[[int], np.ndarray]] = None) -> np.ndarray:
        """
        Run the DDIM recursion forwards from x0 to x_T.

        The first step evaluates the net at the first configured timestep;
        later steps evaluate it at the timestep being left.

        Args:
            net: Trained denoiser
            x0: Clean latents
            steps: Ascending timesteps ending at T (None for all)
            parameterization: What the net predicts
            cond: Representation, held fixed
            class_id: Class label(s)
            cond_fn: Per-step representation source t -> r_t, instead of ``cond``

        Returns:
            x_T
        """
        steps = SamplerConfig(kind="ddim", steps=None if steps is None else list(steps)).resolved_steps(self.schedule.T)
        x = np.asarray(x0, dtype=np.float64)
        for i, t_next in enumerate(steps):
            t_eval = t_next if i == 0 else steps[i - 1]
            step_cond = cond_fn(t_eval) if cond_fn is not None else cond
            pred = self.predict(net, x, t_eval, step_cond, class_id)
            eps_hat = self.process.prediction_to_eps(x, pred, t_eval, parameterization)
            x0_hat = self.process.eps_to_x0(x, eps_hat, t_eval)
            ab_next = self.schedule.alpha_bar[t_next]
            x = np.sqrt(ab_next) * x0_hat + np.sqrt(1.0 - ab_next) * eps_hat
        return x

    # ------------------------------------------------------------------
    # full trajectories
    # ------------------------------------------------------------------
    def sample_loop(self, net, cfg: SamplerConfig, n: int, dim: int, parameterization: Parameterization,
                    cond=None, cond_fn: Optional[Callable[[int], np.ndarray]] = None, class_id=None,
                    record: bool = False, rng: Optional[np.random.Generator] = None,
                    x_T: Optional[np.ndarray] = None) -> SampleTrace:
        """
        Sample ``n`` chains from x_T ~ N(0, I) down to t=0.

        Args:
            net: Frozen denoiser
            cfg: Sampler configuration
            n: Number of chains
            dim: Latent dimension
            parameterization: What the net predicts
            cond: Fixed representation (n, R) or (R,) for the whole trajectory
            cond_fn: Per-step representation source t -> (n, R), for t-LRDM
            class_id: Class label(s)
            record: Keep per-step (t, x_t, x0_hat) records
            rng: Generator (defaults to one seeded from ``cfg.seed``)
            x_T: Start state instead of a fresh draw

        Returns:
            SampleTrace with ``final`` set
        """
        if cond is not None and cond_fn is not None:
            raise ValueError("Pass either a fixed representation or a per-step source, not both")
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        steps = cfg.resolved_steps(self.schedule.T)
        x = rng.standard_normal((n, dim)) if x_T is None else np.array(x_T, dtype=np.float64)

        cond_ref = None
        if cond is not None:
            cond = self._check_cond(net, cond, n)
            cond_ref = cond.copy()

        trace = SampleTrace()
        for i in range(len(steps) - 1, -1, -1):
            t = steps[i]
            t_prev = steps[i - 1] if i > 0 else 0
            step_cond = self._check_cond(net, cond_fn(t), n) if cond_fn is not None else cond
            if cfg.kind == "ancestral":
                z = rng.standard_normal(x.shape) if t > 1 else None
                x, x0_hat = self.ancestral_step(net, x, t, parameterization, z, step_cond, class_id, return_x0=True)
            else:
                x, x0_hat = self.ddim_step(net, x, t, t_prev, parameterization, step_cond, class_id, return_x0=True)
            if record:
                trace.add(t_prev, x, x0_hat)

        if cond_ref is not None and not np.array_equal(cond, cond_ref):
            raise RuntimeError("Representation changed during a fixed-conditioning trajectory")
        trace.final = x
        return trace

    @staticmethod
    def _check_cond(net, cond, n: int) -> np.ndarray:
        cond = np.asarray(cond, dtype=np.float64)
        repr_dim = getattr(net, "repr_dim", cond.shape[-1])
        if cond.shape[-1] != repr_dim:
            raise ValueError(f"Representation dimension {cond.shape[-1]} does not match the denoiser's {repr_dim}")
        return np.broadcast_to(cond, (n, cond.shape[-1])).copy() if cond.ndim == 1 else cond

    def sample_sharded(self, net, cfg: SamplerConfig, n: int, dim: int,
                       parameterization: Parameterization, class_id=None, prior: str = "none",
                       jobs: int = 1, shard_size: int = DEFAULT_SHARD_SIZE) -> np.ndarray:
        """
        Draw ``n`` samples in fixed-size shards, optionally on worker threads.

        Each shard owns a generator spawned from ``cfg.seed``, so the output
        does not depend on ``jobs``.

        Args:
            net: Frozen denoiser snapshot
            cfg: Sampler configuration
            n: Number of samples
            dim: Latent dimension
            parameterization: What the net predicts
            class_id: Class label for every sample
            prior: "none", "once" (r ~ N(0, I) per chain) or "per_step" (fresh r_t each step)
            jobs: Worker threads
            shard_size: Chains per shard

        Returns:
            Samples, shape (n, dim)
        """
        if prior not in PRIOR_MODES:
            raise ValueError(f"prior must be one of {PRIOR_MODES}, got {prior!r}")
        if n < 1:
            raise ValueError(f"Number of samples must be >= 1, got {n}")
        sizes = [min(shard_size, n - start) for start in range(0, n, shard_size)]
        seeds = np.random.SeedSequence(cfg.seed).spawn(len(sizes))
        repr_dim = getattr(net, "repr_dim", 0)

        def run_shard(index: int) -> np.ndarray:
            rng = np.random.default_rng(seeds[index])
            m = sizes[index]
            cond, cond_fn = None, None
            if prior == "once":
                cond = rng.standard_normal((m, repr_dim))
            elif prior == "per_step":
                cond_fn = lambda t: rng.standard_normal((m, repr_dim))
            return self.sample_loop(net, cfg, m, dim, parameterization, cond=cond, cond_fn=cond_fn,
                                    class_id=class_id, rng=rng).final

        if jobs <= 1 or len(sizes) == 1:
            shards = [run_shard(i) for i in range(len(sizes))]
        else:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                shards = list(pool.map(run_shard, range(len(sizes))))
        return np.concatenate(shards, axis=0)
