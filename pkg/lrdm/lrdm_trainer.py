#!/usr/bin/env python3
"""
Trainer Service

Optimization loop for the denoiser (and representation encoder): Adam updates,
EMA shadow parameters, the timestep-window curriculum, first-stage training
and the Welford latent-scale estimate.
"""

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import trange

from .lrdm_autodiff import Tensor
from .lrdm_models import DenoiserNet, FirstStage, Module, ReprEncoder
from .lrdm_objectives import LossBreakdown, ObjectiveService
from .lrdm_schedule import Parameterization, Schedule, Weighting, build_linear


MODES = ("dm", "lrdm", "t_lrdm", "lvae")
METRICS_HEADER = ["step", "loss_total", "loss_diffusion", "loss_kl", "t_window_lo", "t_window_hi"]


class TrainingDivergedError(RuntimeError):
    """Loss became NaN or infinite."""


# ----------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------
@dataclass
class AdamState:
    """First/second moment estimates keyed by parameter name, plus the step counter."""
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros(cls, params: Dict[str, np.ndarray]) -> "AdamState":
        return cls(step=0, m={n: np.zeros_like(p) for n, p in params.items()},
                   v={n: np.zeros_like(p) for n, p in params.items()})


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    """
    Bias-corrected Adam update, applied to ``params`` in place.

    Args:
        params: Parameter arrays by name (mutated)
        grads: Gradients by name, same shapes
        state: Moments and step counter (mutated)
        lr, beta1, beta2, eps: Adam hyperparameters

    Returns:
        The updated state
    """
    if set(params) != set(grads):
        raise ValueError("Adam: parameter and gradient names differ")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ValueError(f"Adam: gradient shape {grads[name].shape} does not match parameter {name} {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        elif state.m[name].shape != p.shape:
            raise ValueError(f"Adam: moment shape {state.m[name].shape} does not match parameter {name} {p.shape}")

    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


class AdamOptimizer:
    """Adam over a list of named tensors."""

    def __init__(self, named_params: Sequence[Tuple[str, Tensor]], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 state: Optional[AdamState] = None):
        if lr <= 0.0:
            raise ValueError(f"Learning rate must be positive, got {lr}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ValueError(f"Adam betas must be in [0, 1), got ({beta1}, {beta2})")
        self.named_params = list(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = state if state is not None else AdamState.zeros(
            {n: p.values for n, p in self.named_params})

    def zero_grad(self):
        for _, p in self.named_params:
            p.zero_grad()

    def step(self):
        params = {n: p.values for n, p in self.named_params}
        grads = {n: p.grad for n, p in self.named_params}
        adam_step(params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)


# ----------------------------------------------------------------------
# EMA
# ----------------------------------------------------------------------
@dataclass
class EmaState:
    """
    Exponential moving average of parameters.

    The shadow starts at zero; ``averaged()`` divides by 1 - decay^n so it is
    an unbiased average of the live parameters seen so far.
    """
    decay: float
    shadow: Dict[str, np.ndarray]
    num_updates: int = 0

    @classmethod
    def from_named(cls, named_params: Sequence[Tuple[str, Tensor]], decay: float = 0.9999) -> "EmaState":
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"EMA decay must be in [0, 1), got {decay}")
        return cls(decay=decay, shadow={n: np.zeros_like(p.values) for n, p in named_params})

    def update(self, named_params: Sequence[Tuple[str, Tensor]]) -> "EmaState":
        return ema_update(self, {n: p.values for n, p in named_params})

    def averaged(self) -> Dict[str, np.ndarray]:
        if self.num_updates == 0:
            return {n: s.copy() for n, s in self.shadow.items()}
        correction = 1.0 - self.decay ** self.num_updates
        return {n: s / correction for n, s in self.shadow.items()}


def ema_update(ema: EmaState, params: Dict[str, np.ndarray]) -> EmaState:
    """shadow <- decay * shadow + (1 - decay) * params, for every shadowed name."""
    if set(params) != set(ema.shadow):
        raise ValueError("EMA: parameter names differ from the shadow set")
    for name, p in params.items():
        if ema.shadow[name].shape != p.shape:
            raise ValueError(f"EMA: shape {p.shape} of {name} does not match shadow {ema.shadow[name].shape}")
        ema.shadow[name] = ema.decay * ema.shadow[name] + (1.0 - ema.decay) * p
    ema.num_updates += 1
    return ema


# ----------------------------------------------------------------------
# Welford
# ----------------------------------------------------------------------
@dataclass
class WelfordState:
    count: int = 0
    mean: float = 0.0
    m2: float = 0.0


def welford_update(state: WelfordState, batch) -> WelfordState:
    """Fold a batch of values (any shape) into the running moments."""
    values = np.asarray(batch, dtype=np.float64).reshape(-1)
    n_b = values.size
    if n_b == 0:
        return state
    mean_b = float(values.mean())
    m2_b = float(np.sum((values - mean_b) ** 2))
    total = state.count + n_b
    delta = mean_b - state.mean
    state.mean += delta * n_b / total
    state.m2 += m2_b + delta * delta * state.count * n_b / total
    state.count = total
    return state


def welford_finalize(state: WelfordState) -> Tuple[float, float]:
    """Mean and sample standard deviation."""
    if state.count < 2:
        raise ValueError(f"Welford statistics need at least 2 samples, got {state.count}")
    return state.mean, math.sqrt(state.m2 / (state.count - 1))


# ----------------------------------------------------------------------
# curriculum
# ----------------------------------------------------------------------
@dataclass
class TimestepCurriculum:
    """Timestep window growing linearly from [T - eps, T] to [1, T]."""
    T: int
    eps: int = 10
    steps: int = 2000
    enabled: bool = False

    def window(self, step: int) -> Tuple[int, int]:
        if not self.enabled:
            return 1, self.T
        start = max(1, self.T - self.eps)
        frac = 1.0 if self.steps <= 0 else min(1.0, step / self.steps)
        return int(round(start - frac * (start - 1))), self.T


# ----------------------------------------------------------------------
# configuration and model bundle
# ----------------------------------------------------------------------
@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    steps: int = 20000
    seed: int = 0
    lam: float = 1e-3
    mode: str = "dm"
    parameterization: Parameterization = Parameterization.NOISE
    weighting: Weighting = Weighting.SIMPLE
    ema_decay: float = 0.9999
    dropout: Optional[float] = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    curriculum: bool = False
    curriculum_eps: int = 10
    curriculum_steps: int = 2000
    checkpoint_every: int = 0

    def __post_init__(self):
        self.parameterization = Parameterization(self.parameterization)
        self.weighting = Weighting(self.weighting)
        if self.mode not in MODES:
            raise ValueError(f"Training mode must be one of {MODES}, got {self.mode!r}")
        if self.mode != "dm" and self.parameterization is not Parameterization.IMAGE:
            raise ValueError(f"Mode {self.mode} needs the image parameterization")
        if self.lr <= 0.0 or self.batch_size < 1 or self.steps < 0:
            raise ValueError("lr must be positive, batch_size >= 1 and steps >= 0")
        if self.lam < 0.0:
            raise ValueError(f"lam must be non-negative, got {self.lam}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must be in [0, 1), got {self.ema_decay}")
        if self.dropout is not None and not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @classmethod
    def from_config(cls, config: Dict[str, Any]) -> "TrainConfig":
        """Collect trainer fields from a full run-config dictionary."""
        trainer, model = config["trainer"], config["model"]
        return cls(lr=trainer["lr"], batch_size=trainer["batch_size"], steps=trainer["steps"],
                   seed=trainer["seed"], lam=trainer["lam"], mode=model["mode"],
                   parameterization=model["parameterization"], weighting=model["weighting"],
                   ema_decay=trainer["ema_decay"], dropout=model.get("dropout"),
                   adam_beta1=trainer["adam_beta1"], adam_beta2=trainer["adam_beta2"],
                   adam_eps=trainer["adam_eps"], curriculum=trainer["curriculum"],
                   curriculum_eps=trainer["curriculum_eps"], curriculum_steps=trainer["curriculum_steps"],
                   checkpoint_every=trainer["checkpoint_every"])


@dataclass
class ModelBundle:
    """Everything a checkpoint holds: configs, networks, EMA shadows and optimizer state."""
    config: Dict[str, Any]
    schedule: Schedule
    denoiser: DenoiserNet
    data_dim: int
    num_classes: int = 0
    encoder: Optional[ReprEncoder] = None
    first_stage: Optional[FirstStage] = None
    denoiser_ema: Optional[EmaState] = None
    first_stage_ema: Optional[EmaState] = None
    optimizer_state: Optional[AdamState] = None
    step: int = 0
    rng_state: Optional[Dict[str, Any]] = None

    @property
    def mode(self) -> str:
        return self.config["model"]["mode"]

    @property
    def parameterization(self) -> Parameterization:
        return Parameterization(self.config["model"]["parameterization"])

    @property
    def latent_dim(self) -> int:
        return self.denoiser.data_dim

    def training_parameters(self) -> List[Tuple[str, Tensor]]:
        named = [(f"denoiser.{n}", p) for n, p in self.denoiser.named_parameters()]
        if self.encoder is not None:
            named.extend((f"encoder.{n}", p) for n, p in self.encoder.named_parameters())
        return named

    def eval_denoiser(self) -> DenoiserNet:
        """Frozen copy carrying the EMA weights (the live net when no EMA exists yet)."""
        if self.denoiser_ema is None or self.denoiser_ema.num_updates == 0:
            return self.denoiser
        snapshot = self.denoiser.copy()
        snapshot.load_state_dict(self.denoiser_ema.averaged())
        return snapshot

    def latents(self, x: np.ndarray) -> np.ndarray:
        if self.first_stage is None:
            return np.asarray(x, dtype=np.float64)
        if self.first_stage.scale is None:
            raise RuntimeError("First stage has no latent scale; train it before the diffusion model")
        return self.first_stage.encode(x)

    def decode(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) if self.first_stage is None else self.first_stage.decode(z)


def build_bundle(config: Dict[str, Any], data_dim: int, num_classes: int = 0) -> ModelBundle:
    """
    Construct freshly initialized networks from a validated run config.

    Args:
        config: Run-config dictionary
        data_dim: Data dimension
        num_classes: Number of labels in the data (used when class-conditional)

    Returns:
        ModelBundle with step 0
    """
    sched_cfg, model, fs_cfg = config["schedule"], config["model"], config["first_stage"]
    schedule = build_linear(sched_cfg["T"], sched_cfg["beta1"], sched_cfg["betaT"],
                            sched_cfg["reverse_variance"])
    mode = model["mode"]
    if mode not in MODES:
        raise ValueError(f"Training mode must be one of {MODES}, got {mode!r}")
    if model["class_conditional"] and num_classes < 1:
        raise ValueError("Class-conditional model needs a labeled dataset")

    latent_dim = fs_cfg["latent_dim"] if fs_cfg["enabled"] else data_dim
    repr_dim = model["repr_dim"] if mode != "dm" else 0
    classes = num_classes if model["class_conditional"] else 0
    dropout = model["dropout"]
    if dropout is None:
        dropout = 0.2 if mode == "dm" else 0.0

    denoiser = DenoiserNet(latent_dim, schedule.T, model["hidden"], model["embed_dim"], repr_dim,
                           classes, dropout, model["activation"], seed=model["seed"])
    encoder = None
    if mode != "dm":
        encoder = ReprEncoder(latent_dim, repr_dim, model["encoder_hidden"], schedule.T, model["embed_dim"],
                              timestep_conditional=(mode == "t_lrdm"), num_classes=classes,
                              activation=model["activation"], seed=model["seed"] + 1)
    first_stage = None
    if fs_cfg["enabled"]:
        first_stage = FirstStage(data_dim, latent_dim, fs_cfg["hidden"], passthrough=fs_cfg["passthrough"],
                                 activation=model["activation"], seed=model["seed"] + 2)
    return ModelBundle(config=config, schedule=schedule, denoiser=denoiser, data_dim=data_dim,
                       num_classes=num_classes, encoder=encoder, first_stage=first_stage)


# ----------------------------------------------------------------------
# service
# ----------------------------------------------------------------------
class TrainerService:
    """Runs optimization for a model bundle."""

    def __init__(self, state=None):
        self.state = state

    def objective(self, bundle: ModelBundle, objectives: ObjectiveService, cfg: TrainConfig,
                  x0: np.ndarray, labels: Optional[np.ndarray], rng: np.random.Generator,
                  t_range: Tuple[int, int]) -> LossBreakdown:
        """Loss of one batch for the bundle's training mode."""
        if cfg.mode == "dm":
            return objectives.dm_loss(bundle.denoiser, x0, cfg.parameterization, cfg.weighting, rng,
                                      class_ids=labels, t_range=t_range)
        if cfg.mode == "lrdm":
            return objectives.lrdm_loss(bundle.denoiser, bundle.encoder, x0, cfg.lam, rng,
                                        class_ids=labels, t_range=t_range)
        if cfg.mode == "t_lrdm":
            return objectives.t_lrdm_loss(bundle.denoiser, bundle.encoder, x0, cfg.lam, rng,
                                          class_ids=labels, t_range=t_range)
        return objectives.lvae_loss(bundle.denoiser, bundle.encoder, x0, cfg.lam, rng, class_ids=labels)

    def train(self, cfg: TrainConfig, bundle: ModelBundle, dataset, rng: np.random.Generator,
              checkpoint_fn: Optional[Callable[[ModelBundle, List[Dict]], None]] = None,
              progress: bool = False) -> List[Dict[str, Any]]:
        """
        Optimize the bundle's denoiser (and encoder) from ``bundle.step`` to ``cfg.steps``.

        Args:
            cfg: Training configuration
            bundle: Models; resumed from its step, optimizer state and EMA when present
            dataset: Training dataset (points, optional labels)
            rng: Generator for batches, timesteps, noise and dropout
            checkpoint_fn: Called with (bundle, metrics) every ``checkpoint_every`` steps
            progress: Show a tqdm progress bar

        Returns:
            Metrics rows, one per step, keyed by ``METRICS_HEADER``
        """
        if (cfg.mode == "dm") != (bundle.encoder is None):
            raise ValueError(f"Training mode {cfg.mode} does not match the bundle's networks (mode {bundle.mode})")
        latents = bundle.latents(dataset.points)
        if latents.shape[1] != bundle.latent_dim:
            raise ValueError(f"Dataset latent dimension {latents.shape[1]} does not match the denoiser's {bundle.latent_dim}")
        labels = dataset.labels if bundle.denoiser.num_classes else None
        if cfg.dropout is not None:
            bundle.denoiser.dropout = cfg.dropout

        objectives = ObjectiveService(bundle.schedule)
        optimizer = AdamOptimizer(bundle.training_parameters(), cfg.lr, cfg.adam_beta1, cfg.adam_beta2,
                                  cfg.adam_eps, state=bundle.optimizer_state)
        bundle.optimizer_state = optimizer.state
        if bundle.denoiser_ema is None:
            bundle.denoiser_ema = EmaState.from_named(bundle.denoiser.named_parameters(), cfg.ema_decay)
        curriculum = TimestepCurriculum(bundle.schedule.T, cfg.curriculum_eps, cfg.curriculum_steps, cfg.curriculum)

        n = latents.shape[0]
        metrics: List[Dict[str, Any]] = []
        for step in trange(bundle.step, cfg.steps, disable=not progress, desc=f"train[{cfg.mode}]"):
            lo, hi = curriculum.window(step)
            idx = rng.integers(0, n, size=cfg.batch_size)
            batch_labels = None if labels is None else labels[idx]

            optimizer.zero_grad()
            breakdown = self.objective(bundle, objectives, cfg, latents[idx], batch_labels, rng, (lo, hi))
            if not np.isfinite(breakdown.total):
                raise TrainingDivergedError(
                    f"Loss diverged at step {step + 1}: total={breakdown.total}, "
                    f"diffusion={breakdown.diffusion_term}, kl={breakdown.kl_term}, "
                    f"t in [{int(breakdown.t.min())}, {int(breakdown.t.max())}]")
            breakdown.loss.backward()
            optimizer.step()
            bundle.denoiser_ema.update(bundle.denoiser.named_parameters())
            bundle.step = step + 1

            metrics.append({"step": step + 1, "loss_total": breakdown.total,
                            "loss_diffusion": breakdown.diffusion_term, "loss_kl": breakdown.kl_term,
                            "t_window_lo": lo, "t_window_hi": hi})
            if checkpoint_fn and cfg.checkpoint_every and bundle.step % cfg.checkpoint_every == 0:
                bundle.rng_state = rng.bit_generator.state
                checkpoint_fn(bundle, metrics)

        bundle.rng_state = rng.bit_generator.state
        return metrics

    def train_first_stage(self, first_stage: FirstStage, points: np.ndarray, fs_cfg: Dict[str, Any],
                          rng: np.random.Generator, progress: bool = False) -> EmaState:
        """
        Train the autoencoder on reconstruction MSE, load its EMA weights and
        freeze the latent scale estimated over the first batches. A passthrough
        stage keeps scale 1 so its latents equal the data.

        Returns:
            The first stage's EMA state
        """
        named = first_stage.named_parameters()
        ema = EmaState.from_named(named, fs_cfg["ema_decay"])
        if named and fs_cfg["steps"] > 0:
            optimizer = AdamOptimizer(named, fs_cfg["lr"])
            n = points.shape[0]
            for _ in trange(fs_cfg["steps"], disable=not progress, desc="train[first_stage]"):
                x = points[rng.integers(0, n, size=fs_cfg["batch_size"])]
                optimizer.zero_grad()
                recon = first_stage.decode_tensor(first_stage.encode_tensor(x))
                loss = (recon - x).square().sum(-1).mean()
                if not np.isfinite(loss.item()):
                    raise TrainingDivergedError(f"First-stage loss diverged: {loss.item()}")
                loss.backward()
                optimizer.step()
                ema.update(named)
            first_stage.load_state_dict(ema.averaged())

        if first_stage.passthrough:
            first_stage.scale = 1.0  # identity: z = x exactly
            return ema
        first_stage.scale = self.estimate_scale(first_stage, points, rng, fs_cfg["batch_size"],
                                                fs_cfg["scale_batches"])
        return ema

    @staticmethod
    def estimate_scale(first_stage: FirstStage, points: np.ndarray, rng: np.random.Generator,
                       batch_size: int, num_batches: int = 100) -> float:
        """Standard deviation of encoded latents over ``num_batches`` random batches."""
        state = WelfordState()
        n = points.shape[0]
        for _ in range(num_batches):
            x = points[rng.integers(0, n, size=batch_size)]
            welford_update(state, first_stage.encode(x, rescale=False))
        _, std = welford_finalize(state)
        if std <= 0.0:
            raise RuntimeError("Encoded latents have zero variance; cannot rescale")
        return std
