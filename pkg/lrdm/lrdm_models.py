#!/usr/bin/env python3
"""
Model Service

Fully-connected denoiser, Gaussian representation encoder and the toy
first-stage autoencoder, all built on the autodiff engine.
"""

import copy
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .lrdm_autodiff import Tensor, as_tensor, concat, no_grad


IntLike = Union[int, np.integer, np.ndarray, Sequence[int]]

ACTIVATIONS = ("silu", "relu")


def timestep_embedding(t: IntLike, dim: int, T: int) -> np.ndarray:
    """
    Sinusoidal timestep embedding.

    Args:
        t: Timestep or array of timesteps in 0..T
        dim: Even embedding dimension
        T: Number of diffusion steps (range check only)

    Returns:
        Array [sin(t w_k), cos(t w_k)] with w_k = 10000^(-2k/dim); shape (dim,)
        for scalar t, else (len(t), dim)
    """
    if dim % 2 != 0 or dim <= 0:
        raise ValueError(f"Timestep embedding dimension must be a positive even number, got {dim}")
    t_arr = np.asarray(t, dtype=np.float64)
    if t_arr.size and (t_arr.min() < 0 or t_arr.max() > T):
        raise ValueError(f"Timestep out of range [0, {T}]")
    half = dim // 2
    freqs = 10000.0 ** (-2.0 * np.arange(half) / dim)
    angles = t_arr[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


def one_hot(labels: IntLike, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"Class id out of range [0, {num_classes}): {labels.min()}..{labels.max()}")
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], train_mode: bool) -> Tensor:
    """
    Inverted dropout: zero each unit with probability p and rescale by 1/(1-p).

    Identity outside train mode or when p == 0.
    """
    if not train_mode or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("Dropout in train mode needs a random generator")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask


def reparameterize(mu: Tensor, logvar: Tensor, noise: np.ndarray) -> Tensor:
    """r = mu + exp(logvar / 2) * noise; gradients reach both heads."""
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    noise = np.asarray(noise, dtype=np.float64)
    if tuple(mu.shape) != tuple(logvar.shape) or tuple(mu.shape) != noise.shape:
        raise ValueError(f"reparameterize: shapes {mu.shape}, {logvar.shape}, {noise.shape} disagree")
    return mu + (logvar * 0.5).exp() * noise


def _batch_timesteps(t: Optional[IntLike], batch: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(t, dtype=np.int64), (batch,))


class Module:
    """Ordered collection of named parameters."""

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        raise NotImplementedError

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        """Copy arrays into the parameters, checking names and shapes."""
        own = dict(self.named_parameters())
        missing = [name for name in own if name not in state]
        if missing:
            raise ValueError(f"State is missing parameters: {missing}")
        for name, p in own.items():
            values = np.asarray(state[name], dtype=np.float64)
            if values.shape != p.shape:
                raise ValueError(f"Parameter {name}: expected shape {p.shape}, got {values.shape}")
            p.values[...] = values

    def copy(self) -> "Module":
        """Independent snapshot (e.g. for EMA evaluation)."""
        return copy.deepcopy(self)


class Linear(Module):
    """Affine layer x @ W + b with uniform fan-in initialisation."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, zero: bool = False):
        bound = 1.0 / np.sqrt(in_dim)
        if zero:
            weight = np.zeros((in_dim, out_dim))
            bias = np.zeros(out_dim)
        else:
            weight = rng.uniform(-bound, bound, size=(in_dim, out_dim))
            bias = rng.uniform(-bound, bound, size=out_dim)
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(bias, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return [("weight", self.weight), ("bias", self.bias)]


class MLP(Module):
    """Stack of Linear layers with a smooth nonlinearity between them."""

    def __init__(self, in_dim: int, hidden: Sequence[int], out_dim: int, rng: np.random.Generator,
                 activation: str = "silu", zero_output: bool = False):
        if activation not in ACTIVATIONS:
            raise ValueError(f"Unknown activation {activation!r}; expected one of {ACTIVATIONS}")
        widths = [in_dim, *hidden]
        self.hidden_layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.output_layer = Linear(widths[-1], out_dim, rng, zero=zero_output)
        self.activation = activation

    def trunk(self, h: Tensor, dropout_p: float = 0.0, rng: Optional[np.random.Generator] = None,
              train_mode: bool = False) -> Tensor:
        for layer in self.hidden_layers:
            h = layer(h)
            h = h.silu() if self.activation == "silu" else h.relu()
            h = dropout(h, dropout_p, rng, train_mode)
        return h

    def __call__(self, h: Tensor, dropout_p: float = 0.0, rng: Optional[np.random.Generator] = None,
                 train_mode: bool = False) -> Tensor:
        return self.output_layer(self.trunk(h, dropout_p, rng, train_mode))

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        params = []
        for i, layer in enumerate(self.hidden_layers):
            params.extend((f"layers.{i}.{n}", p) for n, p in layer.named_parameters())
        params.extend((f"out.{n}", p) for n, p in self.output_layer.named_parameters())
        return params


class DenoiserNet(Module):
    """
    Fully-connected noise/image/mean predictor.

    Input is [x_t, timestep embedding (+ class embedding), representation];
    output has the data dimension.
    """

    def __init__(self, data_dim: int, T: int, hidden: Sequence[int] = (128, 128, 128),
                 embed_dim: int = 32, repr_dim: int = 0, num_classes: int = 0,
                 dropout: float = 0.0, activation: str = "silu", zero_output: bool = False,
                 seed: int = 0):
        if not 0.0 <= dropout < 1.0:
            raise ValueError(f"Dropout probability must be in [0, 1), got {dropout}")
        rng = np.random.default_rng(seed)
        self.data_dim = data_dim
        self.T = T
        self.hidden = tuple(hidden)
        self.embed_dim = embed_dim
        self.repr_dim = repr_dim
        self.num_classes = num_classes
        self.dropout = dropout
        self.activation = activation
        self.input_dim = data_dim + embed_dim + repr_dim
        self.mlp = MLP(self.input_dim, self.hidden, data_dim, rng, activation, zero_output)
        self.class_embedding = (Tensor(rng.normal(0.0, 1.0, size=(num_classes, embed_dim)), requires_grad=True)
                                if num_classes else None)

    def config(self) -> Dict:
        return {"data_dim": self.data_dim, "T": self.T, "hidden": list(self.hidden),
                "embed_dim": self.embed_dim, "repr_dim": self.repr_dim,
                "num_classes": self.num_classes, "dropout": self.dropout, "activation": self.activation}

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        params = [(f"mlp.{n}", p) for n, p in self.mlp.named_parameters()]
        if self.class_embedding is not None:
            params.append(("class_embedding", self.class_embedding))
        return params

    def forward(self, x_t, t: IntLike, cond=None, class_id: Optional[IntLike] = None,
                train_mode: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        """
        Predict the parameterization target for a batch of noisy inputs.

        Args:
            x_t: Noisy input, shape (B, D) or (D,)
            t: Timestep or per-row timesteps
            cond: Representation r, shape (B, R), when configured
            class_id: Class id or per-row ids, when configured
            train_mode: Apply dropout
            rng: Generator for dropout masks

        Returns:
            Prediction with the shape of ``x_t``
        """
        x = as_tensor(x_t)
        single = x.ndim == 1
        if single:
            x = x.reshape(1, -1)
        if x.shape[-1] != self.data_dim:
            raise ValueError(f"Denoiser expects data dimension {self.data_dim}, got {x.shape[-1]}")
        batch = x.shape[0]

        if cond is not None and not self.repr_dim:
            raise ValueError("Representation supplied but the denoiser is not representation-conditional")
        if cond is None and self.repr_dim:
            raise ValueError(f"Denoiser expects a representation of dimension {self.repr_dim}")
        if class_id is not None and not self.num_classes:
            raise ValueError("Class id supplied but the denoiser is not class-conditional")
        if class_id is None and self.num_classes:
            raise ValueError(f"Denoiser expects a class id in [0, {self.num_classes})")

        emb = Tensor(timestep_embedding(_batch_timesteps(t, batch), self.embed_dim, self.T))
        if self.num_classes:
            labels = np.broadcast_to(np.asarray(class_id, dtype=np.int64), (batch,))
            emb = emb + one_hot(labels, self.num_classes) @ self.class_embedding

        parts = [x, emb]
        if self.repr_dim:
            r = as_tensor(cond)
            if r.ndim == 1:
                r = r.reshape(1, -1)
            if tuple(r.shape) != (batch, self.repr_dim):
                raise ValueError(f"Representation shape {r.shape} does not match ({batch}, {self.repr_dim})")
            parts.append(r)

        out = self.mlp(concat(parts), self.dropout, rng, train_mode)
        return out.reshape(self.data_dim) if single else out

    __call__ = forward


class ReprEncoder(Module):
    """
    Gaussian posterior encoder q(r | z0) = N(mu(z0), exp(logvar(z0))).

    Optionally timestep-conditional (r_t) and/or class-conditional.
    """

    def __init__(self, data_dim: int, repr_dim: int = 8, hidden: Sequence[int] = (128, 128),
                 T: int = 1000, embed_dim: int = 32, timestep_conditional: bool = False,
                 num_classes: int = 0, zero_heads: bool = False, activation: str = "silu",
                 seed: int = 1):
        rng = np.random.default_rng(seed)
        self.data_dim = data_dim
        self.repr_dim = repr_dim
        self.hidden = tuple(hidden)
        self.T = T
        self.embed_dim = embed_dim
        self.timestep_conditional = timestep_conditional
        self.num_classes = num_classes
        self.activation = activation
        in_dim = data_dim
        if timestep_conditional or num_classes:
            in_dim += embed_dim
        self.input_dim = in_dim
        self.trunk = MLP(in_dim, self.hidden[:-1], self.hidden[-1], rng, activation)
        self.mu_head = Linear(self.hidden[-1], repr_dim, rng, zero=zero_heads)
        self.logvar_head = Linear(self.hidden[-1], repr_dim, rng, zero=zero_heads)
        self.class_embedding = (Tensor(rng.normal(0.0, 1.0, size=(num_classes, embed_dim)), requires_grad=True)
                                if num_classes else None)

    @property
    def class_conditional(self) -> bool:
        return bool(self.num_classes)

    def config(self) -> Dict:
        return {"data_dim": self.data_dim, "repr_dim": self.repr_dim, "hidden": list(self.hidden),
                "T": self.T, "embed_dim": self.embed_dim,
                "timestep_conditional": self.timestep_conditional,
                "num_classes": self.num_classes, "activation": self.activation}

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        params = [(f"trunk.{n}", p) for n, p in self.trunk.named_parameters()]
        params.extend((f"mu.{n}", p) for n, p in self.mu_head.named_parameters())
        params.extend((f"logvar.{n}", p) for n, p in self.logvar_head.named_parameters())
        if self.class_embedding is not None:
            params.append(("class_embedding", self.class_embedding))
        return params

    def encode(self, z0, t: Optional[IntLike] = None,
               class_id: Optional[IntLike] = None) -> Tuple[Tensor, Tensor]:
        """
        Posterior parameters for a batch of clean latents.

        Args:
            z0: Clean latents, shape (B, D)
            t: Timestep(s), required iff timestep-conditional
            class_id: Class id(s), required iff class-conditional

        Returns:
            Tuple of (mu, logvar), each (B, R)
        """
        z = as_tensor(z0)
        if z.ndim == 1:
            z = z.reshape(1, -1)
        batch = z.shape[0]
        if self.timestep_conditional and t is None:
            raise ValueError("Timestep-conditional encoder needs t")
        if not self.timestep_conditional and t is not None:
            raise ValueError("Encoder is not timestep-conditional; t must be omitted")
        if self.num_classes and class_id is None:
            raise ValueError(f"Class-conditional encoder needs a class id in [0, {self.num_classes})")
        if not self.num_classes and class_id is not None:
            raise ValueError("Encoder is not class-conditional; class id must be omitted")

        parts = [z]
        if self.timestep_conditional or self.num_classes:
            if self.timestep_conditional:
                emb = Tensor(timestep_embedding(_batch_timesteps(t, batch), self.embed_dim, self.T))
            else:
                emb = Tensor(np.zeros((batch, self.embed_dim)))
            if self.num_classes:
                labels = np.broadcast_to(np.asarray(class_id, dtype=np.int64), (batch,))
                emb = emb + one_hot(labels, self.num_classes) @ self.class_embedding
            parts.append(emb)

        h = self.trunk(concat(parts))
        h = h.silu() if self.activation == "silu" else h.relu()
        return self.mu_head(h), self.logvar_head(h)

    def __call__(self, z0, t=None, class_id=None):
        return self.encode(z0, t, class_id)

    def posterior_mode(self, z0, t=None, class_id=None) -> np.ndarray:
        """mu(z0) as a plain array, without recording a tape."""
        with no_grad():
            mu, _ = self.encode(z0, t, class_id)
        return mu.values


class FirstStage(Module):
    """
    Small autoencoder mapping data to latents and back.

    ``encode`` divides by the frozen scale estimate once it is set; in
    passthrough mode both directions are the identity.
    """

    def __init__(self, data_dim: int, latent_dim: int, hidden: Sequence[int] = (64,),
                 passthrough: bool = False, activation: str = "silu", seed: int = 2):
        if passthrough and latent_dim != data_dim:
            raise ValueError("Passthrough first stage needs latent_dim == data_dim")
        rng = np.random.default_rng(seed)
        self.data_dim = data_dim
        self.latent_dim = latent_dim
        self.hidden = tuple(hidden)
        self.passthrough = passthrough
        self.activation = activation
        self.scale: Optional[float] = None
        if passthrough:
            self.encoder = None
            self.decoder = None
        else:
            self.encoder = MLP(data_dim, self.hidden, latent_dim, rng, activation)
            self.decoder = MLP(latent_dim, self.hidden, data_dim, rng, activation)

    def config(self) -> Dict:
        return {"data_dim": self.data_dim, "latent_dim": self.latent_dim, "hidden": list(self.hidden),
                "passthrough": self.passthrough, "activation": self.activation, "scale": self.scale}

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        if self.passthrough:
            return []
        params = [(f"encoder.{n}", p) for n, p in self.encoder.named_parameters()]
        params.extend((f"decoder.{n}", p) for n, p in self.decoder.named_parameters())
        return params

    def encode_tensor(self, x) -> Tensor:
        x = as_tensor(x)
        return x if self.passthrough else self.encoder(x)

    def decode_tensor(self, z) -> Tensor:
        z = as_tensor(z)
        return z if self.passthrough else self.decoder(z)

    def encode(self, x: np.ndarray, rescale: bool = True) -> np.ndarray:
        """Latents z = E(x) / scale (scale applied once estimated)."""
        with no_grad():
            z = self.encode_tensor(np.asarray(x, dtype=np.float64)).values
        if rescale and self.scale is not None:
            z = z / self.scale
        return z

    def decode(self, z: np.ndarray) -> np.ndarray:
        """x_hat = D(z * scale)."""
        z = np.asarray(z, dtype=np.float64)
        if self.scale is not None:
            z = z * self.scale
        with no_grad():
            return self.decode_tensor(z).values
