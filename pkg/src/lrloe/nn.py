"""Small numpy neural networks with hand-written backpropagation.

Everything runs in float64 on batches shaped ``(B, features)``. A network is
a plain list of ``(W, b)`` layers with ReLU between layers and a linear
output. Optimiser and soft-update helpers operate on flat lists of arrays so
they can be shared by the policy and the critic.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
LYAPUNOV_FLOOR = 1e-6
_LOG_2PI = math.log(2.0 * math.pi)


class MLP:
    """Fully connected network ``sizes[0] -> ... -> sizes[-1]``."""

    def __init__(self, sizes, rng: np.random.Generator | None = None, out_scale: float = 1.0):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output size")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights = []
        self.biases = []
        for i, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = 1.0 / math.sqrt(n_in)
            W = rng.uniform(-bound, bound, size=(n_in, n_out))
            b = rng.uniform(-bound, bound, size=n_out)
            if i == len(self.sizes) - 2:
                W *= out_scale
                b *= out_scale
            self.weights.append(W)
            self.biases.append(b)

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "MLP":
        other = MLP.__new__(MLP)
        other.sizes = self.sizes
        other.weights = [W.copy() for W in self.weights]
        other.biases = [b.copy() for b in self.biases]
        return other

    def forward(self, x: np.ndarray, cache: bool = False):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"expected input width {self.sizes[0]}, got {x.shape[-1]}")
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return (h, acts) if cache else h

    __call__ = forward

    def backward(self, acts: list[np.ndarray], grad_out: np.ndarray):
        """Gradients of ``sum(grad_out * out)``.

        Returns ``(param_grads, grad_input)`` with ``param_grads`` ordered as
        :attr:`params`. Batch axes are summed.
        """
        g = np.asarray(grad_out, dtype=float)
        if g.shape != acts[-1].shape:
            raise ValueError(f"upstream gradient shape {g.shape} != output shape {acts[-1].shape}")
        grads = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            x = acts[i]
            x2 = x.reshape(-1, x.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            grads[2 * i] = x2.T @ g2
            grads[2 * i + 1] = g2.sum(axis=0)
            g = g @ self.weights[i].T
            if i > 0:
                g = g * (acts[i] > 0.0)
        return grads, g


def _softplus(x):
    return np.logaddexp(0.0, x)


@dataclass
class PolicySample:
    action: np.ndarray
    log_prob: np.ndarray
    u: np.ndarray
    eps: np.ndarray
    mu: np.ndarray
    log_std: np.ndarray
    acts: list
    clipped: np.ndarray


class GaussianPolicy:
    """Tanh-squashed Gaussian policy ``a = k_max tanh(mu(s) + std(s) eps)``.

    The trunk output has ``2 * action_dim`` columns: the mean head followed by
    the log-std head. States are divided by ``state_scale`` before entering
    the network.
    """

    def __init__(
        self,
        state_dim: int = 3,
        action_dim: int = 18,
        hidden=(128, 64, 32),
        k_max=1.0,
        state_scale: float = 1.0,
        log_std_init: float = 0.0,
        rng: np.random.Generator | None = None,
        mean_scale: float = 1.0,
    ):
        self.state_dim = state_dim
        self.action_dim = action_dim
        # scalar or per-entry bound
        self.k_max = np.broadcast_to(np.asarray(k_max, dtype=float), (action_dim,)).copy()
        if np.any(self.k_max <= 0.0):
            raise ValueError("k_max must be positive")
        self._log_k_max = float(np.sum(np.log(self.k_max)))
        self.state_scale = float(state_scale)
        self.net = MLP((state_dim, *hidden, 2 * action_dim), rng=rng, out_scale=0.01)
        # extra shrink on the mean head only: gains start close to zero
        self.net.weights[-1][:, :action_dim] *= mean_scale
        self.net.biases[-1][:action_dim] *= mean_scale
        self.net.biases[-1][action_dim:] += log_std_init

    @property
    def params(self):
        return self.net.params

    def dist(self, s: np.ndarray, cache: bool = False):
        out, acts = self.net.forward(np.asarray(s, dtype=float) / self.state_scale, cache=True)
        mu = out[..., : self.action_dim]
        raw = out[..., self.action_dim :]
        log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
        clipped = (raw < LOG_STD_MIN) | (raw > LOG_STD_MAX)
        if cache:
            return mu, log_std, acts, clipped
        return mu, log_std

    def deterministic(self, s: np.ndarray) -> np.ndarray:
        mu, _ = self.dist(s)
        return self.k_max * np.tanh(mu)

    def sample(self, s: np.ndarray, rng: np.random.Generator | None = None, eps=None) -> PolicySample:
        """Reparameterised draw; pass ``eps`` to reuse fixed noise."""
        mu, log_std, acts, clipped = self.dist(s, cache=True)
        if eps is None:
            eps = rng.standard_normal(mu.shape)
        u = mu + np.exp(log_std) * eps
        action = self.k_max * np.tanh(u)
        # log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u)), stable for large |u|
        log_jac = 2.0 * (math.log(2.0) - u - _softplus(-2.0 * u))
        log_prob = np.sum(-0.5 * eps**2 - 0.5 * _LOG_2PI - log_std - log_jac, axis=-1) - self._log_k_max
        return PolicySample(action, log_prob, u, eps, mu, log_std, acts, clipped)

    def backward(self, sample: PolicySample, grad_action: np.ndarray, grad_log_prob: np.ndarray):
        """Parameter gradients of ``sum(grad_action*a) + sum(grad_log_prob*log_prob)``.

        The noise ``eps`` is held fixed (reparameterisation).
        """
        t = np.tanh(sample.u)
        g_lp = np.asarray(grad_log_prob, dtype=float)[..., None]
        g_u = np.asarray(grad_action) * self.k_max * (1.0 - t * t) + g_lp * 2.0 * t
        g_mu = g_u
        g_ls = g_u * np.exp(sample.log_std) * sample.eps - g_lp
        g_ls = np.where(sample.clipped, 0.0, g_ls)
        grads, _ = self.net.backward(sample.acts, np.concatenate([g_mu, g_ls], axis=-1))
        return grads


class LyapunovCritic:
    """``L(s, a) = f(s, a)^T f(s, a) + floor`` with ``f`` an MLP."""

    def __init__(
        self,
        state_dim: int = 3,
        action_dim: int = 18,
        hidden=(128, 64),
        out_dim: int = 32,
        state_scale: float = 1.0,
        action_scale: float = 1.0,
        floor: float = LYAPUNOV_FLOOR,
        rng: np.random.Generator | None = None,
    ):
        self.state_scale = float(state_scale)
        self.action_scale = float(action_scale)
        self.floor = float(floor)
        self.state_dim = state_dim
        self.net = MLP((state_dim + action_dim, *hidden, out_dim), rng=rng)

    @property
    def params(self):
        return self.net.params

    def copy(self) -> "LyapunovCritic":
        other = LyapunovCritic.__new__(LyapunovCritic)
        other.state_scale = self.state_scale
        other.action_scale = self.action_scale
        other.floor = self.floor
        other.state_dim = self.state_dim
        other.net = self.net.copy()
        return other

    def _input(self, s, a):
        return np.concatenate(
            [np.asarray(s, dtype=float) / self.state_scale, np.asarray(a, dtype=float) / self.action_scale],
            axis=-1,
        )

    def value(self, s: np.ndarray, a: np.ndarray, cache: bool = False):
        f, acts = self.net.forward(self._input(s, a), cache=True)
        L = np.sum(f * f, axis=-1) + self.floor
        return (L, acts) if cache else L

    __call__ = value

    def backward(self, acts, grad_L: np.ndarray):
        """Returns ``(param_grads, grad_s, grad_a)`` of ``sum(grad_L * L)``."""
        f = acts[-1]
        grads, g_in = self.net.backward(acts, 2.0 * np.asarray(grad_L)[..., None] * f)
        n_s = self.state_dim
        return grads, g_in[..., :n_s] / self.state_scale, g_in[..., n_s:] / self.action_scale


class Adam:
    """Bias-corrected Adam acting in place on a list of arrays."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads) -> None:
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameters")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def soft_update(target, online, tau: float) -> None:
    """``target <- (1 - tau) target + tau online`` in place."""
    if len(target) != len(online):
        raise ValueError("parameter lists differ in length")
    for t, o in zip(target, online):
        if t.shape != o.shape:
            raise ValueError(f"shape mismatch {t.shape} vs {o.shape}")
        t *= 1.0 - tau
        t += tau * o


# -- checkpoint serialisation -------------------------------------------------

MAGIC = b"LRLOECKP"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def pack_tensors(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    """Serialise named float64 tensors.

    Layout: magic, u32 version, u32 meta length, UTF-8 JSON meta, u32 tensor
    count, per tensor (u32 name length, name, u32 ndim, u32 dims...), then
    the little-endian float64 blob, then a SHA-256 of all preceding bytes.
    """
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    head = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(meta_bytes)), meta_bytes]
    head.append(struct.pack("<I", len(tensors)))
    blobs = []
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        nb = name.encode()
        head.append(struct.pack("<I", len(nb)) + nb)
        head.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        blobs.append(arr.astype("<f8").tobytes())
    body = b"".join(head) + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def unpack_tensors(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(data) < len(MAGIC) + 32 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    pos = len(MAGIC)
    version, meta_len = struct.unpack_from("<II", body, pos)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos += 8
    meta = json.loads(body[pos : pos + meta_len].decode())
    pos += meta_len
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    manifest = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        name = body[pos : pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", body, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        manifest.append((name, shape))
    tensors = {}
    for name, shape in manifest:
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=pos).astype(np.float64)
        tensors[name] = arr.reshape(shape)
        pos += 8 * n
    if pos != len(body):
        raise CheckpointError("trailing bytes after tensor blob")
    return tensors, meta
