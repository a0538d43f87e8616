"""Policy and Q networks over the shared CNN backbone.

Backbone: five strided convolutions (6,8,7,3) (8,16,3,2) (16,16,3,1)
(16,32,3,1) (32,256,3,1) with rectifiers in between, global average pool,
and a final 256-wide dense layer; a 6x56x56 state maps 56-17-8-6-4-2-pooled.
The policy adds a two-layer MLP with parallel mean / log-std heads; the Q
network projects the action to 256 features, concatenates with the state
features, fuses 512-256 (the 1x1 convolution on 1x1 maps), and regresses a
scalar through its own two-layer MLP.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

STATE_CHANNELS = 6
STATE_SIZE = 56
ACTION_DIM = 4
ACTION_SCALE = 2.0
LOG_SIGMA_MIN = -20.0
LOG_SIGMA_MAX = 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_SQUASH_EPS = 1e-6

_BACKBONE_CONVS = ((6, 8, 7, 3), (8, 16, 3, 2), (16, 16, 3, 1), (16, 32, 3, 1), (32, 256, 3, 1))
_FEATURES = 256


class Linear:
    def __init__(self, n_in: int, n_out: int, rng, dtype):
        bound = 1.0 / math.sqrt(n_in)
        self.w = Tensor(rng.uniform(-bound, bound, size=(n_in, n_out)).astype(dtype), requires_grad=True)
        self.b = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return ad.linear(x, self.w, self.b)

    def named(self, prefix: str):
        return [(f"{prefix}.weight", self.w), (f"{prefix}.bias", self.b)]


class Conv2d:
    def __init__(self, c_in: int, c_out: int, ksize: int, stride: int, rng, dtype):
        bound = 1.0 / math.sqrt(c_in * ksize * ksize)
        self.w = Tensor(rng.uniform(-bound, bound, size=(c_out, c_in, ksize, ksize)).astype(dtype), requires_grad=True)
        self.b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        self.stride = stride

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, stride=self.stride)

    def named(self, prefix: str):
        return [(f"{prefix}.weight", self.w), (f"{prefix}.bias", self.b)]


class BackboneCnn:
    def __init__(self, rng, dtype=np.float32):
        self.convs = [Conv2d(ci, co, k, s, rng, dtype) for ci, co, k, s in _BACKBONE_CONVS]
        self.fc = Linear(_FEATURES, _FEATURES, rng, dtype)

    def __call__(self, x):
        if x.data.ndim != 4 or x.data.shape[1:] != (STATE_CHANNELS, STATE_SIZE, STATE_SIZE):
            raise ValueError(f"backbone expects (N, {STATE_CHANNELS}, {STATE_SIZE}, {STATE_SIZE}), got {x.data.shape}")
        for conv in self.convs:
            x = ad.relu(conv(x))
        x = ad.adaptive_avg_pool(x)
        return ad.relu(self.fc(x))

    def named(self, prefix: str):
        params = []
        for i, conv in enumerate(self.convs, start=1):
            params += conv.named(f"{prefix}.conv{i}")
        return params + self.fc.named(f"{prefix}.fc")


class PolicyNetwork:
    """State -> (mu, log_sigma) heads of the squashed Gaussian policy."""

    def __init__(self, rng, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.backbone = BackboneCnn(rng, dtype)
        self.fc1 = Linear(_FEATURES, _FEATURES, rng, dtype)
        self.fc2 = Linear(_FEATURES, _FEATURES, rng, dtype)
        self.mu_head = Linear(_FEATURES, ACTION_DIM, rng, dtype)
        self.log_sigma_head = Linear(_FEATURES, ACTION_DIM, rng, dtype)

    def forward(self, state) -> tuple:
        h = self.backbone(ad.as_tensor(state))
        h = ad.relu(self.fc1(h))
        h = ad.relu(self.fc2(h))
        mu = self.mu_head(h)
        log_sigma = ad.clamp(self.log_sigma_head(h), LOG_SIGMA_MIN, LOG_SIGMA_MAX)
        return mu, log_sigma

    __call__ = forward

    def named_parameters(self):
        return (self.backbone.named("backbone")
                + self.fc1.named("fc1") + self.fc2.named("fc2")
                + self.mu_head.named("mu_head") + self.log_sigma_head.named("log_sigma_head"))

    def parameters(self):
        return [t for _, t in self.named_parameters()]


class QNetwork:
    """(state, action) -> scalar soft value."""

    def __init__(self, rng, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.backbone = BackboneCnn(rng, dtype)
        self.action_proj = Linear(ACTION_DIM, _FEATURES, rng, dtype)
        self.fusion = Linear(2 * _FEATURES, _FEATURES, rng, dtype)
        self.fc1 = Linear(_FEATURES, _FEATURES, rng, dtype)
        self.fc2 = Linear(_FEATURES, _FEATURES, rng, dtype)
        self.head = Linear(_FEATURES, 1, rng, dtype)

    def state_features(self, state):
        return self.backbone(ad.as_tensor(state))

    def from_features(self, features, action):
        h = ad.concat([ad.as_tensor(features), self.action_proj(ad.as_tensor(action))], axis=1)
        h = ad.relu(self.fusion(h))
        h = ad.relu(self.fc1(h))
        h = ad.relu(self.fc2(h))
        return ad.reshape(self.head(h), (-1,))

    def forward(self, state, action):
        return self.from_features(self.state_features(state), action)

    __call__ = forward

    def named_parameters(self):
        return (self.backbone.named("backbone")
                + self.action_proj.named("action_proj") + self.fusion.named("fusion")
                + self.fc1.named("fc1") + self.fc2.named("fc2") + self.head.named("head"))

    def parameters(self):
        return [t for _, t in self.named_parameters()]


def parameter_count(network) -> int:
    return sum(t.data.size for t in network.parameters())


# ---------------------------------------------------------------------------
# Squashed-Gaussian action math. The tape and plain-numpy variants compute the
# identical expressions; both profiles are unit-tested against each other.


def squashed_gaussian(mu, log_sigma, eps: np.ndarray):
    """Reparameterized sample on the tape: u = mu + sigma*eps, action = 2 tanh(u).

    Returns (action, log_prob) with log_prob the Gaussian density of u minus
    the tanh/rescale correction sum_k [log 2 + log(1 - tanh(u_k)^2 + 1e-6)].
    """
    dim = eps.shape[-1]
    sigma = ad.exp(log_sigma)
    u = ad.add(mu, ad.mul(sigma, eps))
    t = ad.tanh(u)
    action = ad.mul(t, ACTION_SCALE)
    gauss_const = np.sum(-0.5 * eps * eps, axis=-1) - dim * eps.dtype.type(_HALF_LOG_2PI)
    gauss = ad.add(ad.mul(ad.tsum(log_sigma, axis=1), -1.0), gauss_const)
    one_minus_t2 = ad.add(ad.sub(1.0, ad.mul(t, t)), _SQUASH_EPS)
    squash = ad.add(ad.tsum(ad.log(one_minus_t2), axis=1), dim * math.log(2.0))
    return action, ad.sub(gauss, squash)


def log_prob_np(u: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Log-density of action = 2 tanh(u) for u ~ N(mu, sigma), summed over components."""
    base = -0.5 * ((u - mu) / sigma) ** 2 - np.log(sigma) - _HALF_LOG_2PI
    t = np.tanh(u)
    squash = math.log(2.0) + np.log(1.0 - t * t + _SQUASH_EPS)
    return np.sum(base - squash, axis=-1)


def sample_action(mu: np.ndarray, log_sigma: np.ndarray, rng) -> tuple[np.ndarray, float]:
    """Draw one squashed-Gaussian action (numpy path used by rollouts)."""
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    log_sigma = np.asarray(log_sigma, dtype=np.float64).reshape(-1)
    sigma = np.exp(log_sigma)
    u = mu + sigma * rng.standard_normal(mu.shape[0])
    action = ACTION_SCALE * np.tanh(u)
    return action, float(log_prob_np(u, mu, sigma))


def deterministic_action(mu: np.ndarray) -> np.ndarray:
    """Test-time action: 2 tanh(mu)."""
    return ACTION_SCALE * np.tanh(np.asarray(mu, dtype=np.float64).reshape(-1))
