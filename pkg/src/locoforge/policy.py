"""Gaussian MLP actor-critic with hand-written backpropagation.

Both networks are ``obs -> 64 -> 64 -> out`` with tanh hidden units and a
linear head. Weights are stored as ``(out, in)`` matrices so a layer is
``y = x @ W.T + b`` for a batch ``x`` of shape ``(N, in)``.

Checkpoint text format (``locoforge-policy v1``)::

    locoforge-policy v1 obs_dim=<int> act_dim=<int> hidden=<h1>,<h2>
    <one float per line>

Parameters are written in :data:`PARAM_ORDER`; matrices row-major. Floats use
Python's shortest round-trip ``repr`` so save/load is bit-exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

HIDDEN = (64, 64)
ACT_DIM = 4
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
LOG_STD_INIT = -1.0

PARAM_ORDER = (
    "actor_W0", "actor_b0", "actor_W1", "actor_b1", "actor_W2", "actor_b2",
    "log_std",
    "critic_W0", "critic_b0", "critic_W1", "critic_b1", "critic_W2", "critic_b2",
)
_HEADER = "locoforge-policy v1"


class CheckpointError(ValueError):
    pass


def param_shapes(obs_dim: int, act_dim: int = ACT_DIM, hidden=HIDDEN) -> dict[str, tuple]:
    h1, h2 = hidden
    shapes = {}
    for net, out in (("actor", act_dim), ("critic", 1)):
        sizes = [obs_dim, h1, h2, out]
        for k in range(3):
            shapes[f"{net}_W{k}"] = (sizes[k + 1], sizes[k])
            shapes[f"{net}_b{k}"] = (sizes[k + 1],)
    shapes["log_std"] = (act_dim,)
    return {name: shapes[name] for name in PARAM_ORDER}


@dataclass
class PolicyParams:
    """Named parameter arrays. Also used as the gradient buffer (same layout)."""

    arrays: dict[str, np.ndarray]
    obs_dim: int
    act_dim: int = ACT_DIM
    hidden: tuple[int, int] = HIDDEN

    def __getitem__(self, name):
        return self.arrays[name]

    def __setitem__(self, name, value):
        self.arrays[name][...] = value

    def copy(self) -> "PolicyParams":
        return PolicyParams({k: v.copy() for k, v in self.arrays.items()},
                            self.obs_dim, self.act_dim, self.hidden)

    def zeros_like(self) -> "PolicyParams":
        return PolicyParams({k: np.zeros_like(v) for k, v in self.arrays.items()},
                            self.obs_dim, self.act_dim, self.hidden)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in PARAM_ORDER])

    def set_flat(self, vec: np.ndarray) -> None:
        i = 0
        for k in PARAM_ORDER:
            a = self.arrays[k]
            a[...] = np.asarray(vec[i:i + a.size]).reshape(a.shape)
            i += a.size

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def layers(self, net: str):
        return [(self.arrays[f"{net}_W{k}"], self.arrays[f"{net}_b{k}"]) for k in range(3)]

    def clamp_log_std(self) -> None:
        np.clip(self.arrays["log_std"], LOG_STD_MIN, LOG_STD_MAX, out=self.arrays["log_std"])

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays.values())


# alias for readability at call sites that accumulate gradients
GradientBuffer = PolicyParams


def init_params(obs_dim: int, rng: np.random.Generator, action_bias=None,
                log_std: float = LOG_STD_INIT, hidden=HIDDEN) -> PolicyParams:
    """Scaled-normal init; the action head starts near ``action_bias``."""
    arrays = {}
    for name, shape in param_shapes(obs_dim, ACT_DIM, hidden).items():
        if name.startswith(("actor_W", "critic_W")):
            gain = 1.0
            if name == "actor_W2":
                gain = 0.01
            arrays[name] = rng.normal(0.0, gain / math.sqrt(shape[1]), size=shape)
        else:
            arrays[name] = np.zeros(shape)
    arrays["log_std"][:] = log_std
    if action_bias is not None:
        arrays["actor_b2"][:] = action_bias
    return PolicyParams(arrays, obs_dim, ACT_DIM, tuple(hidden))


def _check_obs(params: PolicyParams, obs) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape[-1] != params.obs_dim:
        raise ValueError(f"observation has dim {obs.shape[-1]}, policy expects {params.obs_dim}")
    return obs


def _mlp(layers, x):
    cache = [x]
    h = x
    for k, (W, b) in enumerate(layers):
        h = h @ W.T + b
        if k < 2:
            h = np.tanh(h)
        cache.append(h)
    return h, cache


def _mlp_backward(layers, cache, grad_out, grads: PolicyParams, net: str):
    g = grad_out
    for k in (2, 1, 0):
        W, _ = layers[k]
        x_in = cache[k]
        grads.arrays[f"{net}_W{k}"] += g.T @ x_in
        grads.arrays[f"{net}_b{k}"] += g.sum(axis=0)
        if k > 0:
            g = (g @ W) * (1.0 - cache[k] ** 2)


def actor_forward(params: PolicyParams, obs) -> np.ndarray:
    obs = _check_obs(params, obs)
    mean, _ = _mlp(params.layers("actor"), np.atleast_2d(obs))
    return mean if obs.ndim > 1 else mean[0]


def critic_forward(params: PolicyParams, obs) -> np.ndarray:
    obs = _check_obs(params, obs)
    value, _ = _mlp(params.layers("critic"), np.atleast_2d(obs))
    return value[:, 0] if obs.ndim > 1 else value[0, 0]


def gaussian_log_prob(mean, log_std, action) -> np.ndarray:
    """Diagonal Gaussian log density, summed over the last axis."""
    z = (np.asarray(action) - mean) * np.exp(-log_std)
    k = np.shape(log_std)[-1]
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * k * math.log(2 * math.pi)


def gaussian_entropy(log_std) -> float:
    k = len(log_std)
    return float(np.sum(log_std) + 0.5 * k * math.log(2 * math.pi * math.e))


def sample_action(params: PolicyParams, obs, rng: np.random.Generator):
    """Draw ``mean + exp(log_std) * xi``; returns (action, log_prob).

    Works on a single observation or a batch.
    """
    mean = actor_forward(params, obs)
    log_std = params["log_std"]
    xi = rng.standard_normal(mean.shape)
    action = mean + np.exp(log_std) * xi
    return action, gaussian_log_prob(mean, log_std, action)


def backward(params: PolicyParams, obs, grad_mean=None, grad_value=None,
             grad_log_std=None) -> GradientBuffer:
    """Reverse-mode gradients of actor/critic outputs composed with upstream grads.

    ``grad_mean`` is (N, act_dim), ``grad_value`` is (N,), ``grad_log_std`` is
    (act_dim,); any may be None (treated as zero). Batch contributions are
    summed in row order.
    """
    obs = np.atleast_2d(_check_obs(params, obs))
    n = obs.shape[0]
    grads = params.zeros_like()
    if grad_mean is not None:
        grad_mean = np.asarray(grad_mean, dtype=np.float64).reshape(n, params.act_dim)
        layers = params.layers("actor")
        _, cache = _mlp(layers, obs)
        _mlp_backward(layers, cache, grad_mean, grads, "actor")
    if grad_value is not None:
        grad_value = np.asarray(grad_value, dtype=np.float64).reshape(n, 1)
        layers = params.layers("critic")
        _, cache = _mlp(layers, obs)
        _mlp_backward(layers, cache, grad_value, grads, "critic")
    if grad_log_std is not None:
        grads.arrays["log_std"] += np.asarray(grad_log_std, dtype=np.float64).reshape(params.act_dim)
    return grads


# ---------------------------------------------------------------------------
# checkpoint files


def _write_flat(path, header: str, values) -> None:
    lines = [header] + [repr(float(x)) for x in values]
    Path(path).write_text("\n".join(lines) + "\n")


def _read_flat(path):
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise CheckpointError(f"{path}: empty checkpoint")
    values = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            values.append(float(line))
        except ValueError:
            raise CheckpointError(f"{path}:{lineno}: not a float: {line!r}") from None
    return lines[0], np.array(values)


def _parse_header(header: str, magic: str) -> dict[str, str]:
    if not header.startswith(magic):
        raise CheckpointError(f"bad header {header!r}, expected {magic!r}")
    fields = {}
    for tok in header[len(magic):].split():
        key, _, val = tok.partition("=")
        fields[key] = val
    return fields


def save_params(params: PolicyParams, path) -> None:
    h1, h2 = params.hidden
    header = f"{_HEADER} obs_dim={params.obs_dim} act_dim={params.act_dim} hidden={h1},{h2}"
    _write_flat(path, header, params.flat())


def load_params(path) -> PolicyParams:
    header, values = _read_flat(path)
    f = _parse_header(header, _HEADER)
    try:
        obs_dim = int(f["obs_dim"])
        act_dim = int(f["act_dim"])
        hidden = tuple(int(h) for h in f["hidden"].split(","))
    except (KeyError, ValueError):
        raise CheckpointError(f"{path}: malformed header {header!r}") from None
    shapes = param_shapes(obs_dim, act_dim, hidden)
    expected = sum(int(np.prod(s)) for s in shapes.values())
    if values.size != expected:
        raise CheckpointError(f"{path}: expected {expected} parameters, found {values.size}")
    params = PolicyParams({k: np.zeros(s) for k, s in shapes.items()}, obs_dim, act_dim, hidden)
    params.set_flat(values)
    return params
