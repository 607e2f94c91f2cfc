"""Base diffusion policy: noise schedule, forward corruption, noise-net
training, and DDPM (stochastic) / DDIM (deterministic) reverse samplers.

Diffusion steps are indexed k = 1..K; schedule arrays use index k-1.
Samplers accept an optional guidance hook ``hook(a_k, k) -> correction``
returning an epsilon-space additive correction; a hook returning zeros is
bit-identical to no hook under the same seed, because hooks never touch
the random stream.
"""

from dataclasses import dataclass

import numpy as np

from .numerics import Mlp, AdamState

__all__ = [
    "DiffusionSchedule",
    "make_schedule",
    "NoiseNet",
    "forward_corrupt",
    "train_noise_net",
    "ddpm_sample",
    "ddim_step",
    "ddim_sample",
    "score_from_noise",
    "noise_from_score",
    "save_noise_net",
    "load_noise_net",
]

_ABAR_FLOOR = 1e-8


@dataclass
class DiffusionSchedule:
    betas: np.ndarray      # (K,) in (0,1)
    alphas: np.ndarray     # 1 - betas
    abar: np.ndarray       # cumulative products of alphas

    @property
    def k_steps(self):
        return len(self.betas)

    def abar_at(self, k):
        """abar_k with the k = 0 edge convention abar_0 = 1."""
        return 1.0 if k == 0 else float(self.abar[k - 1])


def make_schedule(k_steps, beta_start=1e-4, beta_end=2e-2):
    if k_steps < 1:
        raise ValueError("need K >= 1 diffusion steps")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("require 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, k_steps)
    alphas = 1.0 - betas
    return DiffusionSchedule(betas, alphas, np.cumprod(alphas))


class NoiseNet:
    """Noise predictor: an Mlp over (noisy action, state, k/K)."""

    def __init__(self, n_state, d_action, k_steps, hidden=(128, 128, 128),
                 rng=None):
        self.n_state = n_state
        self.d_action = d_action
        self.k_steps = k_steps
        self.mlp = Mlp([d_action + n_state + 1, *hidden, d_action], rng=rng)

    def _inputs(self, a, s, k):
        a = np.atleast_2d(a)
        s = np.atleast_2d(s)
        kcol = np.full((a.shape[0], 1), k / self.k_steps)
        return np.concatenate([a, s, kcol], axis=1)

    def forward(self, a, s, k):
        squeeze = np.asarray(a).ndim == 1
        out = self.mlp.forward(self._inputs(a, s, k))
        return out[0] if squeeze else out

    def forward_cache(self, a, s, k):
        return self.mlp.forward_cache(self._inputs(a, s, k))

    def backward(self, cache, cotangent):
        """Returns (param_grads, grad w.r.t. the action block only)."""
        grads, gx = self.mlp.backward(cache, cotangent)
        return grads, gx[..., :self.d_action]

    def copy(self):
        clone = NoiseNet.__new__(NoiseNet)
        clone.n_state = self.n_state
        clone.d_action = self.d_action
        clone.k_steps = self.k_steps
        clone.mlp = self.mlp.copy()
        return clone


def _eval_net(net, a, s, k):
    # verify-style callables stand in for a trained NoiseNet
    if callable(net) and not isinstance(net, NoiseNet):
        return net(a, s, k)
    return net.forward(a, s, k)


def forward_corrupt(schedule, a0, k, rng):
    """Closed-form corruption a^k = sqrt(abar_k) a0 + sqrt(1-abar_k) eps.

    Returns (a^k, eps) with the injected standard-normal noise, for use as
    the regression target.  k = 0 returns a0 with zero noise.
    """
    if not 0 <= k <= schedule.k_steps:
        raise ValueError(f"step {k} out of range 0..{schedule.k_steps}")
    a0 = np.asarray(a0, dtype=float)
    if k == 0:
        return a0.copy(), np.zeros_like(a0)
    abar_k = schedule.abar_at(k)
    eps = rng.standard_normal(a0.shape)
    return np.sqrt(abar_k) * a0 + np.sqrt(1.0 - abar_k) * eps, eps


def train_noise_net(net, dataset, schedule, opt, steps, rng, batch_size=64):
    """Minibatch noise-prediction training; returns the per-step losses."""
    if not dataset:
        raise ValueError("empty dataset")
    states = np.array([tr.s for tr in dataset])
    actions = np.array([tr.a for tr in dataset])
    losses = []
    for _ in range(steps):
        idx = rng.integers(len(dataset), size=batch_size)
        k = int(rng.integers(1, schedule.k_steps + 1))
        a0 = actions[idx]
        ak, eps = forward_corrupt(schedule, a0, k, rng)
        pred, cache = net.forward_cache(ak, states[idx], k)
        err = pred - eps
        loss = float((err ** 2).sum(axis=1).mean())
        grads, _ = net.backward(cache, (2.0 / batch_size) * err)
        opt.step(net.mlp.params(), grads)
        losses.append(loss)
    return losses


def noise_loss(net, dataset, schedule, rng, batch_size=256):
    """Monte Carlo estimate of the noise-prediction loss on a dataset."""
    states = np.array([tr.s for tr in dataset])
    actions = np.array([tr.a for tr in dataset])
    idx = rng.integers(len(dataset), size=batch_size)
    k = int(rng.integers(1, schedule.k_steps + 1))
    ak, eps = forward_corrupt(schedule, actions[idx], k, rng)
    pred = net.forward(ak, states[idx], k)
    return float(((pred - eps) ** 2).sum(axis=1).mean())


def ddpm_sample(net, schedule, s, rng, hook=None):
    """Stochastic reverse sampler.

    Starts at a^K ~ N(0, I) and applies K reverse steps with mean
    (1/sqrt(alpha_k)) (a^k - beta_k / sqrt(1-abar_k) eps_hat) and variance
    beta_k; the terminal step adds no noise.  ``s`` may be a single state
    or a batch of rows.
    """
    s = np.asarray(s, dtype=float)
    squeeze = s.ndim == 1
    s2 = s[None, :] if squeeze else s
    batch = s2.shape[0]
    d = _action_dim(net)
    a = rng.standard_normal((batch, d))
    for k in range(schedule.k_steps, 0, -1):
        beta_k = schedule.betas[k - 1]
        alpha_k = schedule.alphas[k - 1]
        abar_k = schedule.abar_at(k)
        eps_hat = _eval_net(net, a, s2, k)
        if hook is not None:
            eps_hat = eps_hat + hook(a, k)
        mean = (a - beta_k / np.sqrt(1.0 - abar_k) * eps_hat) / np.sqrt(alpha_k)
        if k > 1:
            a = mean + np.sqrt(beta_k) * rng.standard_normal((batch, d))
        else:
            a = mean
    return a[0] if squeeze else a


def ddim_step(net, schedule, ak, s, k, hook=None, eps_hat=None):
    """One deterministic reverse step.

    Returns (a0_hat, a^{k-1}) with
    a0_hat = (a^k - sqrt(1-abar_k) eps_hat) / sqrt(abar_k) and
    a^{k-1} = sqrt(abar_{k-1}) a0_hat + sqrt(1-abar_{k-1}) eps_hat.
    """
    if not 1 <= k <= schedule.k_steps:
        raise ValueError(f"step {k} out of range 1..{schedule.k_steps}")
    ak = np.asarray(ak, dtype=float)
    abar_k = max(schedule.abar_at(k), _ABAR_FLOOR)
    abar_prev = max(schedule.abar_at(k - 1), _ABAR_FLOOR)
    if eps_hat is None:
        eps_hat = _eval_net(net, ak, s, k)
        if hook is not None:
            eps_hat = eps_hat + hook(ak, k)
    a0_hat = (ak - np.sqrt(1.0 - abar_k) * eps_hat) / np.sqrt(abar_k)
    a_prev = np.sqrt(abar_prev) * a0_hat + np.sqrt(1.0 - abar_prev) * eps_hat
    return a0_hat, a_prev


def ddim_sample(net, schedule, s, rng, hook=None):
    """Full deterministic reverse chain from a^K ~ N(0, I)."""
    s = np.asarray(s, dtype=float)
    squeeze = s.ndim == 1
    s2 = s[None, :] if squeeze else s
    a = rng.standard_normal((s2.shape[0], _action_dim(net)))
    for k in range(schedule.k_steps, 0, -1):
        _, a = ddim_step(net, schedule, a, s2, k, hook=hook)
    return a[0] if squeeze else a


def _action_dim(net):
    if isinstance(net, NoiseNet):
        return net.d_action
    return net.d_action  # callables must expose d_action


def save_noise_net(net, path):
    """Flat text checkpoint; floats via repr for exact round-trips."""
    lines = [f"cgdp-noise-net-v1 {net.n_state} {net.d_action} {net.k_steps}"]
    lines.append(" ".join(str(w) for w in net.mlp.widths))
    for p in net.mlp.params():
        arr = np.atleast_2d(p)
        lines.append(f"param {arr.shape[0]} {arr.shape[1]}")
        for row in arr:
            lines.append(" ".join(repr(float(v)) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_noise_net(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    head = lines[0].split()
    if head[0] != "cgdp-noise-net-v1":
        raise ValueError(f"unrecognized checkpoint header {head[0]!r}")
    n_state, d_action, k_steps = map(int, head[1:4])
    widths = [int(w) for w in lines[1].split()]
    net = NoiseNet(n_state, d_action, k_steps, hidden=tuple(widths[1:-1]))
    params = []
    i = 2
    while i < len(lines):
        if not lines[i].startswith("param "):
            raise ValueError(f"expected a param block at line {i + 1}")
        rows, cols = map(int, lines[i].split()[1:])
        block = np.array([[float(v) for v in lines[i + 1 + j].split()]
                          for j in range(rows)])
        params.append(block)
        i += 1 + rows
    shaped = []
    for p, loaded in zip(net.mlp.params(), params):
        shaped.append(loaded.reshape(p.shape))
    net.mlp.set_params(shaped)
    return net


def score_from_noise(eps, abar_k):
    """score = -eps / sqrt(1 - abar_k)."""
    if not 0 < abar_k < 1:
        raise ValueError("abar_k must lie in (0,1)")
    return -np.asarray(eps, dtype=float) / np.sqrt(1.0 - abar_k)


def noise_from_score(score, abar_k):
    """Inverse of :func:`score_from_noise`."""
    if not 0 < abar_k < 1:
        raise ValueError("abar_k must lie in (0,1)")
    return -np.asarray(score, dtype=float) * np.sqrt(1.0 - abar_k)
