"""Masked Gaussian transition and reward models and the interventional
log-density gradients that make up the causal guidance signal.

Masking is per output coordinate: input i reaches output j of the
transition model only through the gate c_ss[i, j] (resp. c_as[i, j]), so
a zero gate makes the output provably independent of that input.  The
reward model is scalar and gated by the vectors u_sr, u_ar.
"""

from dataclasses import dataclass, field

import numpy as np

from .numerics import Mlp, AdamState
from .scm import CausalMasks

__all__ = [
    "CausalDynamics",
    "apply_masks",
    "apply_reward_masks",
    "fit_dynamics",
    "transition_logpdf_grad",
    "reward_logpdf_grad",
    "do_intervention_joint_grad",
    "save_dynamics",
    "load_dynamics",
]

_VAR_FLOOR = 1e-9


def apply_masks(masks, s, a):
    """Per-output Hadamard gating for the transition model.

    Returns (S, A) with S[i, j] = c_ss[i, j] * s[i] and
    A[i, j] = c_as[i, j] * a[i]: column j holds the gated inputs feeding
    output coordinate j.
    """
    s = np.asarray(s, dtype=float)
    a = np.asarray(a, dtype=float)
    if s.shape[0] != masks.c_ss.shape[0] or a.shape[0] != masks.c_as.shape[0]:
        raise ValueError("state/action dimension mismatch with masks")
    return masks.c_ss * s[:, None], masks.c_as * a[:, None]


def apply_reward_masks(masks, s_next, a):
    """Gated inputs of the scalar reward model."""
    return masks.u_sr * np.asarray(s_next, dtype=float), \
        masks.u_ar * np.asarray(a, dtype=float)


@dataclass
class CausalDynamics:
    """Fitted causal dynamical model (linear operators or per-output MLPs).

    For the linear kind the stored operators are already mask-gated, so
    masked-out coefficients are exactly zero.
    """

    masks: CausalMasks
    kind: str                      # "linear" | "mlp"
    sigma_s: np.ndarray            # (n, n) transition covariance, PD
    sigma_r: float                 # reward variance, > 0
    a_s: np.ndarray = None         # (n, n) linear kind
    a_a: np.ndarray = None         # (d, n)
    b_s: np.ndarray = None         # (n,)
    b_a: np.ndarray = None         # (d,)
    trans_nets: list = None        # mlp kind: one single-output Mlp per state coord
    reward_net: Mlp = None
    r_star: float = 0.0            # optimal-reward conditioning target
    _prec_s: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.sigma_s = np.asarray(self.sigma_s, dtype=float)
        if self.sigma_r <= 0:
            raise ValueError("sigma_r must be > 0")
        if np.any(np.linalg.eigvalsh(self.sigma_s) <= 0):
            raise ValueError("sigma_s must be positive definite")
        self._prec_s = np.linalg.inv(self.sigma_s)
        sign, logdet = np.linalg.slogdet(self.sigma_s)
        self._logdet_s = float(logdet)

    @property
    def n(self):
        return self.masks.c_ss.shape[0]

    @property
    def d(self):
        return self.masks.c_as.shape[0]

    # ---- means -----------------------------------------------------------

    def transition_mean(self, s, a):
        if self.kind == "linear":
            return s @ self.a_s + a @ self.a_a
        gated_s, gated_a = apply_masks(self.masks, s, a)
        out = np.empty(self.n)
        for j, net in enumerate(self.trans_nets):
            out[j] = net.forward(np.concatenate([gated_s[:, j], gated_a[:, j]]))[0]
        return out

    def transition_mean_batch(self, s, a):
        """Vectorized over rows of s (B, n) and a (B, d); linear kind only
        takes the fast path, the mlp kind loops per output net."""
        s = np.atleast_2d(s)
        a = np.atleast_2d(a)
        if self.kind == "linear":
            return s @ self.a_s + a @ self.a_a
        out = np.empty((s.shape[0], self.n))
        for j, net in enumerate(self.trans_nets):
            x = np.concatenate([s * self.masks.c_ss[:, j],
                                a * self.masks.c_as[:, j]], axis=1)
            out[:, j] = net.forward(x)[:, 0]
        return out

    def reward_mean(self, s_next, a):
        if self.kind == "linear":
            return float(s_next @ self.b_s + a @ self.b_a)
        gs, ga = apply_reward_masks(self.masks, s_next, a)
        return float(self.reward_net.forward(np.concatenate([gs, ga]))[0])

    def reward_mean_batch(self, s_next, a):
        s_next = np.atleast_2d(s_next)
        a = np.atleast_2d(a)
        if self.kind == "linear":
            return s_next @ self.b_s + a @ self.b_a
        x = np.concatenate([s_next * self.masks.u_sr,
                            a * self.masks.u_ar], axis=1)
        return self.reward_net.forward(x)[:, 0]


def _masked_ols(features, targets, gate, ridge=1e-6):
    """OLS restricted to gated features; returns dense coefficients with
    exact zeros where the gate is zero.  Falls back to a small ridge when
    the design is rank-deficient."""
    active = np.flatnonzero(gate != 0)
    coefs = np.zeros(features.shape[1])
    if active.size == 0:
        return coefs
    xg = features[:, active] * gate[active]
    gram = xg.T @ xg
    rhs = xg.T @ targets
    try:
        sol = np.linalg.solve(gram, rhs)
        if not np.all(np.isfinite(sol)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        sol = np.linalg.solve(gram + ridge * np.eye(active.size), rhs)
    coefs[active] = sol * gate[active]
    return coefs


def fit_dynamics(transitions, masks, kind="linear", rng=None,
                 mlp_hidden=(64,), mlp_steps=2000, mlp_lr=1e-3,
                 mlp_batch=128):
    """Fit the masked transition and reward models from transitions.

    linear: per-coordinate masked least squares with residual covariance
    estimates.  mlp: Adam on the mean-squared error with a diagonal
    covariance taken from the final residuals.
    """
    if not transitions:
        raise ValueError("fit_dynamics needs transitions")
    n = transitions[0].s.shape[0]
    d = transitions[0].a.shape[0]
    if kind == "linear" and len(transitions) < 10 * (n + d):
        raise ValueError(
            f"linear fit needs >= {10 * (n + d)} transitions, "
            f"got {len(transitions)}")
    s = np.array([tr.s for tr in transitions])
    a = np.array([tr.a for tr in transitions])
    s_next = np.array([tr.s_next for tr in transitions])
    r = np.array([tr.r for tr in transitions])
    r_star = float(r.max())

    if kind == "linear":
        a_s = np.zeros((n, n))
        a_a = np.zeros((d, n))
        feats = np.concatenate([s, a], axis=1)
        for j in range(n):
            gate = np.concatenate([masks.c_ss[:, j], masks.c_as[:, j]])
            coefs = _masked_ols(feats, s_next[:, j], gate)
            a_s[:, j] = coefs[:n]
            a_a[:, j] = coefs[n:]
        resid = s_next - (s @ a_s + a @ a_a)
        if n <= 8:
            sigma_s = resid.T @ resid / len(transitions)
        else:
            sigma_s = np.diag((resid ** 2).mean(axis=0))
        sigma_s = sigma_s + _VAR_FLOOR * np.eye(n)

        feats_r = np.concatenate([s_next, a], axis=1)
        gate_r = np.concatenate([masks.u_sr, masks.u_ar])
        coefs_r = _masked_ols(feats_r, r, gate_r)
        b_s, b_a = coefs_r[:n], coefs_r[n:]
        resid_r = r - (s_next @ b_s + a @ b_a)
        sigma_r = float((resid_r ** 2).mean()) + _VAR_FLOOR
        return CausalDynamics(masks=masks.copy(), kind="linear",
                              sigma_s=sigma_s, sigma_r=sigma_r,
                              a_s=a_s, a_a=a_a, b_s=b_s, b_a=b_a,
                              r_star=r_star)

    if kind != "mlp":
        raise ValueError(f"unknown dynamics kind {kind!r}")
    rng = np.random.default_rng(rng)
    widths = [n + d, *mlp_hidden, 1]
    trans_nets = [Mlp(widths, rng=rng) for _ in range(n)]
    reward_net = Mlp(widths, rng=rng)
    gated_s = s[:, :, None] * masks.c_ss[None, :, :]
    gated_a = a[:, :, None] * masks.c_as[None, :, :]
    opt_t = [AdamState(net.params(), lr=mlp_lr) for net in trans_nets]
    opt_r = AdamState(reward_net.params(), lr=mlp_lr)
    x_r = np.concatenate([s_next * masks.u_sr, a * masks.u_ar], axis=1)
    for _ in range(mlp_steps):
        idx = rng.integers(len(transitions), size=mlp_batch)
        for j, net in enumerate(trans_nets):
            x = np.concatenate([gated_s[idx, :, j], gated_a[idx, :, j]], axis=1)
            pred, cache = net.forward_cache(x)
            err = pred[:, 0] - s_next[idx, j]
            grads, _ = net.backward(cache, (2.0 / mlp_batch) * err[:, None])
            opt_t[j].step(net.params(), grads)
        pred, cache = reward_net.forward_cache(x_r[idx])
        err = pred[:, 0] - r[idx]
        grads, _ = reward_net.backward(cache, (2.0 / mlp_batch) * err[:, None])
        opt_r.step(reward_net.params(), grads)
    dyn = CausalDynamics(masks=masks.copy(), kind="mlp",
                         sigma_s=np.eye(n), sigma_r=1.0,
                         trans_nets=trans_nets, reward_net=reward_net,
                         r_star=r_star)
    resid = s_next - dyn.transition_mean_batch(s, a)
    dyn.sigma_s = np.diag((resid ** 2).mean(axis=0) + _VAR_FLOOR)
    dyn._prec_s = np.linalg.inv(dyn.sigma_s)
    dyn._logdet_s = float(np.linalg.slogdet(dyn.sigma_s)[1])
    resid_r = r - dyn.reward_mean_batch(s_next, a)
    dyn.sigma_r = float((resid_r ** 2).mean()) + _VAR_FLOOR
    return dyn


def _trans_action_jacobian(dyn, s, a):
    """d transition_mean / d a as a (d, n) matrix (mlp kind: exact
    backprop per output coordinate)."""
    if dyn.kind == "linear":
        return dyn.a_a
    jac = np.zeros((dyn.d, dyn.n))
    gated_s, gated_a = apply_masks(dyn.masks, s, a)
    for j, net in enumerate(dyn.trans_nets):
        x = np.concatenate([gated_s[:, j], gated_a[:, j]])
        _, cache = net.forward_cache(x)
        _, gx = net.backward(cache, np.ones(1))
        jac[:, j] = gx[dyn.n:] * dyn.masks.c_as[:, j]
    return jac


def _reward_action_grad_coeff(dyn, s_next, a):
    """d reward_mean / d a as a (d,) vector."""
    if dyn.kind == "linear":
        return dyn.b_a
    gs, ga = apply_reward_masks(dyn.masks, s_next, a)
    x = np.concatenate([gs, ga])
    _, cache = dyn.reward_net.forward_cache(x)
    _, gx = dyn.reward_net.backward(cache, np.ones(1))
    return gx[dyn.n:] * dyn.masks.u_ar


def transition_logpdf_grad(dyn, s, a, s_next):
    """log N(s_next; f(s, a), Sigma) and its exact gradient w.r.t. a."""
    s = np.asarray(s, dtype=float)
    a = np.asarray(a, dtype=float)
    s_next = np.asarray(s_next, dtype=float)
    mean = dyn.transition_mean(s, a)
    resid = s_next - mean
    prec_resid = dyn._prec_s @ resid
    logp = -0.5 * (float(resid @ prec_resid) + dyn._logdet_s
                   + dyn.n * np.log(2 * np.pi))
    grad = _trans_action_jacobian(dyn, s, a) @ prec_resid
    return logp, grad


def reward_logpdf_grad(dyn, s_next, a, r):
    """log N(r; g(s_next, a), sigma_r) and its exact gradient w.r.t. a.

    Pass r = r_star for optimal-reward conditioning.
    """
    s_next = np.asarray(s_next, dtype=float)
    a = np.asarray(a, dtype=float)
    mean = dyn.reward_mean(s_next, a)
    resid = r - mean
    logp = -0.5 * (resid * resid / dyn.sigma_r
                   + np.log(2 * np.pi * dyn.sigma_r))
    grad = _reward_action_grad_coeff(dyn, s_next, a) * (resid / dyn.sigma_r)
    return float(logp), grad


def do_intervention_joint_grad(dyn, s, a, s_next, r_target, gamma_t,
                               beta_guid_t):
    """gamma_t * grad_a log p(s_next | s, do(a))
    + beta_guid_t * grad_a log p(r_target | s_next, do(a)).

    The do-semantics hold by construction: a enters only through its
    structural-equation role in the two masked models.
    """
    if not (np.isfinite(gamma_t) and np.isfinite(beta_guid_t)):
        raise ValueError("guidance coefficients must be finite")
    grad = np.zeros(dyn.d)
    if gamma_t != 0.0:
        _, g = transition_logpdf_grad(dyn, s, a, s_next)
        grad += gamma_t * g
    if beta_guid_t != 0.0:
        _, g = reward_logpdf_grad(dyn, s_next, a, r_target)
        grad += beta_guid_t * g
    return grad


# ---- checkpoint serialization -------------------------------------------

_CKPT_VERSION = "cgdp-dynamics-v1"


def _dump_array(fh, name, arr):
    arr = np.asarray(arr, dtype=float)
    fh.write(f"{name} {' '.join(str(x) for x in arr.shape)}\n")
    fh.write(" ".join(repr(float(v)) for v in arr.ravel()) + "\n")


def _read_array(fh):
    header = fh.readline().split()
    shape = tuple(int(x) for x in header[1:])
    vals = np.array([float(x) for x in fh.readline().split()])
    return header[0], vals.reshape(shape)


def save_dynamics(dyn, path):
    if dyn.kind != "linear":
        raise ValueError("checkpointing is defined for the linear kind")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{_CKPT_VERSION} linear {dyn.n} {dyn.d} "
                 f"{repr(dyn.sigma_r)} {repr(dyn.r_star)}\n")
        for name in ("c_ss", "c_as", "u_sr", "u_ar"):
            _dump_array(fh, name, getattr(dyn.masks, name))
        for name in ("a_s", "a_a", "b_s", "b_a", "sigma_s"):
            _dump_array(fh, name, getattr(dyn, name))


def load_dynamics(path):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if header[0] != _CKPT_VERSION:
            raise ValueError(f"unrecognized checkpoint header {header[0]!r}")
        sigma_r = float(header[4])
        r_star = float(header[5])
        arrays = {}
        for _ in range(9):
            name, arr = _read_array(fh)
            arrays[name] = arr
    masks = CausalMasks(arrays["c_ss"], arrays["c_as"],
                        arrays["u_sr"], arrays["u_ar"])
    return CausalDynamics(masks=masks, kind="linear",
                          sigma_s=arrays["sigma_s"], sigma_r=sigma_r,
                          a_s=arrays["a_s"], a_a=arrays["a_a"],
                          b_s=arrays["b_s"], b_a=arrays["b_a"],
                          r_star=r_star)
