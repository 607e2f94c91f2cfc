"""Causal guidance injection: the guided noise predictor, the sampler
hook, the path-KL accumulator behind the performance-difference bound,
and the explicit-Euler step-size stability machinery.

Time convention for the SDE view: one unit of process time per diffusion
schedule traversal, g(t)^2 = beta(t) with beta linearly interpolated over
the schedule, and each discrete sampler step treated as dt with
g^2 dt = beta_k.
"""

from dataclasses import dataclass, field

import numpy as np

from .diffusion import NoiseNet, score_from_noise
from .dynamics import do_intervention_joint_grad

__all__ = [
    "GuidanceConfig",
    "LipschitzBundle",
    "KlAccumulator",
    "guided_noise",
    "GuidanceHook",
    "make_guidance_hook",
    "kl_path_integral",
    "stability_max_step",
    "estimate_lipschitz",
    "euler_maruyama_guided",
]


@dataclass
class GuidanceConfig:
    lam: float | np.ndarray = 1.0   # per-step guidance scale (scalar or per-k array)
    gamma_t: float = 1.0            # state-guidance coefficient
    beta_guid_t: float = 1.0        # reward-guidance coefficient
    r_star: float = 0.0             # optimal-reward target
    use_r_star: bool = True         # condition on r_star instead of observed r

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=float)
        if np.any(lam < 0) or not np.all(np.isfinite(lam)):
            raise ValueError("lambda must be finite and >= 0")
        for c in (self.gamma_t, self.beta_guid_t, self.r_star):
            if not np.isfinite(c):
                raise ValueError("guidance coefficients must be finite")

    def lam_at(self, k):
        lam = np.asarray(self.lam, dtype=float)
        if lam.ndim == 0:
            return float(lam)
        return float(lam[k - 1])


@dataclass
class LipschitzBundle:
    l_f: float
    l_s: float
    l_phi: float
    l_omega: float
    delta: float = 0.5
    g2_max: float = 2e-2            # max of g(t)^2 = beta(t)
    g2_fn: object = None            # optional callable t -> g(t)^2

    def __post_init__(self):
        for c in (self.l_f, self.l_s, self.l_phi, self.l_omega):
            if c < 0:
                raise ValueError("Lipschitz constants must be >= 0")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0,1)")

    def g2_at(self, t):
        if self.g2_fn is not None:
            return float(self.g2_fn(t))
        return self.g2_max


class KlAccumulator:
    """Running Girsanov-form path integral of the squared drift correction.

    Accumulates ||correction / g||^2 dt per call; monotone non-decreasing
    and exactly zero on unguided runs.
    """

    def __init__(self):
        self.total = 0.0
        self.records = []

    def add(self, correction, g_t, dt):
        contrib = kl_step_value(correction, g_t, dt)
        self.total += contrib
        self.records.append(contrib)
        return self

    def reset(self):
        self.total = 0.0
        self.records = []


def kl_step_value(correction, g_t, dt):
    if g_t <= 0 or dt <= 0:
        raise ValueError("g_t and dt must be > 0")
    c = np.asarray(correction, dtype=float)
    sq = float(np.sum(c * c, axis=-1).mean()) if c.ndim > 1 \
        else float(c @ c)
    return sq / (g_t * g_t) * dt


def kl_path_integral(acc, correction, g_t, dt):
    """Add one discretized term of the path-KL integral to ``acc``."""
    return acc.add(correction, g_t, dt)


def guided_noise(eps_raw, causal_grad, lam_k, abar_k):
    """eps_cg = eps_raw - lam_k sqrt(1-abar_k) causal_grad.

    In score space this is exactly base score + lam_k * causal_grad.
    """
    if not 0 < abar_k < 1:
        raise ValueError("abar_k must lie in (0,1)")
    return np.asarray(eps_raw, dtype=float) - \
        lam_k * np.sqrt(1.0 - abar_k) * np.asarray(causal_grad, dtype=float)


class GuidanceHook:
    """Sampler hook computing the epsilon-space guidance correction.

    At diffusion step k with candidate actions a^k the hook evaluates the
    interventional joint gradient at (s_t, a^k) against either the
    recorded next state (replay) or the model-predicted mean (online
    acting, where the transition term then vanishes at its own mean), and
    returns -lam_k sqrt(1-abar_k) * gradient.  Every call also feeds the
    KL accumulator.
    """

    def __init__(self, dyn, cfg, schedule, s_t, s_next=None, r_value=None,
                 kl_acc=None):
        self.dyn = dyn
        self.cfg = cfg
        self.schedule = schedule
        self.s_t = np.atleast_2d(np.asarray(s_t, dtype=float))
        self.s_next = None if s_next is None else \
            np.atleast_2d(np.asarray(s_next, dtype=float))
        if r_value is None:
            r_value = cfg.r_star if cfg.use_r_star else dyn.r_star
        self.r_value = r_value
        self.kl_acc = kl_acc

    def joint_grad(self, a):
        """Interventional gradient rows for a batch of candidate actions."""
        a2 = np.atleast_2d(np.asarray(a, dtype=float))
        batch = a2.shape[0]
        s2 = self.s_t if self.s_t.shape[0] == batch else \
            np.broadcast_to(self.s_t, (batch, self.s_t.shape[1]))
        dyn, cfg = self.dyn, self.cfg
        if dyn.kind == "linear":
            mean_next = s2 @ dyn.a_s + a2 @ dyn.a_a
            s_next = mean_next if self.s_next is None else (
                self.s_next if self.s_next.shape[0] == batch
                else np.broadcast_to(self.s_next, mean_next.shape))
            grad = np.zeros_like(a2)
            if cfg.gamma_t != 0.0:
                grad += cfg.gamma_t * (s_next - mean_next) @ dyn._prec_s @ dyn.a_a.T
            if cfg.beta_guid_t != 0.0:
                if isinstance(self.r_value, np.ndarray):
                    r_val = self.r_value
                else:
                    r_val = np.full(batch, self.r_value)
                resid = r_val - (s_next @ dyn.b_s + a2 @ dyn.b_a)
                grad += cfg.beta_guid_t * resid[:, None] * dyn.b_a[None, :] / dyn.sigma_r
            return grad
        grad = np.zeros_like(a2)
        for i in range(batch):
            if self.s_next is None:
                s_next_i = dyn.transition_mean(s2[i], a2[i])
            else:
                s_next_i = self.s_next[i if self.s_next.shape[0] == batch else 0]
            r_i = self.r_value[i] if isinstance(self.r_value, np.ndarray) \
                else self.r_value
            grad[i] = do_intervention_joint_grad(
                dyn, s2[i], a2[i], s_next_i, r_i,
                cfg.gamma_t, cfg.beta_guid_t)
        return grad

    def grad_jacobian(self):
        """d(joint_grad)/da, a constant (d, d) matrix for the linear kind.

        Used to propagate actor gradients exactly through the guided DDIM
        chain.  None for mlp dynamics (the correction is then treated as
        locally constant in the chain rule).
        """
        dyn, cfg = self.dyn, self.cfg
        if dyn.kind != "linear":
            return None
        jac = np.zeros((dyn.d, dyn.d))
        if self.s_next is None:
            # predicted-mean next state: the transition residual is
            # identically zero, and the reward residual sees a both
            # directly and through the predicted next state
            if cfg.beta_guid_t != 0.0:
                eff = dyn.a_a @ dyn.b_s + dyn.b_a
                jac += -cfg.beta_guid_t / dyn.sigma_r * np.outer(dyn.b_a, eff)
        else:
            if cfg.gamma_t != 0.0:
                jac += -cfg.gamma_t * dyn.a_a @ dyn._prec_s @ dyn.a_a.T
            if cfg.beta_guid_t != 0.0:
                jac += -cfg.beta_guid_t / dyn.sigma_r * np.outer(dyn.b_a, dyn.b_a)
        return jac

    def __call__(self, a, k):
        lam_k = self.cfg.lam_at(k)
        abar_k = self.schedule.abar_at(k)
        grad = self.joint_grad(a)
        if self.kl_acc is not None:
            beta_k = self.schedule.betas[k - 1]
            kl_path_integral(self.kl_acc, beta_k * lam_k * grad,
                             np.sqrt(beta_k), 1.0)
        if lam_k == 0.0:
            return np.zeros_like(np.atleast_2d(a)) if np.asarray(a).ndim > 1 \
                else np.zeros_like(np.asarray(a, dtype=float))
        corr = -lam_k * np.sqrt(1.0 - abar_k) * grad
        return corr if np.asarray(a).ndim > 1 else corr[0]

    def eps_jacobian(self, k):
        """d(correction)/da at step k (linear kind), else None."""
        gj = self.grad_jacobian()
        if gj is None:
            return None
        lam_k = self.cfg.lam_at(k)
        abar_k = self.schedule.abar_at(k)
        return -lam_k * np.sqrt(1.0 - abar_k) * gj


def make_guidance_hook(dyn, cfg, schedule, s_t, s_next=None, r_value=None,
                       kl_acc=None):
    """Build a sampler hook closing over immutable dyn/cfg snapshots."""
    return GuidanceHook(dyn, cfg, schedule, s_t, s_next=s_next,
                        r_value=r_value, kl_acc=kl_acc)


def stability_max_step(bundle, gamma_t, beta_guid_t, t=1.0, cap=1e6):
    """Sufficient explicit-Euler step bound
    delta / (L_f + g(t)^2 L_s + |gamma_t| L_phi + |beta_guid_t| L_omega).

    A zero denominator returns (cap, True); otherwise (dt_max, False).
    """
    denom = (bundle.l_f + bundle.g2_at(t) * bundle.l_s
             + abs(gamma_t) * bundle.l_phi + abs(beta_guid_t) * bundle.l_omega)
    if denom <= 0:
        return cap, True
    return bundle.delta / denom, False


def _spectral_norm(m):
    return float(np.linalg.norm(m, 2))


def estimate_lipschitz(dyn, net, schedule, probes=200, rng=None, delta=0.5):
    """Lipschitz constants of the guided drift's ingredients.

    Linear dynamics give exact spectral-norm constants; MLP models are
    probed empirically (a lower estimate by construction).  The score
    constant L_s is always probed through the noise net.
    """
    if probes < 100:
        raise ValueError("need at least 100 probes")
    rng = np.random.default_rng(rng)
    beta_max = float(schedule.betas.max())
    l_f = 0.5 * beta_max

    d = dyn.d
    if dyn.kind == "linear":
        l_phi = _spectral_norm(dyn.a_a @ dyn._prec_s @ dyn.a_a.T)
        l_omega = float(dyn.b_a @ dyn.b_a) / dyn.sigma_r
    else:
        l_phi = l_omega = 0.0
        s0 = rng.standard_normal(dyn.n)
        from .dynamics import transition_logpdf_grad, reward_logpdf_grad
        s_ref = rng.standard_normal(dyn.n)
        for _ in range(probes):
            a1 = rng.uniform(-1, 1, size=d)
            a2 = a1 + 1e-3 * rng.standard_normal(d)
            _, g1 = transition_logpdf_grad(dyn, s0, a1, s_ref)
            _, g2 = transition_logpdf_grad(dyn, s0, a2, s_ref)
            l_phi = max(l_phi, np.linalg.norm(g1 - g2) / np.linalg.norm(a1 - a2))
            _, g1 = reward_logpdf_grad(dyn, s_ref, a1, dyn.r_star)
            _, g2 = reward_logpdf_grad(dyn, s_ref, a2, dyn.r_star)
            l_omega = max(l_omega, np.linalg.norm(g1 - g2) / np.linalg.norm(a1 - a2))

    l_s = 0.0
    if net is not None:
        s_probe = rng.standard_normal(dyn.n)
        for _ in range(probes):
            k = int(rng.integers(1, schedule.k_steps + 1))
            abar_k = schedule.abar_at(k)
            a1 = rng.standard_normal(d)
            a2 = a1 + 1e-3 * rng.standard_normal(d)
            e1 = net.forward(a1, s_probe, k) if isinstance(net, NoiseNet) \
                else net(a1[None], s_probe[None], k)[0]
            e2 = net.forward(a2, s_probe, k) if isinstance(net, NoiseNet) \
                else net(a2[None], s_probe[None], k)[0]
            sc1 = score_from_noise(e1, abar_k)
            sc2 = score_from_noise(e2, abar_k)
            l_s = max(l_s, np.linalg.norm(sc1 - sc2) / np.linalg.norm(a1 - a2))

    beta_start = float(schedule.betas.min())

    def g2_fn(t):
        return beta_start + (beta_max - beta_start) * min(max(t, 0.0), 1.0)

    return LipschitzBundle(l_f=l_f, l_s=l_s, l_phi=l_phi, l_omega=l_omega,
                           delta=delta, g2_max=beta_max, g2_fn=g2_fn)


def euler_maruyama_guided(dyn, net, schedule, cfg, s, dt, steps, rng,
                          s_next=None, score_fn=None, a0=None):
    """Explicit Euler integration of the guided reverse VP-SDE.

    Integrated in the denoising direction: the drift is
    -f(a, t) + g(t)^2 * score + (gamma grad_phi + beta_guid grad_omega)
    with the VP ingredients f(a, t) = -0.5 beta(t) a, g(t) = sqrt(beta(t)),
    beta interpolated over [0, 1] process time and clamped beyond.
    Returns (trajectory, diverged); the flag is set once the norm exceeds
    1e6 or any entry goes non-finite (reported, never raised).
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    rng = np.random.default_rng(rng)
    s = np.asarray(s, dtype=float)
    beta_start = float(schedule.betas.min())
    beta_end = float(schedule.betas.max())
    hook = GuidanceHook(dyn, cfg, schedule, s, s_next=s_next)
    a = rng.standard_normal(dyn.d) if a0 is None else np.array(a0, dtype=float)
    traj = [a.copy()]
    diverged = False
    k_steps = schedule.k_steps
    for nstep in range(steps):
        t = min(nstep * dt, 1.0)
        beta_t = beta_start + (beta_end - beta_start) * t
        g = np.sqrt(beta_t)
        if score_fn is not None:
            score = score_fn(a, t)
        elif net is not None:
            k = int(np.clip(round(t * k_steps), 1, k_steps))
            eps = net.forward(a, s, k)
            score = score_from_noise(eps, min(schedule.abar_at(k), 1 - 1e-12))
        else:
            score = -a
        guid = hook.joint_grad(a[None])[0]  # carries the gamma/beta weights
        drift = 0.5 * beta_t * a + beta_t * score + guid
        a = a + drift * dt + g * np.sqrt(dt) * rng.standard_normal(dyn.d)
        if not np.all(np.isfinite(a)) or np.linalg.norm(a) > 1e6:
            diverged = True
            traj.append(a.copy())
            break
        traj.append(a.copy())
    return np.array(traj), diverged
