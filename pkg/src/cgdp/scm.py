"""Ground-truth structural causal models and synthetic dataset generation.

Linear operators are stored edge-oriented: entry [i, j] is the weight of
input coordinate i on output coordinate j, so the next state is
``s @ F_s + a @ F_a`` and the reward ``s_next @ B_s + a @ B_a``.  This
matches the mask convention where C[i, j] gates input i into output j.
"""

from dataclasses import dataclass, field

import numpy as np

from .numerics import mat_expm

__all__ = [
    "CausalMasks",
    "GroundTruthScm",
    "Transition",
    "Dag",
    "random_scm",
    "scm_step",
    "generate_dataset",
    "exact_masks",
    "stacked_adjacency",
    "acyclicity_value",
    "save_dataset",
    "load_dataset",
]


@dataclass
class CausalMasks:
    """The four [0,1]-valued gates over structural dependencies."""

    c_ss: np.ndarray  # (n, n) state -> next state
    c_as: np.ndarray  # (d, n) action -> next state
    u_sr: np.ndarray  # (n,)  next state -> reward
    u_ar: np.ndarray  # (d,)  action -> reward

    def __post_init__(self):
        for name in ("c_ss", "c_as", "u_sr", "u_ar"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if np.any(arr < 0) or np.any(arr > 1):
                raise ValueError(f"mask {name} has entries outside [0,1]")
            setattr(self, name, arr)

    def copy(self):
        return CausalMasks(self.c_ss.copy(), self.c_as.copy(),
                           self.u_sr.copy(), self.u_ar.copy())


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool


@dataclass
class Dag:
    """Weighted adjacency with [i, j] = weight of edge i -> j."""

    adjacency: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.adjacency, dtype=float)
        if np.any(np.diag(w) != 0):
            raise ValueError("Dag adjacency must have a zero diagonal")
        h = acyclicity_value(w)
        if abs(h) > 1e-8:
            raise ValueError(f"adjacency is cyclic: h(W) = {h:.3e}")
        self.adjacency = w

    @property
    def n_nodes(self):
        return self.adjacency.shape[0]


def acyclicity_value(w):
    """NOTEARS acyclicity function h(W) = tr(e^{W o W}) - d."""
    w = np.asarray(w, dtype=float)
    return float(np.trace(mat_expm(w * w)) - w.shape[0])


@dataclass
class GroundTruthScm:
    """Linear-Gaussian SCM over (s_t, a_t, s_{t+1}, r_t)."""

    f_s: np.ndarray       # (n, n)
    f_a: np.ndarray       # (d, n)
    b_s: np.ndarray       # (n,)
    b_a: np.ndarray       # (d,)
    sigma_s: np.ndarray   # (n, n) transition noise covariance (PSD)
    sigma_r: float        # reward noise variance (>= 0)
    _chol_s: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.f_s = np.asarray(self.f_s, dtype=float)
        self.f_a = np.asarray(self.f_a, dtype=float)
        self.b_s = np.asarray(self.b_s, dtype=float)
        self.b_a = np.asarray(self.b_a, dtype=float)
        self.sigma_s = np.asarray(self.sigma_s, dtype=float)
        n = self.f_s.shape[0]
        if self.f_s.shape != (n, n) or self.f_a.shape[1] != n:
            raise ValueError("inconsistent operator shapes")
        if not np.allclose(self.sigma_s, self.sigma_s.T):
            raise ValueError("sigma_s must be symmetric")
        if self.sigma_r < 0:
            raise ValueError("sigma_r must be >= 0")
        # zero covariance is allowed for noiseless systems
        if np.any(np.linalg.eigvalsh(self.sigma_s) < -1e-12):
            raise ValueError("sigma_s must be positive semi-definite")
        if np.all(self.sigma_s == 0):
            self._chol_s = np.zeros_like(self.sigma_s)
        else:
            self._chol_s = np.linalg.cholesky(
                self.sigma_s + 1e-15 * np.eye(n))

    @property
    def n(self):
        return self.f_s.shape[0]

    @property
    def d(self):
        return self.f_a.shape[0]


def random_scm(n, d, n_causal_actions=2, rng=None, noise_scale=1.0,
               reward_noise=0.5):
    """Sparse random SCM where only a subset of action coordinates is causal.

    The transition operator is scaled to spectral radius < 1 so rollouts
    stay bounded.  Nonzero coefficients are kept well away from the
    discovery threshold, and the next-state coordinates the actions drive
    are disjoint from the ones the reward reads, so the ground-truth
    pattern is identifiable from exploratory data.
    """
    rng = np.random.default_rng(rng)
    signs = rng.choice([-1.0, 1.0], size=(n, n))
    f_s = rng.uniform(0.7, 1.0, size=(n, n)) * signs
    # sparsify state-to-state coupling
    f_s *= rng.random((n, n)) < 0.2
    np.fill_diagonal(f_s, rng.uniform(0.5, 0.65, size=n))
    radius = np.max(np.abs(np.linalg.eigvals(f_s)))
    if radius > 0.85:
        f_s *= 0.85 / radius
    # scaling can push weak couplings near the discovery threshold; drop
    # them so the ground-truth pattern stays identifiable
    f_s[np.abs(f_s) < 0.45] = 0.0
    radius = np.max(np.abs(np.linalg.eigvals(f_s)))
    if radius > 0.9:
        f_s *= 0.9 / radius
    f_a = np.zeros((d, n))
    b_a = np.zeros(d)
    causal = rng.choice(d, size=min(n_causal_actions, d), replace=False)
    perm = rng.permutation(n)
    k_targets = max(1, n // 3)
    used = set()
    for idx, j in enumerate(causal):
        targets = perm[idx * k_targets:(idx + 1) * k_targets]
        if targets.size == 0:
            targets = perm[-1:]
        f_a[j, targets] = rng.uniform(0.8, 1.2, size=targets.size) * \
            rng.choice([-1, 1], size=targets.size)
        b_a[j] = rng.uniform(0.8, 1.2)
        used.update(int(t) for t in targets)
    rest = [i for i in range(n) if i not in used]
    b_s = np.zeros(n)
    for i in rest:
        if rng.random() < 0.7:
            b_s[i] = rng.uniform(0.7, 1.0)
    if not np.any(b_s):
        b_s[rest[0] if rest else 0] = 0.8
    sigma_s = noise_scale ** 2 * np.eye(n)
    return GroundTruthScm(f_s, f_a, b_s, b_a, sigma_s, reward_noise ** 2)


def scm_step(scm, s, a, rng):
    """One transition draw: returns (s_next, r).

    Single source of truth for the generative recursion; the LinSCM
    environment and the offline dataset generator both call this, so the
    two produce identical draws from identical generator states.
    """
    noise_s = scm._chol_s @ rng.standard_normal(scm.n)
    s_next = s @ scm.f_s + a @ scm.f_a + noise_s
    noise_r = np.sqrt(scm.sigma_r) * rng.standard_normal()
    r = float(s_next @ scm.b_s + a @ scm.b_a + noise_r)
    return s_next, r


def generate_dataset(scm, episodes, horizon, behavior_noise, rng):
    """Roll out a random linear-Gaussian behavior policy through the SCM.

    The behavior policy is a_t = clip(s_t K + behavior_noise * z, [-1, 1])
    for a fixed random gain K drawn once per call, matching the action
    clamp of the interactive environment.
    """
    if episodes < 0 or horizon < 1:
        raise ValueError("episodes must be >= 0 and horizon >= 1")
    if behavior_noise < 0:
        raise ValueError("behavior_noise must be >= 0")
    rng = np.random.default_rng(rng)
    gain = rng.normal(0.0, 0.3, size=(scm.n, scm.d))
    transitions = []
    for _ in range(episodes):
        s = rng.standard_normal(scm.n)
        for t in range(horizon):
            a = s @ gain + behavior_noise * rng.standard_normal(scm.d)
            a = np.clip(a, -1.0, 1.0)
            s_next, r = scm_step(scm, s, a, rng)
            done = t == horizon - 1
            transitions.append(Transition(s.copy(), a, r, s_next.copy(), done))
            s = s_next
    return transitions


def exact_masks(scm):
    """Ground-truth {0,1} masks read off the operators' sparsity pattern."""
    return CausalMasks(
        (scm.f_s != 0).astype(float),
        (scm.f_a != 0).astype(float),
        (scm.b_s != 0).astype(float),
        (scm.b_a != 0).astype(float),
    )


def stacked_adjacency(scm):
    """DAG over the stacked variables (s_t, a_t, s_{t+1}, r_t).

    Node order: s_t (n), a_t (d), s_{t+1} (n), r_t (1).  Edges run only
    forward in time, so the graph is acyclic by construction.
    """
    n, d = scm.n, scm.d
    size = 2 * n + d + 1
    w = np.zeros((size, size))
    w[0:n, n + d:n + d + n] = scm.f_s
    w[n:n + d, n + d:n + d + n] = scm.f_a
    w[n + d:n + d + n, -1] = scm.b_s
    w[n:n + d, -1] = scm.b_a
    return Dag(w)


def save_dataset(transitions, path, n=None, d=None):
    """Write the text dataset format: header `n d count`, one line per
    transition with repr-exact decimals (bit-exact round-trip)."""
    if transitions:
        n = transitions[0].s.shape[0]
        d = transitions[0].a.shape[0]
    if n is None or d is None:
        raise ValueError("empty dataset needs explicit n and d")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{n} {d} {len(transitions)}\n")
        for tr in transitions:
            fields = (list(tr.s) + list(tr.a) + [tr.r] + list(tr.s_next)
                      + [1.0 if tr.done else 0.0])
            fh.write(" ".join(repr(float(x)) for x in fields) + "\n")


def load_dataset(path):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        n, d, count = int(header[0]), int(header[1]), int(header[2])
        transitions = []
        for _ in range(count):
            vals = [float(x) for x in fh.readline().split()]
            s = np.array(vals[:n])
            a = np.array(vals[n:n + d])
            r = vals[n + d]
            s_next = np.array(vals[n + d + 1:2 * n + d + 1])
            done = vals[2 * n + d + 1] != 0.0
            transitions.append(Transition(s, a, r, s_next, done))
    return transitions, n, d
