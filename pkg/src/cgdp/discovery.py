"""Causal mask learning: NOTEARS continuous optimization with an augmented
Lagrangian, an exhaustive small-graph oracle for validation, mask slicing
for the stacked transition variables, and the noise-corruption variant
used in ablations.
"""

from dataclasses import dataclass
from itertools import combinations, product

import numpy as np

from .numerics import mat_expm
from .scm import CausalMasks, Dag

__all__ = [
    "NotearsConfig",
    "DiscoveryResult",
    "acyclicity",
    "notears_fit",
    "exhaustive_dag_oracle",
    "discover_masks",
    "corrupt_masks",
]


@dataclass
class NotearsConfig:
    l1: float = 0.1
    rho: float = 1.0
    rho_growth: float = 10.0
    alpha: float = 0.0
    tol: float = 1e-8
    max_outer: int = 30
    max_inner: int = 300
    tau: float = 0.3

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tolerance must be > 0")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0,1)")
        if self.rho <= 0 or self.rho_growth <= 1 or self.l1 < 0:
            raise ValueError("invalid penalty configuration")


@dataclass
class DiscoveryResult:
    w: np.ndarray
    masks: CausalMasks | None
    h_value: float
    objective: float
    converged: bool = True


def acyclicity(w, with_grad=False):
    """h(W) = tr(e^{W o W}) - d, optionally with its gradient.

    The gradient is (e^{W o W})^T o 2W.
    """
    w = np.asarray(w, dtype=float)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError("acyclicity requires a square matrix")
    e = mat_expm(w * w)
    h = float(np.trace(e) - w.shape[0])
    if with_grad:
        return h, e.T * (2.0 * w)
    return h


def _soft_threshold(w, thresh):
    return np.sign(w) * np.maximum(np.abs(w) - thresh, 0.0)


def notears_fit(data, cfg, forbidden=None, w0=None):
    """Linear-SEM NOTEARS: minimize the least-squares score subject to
    acyclicity via augmented Lagrangian dual ascent.

    The smooth part is handled by proximal gradient descent with
    backtracking; the l1 term by soft-thresholding.  ``forbidden`` is a
    boolean matrix of entries hard-zeroed throughout (diagonal always is).
    Returns a :class:`DiscoveryResult` whose ``masks`` field is None (use
    :func:`discover_masks` for the RL variable layout).
    """
    x = np.asarray(data, dtype=float)
    n_samples, dim = x.shape
    if n_samples < 30:
        raise ValueError("notears_fit needs at least 30 samples")
    x = x - x.mean(axis=0)
    # centering only: rescaling the columns would erase the noise-scale
    # ordering the least-squares score needs to orient edges
    fixed_zero = np.eye(dim, dtype=bool)
    if forbidden is not None:
        fixed_zero = fixed_zero | np.asarray(forbidden, dtype=bool)

    gram = x.T @ x / n_samples

    def smooth_and_grad(w, rho, alpha):
        resid_op = np.eye(dim) - w
        # 0.5/n ||X - XW||_F^2 expressed through the Gram matrix
        loss = 0.5 * float(np.sum(resid_op * (gram @ resid_op)))
        g_loss = -gram @ resid_op
        with np.errstate(over="ignore", invalid="ignore"):
            h, g_h = acyclicity(w, with_grad=True)
            val = loss + 0.5 * rho * h * h + alpha * h
            grad = g_loss + (rho * h + alpha) * g_h
        if not np.isfinite(val):
            val = np.inf  # backtracking rejects oversized proposals
        return val, grad, h

    w = np.zeros((dim, dim)) if w0 is None else np.array(w0, dtype=float)
    w[fixed_zero] = 0.0
    rho, alpha = cfg.rho, cfg.alpha
    h_val = acyclicity(w)
    best_w, best_h = w.copy(), h_val
    converged = False
    rho_max = 1e16

    for _ in range(cfg.max_outer):
        # inner proximal-gradient solve at fixed (rho, alpha)
        step = 1.0
        val, grad, h_val = smooth_and_grad(w, rho, alpha)
        for _ in range(cfg.max_inner):
            while True:
                w_new = _soft_threshold(w - step * grad, step * cfg.l1)
                w_new[fixed_zero] = 0.0
                diff = w_new - w
                val_new, grad_new, h_new = smooth_and_grad(w_new, rho, alpha)
                quad = val + float(np.sum(grad * diff)) + \
                    0.5 / step * float(np.sum(diff * diff))
                if val_new <= quad + 1e-12 or step < 1e-12:
                    break
                step *= 0.5
            move = np.max(np.abs(diff))
            w, val, grad, h_val = w_new, val_new, grad_new, h_new
            step = min(step * 2.0, 1.0)
            if move < 1e-6:
                break
        if h_val < best_h:
            best_w, best_h = w.copy(), h_val
        if h_val <= cfg.tol:
            converged = True
            break
        alpha += rho * h_val
        if rho < rho_max:
            rho *= cfg.rho_growth

    if not converged:
        w, h_val = best_w, best_h
    resid_op = np.eye(dim) - w
    obj = 0.5 * float(np.sum(resid_op * (gram @ resid_op))) + \
        cfg.l1 * float(np.abs(w).sum())
    return DiscoveryResult(w=w, masks=None, h_value=h_val,
                           objective=obj, converged=converged)


def _all_dags(dim):
    """All DAGs on dim nodes as parent-set tuples (dim <= 4).

    Each unordered pair independently carries no edge or one directed
    edge; cyclic combinations are filtered out.
    """
    pairs = list(combinations(range(dim), 2))
    for choice in product((0, 1, 2), repeat=len(pairs)):
        adj = np.zeros((dim, dim), dtype=bool)
        for (i, j), c in zip(pairs, choice):
            if c == 1:
                adj[i, j] = True
            elif c == 2:
                adj[j, i] = True
        h = acyclicity(adj.astype(float))
        if h < 1e-8:
            yield adj


def exhaustive_dag_oracle(data):
    """BIC-scored enumeration of every DAG on <= 4 variables.

    Independent of the NOTEARS optimizer; used only to validate it.
    """
    x = np.asarray(data, dtype=float)
    n_samples, dim = x.shape
    if dim > 4:
        raise ValueError("exhaustive oracle supports at most 4 variables")
    x = x - x.mean(axis=0)
    best_score, best_w = np.inf, None
    for adj in _all_dags(dim):
        total_rss = 0.0
        n_edges = 0
        w = np.zeros((dim, dim))
        for j in range(dim):
            parents = np.flatnonzero(adj[:, j])
            if parents.size:
                xp = x[:, parents]
                coef, _, _, _ = np.linalg.lstsq(xp, x[:, j], rcond=None)
                resid = x[:, j] - xp @ coef
                w[parents, j] = coef
                n_edges += parents.size
            else:
                resid = x[:, j]
            total_rss += float(resid @ resid)
        # equal-variance Gaussian BIC: orientation is identifiable, unlike
        # the per-node-variance profile score which ties reversed edges
        rss = max(total_rss, 1e-12)
        score = n_samples * dim * np.log(rss / (n_samples * dim)) + \
            np.log(n_samples) * n_edges
        if score < best_score - 1e-9:
            best_score, best_w = score, w
    return Dag(best_w)


def _stack_transitions(transitions):
    n = transitions[0].s.shape[0]
    d = transitions[0].a.shape[0]
    rows = np.empty((len(transitions), 2 * n + d + 1))
    for i, tr in enumerate(transitions):
        rows[i, :n] = tr.s
        rows[i, n:n + d] = tr.a
        rows[i, n + d:2 * n + d] = tr.s_next
        rows[i, 2 * n + d] = tr.r
    return rows, n, d


def discover_masks(transitions, cfg, w0=None, return_result=False):
    """NOTEARS over the stacked [s_t | a_t | s_{t+1} | r_t] matrix.

    Temporal ordering is enforced by construction: columns into s_t and
    a_t are hard-zeroed, and the reward node is a sink.  The learned
    adjacency is sliced into the four mask blocks and thresholded at tau.
    """
    if not transitions:
        raise ValueError("discover_masks needs a non-empty transition list")
    data, n, d = _stack_transitions(transitions)
    dim = 2 * n + d + 1
    forbidden = np.zeros((dim, dim), dtype=bool)
    forbidden[:, :n + d] = True          # nothing points into s_t or a_t
    forbidden[-1, :] = True              # reward is terminal
    # next-state coordinates are contemporaneous: their couplings are
    # explained by shared parents, not by within-slice edges
    forbidden[n + d:2 * n + d, n + d:2 * n + d] = True
    # the reward mechanism reads (s_{t+1}, a_t); a direct s_t -> r edge
    # has no mask slot and only siphons signal from the real parents
    forbidden[:n, -1] = True
    result = notears_fit(data, cfg, forbidden=forbidden, w0=w0)
    w = result.w
    thresholded = (np.abs(w) >= cfg.tau).astype(float)
    masks = CausalMasks(
        thresholded[:n, n + d:2 * n + d],
        thresholded[n:n + d, n + d:2 * n + d],
        thresholded[n + d:2 * n + d, -1],
        thresholded[n:n + d, -1],
    )
    result.masks = masks
    if return_result:
        return result
    return masks


def corrupt_masks(masks, flip_prob, rng):
    """Independently flip each mask entry x -> 1-x with probability
    flip_prob (the noise-injected ablation arm)."""
    if not 0 <= flip_prob <= 1:
        raise ValueError("flip_prob must lie in [0,1]")
    rng = np.random.default_rng(rng)
    out = masks.copy()
    for arr in (out.c_ss, out.c_as, out.u_sr, out.u_ar):
        flips = rng.random(arr.shape) < flip_prob
        arr[flips] = 1.0 - arr[flips]
    return out
