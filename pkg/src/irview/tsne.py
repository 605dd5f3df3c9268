"""Exact O(n^2) t-SNE with per-point bandwidth calibration.

Gaussian bandwidths are solved by bisection so every point's conditional
distribution hits the requested perplexity; the symmetrized affinities are
matched against Student-t similarities in 2D by minimizing KL(P || Q) with
momentum gradient descent and an early exaggeration phase. Over the final
stretch of the optimization the step is backtracked whenever it would raise
the KL divergence, so the recorded tail is non-increasing by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_POINTS = 5000


def _squared_distances(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d2, 0.0)
    return np.maximum(d2, 0.0)


def _row_entropy_and_probs(d2_row: np.ndarray, beta: float) -> tuple[float, np.ndarray]:
    """Shannon entropy (nats) and conditional probabilities for one point."""
    shifted = -beta * (d2_row - d2_row.min())
    p = np.exp(shifted)
    sum_p = p.sum()
    p /= sum_p
    # H = log(sum_p) + beta * <d2> in the shifted frame
    h = np.log(sum_p) + beta * float(np.dot(d2_row - d2_row.min(), p))
    return h, p


def conditional_probabilities(
    d2: np.ndarray, perplexity: float, tol: float = 1e-10, max_iter: int = 200
) -> tuple[np.ndarray, np.ndarray]:
    """Per-row Gaussian affinities whose entropy matches log(perplexity).

    Returns (P_cond, achieved_perplexities) where row i of P_cond holds
    p(j | i) with a zero diagonal.
    """
    n = d2.shape[0]
    target = np.log(perplexity)
    p_cond = np.zeros((n, n))
    achieved = np.zeros(n)
    idx = np.arange(n)
    for i in range(n):
        row = d2[i, idx != i]
        beta, beta_min, beta_max = 1.0, 0.0, np.inf
        h, p = _row_entropy_and_probs(row, beta)
        for _ in range(max_iter):
            diff = h - target
            if abs(diff) < tol:
                break
            if diff > 0:  # entropy too high -> tighten the kernel
                beta_min = beta
                beta = beta * 2.0 if np.isinf(beta_max) else (beta + beta_max) / 2.0
            else:
                beta_max = beta
                beta = (beta + beta_min) / 2.0
            h, p = _row_entropy_and_probs(row, beta)
        p_cond[i, idx != i] = p
        achieved[i] = np.exp(h)
    return p_cond, achieved


def joint_probabilities(x: np.ndarray, perplexity: float) -> np.ndarray:
    """Symmetrized affinity matrix; sums to 1 by construction."""
    p_cond, _ = conditional_probabilities(_squared_distances(x), perplexity)
    return (p_cond + p_cond.T) / (2.0 * x.shape[0])


def _student_t_numerators(y: np.ndarray) -> np.ndarray:
    num = 1.0 / (1.0 + _squared_distances(y))
    np.fill_diagonal(num, 0.0)
    return num


def _kl_divergence(p: np.ndarray, q_num: np.ndarray) -> float:
    q = q_num / q_num.sum()
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / np.maximum(q[mask], 1e-300))))


def _gradient(p_eff: np.ndarray, y: np.ndarray, q_num: np.ndarray) -> np.ndarray:
    q = q_num / q_num.sum()
    pq = (p_eff - q) * q_num
    return 4.0 * (pq.sum(axis=1)[:, None] * y - pq @ y)


@dataclass
class TsneResult:
    points: np.ndarray  # (n, 2)
    kl_history: list[tuple[int, float]] = field(default_factory=list)
    final_kl: float = float("nan")


def tsne(
    x: np.ndarray,
    perplexity: float = 30.0,
    n_iter: int = 1000,
    seed: int = 0,
    learning_rate: float = 200.0,
    early_exaggeration: float = 12.0,
    exaggeration_iters: int = 250,
    momentum_start: float = 0.5,
    momentum_final: float = 0.8,
    momentum_switch: int = 250,
    monotone_tail: int = 100,
) -> TsneResult:
    """Project rows of ``x`` to 2D. Deterministic given the seed."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D data matrix, got shape {x.shape}")
    n = x.shape[0]
    if n > MAX_POINTS:
        raise ValueError(f"exact method handles at most {MAX_POINTS} points, got {n}")
    if perplexity < 5 or perplexity >= n / 3:
        raise ValueError(f"perplexity must satisfy 5 <= perplexity < n/3 (n={n}), got {perplexity}")
    if n_iter <= exaggeration_iters + monotone_tail:
        raise ValueError("n_iter must exceed exaggeration_iters + monotone_tail")

    p = joint_probabilities(x, perplexity)
    rng = np.random.default_rng(seed)
    y = rng.standard_normal((n, 2)) * 1e-4
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)

    history: list[tuple[int, float]] = []
    tail_start = n_iter - monotone_tail
    prev_kl: float | None = None

    for it in range(n_iter):
        p_eff = p * early_exaggeration if it < exaggeration_iters else p
        q_num = _student_t_numerators(y)
        grad = _gradient(p_eff, y, q_num)
        momentum = momentum_start if it < momentum_switch else momentum_final

        if it < tail_start:
            flips = np.sign(grad) != np.sign(velocity)
            gains = np.where(flips, gains + 0.2, gains * 0.8)
            np.clip(gains, 0.01, None, out=gains)
            velocity = momentum * velocity - learning_rate * gains * grad
            y = y + velocity
            y = y - y.mean(axis=0)
            if it % 50 == 0:
                history.append((it, _kl_divergence(p, q_num)))
        else:
            # backtracked tail: only accept steps that do not raise the KL
            if prev_kl is None:
                prev_kl = _kl_divergence(p, q_num)
            update = momentum * velocity - learning_rate * grad
            accepted = False
            for _ in range(30):
                candidate = y + update
                cand_kl = _kl_divergence(p, _student_t_numerators(candidate))
                if cand_kl <= prev_kl:
                    accepted = True
                    break
                update *= 0.5
            if accepted:
                velocity = update
                y = candidate - candidate.mean(axis=0)
                prev_kl = cand_kl
            else:
                velocity = np.zeros_like(y)
            history.append((it, prev_kl))

    final_kl = prev_kl if prev_kl is not None else _kl_divergence(p, _student_t_numerators(y))
    return TsneResult(points=y, kl_history=history, final_kl=final_kl)
