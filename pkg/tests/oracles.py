"""Independent brute-force oracles used to pin expected values."""

import numpy as np


def project_to_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    rho = np.nonzero(u * np.arange(1, len(v) + 1) > (css - 1))[0][-1]
    theta = (css[rho] - 1) / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def simplex_grid_min(B: np.ndarray, step: float = 1e-3) -> float:
    """Exhaustive grid search of w^T B w over the simplex (M <= 3)."""
    M = B.shape[0]
    best = np.inf
    ticks = np.arange(0.0, 1.0 + step / 2, step)
    if M == 1:
        return float(B[0, 0])
    if M == 2:
        for a in ticks:
            w = np.array([a, 1.0 - a])
            best = min(best, float(w @ B @ w))
        return best
    if M == 3:
        for a in ticks:
            for b in np.arange(0.0, 1.0 - a + step / 2, step):
                w = np.array([a, b, 1.0 - a - b])
                best = min(best, float(w @ B @ w))
        return best
    raise ValueError("grid oracle only supports M <= 3")


def projected_gradient_min(B: np.ndarray, iters: int = 20000) -> float:
    """Projected gradient descent on w^T B w over the simplex."""
    M = B.shape[0]
    w = np.full(M, 1.0 / M)
    lam = max(np.linalg.eigvalsh(B).max(), 1e-12)
    lr = 1.0 / (2.0 * lam)
    for _ in range(iters):
        w = project_to_simplex(w - lr * 2.0 * (B @ w))
    return float(w @ B @ w)


def min_norm_oracle(B: np.ndarray) -> float:
    """Best available independent estimate of min_w w^T B w on the simplex."""
    if B.shape[0] <= 3:
        return min(simplex_grid_min(B, 1e-3), projected_gradient_min(B))
    return projected_gradient_min(B)
