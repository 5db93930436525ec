import numpy as np


class ConvergenceError(ArithmeticError):
    pass


def _off_diagonal(A):
    gram = A.T @ A
    np.fill_diagonal(gram, 0.0)
    return np.sqrt(np.sum(gram * gram))


def singular_values(M, tol=1e-12, max_sweeps=100):
    """Singular values of a 2-D matrix, descending, by one-sided Jacobi.

    Columns of the (possibly transposed) matrix are rotated pairwise until
    they are mutually orthogonal; the column norms are then the singular
    values. Iteration stops once the off-diagonal mass of the Gram matrix
    drops below ``tol * ||M||_F**2``.
    """
    A = np.array(getattr(M, "data", M), dtype=np.float64)
    if A.ndim != 2 or min(A.shape) < 1:
        raise ValueError(f"expected a non-empty 2-D matrix, got shape {A.shape}")
    if not np.isfinite(A).all():
        raise ValueError("matrix has non-finite entries")
    if A.shape[0] < A.shape[1]:
        A = A.T.copy()
    m = A.shape[1]
    fro2 = float(np.sum(A * A))
    if fro2 == 0.0:
        return np.zeros(m)
    threshold = tol * fro2

    for _ in range(max_sweeps):
        if _off_diagonal(A) < threshold:
            break
        for i in range(m - 1):
            for j in range(i + 1, m):
                ai, aj = A[:, i], A[:, j]
                alpha = ai @ ai
                beta = aj @ aj
                gamma = ai @ aj
                if abs(gamma) <= 1e-300 or abs(gamma) < 1e-17 * np.sqrt(alpha * beta):
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta)) if zeta != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                A[:, i], A[:, j] = c * ai - s * aj, s * ai + c * aj
    else:
        if _off_diagonal(A) >= threshold:
            raise ConvergenceError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")

    sigma = np.sqrt(np.sum(A * A, axis=0))
    return np.sort(sigma)[::-1]
