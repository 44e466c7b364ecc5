"""Independent reference implementations used as test oracles.

Everything here is deliberately written along a different numerical route
than the package itself (index loops, Taylor series, superoperators,
fine-grained slicing) so agreement is meaningful.
"""

from __future__ import annotations

import numpy as np


def kron_index(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Kronecker product by the direct index formula
    (a (x) b)[i*db + j, k*db + l] = a[i, k] * b[j, l]."""
    da, db = a.shape[0], b.shape[0]
    out = np.zeros((da * db, da * db), dtype=complex)
    for i in range(da):
        for k in range(da):
            for j in range(db):
                for l in range(db):
                    out[i * db + j, k * db + l] = a[i, k] * b[j, l]
    return out


def ptrace_index(mat: np.ndarray, dims: list[int], keep: list[int]) -> np.ndarray:
    """Partial trace by explicit summation over multi-indices."""
    keep = sorted(keep)
    drop = [i for i in range(len(dims)) if i not in keep]
    dk = int(np.prod([dims[i] for i in keep])) if keep else 1
    out = np.zeros((dk, dk), dtype=complex)
    shape = tuple(dims)

    def flat(idx):
        f = 0
        for d, i in zip(shape, idx):
            f = f * d + i
        return f

    for row_keep in np.ndindex(*(dims[i] for i in keep)) if keep else [()]:
        for col_keep in np.ndindex(*(dims[i] for i in keep)) if keep else [()]:
            acc = 0.0 + 0.0j
            for common in np.ndindex(*(dims[i] for i in drop)) if drop else [()]:
                row = [0] * len(dims)
                col = [0] * len(dims)
                for pos, i in zip(keep, row_keep):
                    row[pos] = i
                for pos, i in zip(keep, col_keep):
                    col[pos] = i
                for pos, i in zip(drop, common):
                    row[pos] = i
                    col[pos] = i
                acc += mat[flat(row), flat(col)]
            r = 0
            for d, i in zip([dims[i] for i in keep], row_keep):
                r = r * d + i
            c = 0
            for d, i in zip([dims[i] for i in keep], col_keep):
                c = c * d + i
            out[r, c] = acc
    return out


def taylor_expm(a: np.ndarray) -> np.ndarray:
    """Matrix exponential by scaling-and-squaring with a Taylor series."""
    norm = np.linalg.norm(a, ord=np.inf)
    s = max(0, int(np.ceil(np.log2(max(norm, 1e-30)))) + 1)
    x = a / (2 ** s)
    out = np.eye(a.shape[0], dtype=complex)
    term = np.eye(a.shape[0], dtype=complex)
    for n in range(1, 40):
        term = term @ x / n
        out = out + term
        if np.max(np.abs(term)) < 1e-18:
            break
    for _ in range(s):
        out = out @ out
    return out


def superoperator(kraus: list[np.ndarray]) -> np.ndarray:
    """Row-major vectorized superoperator sum_i K (x) conj(K)."""
    return sum(np.kron(k, k.conj()) for k in kraus)


def apply_via_superoperator(kraus: list[np.ndarray], rho: np.ndarray) -> np.ndarray:
    d = rho.shape[0]
    return (superoperator(kraus) @ rho.reshape(-1)).reshape(d, d)


def random_hermitian(rng: np.random.Generator, d: int, scale: float = 1.0) -> np.ndarray:
    a = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
    return scale * 0.5 * (a + a.conj().T)


def random_density(rng: np.random.Generator, d: int) -> np.ndarray:
    a = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
    rho = a @ a.conj().T
    return rho / np.trace(rho)


def random_unitary(rng: np.random.Generator, d: int) -> np.ndarray:
    a = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
    q, r = np.linalg.qr(a)
    return q * (np.diag(r) / np.abs(np.diag(r)))


def random_kraus_channel(rng: np.random.Generator, d: int, m: int) -> list[np.ndarray]:
    """m Kraus operators of a random CPTP map via a Haar isometry."""
    u = random_unitary(rng, d * m)
    v = u[:, :d]  # isometry columns, ancilla index varies fastest
    return [v.reshape(d, m, d)[:, i, :].copy() for i in range(m)]


def richardson_halving(values: list[float | np.ndarray], orders: tuple[int, ...] = (1, 2)):
    """Extrapolate f(h), f(h/2), ... to h -> 0 assuming error terms h^orders."""
    rows = [np.asarray(v, dtype=complex) for v in values]
    for order in orders[: len(rows) - 1]:
        factor = 2.0 ** order
        rows = [(factor * rows[i + 1] - rows[i]) / (factor - 1.0) for i in range(len(rows) - 1)]
    out = rows[0]
    return float(np.real(out)) if out.ndim == 0 else out


def dlog_daleckii(m: np.ndarray, dm: np.ndarray) -> np.ndarray:
    """Frechet derivative of the matrix logarithm at Hermitian positive m
    in direction dm, via the Daleckii-Krein formula."""
    w, v = np.linalg.eigh(m)
    dmt = v.conj().T @ dm @ v
    phi = np.zeros((len(w), len(w)), dtype=complex)
    for i in range(len(w)):
        for j in range(len(w)):
            if abs(w[i] - w[j]) < 1e-12 * max(abs(w[i]), 1.0):
                phi[i, j] = 1.0 / w[i]
            else:
                phi[i, j] = (np.log(w[i]) - np.log(w[j])) / (w[i] - w[j])
    return v @ (phi * dmt) @ v.conj().T
