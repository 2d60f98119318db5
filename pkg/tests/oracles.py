"""Slow, independent reference implementations used only by the tests."""
from __future__ import annotations

import itertools
import math

import numpy as np


def all_sequences(n: int) -> np.ndarray:
    return np.array(list(itertools.product((1, -1), repeat=n)), dtype=float)


def path_costs(y, g, history=None) -> tuple[np.ndarray, np.ndarray]:
    """Squared-error cost of every +-1 sequence of len(y); history newest first."""
    y = np.asarray(y, dtype=float)
    g = np.asarray(g, dtype=float)
    L = g.size
    hist = np.ones(L - 1) if history is None else np.asarray(history, dtype=float)
    U = all_sequences(y.size)
    # every candidate, oldest symbol first, with the fixed history in front
    ext = np.hstack([np.broadcast_to(hist[::-1], (U.shape[0], L - 1)), U])
    ref = np.zeros_like(U)
    for n in range(y.size):
        for j in range(L):
            ref[:, n] += g[j] * ext[:, L - 1 + n - j]
    return U, np.sum((y - ref) ** 2, axis=1)


def brute_force_ml(y, g, history=None) -> np.ndarray:
    U, costs = path_costs(y, g, history)
    return U[int(np.argmin(costs))].astype(np.int8)


def two_best_llr(y, g, noise_var: float, history=None) -> np.ndarray:
    """(min cost with u_n = -1) - (min cost with u_n = +1), over noise_var."""
    U, costs = path_costs(y, g, history)
    out = np.empty(len(y))
    for n in range(len(y)):
        out[n] = (costs[U[:, n] < 0].min() - costs[U[:, n] > 0].min()) / noise_var
    return out


def conv_reference(u, g, history=None) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    L = g.size
    hist = np.full(L - 1, u[0]) if history is None else np.asarray(history, dtype=float)
    ext = np.concatenate([hist[::-1], np.asarray(u, dtype=float)])
    return np.array([sum(g[j] * ext[L - 1 + n - j] for j in range(L)) for n in range(len(u))])


# --------------------------------------------------------------------------
# equalizers, one output at a time from the defining sums


def _phi(basis, s):
    return {"gaussian": math.exp(-s * s), "tanh": math.tanh(s), "linear": s}[basis]


def _fir(f, r, n, M):
    return sum(f[j] * r[n - M + j] for j in range(2 * M + 1))


def equalizer_output(spec, p, r, n) -> float:
    """Output at absolute index n of the two reader streams r (needs context)."""
    M, a = spec.M, spec.arch
    if a == "Linear2D":
        return _fir(p["f"][0], r[0], n, M) + _fir(p["f"][1], r[1], n, M)
    if a == "MLP":
        x = [r[l][n - M + j] for l in range(2) for j in range(2 * M + 1)]
        y = p["b1"][0]
        for k in range(spec.K):
            act = p["b0"][k] + sum(p["W"][i, k] * x[i] for i in range(len(x)))
            y += p["v"][k] * math.tanh(act)
        return y
    if a in ("RBFNN", "FIRRBFNN"):
        y = p["b1"][0]
        for l in range(2):
            if a == "RBFNN":
                x = [r[l][n - M + j] for j in range(2 * M + 1)]
            else:
                mp = spec.M_prime
                x = [_fir(p["f"][l], r[l], n - mp + j, M) for j in range(2 * mp + 1)]
            for k in range(spec.K):
                d = math.sqrt(sum((x[j] - p["c"][l, k, j]) ** 2 for j in range(len(x))))
                y += p["v"][l, k] * _phi(spec.basis, d + p["b"][l, k])
        return y
    # reduced-complexity MLPs: hidden stream z_m, tanh, FIR q centered at n
    split = a in ("RCMLP1", "RCMLP4")
    Lq = spec.K // 2 if split else spec.K
    H = Lq // 2

    def z(line, m):
        if split:
            return _fir(p["f"][line], r[line], m, M) + p["b0"][line]
        return _fir(p["f"][0], r[0], m, M) + _fir(p["f"][1], r[1], m, M) + p["b0"][0]

    lines = (0, 1) if split else (0,)
    y = p["b1"][0]
    for line in lines:
        q = p["q"][line] if split else p["q"]
        y += sum(q[j] * math.tanh(z(line, n - H + j)) for j in range(Lq))
        if a in ("RCMLP3", "RCMLP4"):
            y += p["c"][0] * z(line, n)
    return y


def numeric_grad(fun, params: dict, eps: float = 1e-6) -> dict:
    out = {}
    for k, v in params.items():
        num = np.zeros_like(v, dtype=float)
        for idx in np.ndindex(v.shape):
            pp = {kk: np.array(vv, dtype=float, copy=True) for kk, vv in params.items()}
            pp[k][idx] += eps
            hi = fun(pp)
            pp[k][idx] -= 2 * eps
            lo = fun(pp)
            num[idx] = (hi - lo) / (2 * eps)
        out[k] = num
    return out


def truncated_normal_variance(sigma: float, bound: float) -> float:
    """Variance of N(0, sigma^2) restricted to (-bound, bound), by quadrature."""
    from scipy.integrate import quad

    pdf = lambda x: math.exp(-0.5 * (x / sigma) ** 2)
    mass = quad(pdf, -bound, bound)[0]
    return quad(lambda x: x * x * pdf(x), -bound, bound)[0] / mass
