"""PR-target trellis, Viterbi detection and max-log soft output.

Bits are carried internally as x = 0 for u = +1 and x = 1 for u = -1. A
state holds the previous L-1 inputs, newest in the least significant bit,
so the all-(+1) history is state 0.

Soft output: llr_n = (M_n(-1) - M_n(+1)) / noise_var where M_n(i) is the
smallest squared-error path metric among paths with u_n = i. Both minima
come out of one forward/backward min-sum sweep. Their gradient with respect
to the detector input only involves the stretch where the two minimizing
paths disagree, which is what ``soft_backward`` walks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .channel import check_bits


@dataclass(frozen=True)
class PRTarget:
    taps: tuple[float, ...]
    monic: bool = False

    def __post_init__(self):
        taps = tuple(float(t) for t in np.ravel(self.taps))
        object.__setattr__(self, "taps", taps)
        if len(taps) < 1:
            raise ValueError("target needs at least one tap")
        if not all(np.isfinite(taps)):
            raise ValueError("target taps must be finite")
        if self.monic and taps[0] != 1.0:
            raise ValueError("monic target must have first tap exactly 1")

    @classmethod
    def monic_from(cls, taps) -> "PRTarget":
        taps = np.asarray(taps, dtype=float)
        return cls(tuple(taps / taps[0]), monic=True)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.taps)

    def __len__(self):
        return len(self.taps)


@dataclass(frozen=True, eq=False)
class Trellis:
    """Immutable PR trellis.

    ``nxt[s, x]`` / ``out_label[s, x]``: successor and noise-free output for
    input x from state s. ``prev[s', d]``, ``in_bit[s', d]``, ``in_label[s', d]``:
    the two branches entering s', ordered by (input, predecessor) so that
    index 0 wins metric ties. ``window[s, x, j]`` is u_{n-j} on that branch.
    """
    target: PRTarget
    num_states: int
    nxt: np.ndarray
    out_label: np.ndarray
    prev: np.ndarray
    in_bit: np.ndarray
    in_label: np.ndarray
    window: np.ndarray = field(repr=False)

    @property
    def memory(self) -> int:
        return len(self.target) - 1

    def label(self, state: int, u: int) -> float:
        return float(self.out_label[state, 0 if u > 0 else 1])

    def state_of(self, history) -> int:
        """State for the previous bits ``history`` = (u_{n-1}, ..., u_{n-L+1})."""
        history = list(history)
        if len(history) != self.memory:
            raise ValueError(f"history must hold {self.memory} bits")
        s = 0
        for j, u in enumerate(history):
            if u not in (-1, 1):
                raise ValueError("history bits must be +-1")
            if u < 0:
                s |= 1 << j
        return s


def build_trellis(g: PRTarget | tuple | list) -> Trellis:
    if not isinstance(g, PRTarget):
        g = PRTarget(tuple(g))
    taps = g.array
    L = taps.size
    mem = L - 1
    S = 1 << mem
    mask = S - 1
    nxt = np.zeros((S, 2), dtype=np.int64)
    out_label = np.zeros((S, 2))
    window = np.zeros((S, 2, L))
    incoming: list[list[tuple[int, int]]] = [[] for _ in range(S)]
    for s in range(S):
        for x in (0, 1):
            bits = [1 - 2 * x] + [1 - 2 * ((s >> j) & 1) for j in range(mem)]
            window[s, x] = bits
            out_label[s, x] = float(np.dot(taps, bits))
            t = ((s << 1) | x) & mask
            nxt[s, x] = t
            incoming[t].append((x, s))
    prev = np.zeros((S, 2), dtype=np.int64)
    in_bit = np.zeros((S, 2), dtype=np.int64)
    in_label = np.zeros((S, 2))
    for t in range(S):
        branches = sorted(incoming[t])
        assert len(branches) == 2
        for d, (x, s) in enumerate(branches):
            prev[t, d] = s
            in_bit[t, d] = x
            in_label[t, d] = out_label[s, x]
    for arr in (nxt, out_label, window, prev, in_bit, in_label):
        arr.setflags(write=False)
    return Trellis(g, S, nxt, out_label, prev, in_bit, in_label, window)


def pr_reference(u, g: PRTarget | tuple | list) -> np.ndarray:
    """Noise-free PR signal (g * u)_n with u_{n<0} taken as u_0."""
    u = check_bits(u).astype(float)
    taps = g.array if isinstance(g, PRTarget) else np.asarray(g, dtype=float)
    L = taps.size
    padded = np.concatenate([np.full(L - 1, u[0]), u])
    return np.convolve(padded, taps, mode="valid")


def pr_reference_with_history(u, history, g) -> np.ndarray:
    """(g * u)_n where u_{-1}, u_{-2}, ... are given explicitly by ``history``."""
    taps = g.array if isinstance(g, PRTarget) else np.asarray(g, dtype=float)
    L = taps.size
    hist = np.asarray(history, dtype=float)[::-1]  # oldest first
    padded = np.concatenate([hist[len(hist) - (L - 1):] if L > 1 else [], np.asarray(u, dtype=float)])
    return np.convolve(padded, taps, mode="valid")


# --------------------------------------------------------------------------
# kernels


@njit(cache=True)
def _forward(y, prev, in_label, start_state):
    N = y.size
    S = prev.shape[0]
    alpha = np.empty((N + 1, S))
    dec = np.zeros((N, S), dtype=np.int8)
    for s in range(S):
        alpha[0, s] = np.inf
    if start_state < 0:
        for s in range(S):
            alpha[0, s] = 0.0
    else:
        alpha[0, start_state] = 0.0
    for n in range(N):
        yn = y[n]
        best = np.inf
        for t in range(S):
            e0 = yn - in_label[t, 0]
            e1 = yn - in_label[t, 1]
            c0 = alpha[n, prev[t, 0]] + e0 * e0
            c1 = alpha[n, prev[t, 1]] + e1 * e1
            if c1 < c0:
                alpha[n + 1, t] = c1
                dec[n, t] = 1
            else:
                alpha[n + 1, t] = c0
            if alpha[n + 1, t] < best:
                best = alpha[n + 1, t]
        for t in range(S):
            alpha[n + 1, t] -= best
    return alpha, dec


@njit(cache=True)
def _backward(y, nxt, out_label):
    N = y.size
    S = nxt.shape[0]
    beta = np.zeros((N + 1, S))
    decb = np.zeros((N, S), dtype=np.int8)
    for n in range(N - 1, -1, -1):
        yn = y[n]
        best = np.inf
        for s in range(S):
            e0 = yn - out_label[s, 0]
            e1 = yn - out_label[s, 1]
            c0 = beta[n + 1, nxt[s, 0]] + e0 * e0
            c1 = beta[n + 1, nxt[s, 1]] + e1 * e1
            if c1 < c0:
                beta[n, s] = c1
                decb[n, s] = 1
            else:
                beta[n, s] = c0
            if beta[n, s] < best:
                best = beta[n, s]
        for s in range(S):
            beta[n, s] -= best
    return beta, decb


@njit(cache=True)
def _bitwise_minima(y, alpha, beta, nxt, out_label):
    """Per bit and input: smallest total metric and the state it leaves from."""
    N = y.size
    S = nxt.shape[0]
    metric = np.empty((N, 2))
    from_state = np.zeros((N, 2), dtype=np.int64)
    for n in range(N):
        for x in range(2):
            best = np.inf
            arg = 0
            for s in range(S):
                e = y[n] - out_label[s, x]
                c = alpha[n, s] + e * e + beta[n + 1, nxt[s, x]]
                if c < best:
                    best = c
                    arg = s
            metric[n, x] = best
            from_state[n, x] = arg
    return metric, from_state


@njit(cache=True)
def _traceback(alpha_last, dec, prev, in_bit):
    N = dec.shape[0]
    S = alpha_last.size
    s = 0
    best = alpha_last[0]
    for t in range(1, S):
        if alpha_last[t] < best:
            best = alpha_last[t]
            s = t
    x = np.empty(N, dtype=np.int64)
    for n in range(N - 1, -1, -1):
        d = dec[n, s]
        x[n] = in_bit[s, d]
        s = prev[s, d]
    return x


@njit(cache=True)
def _pair_backward(y, w, dec, decb, from_state, prev, in_bit, in_label, nxt,
                   out_label, window):
    """Accumulate sum_n w_n * d(M_n(1) - M_n(0)) / d(y, g)."""
    N = y.size
    L = window.shape[2]
    gy = np.zeros(N)
    gg = np.zeros(L)
    for n in range(N):
        wn = w[n]
        if wn == 0.0:
            continue
        a0 = from_state[n, 0]
        a1 = from_state[n, 1]
        # branch at n: metric M1 enters with +, M0 with -
        lab1 = out_label[a1, 1]
        lab0 = out_label[a0, 0]
        r1 = y[n] - lab1
        r0 = y[n] - lab0
        gy[n] += wn * 2.0 * (r1 - r0)
        for j in range(L):
            gg[j] += wn * (-2.0) * (r1 * window[a1, 1, j] - r0 * window[a0, 0, j])
        # earlier branches until the two paths share a state
        s0 = a0
        s1 = a1
        k = n - 1
        while k >= 0 and s0 != s1:
            d0 = dec[k, s0]
            d1 = dec[k, s1]
            p0 = prev[s0, d0]
            p1 = prev[s1, d1]
            x0 = in_bit[s0, d0]
            x1 = in_bit[s1, d1]
            r0 = y[k] - in_label[s0, d0]
            r1 = y[k] - in_label[s1, d1]
            gy[k] += wn * 2.0 * (r1 - r0)
            for j in range(L):
                gg[j] += wn * (-2.0) * (r1 * window[p1, x1, j] - r0 * window[p0, x0, j])
            s0 = p0
            s1 = p1
            k -= 1
        # later branches until the two paths share a state
        t0 = nxt[a0, 0]
        t1 = nxt[a1, 1]
        k = n + 1
        while k < N and t0 != t1:
            x0 = decb[k, t0]
            x1 = decb[k, t1]
            r0 = y[k] - out_label[t0, x0]
            r1 = y[k] - out_label[t1, x1]
            gy[k] += wn * 2.0 * (r1 - r0)
            for j in range(L):
                gg[j] += wn * (-2.0) * (r1 * window[t1, x1, j] - r0 * window[t0, x0, j])
            t0 = nxt[t0, x0]
            t1 = nxt[t1, x1]
            k += 1
    return gy, gg


# --------------------------------------------------------------------------
# public API


@dataclass
class SoftDecision:
    llr: np.ndarray
    hard: np.ndarray

    def __post_init__(self):
        self.llr = np.asarray(self.llr, dtype=float)
        self.hard = np.asarray(self.hard, dtype=np.int8)


@dataclass
class SovaTrace:
    """Everything the soft-output backward pass needs; reused during training."""
    y: np.ndarray
    trellis: Trellis
    noise_var: float
    dec: np.ndarray
    decb: np.ndarray
    metric: np.ndarray
    from_state: np.ndarray
    llr: np.ndarray

    def decision(self) -> SoftDecision:
        return SoftDecision(self.llr, np.where(self.llr >= 0, 1, -1))

    def tied_bits(self) -> np.ndarray:
        return np.flatnonzero(self.metric[:, 0] == self.metric[:, 1])

    def selection_key(self) -> tuple:
        """Hashable summary of every discrete choice made by the sweep."""
        return (self.dec.tobytes(), self.decb.tobytes(), self.from_state.tobytes())

    def backward(self, dJ_dllr, target_grad: bool = False):
        w = np.asarray(dJ_dllr, dtype=float)
        if w.shape != self.y.shape:
            raise ValueError(f"dJ_dllr has shape {w.shape}, expected {self.y.shape}")
        tr = self.trellis
        gy, gg = _pair_backward(self.y, w / self.noise_var, self.dec, self.decb,
                                self.from_state, tr.prev, tr.in_bit, tr.in_label,
                                tr.nxt, tr.out_label, tr.window)
        return (gy, gg) if target_grad else gy


def _check_y(y) -> np.ndarray:
    y = np.ascontiguousarray(y, dtype=float)
    if y.ndim != 1 or y.size == 0:
        raise ValueError("detector input must be a nonempty 1-D sequence")
    if not np.all(np.isfinite(y)):
        raise ValueError("detector input must be finite")
    return y


def _start(trellis: Trellis, start_state) -> int:
    if start_state is None:
        return -1
    s = int(start_state)
    if not 0 <= s < trellis.num_states:
        raise ValueError(f"start_state {s} out of range")
    return s


def viterbi(y, trellis: Trellis, start_state: int | None = 0) -> np.ndarray:
    """ML bit sequence for ``y``; ``start_state=None`` leaves the history free."""
    y = _check_y(y)
    alpha, dec = _forward(y, trellis.prev, trellis.in_label, _start(trellis, start_state))
    x = _traceback(alpha[-1], dec, trellis.prev, trellis.in_bit)
    return (1 - 2 * x).astype(np.int8)


def sova_trace(y, trellis: Trellis, noise_var: float, start_state: int | None = 0) -> SovaTrace:
    if not noise_var > 0:
        raise ValueError("noise_var must be positive")
    y = _check_y(y)
    alpha, dec = _forward(y, trellis.prev, trellis.in_label, _start(trellis, start_state))
    beta, decb = _backward(y, trellis.nxt, trellis.out_label)
    metric, from_state = _bitwise_minima(y, alpha, beta, trellis.nxt, trellis.out_label)
    llr = (metric[:, 1] - metric[:, 0]) / noise_var
    return SovaTrace(y, trellis, float(noise_var), dec, decb, metric, from_state, llr)


def sova(y, trellis: Trellis, noise_var: float, start_state: int | None = 0) -> SoftDecision:
    return sova_trace(y, trellis, noise_var, start_state).decision()


def soft_backward(y, trellis: Trellis, noise_var: float, dJ_dllr,
                  start_state: int | None = 0, target_grad: bool = False):
    """Gradient of sum_n dJ_dllr[n] * llr_n with respect to y (and the target taps).

    Exact away from metric ties; at a tie the path pair chosen by the
    tie-break rule supplies a subgradient (``SovaTrace.tied_bits`` lists them).
    """
    y = _check_y(y)
    dJ_dllr = np.asarray(dJ_dllr, dtype=float)
    if dJ_dllr.shape != y.shape:
        raise ValueError("dJ_dllr must match y in length")
    return sova_trace(y, trellis, noise_var, start_state).backward(dJ_dllr, target_grad)


def llr_to_p0(llr):
    """Pr{u = -1} = 1 / (1 + e^llr), overflow free."""
    llr = np.asarray(llr, dtype=float)
    e = np.exp(-np.abs(llr))
    out = np.where(llr >= 0, e / (1.0 + e), 1.0 / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def write_llr_dump(path, llr, u) -> None:
    llr = np.asarray(llr, dtype=float)
    u = check_bits(u)
    if llr.shape != u.shape:
        raise ValueError("llr and bits must have equal length")
    hard = np.where(llr >= 0, 1, -1)
    with Path(path).open("w") as fh:
        fh.writelines(f"{n} {v:.9g} {h} {b}\n" for n, (v, h, b) in enumerate(zip(llr, hard, u)))


def read_llr_dump(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"LLR dump not found: {path}")
    try:
        data = np.loadtxt(path, ndmin=2)
    except ValueError as exc:
        raise ValueError(f"{path}: malformed LLR dump ({exc})") from None
    if data.shape[1] != 4:
        raise ValueError(f"{path}: expected rows 'n llr hard u'")
    return data[:, 1].copy(), check_bits(data[:, 3].astype(int))
