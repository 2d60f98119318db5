"""MSE and cross-entropy adaptation of equalizer parameters and PR target."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import equalizers as eq
from .channel import ReadbackSector, check_bits
from .trellis import PRTarget, SovaTrace, build_trellis, sova_trace

log = logging.getLogger(__name__)


# a loss this many times the first minibatch's counts as divergence
DIVERGENCE_RATIO = 1e6


class TrainingDiverged(ArithmeticError):
    pass


class NearTieError(RuntimeError):
    """Finite differences crossed a soft-output path-selection boundary."""


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "MSE"
    learning_rate: float = 1e-3
    minibatch_N: int = 1024
    epochs: int = 10
    seed: int = 0
    adapt_target: bool = True
    monic: bool = True
    target_len: int = 3
    lr_decay: float = 0.95
    noise_var: float | None = None
    # experiment-level choices: closed-form linear solve instead of SGD, a
    # fixed (non-adapted) target, and the near-linear init gain of the
    # tanh and FIR-RBF networks
    solver: str = "sgd"
    fixed_target: tuple[float, ...] | None = None
    input_gain: float = 0.3

    def __post_init__(self):
        if self.loss not in ("MSE", "CE"):
            raise ValueError("loss must be 'MSE' or 'CE'")
        if self.solver not in ("sgd", "closed_form"):
            raise ValueError("solver must be 'sgd' or 'closed_form'")
        if self.solver == "closed_form" and self.loss != "MSE":
            raise ValueError("closed_form solver only exists for the MSE loss")
        if self.fixed_target is not None and len(self.fixed_target) < 1:
            raise ValueError("fixed_target needs at least one tap")
        if not self.input_gain > 0:
            raise ValueError("input_gain must be positive")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.minibatch_N < 1 or self.epochs < 1 or self.target_len < 1:
            raise ValueError("minibatch_N, epochs and target_len must be >= 1")
        if self.loss == "MSE" and self.adapt_target and not self.monic:
            # without the monic constraint the MSE optimum is g = 0
            object.__setattr__(self, "monic", True)
        if self.noise_var is not None and not self.noise_var > 0:
            raise ValueError("noise_var must be positive")


@dataclass
class TrainReport:
    loss_history: list[float]
    final_params: eq.ParameterSet
    final_target: PRTarget
    epochs_run: int
    noise_var: float | None = None


# --------------------------------------------------------------------------
# losses


def mse_loss(y, y_hat) -> float:
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape or y.size == 0:
        raise ValueError("mse_loss needs two nonempty sequences of equal length")
    d = y_hat - y
    return float(np.mean(d * d))


def ce_pointwise(u, llr):
    """log(1 + exp(-u * llr)), overflow safe."""
    x = np.asarray(u, dtype=float) * np.asarray(llr, dtype=float)
    out = np.maximum(0.0, -x) + np.log1p(np.exp(-np.abs(x)))
    return float(out) if out.ndim == 0 else out


def ce_loss(u, llr) -> float:
    u = np.asarray(u)
    llr = np.asarray(llr, dtype=float)
    if u.shape != llr.shape or u.size == 0:
        raise ValueError("ce_loss needs bits and LLRs of equal nonzero length")
    return float(np.mean(ce_pointwise(u, llr)))


def ce_grad(u, llr) -> np.ndarray:
    """d ce_pointwise / d llr = -u / (1 + exp(u * llr))."""
    x = np.asarray(u, dtype=float) * np.asarray(llr, dtype=float)
    e = np.exp(-np.abs(x))
    sig_neg = np.where(x >= 0, e / (1.0 + e), 1.0 / (1.0 + e))
    return -np.asarray(u, dtype=float) * sig_neg


# --------------------------------------------------------------------------
# minibatches


@dataclass
class Minibatch:
    """ADC block ``r`` (2, N + 2C), bits ``u`` (N,), and the L-1 bits before them."""
    r: np.ndarray
    u: np.ndarray
    history: np.ndarray  # u_{a-1}, u_{a-2}, ... newest first

    def __len__(self):
        return self.u.size


def valid_range(n_bits: int, C: int, L: int) -> tuple[int, int]:
    return max(C, L - 1), n_bits - C


def make_spans(sectors: Sequence[ReadbackSector], C: int, L: int, N: int):
    spans = []
    for i, s in enumerate(sectors):
        lo, hi = valid_range(len(s), C, L)
        for a in range(lo, hi, N):
            spans.append((i, a, min(a + N, hi)))
    return spans


def minibatch(sector: ReadbackSector, C: int, L: int, a: int, b: int) -> Minibatch:
    hist = sector.bits[a - L + 1:a][::-1] if L > 1 else np.zeros(0, dtype=np.int8)
    return Minibatch(sector.adc[:, a - C:b + C], sector.bits[a:b], np.asarray(hist))


def target_windows(u, history, L: int) -> np.ndarray:
    """Rows (u_n, u_{n-1}, ..., u_{n-L+1})."""
    full = np.concatenate([np.asarray(history, dtype=float)[::-1], np.asarray(u, dtype=float)])
    return sliding_window_view(full, L)[:, ::-1]


def start_state_of(history) -> int:
    s = 0
    for j, u in enumerate(history):
        if u < 0:
            s |= 1 << j
    return s


def objective(spec: eq.EqualizerSpec, params, g: PRTarget, mb: Minibatch, loss: str,
              noise_var: float | None = None, want_grad: bool = True):
    """Minibatch loss, parameter gradients, target gradient and the soft-output trace."""
    L = len(g)
    y, cache = eq.forward_stream(spec, params, mb.r)
    N = y.size
    if N == 0:
        raise ValueError("empty minibatch")
    trace = None
    if loss == "MSE":
        U = target_windows(mb.u, mb.history, L)
        e = y - U @ g.array
        J = float(np.mean(e * e))
        if not want_grad:
            return J, None, None, None
        gy = 2.0 * e / N
        gg = -2.0 * (e @ U) / N
    else:
        if noise_var is None:
            raise ValueError("CE objective needs noise_var")
        trace = sova_trace(y, build_trellis(g), noise_var, start_state_of(mb.history))
        J = ce_loss(mb.u, trace.llr)
        if not want_grad:
            return J, None, None, trace
        gy, gg = trace.backward(ce_grad(mb.u, trace.llr) / N, target_grad=True)
    grads = eq.backward_stream(spec, params, cache, gy)
    return J, grads, gg, trace


def estimate_noise_var(spec, params, g: PRTarget, sectors) -> float:
    """Mean squared residual between equalizer output and the PR reference."""
    C, L = eq.context(spec), len(g)
    sse, n = 0.0, 0
    for s in sectors:
        lo, hi = valid_range(len(s), C, L)
        y = eq.equalize(spec, params, s.adc[:, lo - C:hi + C])
        U = target_windows(s.bits[lo:hi], s.bits[lo - L + 1:lo][::-1], L)
        e = y - U @ g.array
        sse += float(e @ e)
        n += e.size
    return sse / n


def solve_output_layer(spec: eq.EqualizerSpec, params, g: PRTarget, sectors,
                       max_samples: int = 40000, ridge: float = 1e-4):
    """Least-squares output weights ``v`` and bias ``b1`` of an RBF network.

    The hidden layer is held fixed; its features are read off by evaluating
    the network with one unit output weight at a time. ``ridge`` is relative
    to the mean feature energy; the bias is not penalized. Returns new params.
    """
    if spec.arch not in ("RBFNN", "FIRRBFNN"):
        raise ValueError("output-layer solve applies to the RBF architectures")
    C, L = eq.context(spec), len(g)
    blocks, refs, n = [], [], 0
    for s in sectors:
        lo, hi = valid_range(len(s), C, L)
        hi = min(hi, lo + max_samples - n)
        if hi <= lo:
            break
        blocks.append(s.adc[:, lo - C:hi + C])
        refs.append(target_windows(s.bits[lo:hi], s.bits[lo - L + 1:lo][::-1], L) @ g.array)
        n += hi - lo
    probe = eq.copy_params(params)
    probe["b1"][:] = 0.0
    cols = []
    for idx in np.ndindex(params["v"].shape):
        probe["v"][:] = 0.0
        probe["v"][idx] = 1.0
        cols.append(np.concatenate([eq.equalize(spec, probe, b) for b in blocks]))
    A = np.column_stack(cols + [np.ones(n)])
    G = A.T @ A
    # near-collinear basis outputs otherwise give huge, cancelling weights
    pen = ridge * np.mean(np.diag(G)[:-1]) * np.eye(G.shape[0])
    pen[-1, -1] = 0.0
    sol = np.linalg.solve(G + pen, A.T @ np.concatenate(refs))
    out = eq.copy_params(params)
    out["v"] = sol[:-1].reshape(params["v"].shape)
    out["b1"] = sol[-1:].copy()
    return out


# --------------------------------------------------------------------------
# SGD


def fit(spec: eq.EqualizerSpec, init_params, dataset: Sequence[ReadbackSector], g0: PRTarget,
        cfg: TrainConfig, log_line: Callable[[str], None] | None = None) -> TrainReport:
    """Minibatch SGD on J_MSE (monic target) or J_CE (target unconstrained)."""
    if not dataset:
        raise ValueError("empty training set")
    eq.check_params(spec, init_params)
    if cfg.adapt_target and len(g0) != cfg.target_len:
        raise ValueError(f"target has {len(g0)} taps but target_len={cfg.target_len}")
    params = eq.copy_params(init_params)
    g = g0.array.copy()
    monic = cfg.monic or (cfg.loss == "MSE" and cfg.adapt_target)
    if monic and cfg.adapt_target and g[0] != 1.0:
        g = g / g[0]
    noise_var = cfg.noise_var
    if cfg.loss == "CE" and noise_var is None:
        noise_var = estimate_noise_var(spec, params, PRTarget(tuple(g)), dataset)

    C, L = eq.context(spec), len(g)
    spans = make_spans(dataset, C, L, cfg.minibatch_N)
    if not spans:
        raise ValueError("sectors too short for the equalizer context")
    rng = np.random.default_rng(cfg.seed)
    lr = cfg.learning_rate
    history: list[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(spans))
        for mb_i, si in enumerate(order):
            sec, a, b = spans[si]
            mb = minibatch(dataset[sec], C, L, a, b)
            target = PRTarget(tuple(g), monic=monic and g[0] == 1.0)
            J, grads, gg, _ = objective(spec, params, target, mb, cfg.loss, noise_var)
            if not np.isfinite(J) or (history and J > DIVERGENCE_RATIO * max(history[0], 1e-12)):
                raise TrainingDiverged(f"loss {J:.3g} at epoch {epoch}, minibatch {mb_i} "
                                       "(learning rate too large?)")
            history.append(J)
            if log_line is not None:
                log_line(f"{epoch} {mb_i} {J:.9g} {lr:.9g}")
            if lr == 0:
                continue
            # a short tail span gets a proportionally short step, so every
            # sample carries equal weight over an epoch
            step = lr * len(mb) / cfg.minibatch_N
            for k in params:
                params[k] -= step * grads[k]
            if cfg.adapt_target:
                if monic:
                    gg = gg.copy()
                    gg[0] = 0.0
                g = g - step * gg
        lr *= cfg.lr_decay
    final_target = PRTarget(tuple(g), monic=monic and g[0] == 1.0)
    return TrainReport(history, params, final_target, cfg.epochs, noise_var)


# --------------------------------------------------------------------------
# closed-form linear baseline


def solve_lmmse(dataset: Sequence[ReadbackSector], M: int, target_len: int = 3,
                monic: bool = True, fixed_target: PRTarget | None = None):
    """Least-squares 2-D FIR equalizer jointly with a monic target.

    With ``fixed_target`` only the equalizer is solved for. Returns
    (params for Linear2D, PRTarget).
    """
    spec = eq.EqualizerSpec("Linear2D", M=M)
    T = spec.taps
    L = len(fixed_target) if fixed_target is not None else target_len
    if fixed_target is None and not monic:
        raise ValueError("joint target design needs the monic constraint")
    dim = 2 * T + (0 if fixed_target is not None else L - 1)
    AtA = np.zeros((dim, dim))
    Atb = np.zeros(dim)
    for s in dataset:
        lo, hi = valid_range(len(s), M, L)
        if hi <= lo:
            continue
        R = np.concatenate([sliding_window_view(s.adc[l], T)[lo - M:hi - M] for l in range(2)], axis=1)
        U = target_windows(s.bits[lo:hi], s.bits[lo - L + 1:lo][::-1], L)
        if fixed_target is not None:
            A, rhs = R, U @ fixed_target.array
        else:
            A, rhs = np.concatenate([R, -U[:, 1:]], axis=1), U[:, 0]
        AtA += A.T @ A
        Atb += A.T @ rhs
    if not np.any(AtA):
        raise ValueError("dataset too short for the requested window")
    cond = np.linalg.cond(AtA)
    if not np.isfinite(cond) or cond > 1e12:
        ridge = 1e-8 * np.trace(AtA) / dim
        warnings.warn(f"normal matrix ill-conditioned (cond={cond:.3g}); adding ridge {ridge:.3g}")
        AtA = AtA + ridge * np.eye(dim)
    theta = np.linalg.solve(AtA, Atb)
    params = {"f": theta[:2 * T].reshape(2, T)}
    if fixed_target is not None:
        return params, fixed_target
    target = PRTarget((1.0,) + tuple(theta[2 * T:]), monic=True)
    return params, target


# --------------------------------------------------------------------------
# gradient verification


def _relative_error(analytic: dict, numeric: dict) -> float:
    scale = max(max(np.max(np.abs(v)) for v in analytic.values()),
                max(np.max(np.abs(v)) for v in numeric.values()), 1e-300)
    worst = 0.0
    for k in analytic:
        a, n = analytic[k], numeric[k]
        denom = max(np.max(np.abs(a)), np.max(np.abs(n)), 1e-6 * scale)
        worst = max(worst, float(np.max(np.abs(a - n)) / denom))
    return worst


def gradient_check(spec: eq.EqualizerSpec, params, g: PRTarget, mb: Minibatch, loss: str,
                   eps: float = 1e-5, noise_var: float | None = 1.0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Covers every equalizer parameter and every target tap. Relative error is
    taken per parameter container, normalized by that container's largest
    gradient. Raises NearTieError if a CE perturbation changes any
    soft-output path selection.
    """
    if len(mb) == 0:
        raise ValueError("gradient_check needs a nonempty minibatch")
    J0, grads, gg, trace0 = objective(spec, params, g, mb, loss, noise_var)
    key0 = trace0.selection_key() if trace0 is not None else None
    analytic = dict(grads)
    analytic["target"] = gg
    numeric = {}

    def probe(p, tgt):
        J, _, _, tr = objective(spec, p, tgt, mb, loss, noise_var, want_grad=False)
        if key0 is not None and tr.selection_key() != key0:
            raise NearTieError("perturbation crossed a path-selection boundary")
        return J

    for k, v in params.items():
        num = np.zeros_like(v, dtype=float)
        for idx in np.ndindex(v.shape):
            p = dict(params)
            arr = np.array(v, dtype=float, copy=True)
            arr[idx] = v[idx] + eps
            p[k] = arr
            jp = probe(p, g)
            arr[idx] = v[idx] - eps
            jm = probe(p, g)
            num[idx] = (jp - jm) / (2 * eps)
        numeric[k] = num
    taps = g.array
    num = np.zeros_like(taps)
    for j in range(taps.size):
        tp, tm = taps.copy(), taps.copy()
        tp[j] += eps
        tm[j] -= eps
        num[j] = (probe(params, PRTarget(tuple(tp))) - probe(params, PRTarget(tuple(tm)))) / (2 * eps)
    numeric["target"] = num
    return _relative_error(analytic, numeric)
