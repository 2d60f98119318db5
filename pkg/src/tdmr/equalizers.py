"""Equalizer architectures: forward, analytic backward and parameter accounting.

Every architecture is evaluated as a stream over a two-reader ADC block
``r`` of shape (2, n). Output ``i`` is centered on input sample ``i + C``
where ``C = context(spec)``, so a block of ``2C + 1`` samples yields one
output; that is the per-window ``forward``.

K conventions follow the complexity table: for the RBFNN family ``K`` is the
number of centroids per reader, for RC-MLP1/4 it is the total hidden delay
length split evenly over the two readers, for RC-MLP2/3 the single delay line
length, and for the MLP the number of hidden nodes.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ARCHS = ("Linear2D", "MLP", "RBFNN", "FIRRBFNN", "RCMLP1", "RCMLP2", "RCMLP3", "RCMLP4")
BASES = ("gaussian", "tanh", "linear")
MODEL_FILE_HEADER = "tdmr-eq-model v1"

ParameterSet = dict  # name -> np.ndarray


@dataclass(frozen=True)
class EqualizerSpec:
    arch: str = "Linear2D"
    M: int = 5
    K: int = 6
    M_prime: int = 2
    basis: str = "gaussian"
    activation: str = "tanh"

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}; choose from {ARCHS}")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.arch == "FIRRBFNN" and not 1 <= self.M_prime < self.M:
            raise ValueError("FIRRBFNN needs 1 <= M_prime < M")
        if self.arch in ("RCMLP1", "RCMLP4") and self.K % 2:
            raise ValueError(f"{self.arch} needs an even K (split over two delay lines)")
        if self.basis not in BASES:
            raise ValueError(f"unknown basis {self.basis!r}")
        if self.activation != "tanh":
            raise ValueError("only the tanh activation is supported")

    @property
    def taps(self) -> int:
        return 2 * self.M + 1


def _qlen(spec: EqualizerSpec) -> int:
    return spec.K // 2 if spec.arch in ("RCMLP1", "RCMLP4") else spec.K


def hidden_context(spec: EqualizerSpec) -> int:
    if spec.arch == "FIRRBFNN":
        return spec.M_prime
    if spec.arch.startswith("RCMLP"):
        return _qlen(spec) // 2
    return 0


def context(spec: EqualizerSpec) -> int:
    """Samples needed on each side of the output position."""
    return spec.M + hidden_context(spec)


def param_shapes(spec: EqualizerSpec) -> dict[str, tuple[int, ...]]:
    T, K = spec.taps, spec.K
    a = spec.arch
    if a == "Linear2D":
        return {"f": (2, T)}
    if a == "MLP":
        return {"W": (2 * T, K), "b0": (K,), "v": (K,), "b1": (1,)}
    if a == "RBFNN":
        return {"c": (2, K, T), "b": (2, K), "v": (2, K), "b1": (1,)}
    if a == "FIRRBFNN":
        return {"f": (2, T), "c": (2, K, 2 * spec.M_prime + 1), "b": (2, K), "v": (2, K), "b1": (1,)}
    if a == "RCMLP1":
        return {"f": (2, T), "b0": (2,), "q": (2, K // 2), "b1": (1,)}
    if a == "RCMLP2":
        return {"f": (2, T), "b0": (1,), "q": (K,), "b1": (1,)}
    if a == "RCMLP3":
        return {"f": (2, T), "b0": (1,), "q": (K,), "c": (1,), "b1": (1,)}
    if a == "RCMLP4":
        return {"f": (2, T), "b0": (2,), "q": (2, K // 2), "c": (1,), "b1": (1,)}
    raise AssertionError(a)


def count_params(spec: EqualizerSpec) -> int:
    """Learnable parameter count under the complexity table's conventions."""
    M, K = spec.M, spec.K
    a = spec.arch
    if a == "Linear2D":
        return 2 * (2 * M + 1)
    if a == "MLP":
        return 4 * M * K + 4 * K + 1
    if a == "RBFNN":
        return 2 * K * (2 * M + 1) + 4 * K + 1
    if a == "FIRRBFNN":
        return 2 * (2 * M + 1) + 2 * K * (2 * spec.M_prime + 1) + 2 * K + 2 * K + 1
    if a == "RCMLP1":
        return 4 * M + K + 5
    if a == "RCMLP2":
        return 4 * M + K + 4
    if a == "RCMLP3":
        return 4 * M + K + 5
    if a == "RCMLP4":
        return 4 * M + K + 6
    raise AssertionError(a)


def check_params(spec: EqualizerSpec, params: ParameterSet) -> None:
    shapes = param_shapes(spec)
    if set(params) != set(shapes):
        raise ValueError(f"{spec.arch} expects parameters {sorted(shapes)}, got {sorted(params)}")
    for name, shape in shapes.items():
        if np.shape(params[name]) != shape:
            raise ValueError(f"{spec.arch}.{name}: shape {np.shape(params[name])} != {shape}")


def zeros_like_params(spec: EqualizerSpec) -> ParameterSet:
    return {k: np.zeros(s) for k, s in param_shapes(spec).items()}


def copy_params(params: ParameterSet) -> ParameterSet:
    return {k: np.array(v, dtype=float, copy=True) for k, v in params.items()}


# --------------------------------------------------------------------------
# basis functions


def _phi(basis, s):
    if basis == "gaussian":
        return np.exp(-s * s)
    if basis == "tanh":
        return np.tanh(s)
    return s


def _dphi(basis, s, phi):
    if basis == "gaussian":
        return -2.0 * s * phi
    if basis == "tanh":
        return 1.0 - phi * phi
    return np.ones_like(s)


def _unwindow(dwin: np.ndarray, length: int) -> np.ndarray:
    """Adjoint of sliding_window_view along the last axis (rows are windows)."""
    n, width = dwin.shape
    out = np.zeros(length)
    for j in range(width):
        out[j:j + n] += dwin[:, j]
    return out


def _rbf_forward(X, c, b, basis):
    # X: (n, d) windows of one reader, c: (K, d)
    diff = X[:, None, :] - c[None, :, :]
    D = np.sqrt(np.einsum("nkd,nkd->nk", diff, diff))
    s = D + b[None, :]
    return diff, D, s, _phi(basis, s)


def _rbf_backward(g, v, diff, D, s, phi, basis, want_dX=False):
    ds = (g[:, None] * v[None, :]) * _dphi(basis, s, phi)
    dv = g @ phi
    db = ds.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(D > 0, ds / D, 0.0)
    dc = -np.einsum("nk,nkd->kd", ratio, diff)
    dX = np.einsum("nk,nkd->nd", ratio, diff) if want_dX else None
    return dv, db, dc, dX


# --------------------------------------------------------------------------
# stream forward / backward


def _windows(r, M):
    return [sliding_window_view(r[l], 2 * M + 1) for l in range(2)]


def forward_stream(spec: EqualizerSpec, params: ParameterSet, r) -> tuple[np.ndarray, dict]:
    """Outputs for every fully supported position of the block ``r``."""
    r = np.asarray(r, dtype=float)
    C = context(spec)
    if r.ndim != 2 or r.shape[0] != 2 or r.shape[1] < 2 * C + 1:
        raise ValueError(f"input block must have shape (2, >= {2 * C + 1}), got {r.shape}")
    check_params(spec, params)
    p = params
    n_out = r.shape[1] - 2 * C
    X = _windows(r, spec.M)
    a = spec.arch
    cache = {"X": X, "n_out": n_out}

    if a == "Linear2D":
        y = X[0] @ p["f"][0] + X[1] @ p["f"][1]

    elif a == "MLP":
        Xv = np.concatenate(X, axis=1)
        h = np.tanh(Xv @ p["W"] + p["b0"])
        y = h @ p["v"] + p["b1"][0]
        cache.update(Xv=Xv, h=h)

    elif a in ("RBFNN", "FIRRBFNN"):
        if a == "FIRRBFNN":
            z = [X[l] @ p["f"][l] for l in range(2)]
            Z = [sliding_window_view(z[l], 2 * spec.M_prime + 1) for l in range(2)]
            cache["zlen"] = z[0].size
        else:
            Z = X
        y = np.full(Z[0].shape[0], p["b1"][0])
        rb = []
        for l in range(2):
            diff, D, s, phi = _rbf_forward(Z[l], p["c"][l], p["b"][l], spec.basis)
            y = y + phi @ p["v"][l]
            rb.append((diff, D, s, phi))
        cache["rb"] = rb

    else:
        Lq = _qlen(spec)
        H = hidden_context(spec)
        split = a in ("RCMLP1", "RCMLP4")
        if split:
            zs = [X[l] @ p["f"][l] + p["b0"][l] for l in range(2)]
        else:
            zs = [X[0] @ p["f"][0] + X[1] @ p["f"][1] + p["b0"][0]]
        hs = [np.tanh(z) for z in zs]
        qs = [p["q"][l] for l in range(2)] if split else [p["q"]]
        y = np.full(n_out, p["b1"][0])
        for h, q in zip(hs, qs):
            y = y + sliding_window_view(h, Lq)[:n_out] @ q
        if a in ("RCMLP3", "RCMLP4"):
            y = y + p["c"][0] * sum(z[H:H + n_out] for z in zs)
        cache.update(zs=zs, hs=hs, qs=qs, split=split, Lq=Lq, H=H)

    if a in ("Linear2D", "MLP", "RBFNN"):
        y = y[:n_out]
    return np.asarray(y, dtype=float), cache


def backward_stream(spec: EqualizerSpec, params: ParameterSet, cache: dict, dJ_dy) -> ParameterSet:
    """Parameter gradients of sum_i dJ_dy[i] * y_i."""
    g = np.asarray(dJ_dy, dtype=float)
    n_out = cache["n_out"]
    if g.shape != (n_out,):
        raise ValueError(f"dJ_dy must have shape ({n_out},), got {g.shape}")
    p = params
    X = cache["X"]
    a = spec.arch
    grads: ParameterSet = {}

    if a == "Linear2D":
        grads["f"] = np.stack([g @ X[l][:n_out] for l in range(2)])

    elif a == "MLP":
        h, Xv = cache["h"], cache["Xv"][:n_out]
        h = h[:n_out]
        grads["v"] = g @ h
        grads["b1"] = np.array([g.sum()])
        da = (g[:, None] * p["v"][None, :]) * (1.0 - h * h)
        grads["W"] = Xv.T @ da
        grads["b0"] = da.sum(axis=0)

    elif a in ("RBFNN", "FIRRBFNN"):
        fir = a == "FIRRBFNN"
        grads["b1"] = np.array([g.sum()])
        dv, db, dc = np.zeros_like(p["v"]), np.zeros_like(p["b"]), np.zeros_like(p["c"])
        df = np.zeros((2, spec.taps))
        for l in range(2):
            diff, D, s, phi = cache["rb"][l]
            dv[l], db[l], dc[l], dZ = _rbf_backward(g, p["v"][l], diff, D, s, phi, spec.basis, want_dX=fir)
            if fir:
                dz = _unwindow(dZ, cache["zlen"])
                df[l] = dz @ X[l]
        grads.update(v=dv, b=db, c=dc)
        if fir:
            grads["f"] = df

    else:
        zs, hs, qs = cache["zs"], cache["hs"], cache["qs"]
        Lq, H, split = cache["Lq"], cache["H"], cache["split"]
        grads["b1"] = np.array([g.sum()])
        dq = []
        dzs = []
        for z, h, q in zip(zs, hs, qs):
            hw = sliding_window_view(h, Lq)[:n_out]
            dq.append(g @ hw)
            dh = _unwindow(g[:, None] * q[None, :], z.size)
            dz = dh * (1.0 - h * h)
            if a in ("RCMLP3", "RCMLP4"):
                dz[H:H + n_out] += p["c"][0] * g
            dzs.append(dz)
        if a in ("RCMLP3", "RCMLP4"):
            grads["c"] = np.array([sum(g @ z[H:H + n_out] for z in zs)])
        if split:
            grads["q"] = np.stack(dq)
            grads["b0"] = np.array([dzs[0].sum(), dzs[1].sum()])
            grads["f"] = np.stack([dzs[l] @ X[l] for l in range(2)])
        else:
            grads["q"] = dq[0]
            grads["b0"] = np.array([dzs[0].sum()])
            grads["f"] = np.stack([dzs[0] @ X[l] for l in range(2)])
    return grads


def equalize(spec: EqualizerSpec, params: ParameterSet, r, chunk: int = 8192) -> np.ndarray:
    """Stream evaluation in chunks (bounded memory for the RBFNN family)."""
    r = np.asarray(r, dtype=float)
    C = context(spec)
    n_out = r.shape[1] - 2 * C
    if n_out <= chunk:
        return forward_stream(spec, params, r)[0]
    parts = []
    for start in range(0, n_out, chunk):
        stop = min(start + chunk, n_out)
        parts.append(forward_stream(spec, params, r[:, start:stop + 2 * C])[0])
    return np.concatenate(parts)


def _check_window(spec, window):
    window = np.asarray(window, dtype=float)
    C = context(spec)
    if window.shape != (2, 2 * C + 1):
        raise ValueError(f"{spec.arch} window must have shape (2, {2 * C + 1}), got {window.shape}")
    return window


def forward(spec: EqualizerSpec, params: ParameterSet, window) -> float:
    """Scalar output for one window of shape (2, 2*context(spec)+1)."""
    y, _ = forward_stream(spec, params, _check_window(spec, window))
    return float(y[0])


def backward(spec: EqualizerSpec, params: ParameterSet, window, dJ_dy: float) -> ParameterSet:
    _, cache = forward_stream(spec, params, _check_window(spec, window))
    return backward_stream(spec, params, cache, np.array([float(dJ_dy)]))


# --------------------------------------------------------------------------
# initialization


def _kmeans(points: np.ndarray, k: int, rng: np.random.Generator, iters: int = 25) -> np.ndarray:
    idx = rng.choice(points.shape[0], size=k, replace=points.shape[0] < k)
    cent = points[idx].copy()
    for _ in range(iters):
        d = ((points[:, None, :] - cent[None]) ** 2).sum(-1)
        lab = d.argmin(1)
        for j in range(k):
            sel = points[lab == j]
            if sel.size:
                cent[j] = sel.mean(0)
    return cent


def init_params(spec: EqualizerSpec, rng: np.random.Generator, sample_r=None,
                linear_taps=None, gain: float = 1.0, input_gain: float = 0.1) -> ParameterSet:
    """Initial parameters.

    ``sample_r`` (2, n) feeds k-means for centroids. ``linear_taps`` (2, 2M+1),
    typically a closed-form linear solution, replaces the scaled-delta FIR
    start; for the MLP and the bypass-free RC-MLPs it seeds a near-linear
    operating point of tanh at input gain ``input_gain``, and the FIR-RBFNN
    front filters are scaled by the same gain.
    """
    p = zeros_like_params(spec)
    T, M = spec.taps, spec.M
    delta = np.zeros((2, T))
    delta[:, M] = 0.5 * gain
    f0 = delta if linear_taps is None else np.asarray(linear_taps, dtype=float).reshape(2, T)
    a = spec.arch
    if a == "Linear2D":
        p["f"] = f0.copy()
    elif a == "MLP":
        fan = 2 * T
        p["W"] = rng.uniform(-1, 1, size=(fan, spec.K)) / np.sqrt(fan)
        p["v"] = rng.uniform(-0.1, 0.1, size=spec.K)
        if linear_taps is not None:
            # every hidden node sees the linear filter at small gain; v undoes the gain
            eps = input_gain
            p["W"] = 0.05 * p["W"] + eps * np.tile(f0.reshape(-1)[:, None], (1, spec.K))
            p["v"] = np.full(spec.K, 1.0 / (eps * spec.K)) + p["v"]
    elif a in ("RBFNN", "FIRRBFNN"):
        if a == "FIRRBFNN":
            # a small front gain keeps centroid distances on the scale of the
            # unit-width basis, so the network starts smooth
            p["f"] = f0 * (input_gain if linear_taps is not None else 1.0)
        p["v"] = rng.uniform(-0.1, 0.1, size=(2, spec.K))
        if sample_r is not None:
            sample_r = np.asarray(sample_r, dtype=float)
            X = _windows(sample_r, M)
            for l in range(2):
                pts = X[l]
                if a == "FIRRBFNN":
                    z = pts @ p["f"][l]
                    pts = sliding_window_view(z, 2 * spec.M_prime + 1)
                p["c"][l] = _kmeans(np.ascontiguousarray(pts[:4000]), spec.K, rng)
        else:
            p["c"] = rng.normal(size=p["c"].shape)
    else:
        p["f"] = f0.copy()
        p["q"] = rng.uniform(-0.1, 0.1, size=p["q"].shape)
        if a in ("RCMLP3", "RCMLP4"):
            p["c"] = np.ones(1)
        elif linear_taps is not None:
            # no bypass: run tanh near its linear range and let the center
            # q tap undo the gain, so the start reproduces the linear filter
            eps = input_gain
            p["f"] = eps * f0
            p["q"][..., p["q"].shape[-1] // 2] += 1.0 / eps
    return p


# --------------------------------------------------------------------------
# model file


def format_block(name: str, arr) -> list[str]:
    arr = np.asarray(arr, dtype=float)
    dims = " ".join(str(d) for d in arr.shape)
    lines = [f"param {name} {arr.ndim} {dims}".rstrip()]
    flat = arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr.reshape(1, -1)
    lines += [" ".join(f"{x:.9g}" for x in row) for row in flat]
    return lines


def save_model(path, spec: EqualizerSpec, params: ParameterSet, target=None,
               noise_var: float | None = None, extra: dict | None = None) -> None:
    check_params(spec, params)
    lines = [MODEL_FILE_HEADER]
    for key in ("arch", "M", "K", "M_prime", "basis", "activation"):
        lines.append(f"{key}={getattr(spec, key)}")
    if noise_var is not None:
        lines.append(f"noise_var={noise_var:.17g}")
    for k, v in (extra or {}).items():
        lines.append(f"{k}={v}")
    for name in param_shapes(spec):
        lines += format_block(name, params[name])
    if target is not None:
        lines += format_block("target", np.asarray(target.taps))
        lines.append(f"target_monic={int(target.monic)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_model(path):
    """Returns (spec, params, target or None, meta dict)."""
    from .trellis import PRTarget

    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != MODEL_FILE_HEADER:
        raise ValueError(f"{path}: not a {MODEL_FILE_HEADER!r} file")
    meta: dict[str, str] = {}
    blocks: dict[str, np.ndarray] = {}
    i = 1
    while i < len(lines):
        line = lines[i].strip()
        i += 1
        if not line:
            continue
        if line.startswith("param "):
            parts = line.split()
            name, ndim = parts[1], int(parts[2])
            shape = tuple(int(d) for d in parts[3:3 + ndim])
            nrows = shape[0] if ndim > 1 else 1
            vals = [float(x) for row in lines[i:i + nrows] for x in row.split()]
            i += nrows
            arr = np.array(vals, dtype=float)
            if arr.size != int(np.prod(shape)):
                raise ValueError(f"{path}: block {name} has {arr.size} values, expected {shape}")
            blocks[name] = arr.reshape(shape)
        elif "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
        else:
            raise ValueError(f"{path}: unrecognized line {line!r}")
    spec = EqualizerSpec(arch=meta.pop("arch"), M=int(meta.pop("M")), K=int(meta.pop("K")),
                         M_prime=int(meta.pop("M_prime")), basis=meta.pop("basis"),
                         activation=meta.pop("activation"))
    target = None
    if "target" in blocks:
        monic = bool(int(meta.pop("target_monic", "0")))
        taps = blocks.pop("target")
        target = PRTarget(tuple(taps), monic=monic and taps[0] == 1.0)
    check_params(spec, blocks)
    return spec, blocks, target, meta
