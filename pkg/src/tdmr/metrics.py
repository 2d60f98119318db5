"""BER, LLR/bit mutual information, evaluation reports."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import digamma

from . import equalizers as eq
from .channel import ReadbackSector, check_bits
from .training import ce_loss, start_state_of, target_windows, valid_range
from .trellis import PRTarget, build_trellis, sova_trace

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("arch", "K", "ber", "complexity", "mi_bits", "loss")


def ber(estimated, truth) -> float:
    a = check_bits(estimated)
    b = check_bits(truth)
    if a.shape != b.shape:
        raise ValueError("ber needs sequences of equal length")
    return float(np.count_nonzero(a != b)) / a.size


def _kth_neighbor_distance(xs: np.ndarray, k: int) -> np.ndarray:
    """Distance from each sorted point to its k-th nearest other point (1-D)."""
    n = xs.size
    padded = np.concatenate([np.full(k, -np.inf), xs, np.full(k, np.inf)])
    i = np.arange(n) + k
    best = np.full(n, np.inf)
    for j in range(k + 1):
        left = xs - padded[i - k + j]
        right = padded[i + j] - xs
        best = np.minimum(best, np.maximum(left, right))
    return best


def mutual_information(llr, u, k: int = 3, seed: int = 0) -> float:
    """Nearest-neighbor estimate of I(llr; u) in nats for a binary label.

    Per sample: the distance to the k-th neighbor of the same label along the
    LLR axis sets a radius; the number of samples of either label inside it
    enters through digamma terms. Raw value, may dip slightly below zero.
    """
    x = np.asarray(llr, dtype=float).copy()
    lab = check_bits(u)
    if x.shape != lab.shape:
        raise ValueError("llr and bits must have equal length")
    if k < 1:
        raise ValueError("k must be >= 1")
    if x.size < 10 * k:
        raise ValueError(f"need at least {10 * k} samples for k={k}")
    if not np.all(np.isfinite(x)):
        raise ValueError("llr must be finite")
    spread = float(np.max(x) - np.min(x))
    if spread == 0.0:
        log.warning("all LLRs identical; mutual information defined as 0")
        return 0.0
    # break exact ties (e.g. saturated or quantized LLRs) reproducibly
    x += 1e-12 * spread * np.random.default_rng(seed).standard_normal(x.size)

    all_sorted = np.sort(x)
    N = x.size
    psi_label, psi_k, psi_m = [], [], []
    for c in (-1, 1):
        xc = np.sort(x[lab == c])
        nc = xc.size
        if nc < 2:
            continue
        kc = min(k, nc - 1)
        d = _kth_neighbor_distance(xc, kc)
        m = (np.searchsorted(all_sorted, xc + d, side="right")
             - np.searchsorted(all_sorted, xc - d, side="left") - 1)
        psi_label.append(np.full(nc, digamma(nc)))
        psi_k.append(np.full(nc, digamma(kc)))
        psi_m.append(digamma(np.maximum(m, 1)))
    if not psi_m:
        return 0.0
    return float(digamma(N) - np.mean(np.concatenate(psi_label))
                 + np.mean(np.concatenate(psi_k)) - np.mean(np.concatenate(psi_m)))


def biawgn_mi_bits(a: float, sigma: float = 1.0) -> float:
    """I(X; aX + N(0, sigma^2)) for equiprobable X = +-1, by quadrature."""
    from scipy.integrate import quad
    from scipy.stats import norm

    def integrand(y):
        p1 = norm.pdf(y, a, sigma)
        p0 = norm.pdf(y, -a, sigma)
        py = 0.5 * (p1 + p0)
        out = 0.0
        for p in (p1, p0):
            if p > 0:
                out += 0.5 * p * math.log2(p / py)
        return out

    lim = abs(a) + 12 * sigma
    return quad(integrand, -lim, lim, limit=200, points=[-a, 0.0, a])[0]


def bootstrap_ci(values, level: float = 0.9, n_boot: int = 10000, seed: int = 0):
    """Percentile bootstrap interval for the mean."""
    v = np.asarray(values, dtype=float)
    rng = np.random.default_rng(seed)
    means = v[rng.integers(0, v.size, size=(n_boot, v.size))].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)


@dataclass
class MetricsReport:
    arch: str
    ber: float
    mi_nats: float
    bit_count: int
    param_count: int
    loss: float
    K: str = "N/A"
    mse: float = float("nan")
    errors: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ber <= 1.0:
            raise ValueError("ber out of range")

    @property
    def mi_bits(self) -> float:
        return self.mi_nats / math.log(2.0)

    @property
    def mi_clamped(self) -> bool:
        return self.mi_nats < 0

    def row(self) -> dict:
        return {"arch": self.arch, "K": self.K, "ber": f"{self.ber:.9g}",
                "complexity": str(self.param_count), "mi_bits": f"{max(self.mi_bits, 0.0):.9g}",
                "loss": f"{self.loss:.9g}"}


@dataclass
class Detection:
    llr: np.ndarray
    bits: np.ndarray
    y: np.ndarray
    y_ref: np.ndarray


def detect(spec: eq.EqualizerSpec, params, g: PRTarget, sector: ReadbackSector,
           noise_var: float) -> Detection:
    """Equalize and soft-detect every scored position of one sector.

    The first positions (equalizer context or target memory, whichever is
    longer) are pinned to the written bits and not scored.
    """
    C, L = eq.context(spec), len(g)
    lo, hi = valid_range(len(sector), C, L)
    y = eq.equalize(spec, params, sector.adc[:, lo - C:hi + C])
    hist = sector.bits[lo - L + 1:lo][::-1] if L > 1 else []
    trace = sova_trace(y, build_trellis(g), noise_var, start_state_of(hist))
    u = sector.bits[lo:hi]
    y_ref = target_windows(u, hist, L) @ g.array
    return Detection(trace.llr, u, y, y_ref)


def evaluate(spec: eq.EqualizerSpec, params, g: PRTarget, dataset: Sequence[ReadbackSector],
             noise_var: float, label: str | None = None, k: int = 3) -> MetricsReport:
    dets = [detect(spec, params, g, s, noise_var) for s in dataset]
    llr = np.concatenate([d.llr for d in dets])
    u = np.concatenate([d.bits for d in dets])
    hard = np.where(llr >= 0, 1, -1)
    errors = int(np.count_nonzero(hard != u))
    resid = np.concatenate([d.y - d.y_ref for d in dets])
    K = "N/A" if spec.arch == "Linear2D" else str(spec.K)
    return MetricsReport(arch=label or spec.arch, ber=errors / u.size,
                         mi_nats=mutual_information(llr, u, k=k), bit_count=int(u.size),
                         param_count=eq.count_params(spec), loss=ce_loss(u, llr),
                         K=K, mse=float(np.mean(resid ** 2)), errors=errors)


def write_report_csv(path, rows: Sequence[dict], config_hash: str | None = None) -> None:
    with Path(path).open("w", newline="") as fh:
        if config_hash is not None:
            fh.write(f"# config_sha256={config_hash}\n")
        w = csv.DictWriter(fh, fieldnames=list(REPORT_COLUMNS), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: r[c] for c in REPORT_COLUMNS})


def read_report_csv(path) -> tuple[list[dict], str | None]:
    lines = Path(path).read_text().splitlines()
    cfg_hash = None
    body = []
    for line in lines:
        if line.startswith("#"):
            if line.startswith("# config_sha256="):
                cfg_hash = line.split("=", 1)[1].strip()
            continue
        body.append(line)
    reader = csv.DictReader(body)
    if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
        raise ValueError(f"{path}: unexpected CSV header {reader.fieldnames}")
    return list(reader), cfg_hash
