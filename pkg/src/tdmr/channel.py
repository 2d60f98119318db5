"""Synthetic two-reader TDMR channel and the sector dataset file format.

The readback of reader ``l`` at sample ``n`` is the superposition of the
responses of every bit cell within ``pulse_support_halflength`` samples. Each
cell response is the difference of the erf transition responses at its two
boundaries; every boundary carries its own down-track jitter and every cell
its own cross-track offset. Jitter is shared by the readers, white Gaussian
noise is per reader.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf

SECTOR_FILE_HEADER = "tdmr-sectors v1"

_ERF_SCALE = 2.0 * math.sqrt(math.log(2.0))


class SectorFileError(ValueError):
    """Base class for sector file parse errors."""


class MalformedHeaderError(SectorFileError):
    pass


class MalformedRowError(SectorFileError):
    pass


class LengthMismatchError(SectorFileError):
    pass


@dataclass(frozen=True)
class ChannelConfig:
    symbol_interval_T: float = 1.0
    downtrack_pulse_width: float = 1.6
    crosstrack_pulse_width: float = 40.0
    track_pitch: float = 85.0
    cts_fraction: float = 0.52
    reader_crosstrack_offsets: tuple[float, float] | None = None
    jitter_sigma_t: float = 0.25
    jitter_sigma_w: float = 5.0
    awgn_sigma: float = 0.05
    pulse_support_halflength: int = 10
    rng_seed: int = 0

    def __post_init__(self):
        if not self.symbol_interval_T > 0:
            raise ValueError("symbol_interval_T must be positive")
        for name in ("downtrack_pulse_width", "crosstrack_pulse_width", "track_pitch",
                     "jitter_sigma_t", "jitter_sigma_w", "awgn_sigma"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.cts_fraction <= 1.0:
            raise ValueError("cts_fraction must lie in [0, 1]")
        if self.pulse_support_halflength < 1:
            raise ValueError("pulse_support_halflength must be >= 1")
        if self.reader_crosstrack_offsets is not None and len(self.reader_crosstrack_offsets) != 2:
            raise ValueError("exactly two reader offsets are supported")

    @property
    def reader_offsets(self) -> tuple[float, float]:
        if self.reader_crosstrack_offsets is not None:
            a, b = self.reader_crosstrack_offsets
            return float(a), float(b)
        return 0.0, self.cts_fraction * self.track_pitch


@dataclass
class ReadbackSector:
    bits: np.ndarray
    adc: np.ndarray  # shape (2, len(bits))
    origin: str = "synthetic"
    seed: int | None = None

    def __post_init__(self):
        self.bits = check_bits(self.bits)
        self.adc = np.asarray(self.adc, dtype=float)
        if self.adc.shape != (2, self.bits.size):
            raise ValueError(
                f"adc shape {self.adc.shape} does not match two readers x {self.bits.size} bits")
        if not np.all(np.isfinite(self.adc)):
            raise ValueError("adc samples must be finite")

    def __len__(self):
        return self.bits.size


def check_bits(u) -> np.ndarray:
    """Validate a +-1 bit sequence and return it as an int8 array."""
    u = np.asarray(u)
    if u.ndim != 1 or u.size == 0:
        raise ValueError("bit sequence must be a nonempty 1-D sequence")
    if not np.all((u == 1) | (u == -1)):
        raise ValueError("bits must be -1 or +1")
    return u.astype(np.int8)


def random_bits(n: int, rng: np.random.Generator) -> np.ndarray:
    return (2 * rng.integers(0, 2, size=n) - 1).astype(np.int8)


def transitions(u) -> np.ndarray:
    """Transition sequence b_n = (u_n - u_{n-1})/2 with b_0 = 0."""
    u = check_bits(u).astype(np.int64)
    b = np.zeros(u.size, dtype=np.int64)
    b[1:] = (u[1:] - u[:-1]) // 2
    return b


def transition_response(t, w, cfg: ChannelConfig):
    """erf step down-track times a Gaussian cross-track window."""
    t = np.asarray(t, dtype=float)
    w = np.asarray(w, dtype=float)
    pw = cfg.downtrack_pulse_width
    if pw > 0:
        down = 0.5 * (1.0 + erf(t * _ERF_SCALE / pw))
    else:
        down = np.where(t > 0, 1.0, np.where(t < 0, 0.0, 0.5))
    sw = cfg.crosstrack_pulse_width
    if sw > 0:
        cross = np.exp(-(w ** 2) / (2.0 * sw ** 2))
    else:
        cross = np.where(w == 0, 1.0, 0.0)
    return down * cross


def bit_response(t_offset, w_offset, cfg: ChannelConfig):
    """p(t, w) = h(t, w) - h(t - T, w)."""
    return (transition_response(t_offset, w_offset, cfg)
            - transition_response(np.asarray(t_offset) - cfg.symbol_interval_T, w_offset, cfg))


def discrete_response(cfg: ChannelConfig, reader: int) -> np.ndarray:
    """Taps of the discretized per-reader response, index m = -S..S.

    Includes the factor 1/2 from the unit transition amplitude, so that the
    noiseless readback is exactly ``np.convolve(u, taps)`` (centered).
    """
    S = cfg.pulse_support_halflength
    m = np.arange(-S, S + 1) * cfg.symbol_interval_T
    w = cfg.reader_offsets[reader]
    return 0.5 * bit_response(m, w, cfg)


def sample_truncated_gaussian(sigma: float, bound: float, rng: np.random.Generator,
                              size=None):
    """Gaussian(0, sigma^2) conditioned on |x| < bound, by rejection."""
    if not bound > 0:
        raise ValueError("bound must be positive")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if size is None:
        if sigma == 0:
            return 0.0
        while True:
            x = rng.normal(0.0, sigma)
            if abs(x) < bound:
                return x
    out = np.zeros(size, dtype=float)
    if sigma == 0:
        return out
    flat = out.reshape(-1)
    todo = np.arange(flat.size)
    while todo.size:
        x = rng.normal(0.0, sigma, size=todo.size)
        ok = np.abs(x) < bound
        flat[todo[ok]] = x[ok]
        todo = todo[~ok]
    return out


def truncated_gaussian_variance(sigma: float, bound: float) -> float:
    """Closed-form variance of N(0, sigma^2) truncated to (-bound, bound)."""
    if sigma == 0:
        return 0.0
    a = bound / sigma
    pdf = math.exp(-0.5 * a * a) / math.sqrt(2 * math.pi)
    mass = math.erf(a / math.sqrt(2.0))
    return sigma ** 2 * (1.0 - 2.0 * a * pdf / mass)


def synthesize_sector(u, cfg: ChannelConfig, seed: int | None = None) -> ReadbackSector:
    """Two-reader readback for the written bits ``u``.

    ``seed`` overrides ``cfg.rng_seed``. Jitter is drawn once per bit
    boundary and shared by both readers; AWGN is independent per reader.
    """
    u = check_bits(u)
    seed = cfg.rng_seed if seed is None else seed
    S = cfg.pulse_support_halflength
    T = cfg.symbol_interval_T
    N = u.size
    jit_ss, *noise_ss = np.random.SeedSequence(seed).spawn(3)
    jit_rng = np.random.default_rng(jit_ss)

    # warm-up bits replicate the sector edges (u_{-1} = u_0 convention)
    up = np.concatenate([np.full(S, u[0]), u, np.full(S + 1, u[-1])]).astype(float)
    # boundary k of the padded sequence sits at padded index k
    dt = sample_truncated_gaussian(cfg.jitter_sigma_t, T / 2, jit_rng, size=up.size)
    dw_bound = cfg.track_pitch / 2 if cfg.track_pitch > 0 else 1.0
    dw = sample_truncated_gaussian(cfg.jitter_sigma_w, dw_bound, jit_rng, size=up.size)

    n = np.arange(N) + S  # padded index of emitted sample
    adc = np.empty((2, N))
    for l, w_l in enumerate(cfg.reader_offsets):
        acc = np.zeros(N)
        for m in range(-S, S + 1):
            k = n - m
            # cell k lies between boundaries k and k+1; its cross-track wander
            # scales the whole cell so that saturated cells cancel exactly
            lead = transition_response(m * T + dt[k], w_l + dw[k], cfg)
            trail = transition_response((m - 1) * T + dt[k + 1], w_l + dw[k], cfg)
            acc += 0.5 * up[k] * (lead - trail)
        if cfg.awgn_sigma > 0:
            acc += np.random.default_rng(noise_ss[l]).normal(0.0, cfg.awgn_sigma, size=N)
        adc[l] = acc
    return ReadbackSector(bits=u, adc=adc, origin="synthetic", seed=seed)


def generate_dataset(cfg: ChannelConfig, sectors: int, bits_per_sector: int,
                     seed: int | None = None) -> list[ReadbackSector]:
    """Independently seeded random sectors; deterministic in (cfg, seed)."""
    if sectors < 1 or bits_per_sector < 1:
        raise ValueError("sectors and bits_per_sector must be >= 1")
    seed = cfg.rng_seed if seed is None else seed
    children = np.random.SeedSequence(seed).spawn(sectors)
    out = []
    for child in children:
        bit_ss, chan_ss = child.spawn(2)
        u = random_bits(bits_per_sector, np.random.default_rng(bit_ss))
        chan_seed = int(chan_ss.generate_state(1)[0])
        out.append(synthesize_sector(u, cfg, seed=chan_seed))
    return out


def save_dataset(path, sectors: Sequence[ReadbackSector]) -> None:
    path = Path(path)
    with path.open("w") as fh:
        fh.write(SECTOR_FILE_HEADER + "\n")
        for i, s in enumerate(sectors):
            fh.write(f"sector {i} {len(s)}\n")
            rows = [f"{int(b)} {x:.9g} {y:.9g}\n" for b, x, y in zip(s.bits, s.adc[0], s.adc[1])]
            fh.writelines(rows)


def _parse_sector_block(idx, length, rows: list[str], first_line: int) -> ReadbackSector:
    bits = np.empty(length, dtype=np.int8)
    adc = np.empty((2, length))
    for j, line in enumerate(rows):
        parts = line.split()
        if len(parts) != 3:
            raise LengthMismatchError(
                f"sector {idx}, row {j} (line {first_line + j}): expected 'u r0 r1', got {line.strip()!r}")
        try:
            b = int(parts[0])
            adc[0, j] = float(parts[1])
            adc[1, j] = float(parts[2])
        except ValueError:
            raise MalformedRowError(
                f"sector {idx}, row {j} (line {first_line + j}): unparseable row {line.strip()!r}") from None
        if b not in (-1, 1):
            raise MalformedRowError(f"sector {idx}, row {j}: bit must be -1 or +1, got {b}")
        bits[j] = b
    if not np.all(np.isfinite(adc)):
        raise MalformedRowError(f"sector {idx}: non-finite ADC sample")
    return ReadbackSector(bits=bits, adc=adc, origin="ingested")


def load_dataset(path) -> list[ReadbackSector]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"sector file not found: {path}")
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != SECTOR_FILE_HEADER:
        raise MalformedHeaderError(f"{path}: first line must be {SECTOR_FILE_HEADER!r}")
    sectors = []
    pos = 1
    while pos < len(lines):
        line = lines[pos]
        if not line.strip():
            pos += 1
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] != "sector":
            raise MalformedHeaderError(
                f"{path}: line {pos + 1}: expected 'sector <index> <length>', got {line.strip()!r}")
        try:
            idx, length = int(parts[1]), int(parts[2])
        except ValueError:
            raise MalformedHeaderError(f"{path}: line {pos + 1}: bad sector header {line.strip()!r}") from None
        if length < 1:
            raise MalformedHeaderError(f"sector {idx}: length must be >= 1")
        block = lines[pos + 1: pos + 1 + length]
        # a short block ends at the next sector header or end of file
        for j, row in enumerate(block):
            if row.startswith("sector"):
                block = block[:j]
                break
        if len(block) != length:
            raise LengthMismatchError(
                f"sector {idx}: header declares {length} rows but {len(block)} present")
        sectors.append(_parse_sector_block(idx, length, block, pos + 2))
        pos += 1 + length
    return sectors


def concat_bits(sectors: Iterable[ReadbackSector]) -> np.ndarray:
    return np.concatenate([s.bits for s in sectors])
