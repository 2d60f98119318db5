"""Config-driven experiments: dataset generation, training, evaluation, sweeps.

Config files are flat ``key = value`` text. Keys carry a dotted section
prefix (``channel.``, ``dataset.``, ``equalizer.``, ``training.``) except the
top-level ``output_dir``, ``replication_seeds`` and ``label``. Unknown keys
are errors.
"""
from __future__ import annotations

import dataclasses
import hashlib
import logging
import re
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import equalizers as eq
from .channel import ChannelConfig, ReadbackSector, generate_dataset, load_dataset, save_dataset
from .metrics import MetricsReport, evaluate, write_report_csv
from .training import TrainConfig, estimate_noise_var, fit, solve_lmmse, solve_output_layer
from .trellis import PRTarget

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class DatasetMissingError(FileNotFoundError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    sectors: int = 20
    bits_per_sector: int = 40000
    train_fraction: float = 0.5
    path: str | None = None
    generate: bool = True

    def __post_init__(self):
        if self.sectors < 1:
            raise ValueError("dataset.sectors must be >= 1")
        if self.bits_per_sector < 1:
            raise ValueError("dataset.bits_per_sector must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("dataset.train_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class ExperimentConfig:
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    equalizer: eq.EqualizerSpec = field(default_factory=lambda: eq.EqualizerSpec("Linear2D"))
    training: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "out"
    replication_seeds: tuple[int, ...] = (0,)
    label: str | None = None

    def __post_init__(self):
        if not self.replication_seeds:
            raise ValueError("replication_seeds must not be empty")
        if len(set(self.replication_seeds)) != len(self.replication_seeds):
            raise ValueError("replication_seeds must be distinct")


SECTIONS = {"channel": ChannelConfig, "dataset": DatasetConfig,
            "equalizer": eq.EqualizerSpec, "training": TrainConfig}
TOP_LEVEL = {"output_dir": "str", "replication_seeds": "tuple[int, ...]", "label": "str | None"}


# --------------------------------------------------------------------------
# config text


def _parse_bool(text: str) -> bool:
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(text: str, type_str: str):
    optional = type_str.endswith("| None")
    base = type_str.replace("| None", "").strip()
    if optional and text.lower() in ("none", ""):
        return None
    if base.startswith("tuple["):
        inner = int if "int" in base else float
        return tuple(inner(x) for x in re.split(r"[,\s]+", text.strip("[]() ")) if x)
    if base == "bool":
        return _parse_bool(text)
    if base == "int":
        return int(text)
    if base == "float":
        return float(text)
    return text


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return str(value)


def _field_types(cls) -> dict[str, str]:
    return {f.name: str(f.type) for f in dataclasses.fields(cls)}


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    """Build an ExperimentConfig from flat ``key = value`` lines."""
    values: dict[str, dict] = {s: {} for s in SECTIONS}
    top: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, val = (p.strip() for p in line.split("=", 1))
        try:
            if "." in key:
                section, name = key.split(".", 1)
                if section not in SECTIONS:
                    raise ConfigError(f"{source}:{lineno}: unknown section {section!r}")
                types = _field_types(SECTIONS[section])
                if name not in types:
                    raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
                if name in values[section]:
                    raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
                values[section][name] = _convert(val, types[name])
            else:
                if key not in TOP_LEVEL:
                    raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
                top[key] = _convert(val, TOP_LEVEL[key])
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    try:
        parts = {s: SECTIONS[s](**values[s]) for s in SECTIONS if s != "equalizer"}
        parts["equalizer"] = eq.EqualizerSpec(**{"arch": "Linear2D", **values["equalizer"]})
        return ExperimentConfig(**parts, **top)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, str(path))


def config_lines(cfg: ExperimentConfig) -> list[str]:
    """Every resolved key, sorted; the canonical form used for hashing."""
    out = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            out.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
    for key in TOP_LEVEL:
        out.append(f"{key} = {_format(getattr(cfg, key))}")
    return sorted(out)


def config_text(cfg: ExperimentConfig) -> str:
    return "\n".join(config_lines(cfg)) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    """sha256 of the canonical key list; ``output_dir`` is excluded so that
    the same experiment written to two places carries the same hash."""
    lines = [line for line in config_lines(cfg) if not line.startswith("output_dir ")]
    return hashlib.sha256(("\n".join(lines) + "\n").encode()).hexdigest()


# --------------------------------------------------------------------------
# labels and complexity table

_ARCH_LABELS = {"MLP": "MLP", "RBFNN": "RBFNN", "FIRRBFNN": "FIR-RBFNN", "RCMLP1": "RC-MLP1",
                "RCMLP2": "RC-MLP2", "RCMLP3": "RC-MLP3", "RCMLP4": "RC-MLP4"}


def _fmt_taps(taps) -> str:
    return ",".join(f"{t:g}" for t in taps)


def method_label(cfg: ExperimentConfig) -> str:
    """Row name in the style of the reference comparison table."""
    if cfg.label:
        return cfg.label
    spec, t = cfg.equalizer, cfg.training
    if spec.arch == "Linear2D":
        if t.loss == "CE":
            name = "2D-LECE"
        elif t.fixed_target is not None:
            name = f"2D-LMMSE with fixed [{_fmt_taps(t.fixed_target)}] target"
        else:
            name = "2D-LMMSE"
        if spec.M != 5:
            name += f" with {spec.taps} Taps per ADC"
        return name
    name = _ARCH_LABELS[spec.arch]
    if spec.arch in ("RBFNN", "FIRRBFNN") and spec.basis != "gaussian":
        name += f", {spec.basis.capitalize()} Basis"
    if t.loss == "MSE":
        name += " (MSE)"
    return name


@dataclass(frozen=True)
class ComplexityRow:
    label: str
    spec: eq.EqualizerSpec | None
    reference: int
    note: str = ""

    @property
    def K(self) -> str:
        if self.spec is None or self.spec.arch == "Linear2D":
            return "N/A"
        return str(self.spec.K)

    @property
    def ours(self) -> int | None:
        return None if self.spec is None else eq.count_params(self.spec)


def complexity_rows() -> list[ComplexityRow]:
    S = eq.EqualizerSpec
    rows = [
        ComplexityRow("2D-LMMSE with fixed [3,7,1] target", S("Linear2D", M=5), 22),
        ComplexityRow("2D-LMMSE", S("Linear2D", M=5), 22),
        ComplexityRow("2D-LECE", S("Linear2D", M=5), 22),
        ComplexityRow("2D-LECE with 21 Taps per ADC", S("Linear2D", M=10), 42),
    ]
    rows += [ComplexityRow("RBFNN", S("RBFNN", M=5, K=k), p) for k, p in ((6, 157), (20, 521), (30, 781))]
    rows += [
        ComplexityRow("FIR-RBFNN, Gaussian Basis", S("FIRRBFNN", M=5, K=6, M_prime=2), 107),
        ComplexityRow("FIR RBFNN, Tanh Basis", S("FIRRBFNN", M=5, K=6, M_prime=2, basis="tanh"), 107),
        ComplexityRow("RC-FIR-RBFNN, Linear Basis", None, 41, "architecture not modeled"),
        ComplexityRow("RC-FIR-RBFNN, Gaussian Basis", None, 41, "architecture not modeled"),
        ComplexityRow("MLP", S("MLP", M=5, K=6), 145),
    ]
    rows += [ComplexityRow("RC-MLP1", S("RCMLP1", M=5, K=k), p)
             for k, p in ((6, 31), (10, 35), (14, 39), (18, 43))]
    rows += [
        ComplexityRow("RC-MLP2", S("RCMLP2", M=5, K=9), 34, "reference count is one above the accounting"),
        ComplexityRow("RC-MLP3", S("RCMLP3", M=5, K=9), 35, "reference count is one above the accounting"),
        ComplexityRow("RC-MLP4", S("RCMLP4", M=5, K=18), 44),
    ]
    return rows


def format_complexity_table(rows: Sequence[ComplexityRow] | None = None) -> str:
    rows = complexity_rows() if rows is None else rows
    lines = [f"{'architecture':<36} {'K':>4} {'ours':>6} {'ref':>6}  status"]
    for r in rows:
        ours = "-" if r.ours is None else str(r.ours)
        if r.ours is None:
            status = f"FLAG: {r.note}"
        elif r.ours == r.reference:
            status = "match"
        else:
            status = f"FLAG ({r.ours - r.reference:+d}): {r.note}" if r.note else f"MISMATCH ({r.ours - r.reference:+d})"
        lines.append(f"{r.label:<36} {r.K:>4} {ours:>6} {r.reference:>6}  {status}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# datasets


def replication_seed(base: int, rep: int) -> int:
    return int(np.random.SeedSequence([base, rep]).generate_state(1)[0])


def get_dataset(cfg: ExperimentConfig, rep: int = 0) -> list[ReadbackSector]:
    """Sectors for one replication.

    With ``dataset.path`` set the file is loaded (and generated first when
    missing and generation is enabled); every replication then shares it.
    Otherwise sectors are synthesized from a seed derived from the channel
    seed and the replication seed.
    """
    d = cfg.dataset
    if d.path:
        path = Path(d.path)
        if not path.exists():
            if not d.generate:
                raise DatasetMissingError(
                    f"dataset file {path} does not exist; run 'tdmr generate' with this config "
                    f"or set dataset.generate = true")
            write_dataset(cfg, path)
        sectors = load_dataset(path)
        if len(sectors) < 2:
            raise ConfigError(f"{path}: need at least 2 sectors for a train/test split")
        return sectors
    seed = replication_seed(cfg.channel.rng_seed, rep)
    return generate_dataset(cfg.channel, d.sectors, d.bits_per_sector, seed=seed)


def write_dataset(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    d = cfg.dataset
    sectors = generate_dataset(cfg.channel, d.sectors, d.bits_per_sector, seed=cfg.channel.rng_seed)
    save_dataset(path, sectors)
    # the sector format has a fixed header, so provenance goes to a sidecar
    Path(str(path) + ".config").write_text(f"# config_sha256={config_hash(cfg)}\n" + config_text(cfg))
    return path


def split(sectors: Sequence[ReadbackSector], train_fraction: float):
    """Whole-sector split, training sectors first."""
    n = len(sectors)
    if n < 2:
        raise ConfigError("need at least 2 sectors for a train/test split")
    n_train = min(max(int(round(train_fraction * n)), 1), n - 1)
    return list(sectors[:n_train]), list(sectors[n_train:])


# --------------------------------------------------------------------------
# one replication


@dataclass
class TrainedModel:
    spec: eq.EqualizerSpec
    params: eq.ParameterSet
    target: PRTarget
    noise_var: float
    loss_history: list[float]


def train_model(cfg: ExperimentConfig, train: Sequence[ReadbackSector], rep: int = 0,
                log_line: Callable[[str], None] | None = None) -> TrainedModel:
    """Closed-form linear baseline, then SGD per the training config.

    SGD runs warm-start from the closed-form equalizer and target; MSE runs of
    the linear equalizer start from a scaled delta so that the SGD solution
    can be compared against the closed form. RBF networks get least-squares
    output weights over their k-means hidden layer before SGD.
    """
    spec, t = cfg.equalizer, cfg.training
    fixed = PRTarget(tuple(t.fixed_target)) if t.fixed_target is not None else None
    p_lin, g_lin = solve_lmmse(train, spec.M, t.target_len, fixed_target=fixed)
    if spec.arch == "Linear2D" and t.solver == "closed_form":
        nv = estimate_noise_var(spec, p_lin, g_lin, train)
        return TrainedModel(spec, p_lin, g_lin, nv, [])
    if t.solver == "closed_form":
        raise ConfigError("training.solver = closed_form only applies to Linear2D")

    ss = np.random.SeedSequence([t.seed, rep])
    init_ss, shuffle_ss = ss.spawn(2)
    rng = np.random.default_rng(init_ss)
    warm = None if (spec.arch == "Linear2D" and t.loss == "MSE") else p_lin["f"]
    p0 = eq.init_params(spec, rng, sample_r=train[0].adc, linear_taps=warm,
                        input_gain=t.input_gain)
    if spec.arch in ("RBFNN", "FIRRBFNN"):
        p0 = solve_output_layer(spec, p0, g_lin, train)
    run_cfg = replace(t, seed=int(shuffle_ss.generate_state(1)[0]),
                      adapt_target=t.adapt_target and fixed is None,
                      target_len=len(g_lin))
    report = fit(spec, p0, train, g_lin, run_cfg, log_line=log_line)
    if t.loss == "CE":
        nv = report.noise_var
    else:
        nv = estimate_noise_var(spec, report.final_params, report.final_target, train)
    return TrainedModel(spec, report.final_params, report.final_target, nv, report.loss_history)


@dataclass
class ReplicationResult:
    seed: int
    report: MetricsReport
    model: TrainedModel
    log_lines: list[str]


def run_replication(cfg: ExperimentConfig, rep: int) -> ReplicationResult:
    sectors = get_dataset(cfg, rep)
    train, test = split(sectors, cfg.dataset.train_fraction)
    lines: list[str] = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        model = train_model(cfg, train, rep, log_line=lines.append)
    report = evaluate(model.spec, model.params, model.target, test, model.noise_var,
                      label=f"{method_label(cfg)} [seed {rep}]")
    return ReplicationResult(rep, report, model, lines)


def _run_replication_star(args):
    return run_replication(*args)


def mean_row(label: str, reports: Sequence[MetricsReport]) -> dict:
    first = reports[0]
    mi = float(np.mean([r.mi_bits for r in reports]))
    return {"arch": label, "K": first.K, "ber": f"{np.mean([r.ber for r in reports]):.9g}",
            "complexity": str(first.param_count), "mi_bits": f"{max(mi, 0.0):.9g}",
            "loss": f"{np.mean([r.loss for r in reports]):.9g}"}


@dataclass
class RunResult:
    config: ExperimentConfig
    label: str
    replications: list[ReplicationResult]
    rows: list[dict]
    out_dir: Path

    @property
    def mean(self) -> dict:
        return self.rows[-1]

    @property
    def bers(self) -> np.ndarray:
        return np.array([r.report.ber for r in self.replications])

    @property
    def mis(self) -> np.ndarray:
        return np.array([r.report.mi_bits for r in self.replications])


def run_experiment(cfg: ExperimentConfig, out_dir=None, threads: int = 1) -> RunResult:
    """Train and evaluate once per replication seed and write the outputs.

    Writes ``report.csv`` (one row per seed plus a mean row), and per seed a
    model file and a training log. Row order follows ``replication_seeds``
    whatever the completion order of worker processes.
    """
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, rep) for rep in cfg.replication_seeds]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_replication_star, jobs))
    else:
        results = [run_replication(*j) for j in jobs]

    h = config_hash(cfg)
    label = method_label(cfg)
    rows = [r.report.row() for r in results] + [mean_row(label, [r.report for r in results])]
    (out / "config.txt").write_text(f"# config_sha256={h}\n" + config_text(cfg))
    write_report_csv(out / "report.csv", rows, h)
    for r in results:
        m = r.model
        eq.save_model(out / f"model_seed{r.seed}.txt", m.spec, m.params, m.target, m.noise_var,
                      extra={"config_sha256": h, "label": label, "replication_seed": r.seed})
        (out / f"train_seed{r.seed}.log").write_text(
            f"# config_sha256={h}\n" + "".join(line + "\n" for line in r.log_lines))
    return RunResult(cfg, label, results, rows, out)


# --------------------------------------------------------------------------
# sweeps


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "-", text).strip("-").lower()


def write_svg_scatter(path, points: Sequence[tuple[str, float, float]]) -> None:
    """Minimal BER-vs-complexity scatter with labelled points."""
    W, H, pad = 640, 420, 60
    xs = [p[1] for p in points]
    ys = [p[2] for p in points]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1e-6

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (W - 2 * pad)

    def py(y):
        return H - pad - (y - y0) / (y1 - y0) * (H - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">',
             f'<rect width="{W}" height="{H}" fill="white"/>',
             f'<line x1="{pad}" y1="{H - pad}" x2="{W - pad}" y2="{H - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{H - pad}" stroke="black"/>',
             f'<text x="{W / 2}" y="{H - 15}" text-anchor="middle">complexity (parameters)</text>',
             f'<text x="15" y="{H / 2}" transform="rotate(-90 15 {H / 2})" text-anchor="middle">BER</text>',
             f'<text x="{pad}" y="{H - pad + 18}" text-anchor="middle" font-size="11">{x0:g}</text>',
             f'<text x="{W - pad}" y="{H - pad + 18}" text-anchor="middle" font-size="11">{x1:g}</text>',
             f'<text x="{pad - 5}" y="{H - pad}" text-anchor="end" font-size="11">{y0:.4g}</text>',
             f'<text x="{pad - 5}" y="{pad}" text-anchor="end" font-size="11">{y1:.4g}</text>']
    for label, x, y in points:
        parts.append(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="4" fill="steelblue"/>')
        parts.append(f'<text x="{px(x) + 6:.1f}" y="{py(y) - 6:.1f}" font-size="11">{label}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


@dataclass
class SweepResult:
    runs: list[RunResult]
    rows: list[dict]
    points: list[tuple[str, int, float]]


def run_sweep(configs: Sequence[ExperimentConfig], out_dir, threads: int = 1,
              svg: bool = False) -> SweepResult:
    """One run per config; combined table and (complexity, BER) plot data."""
    if len(configs) < 2:
        raise ConfigError("a sweep needs at least 2 configs")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = []
    for i, cfg in enumerate(configs):
        sub = out / f"{i:02d}-{_slug(method_label(cfg))}"
        runs.append(run_experiment(cfg, sub, threads=threads))
    order = sorted(range(len(runs)), key=lambda i: (int(runs[i].mean["complexity"]), i))
    rows = [runs[i].mean for i in order]
    h = hashlib.sha256("".join(config_hash(r.config) for r in runs).encode()).hexdigest()
    write_report_csv(out / "sweep.csv", rows, h)
    points = [(r["arch"], int(r["complexity"]), float(r["ber"])) for r in rows]
    with (out / "plot_data.csv").open("w") as fh:
        fh.write(f"# config_sha256={h}\n")
        fh.write("label,complexity,ber\n")
        for label, x, y in points:
            fh.write(f"{label},{x},{y:.9g}\n")
    if svg:
        write_svg_scatter(out / "plot.svg", points)
    return SweepResult(runs, rows, points)


def read_plot_data(path) -> list[tuple[str, int, float]]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#") or line.startswith("label,"):
            continue
        label, x, y = line.rsplit(",", 2)
        out.append((label, int(x), float(y)))
    return out

