"""Config-driven experiment pipelines.

Each ``run_*`` function takes an :class:`ExperimentConfig`, writes a CSV (the
contract), an optional SVG line plot, and ``manifest.json`` into the output
directory, and returns the rows it wrote. Every random stream is derived from
``(seed, purpose, index)`` so identical configs reproduce identical bytes.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .baselines import amp, ista, omp
from .channels import gen_sparse, generate_dataset, load_dataset, save_dataset
from .core import ValidationError, nmse_db, pmse
from .deq import DeqConfig, forward_fixed_point
from .neural import init_nle
from .sensing import SensingConfig, build_measurement, simulate
from .theory import (
    TheoryReport,
    cubic_residual,
    estimate_assumption_constants,
    l_half,
    oracle_gap_bound,
    sgf_brute_force,
    sgf_evaluate,
)
from .training import GsureConfig, LossMode, TrainConfig, gsure_value, load_checkpoint, train

TAGS = ("nmse_sweep", "assumptions", "sparsity_check", "sgf_curves", "gsure_unbiasedness", "train",
        "generate", "evaluate", "theory")
METHODS = ("deq_gsure", "deq_nmse", "omp", "ista", "amp")

# stream identifiers for derived seeds
_SENSING, _TRAIN_DATA, _TRAIN_NOISE, _TEST_DATA, _TEST_NOISE, _INIT, _MC = range(7)


class ConfigError(ValidationError):
    """Invalid or inconsistent experiment configuration."""


def _floats(text):
    return tuple(float(t) for t in str(text).replace(",", " ").split())


def _ints(text):
    return tuple(int(t) for t in str(text).replace(",", " ").split())


def _strs(text):
    return tuple(t for t in str(text).replace(",", " ").split())


def _bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass
class ExperimentConfig:
    """Flat experiment description; see the README for the file schema."""

    tag: str = "nmse_sweep"
    seed: int = 0
    out: str = "results"
    snr_db: tuple = (0.0, 10.0, 20.0, 30.0)
    trials: int = 200
    methods: tuple = METHODS
    plot: bool = True
    # system
    n_half: int = 64
    m_half: int = 32
    k: int = 3
    construction: str = "subsampled_dct_signs"
    amp_dist: str = "gaussian"
    test_k: int = 0
    # model
    lip_target: float = 0.9
    eta: float = 1.0
    tol: float = 1e-4
    max_iter: int = 100
    channels: tuple = (1, 16, 16, 1)
    kernel: int = 3
    init_threshold: float = 1e-3
    bias: bool = False
    # training
    loss: str = "gsure"
    train_size: int = 2560
    train_snr_db: float = 20.0
    epochs: int = 100
    batch_size: int = 128
    lr: float = 1e-3
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 30
    max_steps: int = 0
    probes: int = 1
    fd_step_rel: float = 1e-3
    # paths
    dataset: str = ""
    checkpoint_gsure: str = ""
    checkpoint_nmse: str = ""
    checkpoint_bias: str = ""
    checkpoint: str = ""
    # baselines
    omp_k: int = 6
    ista_lam: float = 0.01
    ista_max_iter: int = 500
    amp_max_iter: int = 100
    amp_damping: float = 0.7
    amp_threshold_scale: float = 1.5
    # theory
    sgf_n2: int = 64
    kappas: tuple = (1, 2, 4, 8, 16, 32)
    sgf_grid: int = 10_000
    brute_rho: int = 512
    brute_lambda: int = 64
    delta: float = 0.1
    delta_2k: float = 0.1
    delta_2: float = 0.1
    variant: str = "split"
    xi_percentile: float = 99.0
    mc_draws: int = 100_000
    source_path: str = field(default="", repr=False)

    _SECTIONS = {
        "experiment": ("tag", "seed", "out", "snr_db", "trials", "methods", "plot"),
        "system": ("n_half", "m_half", "k", "construction", "amp_dist", "test_k"),
        "model": ("lip_target", "eta", "tol", "max_iter", "channels", "kernel", "init_threshold", "bias"),
        "train": ("loss", "train_size", "train_snr_db", "epochs", "batch_size", "lr", "lr_decay_factor",
                  "lr_decay_every", "max_steps", "probes", "fd_step_rel"),
        "paths": ("dataset", "checkpoint_gsure", "checkpoint_nmse", "checkpoint_bias", "checkpoint"),
        "baselines": ("omp_k", "ista_lam", "ista_max_iter", "amp_max_iter", "amp_damping",
                      "amp_threshold_scale"),
        "theory": ("sgf_n2", "kappas", "sgf_grid", "brute_rho", "brute_lambda", "delta", "delta_2k",
                   "delta_2", "variant", "xi_percentile", "mc_draws"),
    }

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.tag not in TAGS:
            raise ConfigError(f"unknown experiment tag {self.tag!r}; expected one of {TAGS}")
        if not self.snr_db:
            raise ConfigError("SNR grid must be nonempty")
        if self.trials < 1:
            raise ConfigError("trials must be positive")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ConfigError(f"unknown methods {sorted(bad)}")
        if not 0 < self.m_half < self.n_half:
            raise ConfigError("need 0 < m_half < n_half")
        if not 0 <= self.k <= self.n_half:
            raise ConfigError("need 0 <= k <= n_half")
        if not 0 < self.lip_target < 1:
            raise ConfigError("lip_target must lie in (0, 1)")
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.variant not in ("split", "simplified"):
            raise ConfigError(f"unknown bound variant {self.variant!r}")
        LossMode(self.loss)

    @classmethod
    def from_file(cls, path, **overrides) -> "ExperimentConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        values = {}
        known = {name: sec for sec, names in cls._SECTIONS.items() for name in names}
        for section in parser.sections():
            if section not in cls._SECTIONS:
                raise ConfigError(f"unknown section [{section}]")
            for key, raw in parser.items(section):
                if known.get(key) != section:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                values[key] = raw
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(values, source_path=str(path))

    @classmethod
    def from_mapping(cls, values: dict, source_path: str = "") -> "ExperimentConfig":
        types = {f.name: f.type for f in fields(cls)}
        defaults = cls()
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown key {key!r}")
            proto = getattr(defaults, key)
            try:
                kwargs[key] = _coerce(raw, proto)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        return cls(**kwargs, source_path=source_path)

    def snapshot(self) -> dict:
        d = asdict(self)
        d.pop("source_path")
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    # derived objects
    def rng(self, stream: int, index: int = 0) -> np.random.Generator:
        return np.random.default_rng([self.seed, stream, index])

    def deq(self) -> DeqConfig:
        return DeqConfig(self.eta, self.tol, self.max_iter, self.lip_target)

    def sensing(self):
        scfg = SensingConfig(self.m_half, self.n_half, self.construction, self.seed)
        return build_measurement(scfg, self.rng(_SENSING))

    def train_config(self, loss=None) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            lr_decay=(self.lr_decay_factor, self.lr_decay_every),
            loss_mode=LossMode(loss or self.loss), seed=int(self.seed % 2**32),
            max_steps=self.max_steps or None,
        )

    def gsure(self) -> GsureConfig:
        return GsureConfig(self.probes, self.fd_step_rel)


def _coerce(raw, proto):
    if isinstance(raw, str):
        if isinstance(proto, bool):
            return _bool(raw)
        if isinstance(proto, int):
            return int(raw)
        if isinstance(proto, float):
            return float(raw)
        if isinstance(proto, tuple):
            if proto and isinstance(proto[0], int):
                return _ints(raw)
            if proto and isinstance(proto[0], str):
                return _strs(raw)
            return _floats(raw)
        return raw.strip()
    if isinstance(proto, tuple):
        return tuple(raw) if isinstance(raw, (list, tuple)) else (raw,)
    if isinstance(proto, bool):
        return bool(raw)
    return type(proto)(raw)


# ---------------------------------------------------------------- I/O helpers

def git_blob_sha1(data: bytes) -> str:
    """Content hash in the same form git uses for blobs."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[h]) for h in header])


def write_manifest(out: Path, cfg: ExperimentConfig, inputs=(), outputs=()):
    """``manifest.json`` with the config snapshot and content hashes (no timestamps)."""
    def digest(paths):
        res = {}
        for p in paths:
            if p:
                p = Path(p)
                res[p.name if p.parent == out else str(p)] = git_blob_sha1(p.read_bytes())
        return res

    inputs = list(inputs)
    if cfg.source_path:
        inputs.insert(0, cfg.source_path)
    doc = {"experiment": cfg.tag, "config": cfg.snapshot(), "inputs": digest(inputs),
           "outputs": digest(outputs)}
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def svg_line_plot(path, series: dict, xlabel="", ylabel="", title=""):
    """Minimal SVG line chart; ``series`` maps a label to ``(xs, ys)``."""
    W, H, L, R, T, B = 640, 420, 70, 150, 40, 50
    pts = [(x, y) for xs, ys in series.values() for x, y in zip(xs, ys) if np.isfinite(y)]
    if not pts:
        pts = [(0.0, 0.0)]
    x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
    y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def sx(x):
        return L + (x - x0) / (x1 - x0) * (W - L - R)

    def sy(y):
        return H - B - (y - y0) / (y1 - y0) * (H - T - B)

    colors = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" '
           f'font-size="12">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<line x1="{L}" y1="{H - B}" x2="{W - R}" y2="{H - B}" stroke="black"/>',
           f'<line x1="{L}" y1="{T}" x2="{L}" y2="{H - B}" stroke="black"/>']
    for i in range(5):
        xv = x0 + i * (x1 - x0) / 4
        yv = y0 + i * (y1 - y0) / 4
        out.append(f'<text x="{sx(xv):.1f}" y="{H - B + 16}" text-anchor="middle">{xv:.3g}</text>')
        out.append(f'<text x="{L - 6}" y="{sy(yv) + 4:.1f}" text-anchor="end">{yv:.3g}</text>')
    for i, (label, (xs, ys)) in enumerate(series.items()):
        c = colors[i % len(colors)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, ys) if np.isfinite(y))
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="2" points="{coords}"/>')
        ly = T + 18 * i
        out.append(f'<line x1="{W - R + 10}" y1="{ly}" x2="{W - R + 30}" y2="{ly}" stroke="{c}" '
                   f'stroke-width="2"/>')
        out.append(f'<text x="{W - R + 35}" y="{ly + 4}">{label}</text>')
    out.append(f'<text x="{(L + W - R) / 2}" y="{H - 12}" text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="16" y="{(T + H - B) / 2}" text-anchor="middle" '
               f'transform="rotate(-90 16 {(T + H - B) / 2})">{ylabel}</text>')
    out.append(f'<text x="{W / 2}" y="22" text-anchor="middle">{title}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from exc
    return out


# ---------------------------------------------------------------- data and models

def train_channels(cfg: ExperimentConfig) -> np.ndarray:
    if cfg.dataset:
        return load_dataset(cfg.dataset, 2 * cfg.n_half).matrix()
    return generate_dataset(cfg.train_size, 2 * cfg.n_half, cfg.k, _seed(cfg, _TRAIN_DATA),
                            cfg.amp_dist).matrix()


def test_channels(cfg: ExperimentConfig, index: int, count: int | None = None) -> np.ndarray:
    k = cfg.test_k or cfg.k
    rng = cfg.rng(_TEST_DATA, index)
    return np.stack([gen_sparse(2 * cfg.n_half, k, cfg.amp_dist, rng).h for _ in range(count or cfg.trials)])


def _seed(cfg, stream, index=0) -> int:
    return int(np.random.SeedSequence([cfg.seed, stream, index]).generate_state(1)[0])


def train_model(cfg: ExperimentConfig, A, loss=None, bias=None, out_dir=None):
    """Train from scratch on the configured training set at ``train_snr_db``."""
    H = train_channels(cfg)
    problem = simulate(A, H, cfg.train_snr_db, cfg.rng(_TRAIN_NOISE))
    model = init_nle(2 * cfg.n_half, cfg.channels, cfg.kernel, cfg.lip_target, cfg.init_threshold,
                     rng=cfg.rng(_INIT), bias=cfg.bias if bias is None else bias)
    tcfg = cfg.train_config(loss)
    return train(model, problem, tcfg, cfg.deq(), cfg.gsure(), H=H, out_dir=out_dir)


def load_or_train(cfg: ExperimentConfig, A, path: str, loss: str, bias=False):
    if path:
        model, _ = load_checkpoint(path)
        if model.width != 2 * cfg.n_half:
            raise ConfigError(f"checkpoint {path} has width {model.width}, expected {2 * cfg.n_half}")
        return model
    return train_model(cfg, A, loss, bias).model


def _require_checkpoint(path, what):
    if not path:
        raise ConfigError(f"{what} requires a checkpoint path")
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint {path} does not exist")
    return path


def _solve(model, problem, cfg):
    return forward_fixed_point(model, problem, cfg.deq())


# ---------------------------------------------------------------- runners

def run_generate(cfg: ExperimentConfig):
    out = _out_dir(cfg)
    ds = generate_dataset(cfg.train_size, 2 * cfg.n_half, cfg.k, _seed(cfg, _TRAIN_DATA), cfg.amp_dist)
    path = out / "dataset.gchd"
    save_dataset(path, ds)
    write_manifest(out, cfg, outputs=[path])
    return [{"count": len(ds), "n2": 2 * cfg.n_half, "k": cfg.k}]


def run_train(cfg: ExperimentConfig):
    out = _out_dir(cfg)
    A, _ = cfg.sensing()
    res = train_model(cfg, A, out_dir=out)
    files = sorted(out.glob("checkpoint_*.gnle")) + [out / "metrics.csv"]
    write_manifest(out, cfg, inputs=[cfg.dataset], outputs=files)
    return res.history


EVAL_HEADER = ("snr_db", "nmse_db", "pmse_db", "gsure", "mean_iters", "converged_frac", "trials", "seed")


def run_evaluate(cfg: ExperimentConfig):
    out = _out_dir(cfg)
    path = _require_checkpoint(cfg.checkpoint or cfg.checkpoint_gsure, "evaluate")
    model, _ = load_checkpoint(path)
    A, _ = cfg.sensing()
    rows = []
    for i, snr in enumerate(cfg.snr_db):
        H = test_channels(cfg, i)
        problem = simulate(A, H, snr, cfg.rng(_TEST_NOISE, i))
        res = _solve(model, problem, cfg)
        err_p = pmse(res.h_star, H, problem)
        rows.append({
            "snr_db": snr,
            "nmse_db": nmse_db(res.h_star, H),
            "pmse_db": float(10 * np.log10(np.sum(err_p) / np.sum(H**2))),
            "gsure": float("nan"),
            "mean_iters": float(np.mean(res.iterations)),
            "converged_frac": float(np.mean(res.converged)),
            "trials": H.shape[0],
            "seed": cfg.seed,
        })
    write_csv(out / "evaluate.csv", EVAL_HEADER, rows)
    write_manifest(out, cfg, inputs=[path], outputs=[out / "evaluate.csv"])
    return rows


SWEEP_HEADER = ("snr_db", "method", "nmse_db", "trials", "seed")


def _baseline(method, problem, cfg):
    if method == "omp":
        return omp(problem, cfg.omp_k)
    if method == "ista":
        return ista(problem, cfg.ista_lam, cfg.ista_max_iter)
    return amp(problem, cfg.amp_max_iter, cfg.amp_damping, cfg.amp_threshold_scale)


def run_nmse_sweep(cfg: ExperimentConfig):
    out = _out_dir(cfg)
    models = {}
    for method, path in (("deq_gsure", cfg.checkpoint_gsure), ("deq_nmse", cfg.checkpoint_nmse)):
        if method in cfg.methods:
            models[method], _ = load_checkpoint(_require_checkpoint(path, method))
    A, _ = cfg.sensing()
    rows = []
    for i, snr in enumerate(cfg.snr_db):
        H = test_channels(cfg, i)
        problem = simulate(A, H, snr, cfg.rng(_TEST_NOISE, i))
        for method in cfg.methods:
            if method in models:
                est = _solve(models[method], problem, cfg).h_star
            else:
                est = _baseline(method, problem, cfg)
            rows.append({"snr_db": snr, "method": method, "nmse_db": nmse_db(est, H),
                         "trials": H.shape[0], "seed": cfg.seed})
    csv_path = out / "nmse_sweep.csv"
    write_csv(csv_path, SWEEP_HEADER, rows)
    outputs = [csv_path]
    if cfg.plot:
        series = {m: ([r["snr_db"] for r in rows if r["method"] == m],
                      [r["nmse_db"] for r in rows if r["method"] == m]) for m in cfg.methods}
        svg_line_plot(out / "nmse_sweep.svg", series, "SNR (dB)", "NMSE (dB)", "NMSE versus SNR")
        outputs.append(out / "nmse_sweep.svg")
    write_manifest(out, cfg, inputs=[cfg.checkpoint_gsure if "deq_gsure" in models else "",
                                     cfg.checkpoint_nmse if "deq_nmse" in models else ""], outputs=outputs)
    return rows


ASSUMPTION_HEADER = ("snr_db", "beta", "omega", "xi", "nmse_db_bias_off", "nmse_db_bias_on",
                     "bias_delta_db", "trials", "seed")


def run_assumption_study(cfg: ExperimentConfig):
    """Per SNR: mean beta and omega, xi, and the NMSE change from adding network bias.

    Models come from the configured checkpoints or are trained at
    ``train_snr_db`` when a path is empty (GSURE bias-off, NMSE oracle, GSURE bias-on).
    """
    out = _out_dir(cfg)
    A, _ = cfg.sensing()
    g_model = load_or_train(cfg, A, cfg.checkpoint_gsure, "gsure", bias=False)
    o_model = load_or_train(cfg, A, cfg.checkpoint_nmse, "nmse", bias=False)
    b_model = load_or_train(cfg, A, cfg.checkpoint_bias, "gsure", bias=True)
    rows = []
    for i, snr in enumerate(cfg.snr_db):
        H = test_channels(cfg, i)
        problem = simulate(A, H, snr, cfg.rng(_TEST_NOISE, i))
        hg = _solve(g_model, problem, cfg).h_star
        ho = _solve(o_model, problem, cfg).h_star
        hb = _solve(b_model, problem, cfg).h_star
        beta, omega, xi = estimate_assumption_constants(hg, ho, H, problem, percentile=cfg.xi_percentile)
        off, on = nmse_db(hg, H), nmse_db(hb, H)
        rows.append({"snr_db": snr, "beta": beta, "omega": omega, "xi": xi, "nmse_db_bias_off": off,
                     "nmse_db_bias_on": on, "bias_delta_db": off - on, "trials": H.shape[0],
                     "seed": cfg.seed})
    csv_path = out / "assumptions.csv"
    write_csv(csv_path, ASSUMPTION_HEADER, rows)
    outputs = [csv_path]
    if cfg.plot:
        xs = [r["snr_db"] for r in rows]
        svg_line_plot(out / "assumptions.svg",
                      {"beta": (xs, [r["beta"] for r in rows]), "omega": (xs, [r["omega"] for r in rows])},
                      "SNR (dB)", "relative error", "Assumption constants")
        outputs.append(out / "assumptions.svg")
    write_manifest(out, cfg, inputs=[cfg.checkpoint_gsure, cfg.checkpoint_nmse, cfg.checkpoint_bias],
                   outputs=outputs)
    return rows


SPARSITY_HEADER = ("snr_db", "l_half_gsure", "l_half_oracle", "l_half_truth", "trials", "seed")


def _mean_l_half(X):
    vals = [l_half(x) for x in X if np.linalg.norm(x) > 0]
    return float(np.mean(vals)) if vals else float("nan")


def run_sparsity_check(cfg: ExperimentConfig):
    out = _out_dir(cfg)
    A, _ = cfg.sensing()
    g_model = load_or_train(cfg, A, cfg.checkpoint_gsure, "gsure")
    o_model = load_or_train(cfg, A, cfg.checkpoint_nmse, "nmse")
    rows = []
    for i, snr in enumerate(cfg.snr_db):
        # truth is shared across SNR points so its row is constant
        H = test_channels(cfg, 0)
        problem = simulate(A, H, snr, cfg.rng(_TEST_NOISE, i))
        rows.append({
            "snr_db": snr,
            "l_half_gsure": _mean_l_half(_solve(g_model, problem, cfg).h_star),
            "l_half_oracle": _mean_l_half(_solve(o_model, problem, cfg).h_star),
            "l_half_truth": _mean_l_half(H),
            "trials": H.shape[0],
            "seed": cfg.seed,
        })
    csv_path = out / "sparsity_check.csv"
    write_csv(csv_path, SPARSITY_HEADER, rows)
    outputs = [csv_path]
    if cfg.plot:
        xs = [r["snr_db"] for r in rows]
        svg_line_plot(out / "sparsity_check.svg",
                      {k: (xs, [r[k] for r in rows]) for k in SPARSITY_HEADER[1:4]},
                      "SNR (dB)", "mean l1/l2", "Empirical sparsity of estimates")
        outputs.append(out / "sparsity_check.svg")
    write_manifest(out, cfg, inputs=[cfg.checkpoint_gsure, cfg.checkpoint_nmse], outputs=outputs)
    return rows


SGF_HEADER = ("kappa", "brute", "g_numeric", "g_closed", "t_kappa", "cubic_residual")


def sgf_rows(cfg: ExperimentConfig):
    rows = []
    for kappa in sorted(set(cfg.kappas)):
        ev = sgf_evaluate(kappa, cfg.sgf_n2, cfg.sgf_grid)
        brute = sgf_brute_force(kappa, cfg.sgf_n2, cfg.brute_rho, cfg.brute_lambda)
        rows.append({"kappa": kappa, "brute": brute, "g_numeric": ev.g_numeric, "g_closed": ev.g_closed,
                     "t_kappa": ev.t_kappa,
                     "cubic_residual": cubic_residual(kappa) if kappa >= 2 else float("nan")})
    return rows


def run_sgf_curves(cfg: ExperimentConfig):
    out = _out_dir(cfg)
    rows = sgf_rows(cfg)
    csv_path = out / "sgf_curves.csv"
    write_csv(csv_path, SGF_HEADER, rows)
    outputs = [csv_path]
    if cfg.plot:
        xs = [r["kappa"] for r in rows]
        svg_line_plot(out / "sgf_curves.svg", {k: (xs, [r[k] for r in rows]) for k in SGF_HEADER[1:4]},
                      "kappa", "residual energy fraction", f"Sparse growth function, 2N = {cfg.sgf_n2}")
        outputs.append(out / "sgf_curves.svg")
    write_manifest(out, cfg, outputs=outputs)
    return rows


def run_theory(cfg: ExperimentConfig):
    """SGF table plus a theory report built from the trained models at ``train_snr_db``."""
    out = _out_dir(cfg)
    rows = sgf_rows(cfg)
    write_csv(out / "theory_sgf.csv", ("kappa", "g_numeric", "g_closed", "brute"), rows)
    A, zeta = cfg.sensing()
    g_model = load_or_train(cfg, A, cfg.checkpoint_gsure, "gsure")
    o_model = load_or_train(cfg, A, cfg.checkpoint_nmse, "nmse")
    H = test_channels(cfg, 0)
    problem = simulate(A, H, cfg.train_snr_db, cfg.rng(_TEST_NOISE, 0))
    hg = _solve(g_model, problem, cfg).h_star
    ho = _solve(o_model, problem, cfg).h_star
    beta, omega, xi = estimate_assumption_constants(hg, ho, H, problem, percentile=cfg.xi_percentile)
    report = TheoryReport(
        beta=beta, omega=omega, xi=xi, gamma=cfg.deq().gamma, delta=cfg.delta, delta_2k=cfg.delta_2k,
        delta_2=cfg.delta_2, k=cfg.k, n_half=cfg.n_half, m_half=cfg.m_half, zeta=zeta, variant=cfg.variant,
    )
    try:
        report = oracle_gap_bound(report)
    except ValidationError as exc:
        report.valid = False
        report.notes.append(str(exc))
    (out / "theory_report.txt").write_text(report.as_text())
    write_manifest(out, cfg, inputs=[cfg.checkpoint_gsure, cfg.checkpoint_nmse],
                   outputs=[out / "theory_sgf.csv", out / "theory_report.txt"])
    return rows, report


MC_HEADER = ("snr_db", "draws", "mean_gsure", "pmse", "rel_error", "std_error")


def gsure_monte_carlo(A, W, h, sigma2, draws, rng, c_diag=None, chunk=20_000):
    """Monte-Carlo mean of GSURE for the linear estimator ``g(u) = W u``.

    Uses the exact divergence ``Tr(P W)``. Returns ``(mean, analytic PMSE, std error)``.
    """
    from .core import StandardProblem

    m2 = A.shape[0]
    c = np.ones(m2) if c_diag is None else np.asarray(c_diag, dtype=float)
    P = A.T @ A
    div = float(np.trace(P @ W))
    Ah = A @ h
    vals = []
    done = 0
    while done < draws:
        n = min(chunk, draws - done)
        noise = rng.standard_normal((n, m2)) * np.sqrt(sigma2 / 2 * c)
        prob = StandardProblem(A, c, sigma2, y=Ah + noise)
        est = prob.u @ W.T
        vals.append(np.atleast_1d(gsure_value(est, div, prob)))
        done += n
    vals = np.concatenate(vals)
    # E||P(Wu - h)||^2 with u = A^T C^-1 (Ah + n)
    mean_est = ((Ah / c) @ A) @ W.T
    bias_term = float(np.sum((P @ (mean_est - h)) ** 2))
    PWAt = P @ W @ A.T
    var_term = float(np.sum((PWAt / c) ** 2 * (sigma2 / 2 * c)))
    return float(vals.mean()), bias_term + var_term, float(vals.std(ddof=1) / math.sqrt(len(vals)))


def run_gsure_unbiasedness(cfg: ExperimentConfig):
    """Monte-Carlo check of GSURE against the analytic PMSE for a fixed linear estimator."""
    out = _out_dir(cfg)
    rng = cfg.rng(_MC)
    A, _ = build_measurement(SensingConfig(2, 4, cfg.construction, cfg.seed), rng)
    h = gen_sparse(8, 1, cfg.amp_dist, rng).h
    W = 0.5 * np.eye(8) + 0.1 * rng.standard_normal((8, 8))
    rows = []
    for i, snr in enumerate(cfg.snr_db):
        sigma2 = float(np.sum((A @ h) ** 2) / A.shape[0] * 2 * 10 ** (-snr / 10))
        mean, truth, se = gsure_monte_carlo(A, W, h, sigma2, cfg.mc_draws, cfg.rng(_MC, i + 1))
        rows.append({"snr_db": snr, "draws": cfg.mc_draws, "mean_gsure": mean, "pmse": truth,
                     "rel_error": abs(mean - truth) / truth, "std_error": se})
    csv_path = out / "gsure_unbiasedness.csv"
    write_csv(csv_path, MC_HEADER, rows)
    write_manifest(out, cfg, outputs=[csv_path])
    return rows


RUNNERS = {
    "generate": run_generate,
    "train": run_train,
    "evaluate": run_evaluate,
    "nmse_sweep": run_nmse_sweep,
    "assumptions": run_assumption_study,
    "sparsity_check": run_sparsity_check,
    "sgf_curves": run_sgf_curves,
    "theory": run_theory,
    "gsure_unbiasedness": run_gsure_unbiasedness,
}


def run(cfg: ExperimentConfig):
    return RUNNERS[cfg.tag](cfg)
