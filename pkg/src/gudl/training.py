"""Losses, divergence estimation, Adam and the training loop.

The unsupervised loss is a generalized Stein risk estimate of the projected
error ``||P (g(u) - h)||^2`` that needs only ``u``, ``A``, ``C`` and ``sigma2``.
Supervised losses (nmse, pmse, mse) use ground truth and serve as the oracle.
"""

from __future__ import annotations

import csv
import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import StandardProblem, ValidationError
from .deq import DeqConfig, forward_fixed_point, jfb_gradient
from .neural import (
    CheckpointError,
    NleParams,
    dump_nle,
    normalization_vjp,
    parse_nle,
    spectral_normalize,
)


class LossMode(str, enum.Enum):
    GSURE = "gsure"
    NMSE = "nmse"
    PMSE = "pmse"
    MSE = "mse"


class TrainingDivergedError(FloatingPointError):
    """Raised when the loss or a gradient becomes non-finite."""


class NoConvergenceError(RuntimeError):
    """Raised when no sample of a batch reached the fixed-point tolerance."""


@dataclass(frozen=True)
class GsureConfig:
    probes: int = 1
    fd_step_rel: float = 1e-3
    include_constant: bool = True

    def __post_init__(self):
        if self.probes < 1:
            raise ValidationError("probes must be >= 1")
        if not 1e-6 < self.fd_step_rel < 1e-1:
            raise ValidationError("fd_step_rel must lie in (1e-6, 1e-1)")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr: float = 1e-3
    lr_decay: tuple[float, int] = (0.5, 30)
    loss_mode: LossMode = LossMode.GSURE
    seed: int = 0
    max_steps: int | None = None
    checkpoint_every: int = 10
    norm_method: str = "exact"
    eval_size: int = 512

    def __post_init__(self):
        object.__setattr__(self, "loss_mode", LossMode(self.loss_mode))
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValidationError("lr must be positive")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.norm_method not in ("exact", "power"):
            raise ValidationError("norm_method must be 'exact' or 'power'")

    def lr_at(self, epoch: int) -> float:
        factor, every = self.lr_decay
        return self.lr * factor ** (epoch // every)


# --- losses ---------------------------------------------------------------


def _rowwise(problem: StandardProblem, B: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(problem.sigma2, dtype=float), (B,))


def data_target(problem: StandardProblem) -> np.ndarray:
    """``A^T C A u`` (equal to ``A^T y``), the observable proxy for ``P h``."""
    return ((problem.u @ problem.A.T) * problem.c_diag) @ problem.A


def gsure_value(estimate, divergence_trace, problem: StandardProblem, include_constant=True):
    """Risk estimate ``||P g - A^T C A u||^2 + sigma2 * div - sigma2 * Tr(C) / 2``.

    Its expectation over the noise equals ``E||P (g - h)||^2``. Works per row
    for batched problems.
    """
    est = np.asarray(estimate, dtype=float)
    fit = np.sum(((est @ problem.A.T) @ problem.A - data_target(problem)) ** 2, axis=-1)
    val = fit + np.asarray(problem.sigma2) * np.asarray(divergence_trace)
    if include_constant:
        val = val - np.asarray(problem.sigma2) * np.sum(problem.c_diag) / 2
    return val


def _fd_step(u, cfg: GsureConfig):
    un = np.linalg.norm(u, axis=-1)
    rel = cfg.fd_step_rel * un / np.sqrt(u.shape[-1])
    return np.where(un > 0, rel, cfg.fd_step_rel)


def hutchinson_divergence(g, u, cfg: GsureConfig, rng, *, P):
    """Monte-Carlo estimate of ``Tr(P dg/du)`` from finite differences.

    Averages ``z^T P (g(u + eps z) - g(u)) / eps`` over Rademacher probes ``z``.
    """
    u = np.asarray(u, dtype=float)
    eps = float(_fd_step(u, cfg))
    base = np.asarray(g(u), dtype=float)
    total = 0.0
    for _ in range(cfg.probes):
        z = rng.choice([-1.0, 1.0], size=u.shape)
        total += float((P @ z) @ (np.asarray(g(u + eps * z)) - base)) / eps
    return total / cfg.probes


def _probe_problem(problem, u_shift):
    return problem.with_statistic(u_shift)


def gsure_loss_and_grad(model, problem: StandardProblem, cfg: GsureConfig, deq_cfg: DeqConfig, rng,
                        *, want_grad=True):
    """Batch-mean risk estimate and its Jacobian-free gradient.

    Each sample is solved to its fixed point, the divergence is estimated by
    re-solving at ``u + eps z`` warm-started from ``h*``, and both fixed points
    receive a single-layer VJP. Probe directions are treated as constants.

    Returns ``(loss, grads, info)``; ``info`` carries iteration counts and the
    convergence mask.
    """
    if not problem.batched:
        problem = problem.with_statistic(problem.u[None, :], np.atleast_1d(problem.sigma2))
    u = problem.u
    B, n2 = u.shape
    sigma2 = _rowwise(problem, B)
    A, P = problem.A, problem.P
    res = forward_fixed_point(model, problem, deq_cfg)
    if not np.any(res.converged):
        raise NoConvergenceError("no sample in the batch converged")
    h = res.h_star
    v = data_target(problem)
    eps = _fd_step(u, cfg)
    div = np.zeros(B)
    grads = None
    cot_base = 2.0 * ((h @ A.T) @ A - v) if want_grad else None
    probe_iters = 0
    for _ in range(cfg.probes):
        z = rng.choice([-1.0, 1.0], size=u.shape)
        pz = (z @ A.T) @ A
        shifted = _probe_problem(problem, u + eps[:, None] * z)
        res_p = forward_fixed_point(model, shifted, deq_cfg, h0=h)
        probe_iters += res_p.iterations.mean()
        div += np.sum(pz * (res_p.h_star - h), axis=1) / eps
        if want_grad:
            scale = (sigma2 / eps / cfg.probes)[:, None]
            cot_base = cot_base - scale * pz
            g_p = jfb_gradient(model, shifted, deq_cfg, res_p.h_star, scale * pz)
            grads = g_p if grads is None else [a + b for a, b in zip(grads, g_p)]
    div /= cfg.probes
    per_sample = gsure_value(h, div, problem, cfg.include_constant)
    loss = float(np.mean(per_sample))
    if want_grad:
        g0 = jfb_gradient(model, problem, deq_cfg, h, cot_base)
        grads = g0 if grads is None else [a + b for a, b in zip(g0, grads)]
        grads = [g / B for g in grads]
    info = {
        "iterations": res.iterations,
        "converged": res.converged,
        "probe_iterations": probe_iters / cfg.probes,
        "per_sample": per_sample,
        "h_star": h,
    }
    return loss, grads, info


def supervised_loss_and_grad(model, problem: StandardProblem, H, mode, deq_cfg: DeqConfig,
                             *, want_grad=True):
    """Loss against ground truth ``H`` (``nmse``, ``pmse`` or ``mse``) and its JFB gradient."""
    mode = LossMode(mode)
    if mode is LossMode.GSURE:
        raise ValidationError("use gsure_loss_and_grad for the unsupervised loss")
    if H is None:
        raise ValidationError("supervised loss requires ground truth")
    if not problem.batched:
        problem = problem.with_statistic(problem.u[None, :])
    H = np.atleast_2d(np.asarray(H, dtype=float))
    B = problem.u.shape[0]
    if H.shape != problem.u.shape:
        raise ValidationError("ground truth shape does not match the batch")
    res = forward_fixed_point(model, problem, deq_cfg)
    if not np.any(res.converged):
        raise NoConvergenceError("no sample in the batch converged")
    e = res.h_star - H
    if mode is LossMode.PMSE:
        e = (e @ problem.A.T) @ problem.A
    sq = float(np.sum(e**2))
    if mode is LossMode.NMSE:
        energy = float(np.sum(H**2))
        if energy <= 0:
            raise ValidationError("nmse loss needs nonzero ground truth")
        loss, cot = sq / energy, 2.0 * e / energy
    else:
        loss, cot = sq / B, 2.0 * e / B
    grads = jfb_gradient(model, problem, deq_cfg, res.h_star, cot) if want_grad else None
    info = {"iterations": res.iterations, "converged": res.converged, "h_star": res.h_star}
    return loss, grads, info


# --- optimizer ------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(state: AdamState, params, grads, lr: float) -> AdamState:
    """Bias-corrected Adam update applied in place to ``params``."""
    b1, b2 = state.betas
    t = state.t + 1
    m = [b1 * mi + (1 - b1) * g for mi, g in zip(state.m, grads)]
    v = [b2 * vi + (1 - b2) * g * g for vi, g in zip(state.v, grads)]
    c1, c2 = 1 - b1**t, 1 - b2**t
    for p, mi, vi in zip(params, m, v):
        p -= lr * (mi / c1) / (np.sqrt(vi / c2) + state.eps)
    return AdamState(m, v, t, state.betas, state.eps)


# --- checkpoints with optimizer state -------------------------------------


def dump_checkpoint(model: NleParams, opt: AdamState | None = None) -> bytes:
    """Network bytes followed by ``u64 step`` and flattened first/second moments."""
    data = dump_nle(model)
    if opt is None:
        return data
    flat_m = np.concatenate([a.ravel() for a in opt.m]).astype("<f8")
    flat_v = np.concatenate([a.ravel() for a in opt.v]).astype("<f8")
    return data + struct.pack("<Q", opt.t) + flat_m.tobytes() + flat_v.tobytes()


def load_checkpoint(path):
    """Return ``(model, adam_state_or_None)``."""
    data = Path(path).read_bytes()
    model, off = parse_nle(data)
    if off == len(data):
        return model, None
    n = model.n_params
    need = off + 8 + 16 * n
    if len(data) != need:
        raise CheckpointError("optimizer section has the wrong size")
    (t,) = struct.unpack_from("<Q", data, off)
    flat = np.frombuffer(data, "<f8", 2 * n, off + 8).astype(float)
    shapes = [a.shape for a in model.arrays()]
    m, v, i = [], [], 0
    for s in shapes:
        size = int(np.prod(s))
        m.append(flat[i : i + size].reshape(s))
        v.append(flat[n + i : n + i + size].reshape(s))
        i += size
    return model, AdamState(m, v, int(t))


def save_checkpoint(path, model, opt=None) -> None:
    Path(path).write_bytes(dump_checkpoint(model, opt))


# --- training loop --------------------------------------------------------

METRICS_HEADER = ("epoch", "loss_mode", "loss", "nmse_db", "mean_iters", "lr", "seed")


@dataclass
class TrainResult:
    model: NleParams
    history: list[dict] = field(default_factory=list)
    optimizer: AdamState | None = None
    steps: int = 0


def normalize(model: NleParams, method: str = "exact", iters: int = 1) -> NleParams:
    q = spectral_normalize(model, iters, exact=(method == "exact"))
    q.clip_thresholds()
    return q


def evaluate(model, problem: StandardProblem, deq_cfg: DeqConfig, H=None, *, method="exact", iters=50):
    """Fully renormalize a copy, solve every sample, and report NMSE (dB) if ``H`` is given."""
    m = spectral_normalize(model, iters, exact=(method == "exact"))
    res = forward_fixed_point(m, problem, deq_cfg)
    out = {"h_star": res.h_star, "mean_iters": float(np.mean(res.iterations)), "converged": res.converged}
    if H is not None:
        H = np.asarray(H, dtype=float)
        out["nmse_db"] = float(10 * np.log10(np.sum((res.h_star - H) ** 2) / np.sum(H**2)))
    return out


def _check_finite(loss, grads, step):
    if not np.isfinite(loss) or any(not np.all(np.isfinite(g)) for g in grads):
        raise TrainingDivergedError(
            f"non-finite loss or gradient at step {step} (loss={loss}); "
            "check lip_target, eta and the noise level"
        )


def train(model: NleParams, problem: StandardProblem, train_cfg: TrainConfig, deq_cfg: DeqConfig,
          gsure_cfg: GsureConfig | None = None, *, H=None, out_dir=None, step_callback=None) -> TrainResult:
    """Mini-batch Adam with renormalization after every step.

    ``problem`` is a batched training set. ``H`` (optional for the unsupervised
    mode) enables NMSE reporting and the supervised modes. When ``out_dir`` is
    given a metrics CSV and checkpoints are written there.
    """
    if not problem.batched or problem.u.shape[0] == 0:
        raise ValidationError("training needs a nonempty batched problem")
    gsure_cfg = gsure_cfg or GsureConfig()
    mode = train_cfg.loss_mode
    if mode is not LossMode.GSURE and H is None:
        raise ValidationError(f"{mode.value} training requires ground truth")
    H = None if H is None else np.asarray(H, dtype=float)
    rng = np.random.default_rng(train_cfg.seed)
    model = normalize(model.copy(), train_cfg.norm_method, 1)
    opt = AdamState.zeros_like(model.arrays())
    S = problem.u.shape[0]
    eval_idx = np.arange(min(S, train_cfg.eval_size))
    eval_problem = problem.subset(eval_idx)
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        metrics_f = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(metrics_f, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
    history = []
    step = 0
    try:
        for epoch in range(train_cfg.epochs):
            lr = train_cfg.lr_at(epoch)
            order = rng.permutation(S)
            losses, iters = [], []
            for start in range(0, S, train_cfg.batch_size):
                if train_cfg.max_steps is not None and step >= train_cfg.max_steps:
                    break
                idx = order[start : start + train_cfg.batch_size]
                batch = problem.subset(idx)
                if mode is LossMode.GSURE:
                    loss, grads, info = gsure_loss_and_grad(model, batch, gsure_cfg, deq_cfg, rng)
                else:
                    loss, grads, info = supervised_loss_and_grad(model, batch, H[idx], mode, deq_cfg)
                _check_finite(loss, grads, step)
                grads = normalization_vjp(model, grads)
                opt = adam_step(opt, model.arrays(), grads, lr)
                model = normalize(model, train_cfg.norm_method, 1)
                step += 1
                losses.append(loss)
                iters.append(float(np.mean(info["iterations"])))
                if step_callback is not None:
                    step_callback(step, loss, model)
            if not losses:
                break
            row = {
                "epoch": epoch + 1,
                "loss_mode": mode.value,
                "loss": float(np.mean(losses)),
                "nmse_db": float("nan"),
                "mean_iters": float(np.mean(iters)),
                "lr": lr,
                "seed": train_cfg.seed,
            }
            if H is not None:
                row["nmse_db"] = evaluate(model, eval_problem, deq_cfg, H[eval_idx])["nmse_db"]
            history.append(row)
            if out is not None:
                writer.writerow([row[k] if not isinstance(row[k], float) else repr(row[k]) for k in METRICS_HEADER])
                metrics_f.flush()
                if (epoch + 1) % train_cfg.checkpoint_every == 0:
                    save_checkpoint(out / f"checkpoint_epoch{epoch + 1:04d}.gnle", model, opt)
    finally:
        if out is not None:
            metrics_f.close()
    if out is not None:
        save_checkpoint(out / "checkpoint_final.gnle", model, opt)
    return TrainResult(model, history, opt, step)
