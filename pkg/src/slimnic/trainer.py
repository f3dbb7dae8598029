"""Joint rate / distortion / sparsity optimization.

loss = R + lambda * D + gamma * mean_i(s_i), with R in bits per pixel,
D the 0-255 scale MSE and s_i the kept-channel fraction of mask slot i.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .abcm import EVAL, TRAIN, effective_channels, sparsity_term
from .codec import CodecModel, bpp, distortion_mse, evaluate, forward
from .errors import TrainingError
from .rng import RngState
from .tensor import Tensor

DEFAULT_LAMBDA = 0.0002
DEFAULT_GAMMA = 0.01
DEFAULT_MASK_LR = 3e-3


@dataclass(frozen=True)
class TrainConfig:
    lmbda: float = DEFAULT_LAMBDA
    gamma: float = DEFAULT_GAMMA
    lr: float = 1e-3
    steps: int = 200
    batch_size: int = 4
    patch_size: int = 64
    seed: int = 0
    lr_halve_step: Optional[int] = None
    betas: tuple[float, float] = (0.9, 0.999)
    mask_lr: Optional[float] = DEFAULT_MASK_LR  # gate learning rate; None -> lr

    def __post_init__(self):
        for name in ("lmbda", "gamma", "lr", "mask_lr"):
            value = getattr(self, name)
            if value is None:
                continue
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {value}")
        if self.steps < 1 or self.batch_size < 1 or self.patch_size < 1:
            raise ValueError("steps, batch_size and patch_size must be >= 1")


@dataclass
class LossBreakdown:
    R: float
    D: float
    s_mean: float
    lmbda: float
    gamma: float
    total: float
    s: list[float] = field(default_factory=list)
    loss: Optional[Tensor] = field(default=None, repr=False, compare=False)

    def recombined(self) -> float:
        return self.R + self.lmbda * self.D + self.gamma * self.s_mean


class Adam:
    """Adaptive moment estimation over a fixed list of tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(np.float32)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def loss_step(model: CodecModel, batch: Tensor, cfg: TrainConfig, rng: RngState,
              step: int = 0, backward: bool = True) -> LossBreakdown:
    """One train-phase forward (and optionally backward) on ``batch``."""
    res = forward(model, batch, TRAIN, rng)
    b, _, h, w = batch.shape
    rate = res.bits * (1.0 / (b * h * w))
    dist = distortion_mse(batch, res.x_hat)
    total = rate + cfg.lmbda * dist
    s_terms = [sparsity_term(m) for m in res.masks.values()]
    if s_terms:
        s_mean = s_terms[0]
        for term in s_terms[1:]:
            s_mean = s_mean + term
        s_mean = s_mean * (1.0 / len(s_terms))
        total = total + cfg.gamma * s_mean
        s_value = s_mean.item()
    else:
        s_value = 0.0
    value = total.item()
    if not math.isfinite(value):
        raise TrainingError(step)
    if backward:
        total.backward()
    return LossBreakdown(rate.item(), dist.item(), s_value, cfg.lmbda, cfg.gamma, value,
                         [t.item() for t in s_terms], total)


# ---------------------------------------------------------------- batches


def as_array(dataset) -> np.ndarray:
    if isinstance(dataset, Tensor):
        return dataset.data
    if isinstance(dataset, np.ndarray):
        return dataset.astype(np.float32, copy=False)
    from .data import to_tensor
    return to_tensor(list(dataset)).data


def sample_batch(images: np.ndarray, cfg: TrainConfig, rng: RngState) -> Tensor:
    """Random images with random ``patch_size`` crops."""
    n, _, h, w = images.shape
    p = min(cfg.patch_size, h, w)
    idx = rng.integers(0, n, size=cfg.batch_size)
    top = rng.integers(0, h - p + 1, size=cfg.batch_size)
    left = rng.integers(0, w - p + 1, size=cfg.batch_size)
    out = np.stack([images[i, :, t:t + p, l:l + p] for i, t, l in zip(idx, top, left)])
    return Tensor(out)


# ---------------------------------------------------------------- training


@dataclass
class TrainReport:
    config: TrainConfig
    rows: list[tuple[int, float, float, float, float]] = field(default_factory=list)
    sparsity: list[tuple[str, int, int]] = field(default_factory=list)
    mean_sparsity: float = 1.0
    final_bpp: float = float("nan")
    final_psnr: float = float("nan")
    completed: bool = False

    def csv_rows(self) -> list[list]:
        return [[s, r, d, sm, tot] for s, r, d, sm, tot in self.rows]


def train(model: CodecModel, dataset, cfg: TrainConfig, holdout=None) -> TrainReport:
    """Adam on theta and phi for ``cfg.steps`` steps; mutates ``model`` in place."""
    images = as_array(dataset)
    if images.shape[0] == 0:
        raise ValueError("dataset is empty")
    mask_lr = cfg.lr if cfg.mask_lr is None else cfg.mask_lr
    opts = [Adam([t for _, t in model.theta()], cfg.lr, cfg.betas),
            Adam([t for _, t in model.phi()], mask_lr, cfg.betas)]
    base = RngState(cfg.seed).split(7)
    report = TrainReport(cfg)
    for step in range(cfg.steps):
        if cfg.lr_halve_step is not None and step == cfg.lr_halve_step:
            for opt in opts:
                opt.lr *= 0.5
        step_rng = base.split(step)
        batch = sample_batch(images, cfg, step_rng.split(0))
        for opt in opts:
            opt.zero_grad()
        try:
            lb = loss_step(model, batch, cfg, step_rng.split(1), step)
        except TrainingError as err:
            _finish(model, report, holdout, images)
            err.report = report
            raise
        report.rows.append((step, lb.R, lb.D, lb.s_mean, lb.total))
        for opt in opts:
            opt.step()
    report.completed = True
    _finish(model, report, holdout, images)
    return report


def _finish(model: CodecModel, report: TrainReport, holdout, images: np.ndarray) -> None:
    eff = effective_channels(model)
    report.sparsity = eff.rows
    report.mean_sparsity = eff.mean_ratio
    eval_images = Tensor(as_array(holdout) if holdout is not None else images)
    try:
        res = evaluate(model, eval_images)
    except FloatingPointError:
        return
    report.final_bpp, report.final_psnr = res.bpp, res.psnr


# ---------------------------------------------------------------- gamma sweep


@dataclass
class SweepRow:
    gamma: float
    psnr: float
    bpp: float
    mean_sparsity: float
    per_layer: list[tuple[str, int, int]]


@dataclass
class SweepReport:
    rows: list[SweepRow]
    reports: list[TrainReport] = field(default_factory=list, repr=False)


def _sweep_arm(args):
    template, images, cfg, holdout = args
    model = template.copy()
    report = train(model, images, cfg, holdout)
    return model, report


def gamma_sweep(template: CodecModel, dataset, cfg: TrainConfig, gammas: Sequence[float],
                holdout=None, workers: int = 1, return_models: bool = False):
    """Train one copy of ``template`` per gamma with identical seed and data."""
    images = as_array(dataset)
    hold = as_array(holdout) if holdout is not None else None
    jobs = [(template, images, replace(cfg, gamma=float(g)), hold) for g in gammas]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_arm, jobs))
    else:
        results = [_sweep_arm(job) for job in jobs]
    rows = [SweepRow(float(g), rep.final_psnr, rep.final_bpp, rep.mean_sparsity, rep.sparsity)
            for g, (_, rep) in zip(gammas, results)]
    report = SweepReport(rows, [rep for _, rep in results])
    if return_models:
        return report, [m for m, _ in results]
    return report


# ---------------------------------------------------------------- bit-rate matching


@dataclass
class Probe:
    lmbda: float
    bpp: float
    psnr: float


@dataclass
class BitrateMatch:
    lmbda: float
    model: CodecModel
    bpp: float
    target: float
    converged: bool
    probes: list[Probe] = field(default_factory=list)

    @property
    def residual(self) -> float:
        return self.bpp - self.target


def measure_bpp(model: CodecModel, images: np.ndarray) -> tuple[float, float]:
    res = evaluate(model, Tensor(images))
    return res.bpp, res.psnr


def match_bitrate(model: CodecModel, dataset, target_bpp: float, cfg: TrainConfig,
                  eval_set=None, max_probes: int = 8, finetune_steps: int = 100,
                  tol: float = 0.005, span: float = 4.0) -> BitrateMatch:
    """Bisect lambda in log space over [lambda/span, lambda*span].

    Every probe fine-tunes a fresh copy of ``model`` for ``finetune_steps``
    with the same seed; a larger lambda weights distortion more and so
    raises the achieved bpp. Returns the closest probe when the budget
    runs out (``converged`` False).
    """
    if not target_bpp > 0:
        raise ValueError(f"target bpp must be positive, got {target_bpp}")
    images = as_array(dataset)
    evals = as_array(eval_set) if eval_set is not None else images
    current, _ = measure_bpp(model, evals)
    if abs(current - target_bpp) < tol:
        return BitrateMatch(cfg.lmbda, model, current, target_bpp, True)

    lo, hi = math.log(cfg.lmbda / span), math.log(cfg.lmbda * span)
    best: Optional[BitrateMatch] = None
    probes: list[Probe] = []
    ft_cfg = replace(cfg, steps=finetune_steps, lr_halve_step=None)
    for _ in range(max_probes):
        mid = 0.5 * (lo + hi)
        lam = math.exp(mid)
        candidate = model.copy()
        train(candidate, images, replace(ft_cfg, lmbda=lam), evals)
        achieved, quality = measure_bpp(candidate, evals)
        probes.append(Probe(lam, achieved, quality))
        if best is None or abs(achieved - target_bpp) < abs(best.bpp - target_bpp):
            best = BitrateMatch(lam, candidate, achieved, target_bpp, False)
        if abs(achieved - target_bpp) < tol:
            best.converged = True
            break
        if achieved < target_bpp:
            lo = mid
        else:
            hi = mid
    best.probes = probes
    return best


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
