"""Turn a masked model into a narrower static one and check they agree.

A channel whose mask is zero is exactly zero after the mask, stays zero
through GDN (0 / sqrt(.) = 0) and contributes a zero term to every sum
that reads it: the next conv, and every other channel's GDN pool. Dropping
the filter, its bias, its GDN row/column and the next layer's input slice
therefore removes only zero terms. Because the conv and GDN kernels
accumulate in a fixed order, the surviving terms are summed in the same
sequence and the pruned forward is bit-identical to the masked one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .abcm import EVAL
from .codec import ChannelConfig, CodecModel, ConvLayer, EntropyModel, GDNLayer, forward, psnr, \
    distortion_mse
from .errors import DegeneratePlanError, PlanMismatchError
from .tensor import Tensor


@dataclass(frozen=True)
class KeepPlan:
    """Kept channel indices per mask slot and the resulting channel config."""

    keep: dict
    source: ChannelConfig
    config: ChannelConfig

    def __post_init__(self):
        for sid, idx in self.keep.items():
            if not idx:
                raise DegeneratePlanError(sid)
            if any(b <= a for a, b in zip(idx[:-1], idx[1:])):
                raise PlanMismatchError(f"slot {sid}: keep list {idx} is not strictly increasing")

    @classmethod
    def from_keep(cls, source: ChannelConfig, keep: dict) -> "KeepPlan":
        keep = {sid: tuple(int(i) for i in idx) for sid, idx in keep.items()}
        for sid, idx in keep.items():
            if not idx:
                raise DegeneratePlanError(sid)
        return cls(keep, source, _pruned_config(source, keep))

    def counts(self) -> dict:
        return {sid: len(idx) for sid, idx in self.keep.items()}

    def is_identity(self) -> bool:
        return self.config == self.source

    def pruned_fraction(self) -> float:
        total = sum(_slot_width(self.source, sid) for sid in self.keep)
        kept = sum(len(idx) for idx in self.keep.values())
        return 1.0 - kept / total if total else 0.0

    def to_text(self) -> str:
        return ";".join(f"{sid}:{','.join(str(i) for i in idx)}" for sid, idx in self.keep.items())

    @classmethod
    def from_text(cls, source: ChannelConfig, text: str) -> "KeepPlan":
        keep = {}
        for part in filter(None, text.split(";")):
            sid, _, idx = part.partition(":")
            keep[sid] = tuple(int(i) for i in idx.split(",") if i != "")
        return cls.from_keep(source, keep)


def _slot_width(cfg: ChannelConfig, sid: str) -> int:
    layers = cfg.ga if sid.startswith("ga") else cfg.gs
    return layers[int(sid[2:])][1]


def _pruned_config(source: ChannelConfig, keep: dict) -> ChannelConfig:
    ga_w, gs_w = source.widths()
    for sid, idx in keep.items():
        widths = ga_w if sid.startswith("ga") else gs_w
        pos = int(sid[2:]) + 1
        if not 0 < pos < len(widths) - 1:
            raise PlanMismatchError(f"slot {sid} does not name a maskable layer")
        widths[pos] = len(idx)
    return ChannelConfig.from_widths(ga_w, gs_w, source.kernel, source.stride)


def extract_plan(model: CodecModel) -> KeepPlan:
    """Keep channel c of each slot iff its eval gate is 1."""
    if not model.masked:
        raise PlanMismatchError("model has no mask slots to read a plan from")
    keep = {}
    for sid, vec in model.mask_slots():
        idx = vec.keep_indices()
        if not idx:
            raise DegeneratePlanError(sid)
        keep[sid] = tuple(idx)
    return KeepPlan.from_keep(model.config, keep)


def _check_plan(model: CodecModel, plan: KeepPlan) -> None:
    if plan.source != model.config:
        raise PlanMismatchError("plan was derived from a different channel config")
    if sorted(plan.keep) != sorted(model.slot_ids()):
        raise PlanMismatchError(f"plan slots {sorted(plan.keep)} != model slots "
                                f"{sorted(model.slot_ids())}")
    widths = model.slot_widths()
    for sid, idx in plan.keep.items():
        if idx[0] < 0 or idx[-1] >= widths[sid]:
            raise PlanMismatchError(f"slot {sid}: indices {idx} outside [0, {widths[sid]})")


def _slice(t: Tensor, axis: int, idx: Optional[Sequence[int]]) -> Tensor:
    data = t.data if idx is None else np.take(t.data, list(idx), axis=axis)
    return Tensor(np.ascontiguousarray(data).copy(), requires_grad=t.requires_grad)


def _prune_stack(convs, gdns, prefix: str, keep: dict):
    new_convs, new_gdns = [], []
    last = len(convs) - 1
    for i, conv in enumerate(convs):
        out_idx = keep.get(f"{prefix}{i}") if i < last else None
        in_idx = keep.get(f"{prefix}{i - 1}") if i > 0 else None
        in_axis, out_axis = (0, 1) if conv.transposed else (1, 0)
        w = _slice(_slice(conv.weight, out_axis, out_idx), in_axis, in_idx)
        b = _slice(conv.bias, 0, out_idx)
        new_convs.append(ConvLayer(w, b, conv.stride, conv.padding, conv.transposed,
                                   conv.output_padding))
        if i < last:
            g = gdns[i]
            gamma = _slice(_slice(g.gamma_raw, 0, out_idx), 1, out_idx)
            new_gdns.append(GDNLayer(_slice(g.beta_raw, 0, out_idx), gamma, g.inverse))
    return new_convs, new_gdns


def prune(model: CodecModel, plan: KeepPlan) -> CodecModel:
    """Slice every masked conv, its GDN and the next layer's inputs to the keep sets."""
    _check_plan(model, plan)
    ga, ga_gdn = _prune_stack(model.ga, model.ga_gdn, "ga", plan.keep)
    gs, gs_gdn = _prune_stack(model.gs, model.gs_gdn, "gs", plan.keep)
    entropy = EntropyModel(_slice(model.entropy.loc, 0, None),
                           _slice(model.entropy.scale_raw, 0, None))
    slim = CodecModel(plan.config, ga, ga_gdn, gs, gs_gdn, entropy, model.gate_cfg, None)
    slim.keep_plan = plan
    return slim


# ---------------------------------------------------------------- verification


@dataclass
class InputCheck:
    index: int
    max_abs_diff: float
    where: str
    latent_diff: float
    recon_diff: float
    rate_diff: float
    psnr_masked: float
    psnr_pruned: float


@dataclass
class EquivalenceReport:
    tol: float
    checks: list[InputCheck] = field(default_factory=list)

    @property
    def max_abs_diff(self) -> float:
        return max((c.max_abs_diff for c in self.checks), default=0.0)

    @property
    def passed(self) -> bool:
        return all(c.max_abs_diff <= self.tol for c in self.checks)

    def worst(self) -> Optional[InputCheck]:
        return max(self.checks, key=lambda c: c.max_abs_diff, default=None)

    def summary(self) -> str:
        w = self.worst()
        status = "PASS" if self.passed else "FAIL"
        if w is None:
            return f"{status}: no inputs"
        return (f"{status}: max |diff| {w.max_abs_diff:.3g} (tol {self.tol:g}) "
                f"at input {w.index}, {w.where}")


def _max_diff(a: np.ndarray, b: np.ndarray) -> tuple[float, tuple]:
    if a.shape != b.shape:
        return float("inf"), ()
    d = np.abs(a.astype(np.float64) - b.astype(np.float64))
    if d.size == 0:
        return 0.0, ()
    flat = int(np.argmax(d))
    return float(d.reshape(-1)[flat]), np.unravel_index(flat, d.shape)


def verify_equivalence(masked_model: CodecModel, pruned_model: CodecModel,
                       inputs: Union[Tensor, Sequence[Tensor]], tol: float = 0.0) -> EquivalenceReport:
    """Eval-phase comparison of latents, reconstructions, rates and PSNR."""
    if isinstance(inputs, Tensor):
        inputs = [Tensor(inputs.data[i:i + 1]) for i in range(inputs.shape[0])]
    report = EquivalenceReport(tol)
    with T.no_grad():
        for i, x in enumerate(inputs):
            a = forward(masked_model, x, EVAL)
            b = forward(pruned_model, x, EVAL)
            lat, lat_at = _max_diff(a.y.data, b.y.data)
            rec, rec_at = _max_diff(a.x_hat.data, b.x_hat.data)
            rate = abs(float(a.bits.item()) - float(b.bits.item()))
            pa = psnr(distortion_mse(x, a.x_hat)) if np.any(a.x_hat.data != x.data) else float("inf")
            pb = psnr(distortion_mse(x, b.x_hat)) if np.any(b.x_hat.data != x.data) else float("inf")
            worst = max(lat, rec, rate)
            if worst == lat:
                where = f"latent{tuple(int(j) for j in lat_at)}"
            elif worst == rec:
                where = f"reconstruction{tuple(int(j) for j in rec_at)}"
            else:
                where = "rate"
            report.checks.append(InputCheck(i, worst, where, lat, rec, rate, pa, pb))
    return report
