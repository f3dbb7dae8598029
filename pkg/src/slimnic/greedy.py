"""Greedy per-layer channel search on a trained model.

Within each layer the channel whose removal costs the least PSNR is
zeroed, repeatedly, until the cheapest remaining removal would push the
cumulative drop past the threshold; then the search moves to the next
layer. Removal is a temporary mask, never weight surgery, so the final
keep sets can be handed to the pruner.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .codec import CodecModel, evaluate
from .pruner import KeepPlan
from .tensor import Tensor

PAIRED = "paired"
PAIRED_ENCODER_FIRST = "paired-encoder-first"
FORWARD = "forward"
ORDERS = (PAIRED, PAIRED_ENCODER_FIRST, FORWARD)

CURVE_HEADER = ["pruning_ratio", "psnr_drop_percent"]


@dataclass(frozen=True)
class SearchConfig:
    psnr_drop_threshold: float = 1.0  # percent of the baseline PSNR
    order: str = PAIRED
    start: str = "gates"  # "gates": begin from the model's own masks; "dense": all on

    def __post_init__(self):
        if not self.psnr_drop_threshold >= 0:
            raise ValueError("threshold must be >= 0")
        if self.order not in ORDERS:
            raise ValueError(f"order must be one of {ORDERS}")
        if self.start not in ("gates", "dense"):
            raise ValueError("start must be 'gates' or 'dense'")


def layer_order(model: CodecModel, order: str = PAIRED) -> list[str]:
    """Maskable layers from the image ends inwards.

    The default pairs the k-th encoder layer from the input with the k-th
    decoder layer from the output and visits the decoder one first.
    """
    enc = [s for s in model.slot_ids() if s.startswith("ga")]
    dec = [s for s in model.slot_ids() if s.startswith("gs")][::-1]
    if order == FORWARD:
        return enc + dec[::-1]
    out = []
    for i in range(max(len(enc), len(dec))):
        pair = []
        if i < len(dec):
            pair.append(dec[i])
        if i < len(enc):
            pair.append(enc[i])
        if order == PAIRED_ENCODER_FIRST:
            pair.reverse()
        out += pair
    return out


@dataclass
class StepLog:
    layer: str
    removed: Optional[int]
    drops: dict  # candidate channel -> cumulative PSNR drop (%)


@dataclass
class SearchResult:
    threshold: float
    baseline_psnr: float
    keep: dict
    curve: list[tuple[float, float]] = field(default_factory=list)
    steps: list[StepLog] = field(default_factory=list)
    evaluations: int = 0
    total_channels: int = 0
    initial_pruned: int = 0

    @property
    def pruning_ratio(self) -> float:
        kept = sum(len(v) for v in self.keep.values())
        return 1.0 - kept / self.total_channels if self.total_channels else 0.0

    @property
    def final_drop(self) -> float:
        return self.curve[-1][1] if self.curve else 0.0

    def plan(self, model: CodecModel) -> KeepPlan:
        return KeepPlan.from_keep(model.config, self.keep)


def _psnr(model: CodecModel, images: Tensor, masks: dict) -> float:
    tensors = {sid: Tensor(m) for sid, m in masks.items()}
    return evaluate(model, images, masks=tensors).psnr


def greedy_search(model: CodecModel, images: Tensor, cfg: SearchConfig = SearchConfig()) -> SearchResult:
    if images.shape[0] == 0:
        raise ValueError("evaluation set is empty")
    widths = model.slot_widths()
    if cfg.start == "gates" and model.masked:
        masks = {sid: vec.hard_mask().copy() for sid, vec in model.mask_slots()}
    else:
        masks = {sid: np.ones(widths[sid], dtype=np.float32) for sid in model.slot_ids()}
    total = sum(widths.values())
    initial_pruned = int(total - sum(m.sum() for m in masks.values()))

    base = _psnr(model, images, masks)
    result = SearchResult(cfg.psnr_drop_threshold, base, {}, total_channels=total,
                          initial_pruned=initial_pruned)
    evaluations = 1
    pruned = initial_pruned
    for sid in layer_order(model, cfg.order):
        mask = masks[sid]
        while True:
            alive = [int(c) for c in np.flatnonzero(mask)]
            if len(alive) <= 1:
                break
            drops = {}
            for c in alive:
                mask[c] = 0.0
                drops[c] = 100.0 * (base - _psnr(model, images, masks)) / base
                mask[c] = 1.0
                evaluations += 1
            best = min(alive, key=lambda c: (drops[c], c))
            if drops[best] <= cfg.psnr_drop_threshold:
                mask[best] = 0.0
                pruned += 1
                result.curve.append((pruned / total, drops[best]))
                result.steps.append(StepLog(sid, best, drops))
            else:
                result.steps.append(StepLog(sid, None, drops))
                break
    result.keep = {sid: tuple(int(c) for c in np.flatnonzero(masks[sid]))
                   for sid in model.slot_ids()}
    result.evaluations = evaluations
    return result


def curve_csv(result: Optional[SearchResult], header_lines: Optional[list[str]] = None) -> str:
    buf = io.StringIO()
    for line in header_lines or []:
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVE_HEADER)
    for ratio, drop in (result.curve if result else []):
        writer.writerow([f"{ratio:.6f}", f"{drop:.6f}"])
    return buf.getvalue()


def curve_report(results, csv_path=None, svg_path=None, header_lines=None) -> str:
    """Write the drop-vs-ratio curve(s) as CSV (and optionally SVG); returns the CSV text.

    ``results`` is one SearchResult, a list of them (one per threshold), or None.
    """
    from .plot import line_chart

    if results is None:
        results = []
    elif isinstance(results, SearchResult):
        results = [results]
    if len(results) <= 1:
        text = curve_csv(results[0] if results else None, header_lines)
    else:
        buf = io.StringIO()
        for line in header_lines or []:
            buf.write(f"# {line}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["threshold"] + CURVE_HEADER)
        for res in results:
            for ratio, drop in res.curve:
                writer.writerow([f"{res.threshold:g}", f"{ratio:.6f}", f"{drop:.6f}"])
        text = buf.getvalue()
    if csv_path is not None:
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    if svg_path is not None:
        series = {f"threshold {r.threshold:g}%": [(0.0, 0.0)] + list(r.curve) for r in results}
        svg = line_chart(series, "pruning ratio", "PSNR drop (%)",
                         "PSNR drop vs. pruning ratio")
        with open(svg_path, "w", encoding="utf-8") as fh:
            fh.write(svg)
    return text
