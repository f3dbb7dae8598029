"""Parameter / FLOP accounting and the inference timing protocol.

Counting conventions (frozen; every report header repeats the first one):

* one multiply-add = 2 FLOPs
* conv: 2*Cin*k^2*Cout*H'*W' MACs at the output resolution + Cout*H'*W' bias adds
* deconv: the same MAC formula at the *input* resolution + Cout*Hout*Wout bias adds
* GDN/IGDN: (2C^2 + 4C)*H*W; per pixel: a C-term weighted sum for each of
  the C outputs (2C^2), and per channel a square, the beta add, a sqrt and
  the divide or multiply (4C)
* ABCM mask: C*H*W multiplies, itemized on its own row
* entropy model: ENTROPY_FLOPS_PER_ELEMENT per latent element, itemized

Counts depend only on the ChannelConfig, the mask slots and the geometry;
no weights are read.
"""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .abcm import EVAL
from .codec import ChannelConfig, CodecModel, check_geometry, evaluate, forward
from .tensor import Tensor, conv_output_size, deconv_output_size

FLOP_CONVENTION = "multiply-add = 2 FLOPs"
# centre (1), +-0.5 (2), two scale divides (2), two sigmoids of exp/add/divide (6),
# difference (1), log2 (1)
ENTROPY_FLOPS_PER_ELEMENT = 13

DEFAULT_WARMUP = 10
DEFAULT_ROUNDS = 10


@dataclass(frozen=True)
class CostRow:
    layer: str
    kind: str  # conv | deconv | gdn | igdn | abcm | entropy
    cin: int
    cout: int
    height: int  # resolution the row is counted at
    width: int
    params: int
    flops: int


@dataclass
class CostTable:
    rows: list[CostRow]
    geometry: Optional[tuple[int, int]]

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def abcm_params(self) -> int:
        return sum(r.params for r in self.rows if r.kind == "abcm")

    @property
    def abcm_flops(self) -> int:
        return sum(r.flops for r in self.rows if r.kind == "abcm")

    def by_kind(self, kind: str) -> list[CostRow]:
        return [r for r in self.rows if r.kind == kind]


def conv_params(cin: int, cout: int, k: int) -> int:
    return cout * cin * k * k + cout


def conv_flops(cin: int, cout: int, k: int, h_out: int, w_out: int) -> int:
    return 2 * cin * k * k * cout * h_out * w_out + cout * h_out * w_out


def deconv_flops(cin: int, cout: int, k: int, h_in: int, w_in: int, h_out: int, w_out: int) -> int:
    return 2 * cin * k * k * cout * h_in * w_in + cout * h_out * w_out


def gdn_params(c: int) -> int:
    return c * c + c


def gdn_flops(c: int, h: int, w: int) -> int:
    return (2 * c * c + 4 * c) * h * w


def _resolve(model_or_config) -> tuple[ChannelConfig, list[str]]:
    if isinstance(model_or_config, CodecModel):
        slots = model_or_config.slot_ids() if model_or_config.masked else []
        return model_or_config.config, slots
    return model_or_config, []


def _table(config: ChannelConfig, slots: Sequence[str], geometry) -> CostTable:
    k, s, p = config.kernel, config.stride, config.padding
    h, w = geometry if geometry is not None else (0, 0)
    rows: list[CostRow] = []
    last = len(config.ga) - 1
    for i, (cin, cout) in enumerate(config.ga):
        ho, wo = conv_output_size(h, k, s, p), conv_output_size(w, k, s, p)
        rows.append(CostRow(f"ga{i}.conv", "conv", cin, cout, ho, wo, conv_params(cin, cout, k),
                            conv_flops(cin, cout, k, ho, wo)))
        if i < last:
            if f"ga{i}" in slots:
                rows.append(CostRow(f"ga{i}.abcm", "abcm", cout, cout, ho, wo, cout, cout * ho * wo))
            rows.append(CostRow(f"ga{i}.gdn", "gdn", cout, cout, ho, wo, gdn_params(cout),
                                gdn_flops(cout, ho, wo)))
        h, w = ho, wo
    m = config.latent_channels
    rows.append(CostRow("entropy", "entropy", m, m, h, w, 2 * m,
                        ENTROPY_FLOPS_PER_ELEMENT * m * h * w))
    last = len(config.gs) - 1
    for i, (cin, cout) in enumerate(config.gs):
        ho = deconv_output_size(h, k, s, p, s - 1)
        wo = deconv_output_size(w, k, s, p, s - 1)
        rows.append(CostRow(f"gs{i}.deconv", "deconv", cin, cout, ho, wo,
                            conv_params(cin, cout, k), deconv_flops(cin, cout, k, h, w, ho, wo)))
        if i < last:
            if f"gs{i}" in slots:
                rows.append(CostRow(f"gs{i}.abcm", "abcm", cout, cout, ho, wo, cout, cout * ho * wo))
            rows.append(CostRow(f"gs{i}.igdn", "igdn", cout, cout, ho, wo, gdn_params(cout),
                                gdn_flops(cout, ho, wo)))
        h, w = ho, wo
    return CostTable(rows, tuple(geometry) if geometry is not None else None)


def count_params(model_or_config: Union[CodecModel, ChannelConfig]) -> CostTable:
    """Per-layer parameter counts; ABCM alpha vectors get their own rows."""
    config, slots = _resolve(model_or_config)
    return _table(config, slots, None)


def count_flops(model_or_config: Union[CodecModel, ChannelConfig], height: int, width: int) -> CostTable:
    """Per-layer FLOPs for one ``height`` x ``width`` image (params filled in too)."""
    config, slots = _resolve(model_or_config)
    d = config.downsample
    if height % d or width % d or height < d or width < d:
        from .errors import GeometryError
        raise GeometryError(f"image size {height}x{width} is not a positive multiple of {d}")
    return _table(config, slots, (height, width))


# ---------------------------------------------------------------- comparison


@dataclass
class CostReport:
    baseline: CostTable
    pruned: CostTable
    params_ratio: float
    flops_ratio: float
    psnr_baseline: float
    psnr_pruned: float
    psnr_drop_percent: float
    bpp_baseline: float
    bpp_pruned: float
    convention: str = FLOP_CONVENTION


def _ratio(a: int, b: int) -> float:
    return a / b if b else float("inf")


def compare(baseline: CodecModel, pruned: CodecModel, images: Tensor,
            geometry: Optional[tuple[int, int]] = None) -> CostReport:
    """Costs and quality of two models on the same evaluation set.

    Ratios are baseline / pruned over the full totals (ABCM rows included).
    """
    if geometry is None:
        geometry = tuple(images.shape[2:])
    a = count_flops(baseline, *geometry)
    b = count_flops(pruned, *geometry)
    ra = evaluate(baseline, images)
    rb = evaluate(pruned, images)
    drop = 100.0 * (ra.psnr - rb.psnr) / ra.psnr if ra.psnr != rb.psnr else 0.0
    return CostReport(a, b, _ratio(a.params, b.params), _ratio(a.flops, b.flops),
                      ra.psnr, rb.psnr, drop, ra.bpp, rb.bpp)


# ---------------------------------------------------------------- timing


@dataclass
class TimingReport:
    warmup: int
    rounds: int
    samples: list[float]
    geometry: tuple[int, int]
    threads: int = 1
    speedup: Optional[float] = None
    baseline: Optional["TimingReport"] = field(default=None, repr=False)

    @property
    def mean(self) -> float:
        return statistics.fmean(self.samples)


def bench_input(config: ChannelConfig, height: int, width: int, seed: int = 0) -> Tensor:
    rng = np.random.default_rng(seed)
    return Tensor(rng.random((1, 3, height, width), dtype=np.float32))


def bench(model: CodecModel, height: int, width: int, warmup: int = DEFAULT_WARMUP,
          rounds: int = DEFAULT_ROUNDS, seed: int = 0, threads: int = 1,
          image: Optional[Tensor] = None) -> TimingReport:
    """Time analyze + quantize + rate + synthesize on one reused eval input.

    Warm-up rounds run untimed; only the timed rounds enter the samples.
    """
    if warmup < 0 or rounds < 1:
        raise ValueError("need warmup >= 0 and rounds >= 1")
    x = image if image is not None else bench_input(model.config, height, width, seed)
    check_geometry(model, x.shape)
    masks = model.masks(EVAL)
    samples = []
    with threadpool_limits(limits=threads), T.no_grad():
        for _ in range(warmup):
            forward(model, x, EVAL, masks=masks)
        for _ in range(rounds):
            t0 = time.perf_counter()
            forward(model, x, EVAL, masks=masks)
            samples.append(time.perf_counter() - t0)
    return TimingReport(warmup, rounds, samples, (height, width), threads)


def bench_pair(baseline: CodecModel, pruned: CodecModel, height: int, width: int,
               warmup: int = DEFAULT_WARMUP, rounds: int = DEFAULT_ROUNDS,
               seed: int = 0, threads: int = 1) -> TimingReport:
    """Bench both models on the same input; the pruned report carries the speedup."""
    x = bench_input(baseline.config, height, width, seed)
    base = bench(baseline, height, width, warmup, rounds, threads=threads, image=x)
    slim = bench(pruned, height, width, warmup, rounds, threads=threads, image=x)
    slim.speedup = base.mean / slim.mean
    slim.baseline = base
    return slim


# ---------------------------------------------------------------- CSV


def _writer(header_lines):
    buf = io.StringIO()
    for line in header_lines or []:
        buf.write(f"# {line}\n")
    return buf, csv.writer(buf, lineterminator="\n")


def cost_table_csv(table: CostTable, header_lines=None) -> str:
    buf, w = _writer(list(header_lines or []) + [f"FLOP convention: {FLOP_CONVENTION}"])
    w.writerow(["layer", "kind", "cin", "cout", "height", "width", "params", "flops"])
    for r in table.rows:
        w.writerow([r.layer, r.kind, r.cin, r.cout, r.height, r.width, r.params, r.flops])
    w.writerow(["total", "", "", "", "", "", table.params, table.flops])
    return buf.getvalue()


def compare_csv(report: CostReport, quality: str = "desk", header_lines=None) -> str:
    buf, w = _writer(list(header_lines or []) + [f"FLOP convention: {report.convention}"])
    w.writerow(["quality", "psnr_drop_percent", "params_ratio", "flops_ratio",
                "psnr_baseline", "psnr_pruned", "bpp_baseline", "bpp_pruned",
                "params_baseline", "params_pruned", "flops_baseline", "flops_pruned"])
    w.writerow([quality, f"{report.psnr_drop_percent:.6f}", f"{report.params_ratio:.6f}",
                f"{report.flops_ratio:.6f}", f"{report.psnr_baseline:.6f}",
                f"{report.psnr_pruned:.6f}", f"{report.bpp_baseline:.6f}",
                f"{report.bpp_pruned:.6f}", report.baseline.params, report.pruned.params,
                report.baseline.flops, report.pruned.flops])
    return buf.getvalue()


TIMING_COLUMNS = ["model", "height", "width", "threads", "warmup", "rounds",
                  "mean_seconds", "speedup"]


def timing_csv(report: TimingReport, header_lines=None) -> str:
    """Summary rows (Table 2 style) followed by one row per timed sample."""
    buf, w = _writer(header_lines)
    w.writerow(TIMING_COLUMNS)
    reports = [("baseline", report.baseline), ("pruned", report)] if report.baseline else \
        [("model", report)]
    for name, rep in reports:
        speed = "" if rep.speedup is None else f"{rep.speedup:.6f}"
        w.writerow([name, rep.geometry[0], rep.geometry[1], rep.threads, rep.warmup,
                    rep.rounds, f"{rep.mean:.9f}", speed])
    w.writerow([])
    w.writerow(["model", "round", "seconds"])
    for name, rep in reports:
        for i, t in enumerate(rep.samples):
            w.writerow([name, i, f"{t:.9f}"])
    return buf.getvalue()
