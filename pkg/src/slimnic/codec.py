"""Factorized-prior compression network with optional channel-mask slots.

ga: conv -> [mask] -> GDN, three times, then a final conv to the latent.
gs: deconv -> [mask] -> IGDN, three times, then a final deconv to RGB.
Every conv except the last of each transform is followed by a mask slot,
placed before the GDN so a zeroed channel contributes nothing to the
other channels' normalization pools.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .abcm import DETERMINISTIC, EVAL, TRAIN, GateConfig, ImportanceVector
from .errors import ContractError, DimensionError, GeometryError, NumericError
from .rng import RngState
from .tensor import Tensor

BETA_FLOOR = 1e-6
GAMMA_FLOOR = 0.0
SCALE_FLOOR = 1e-6
MASS_FLOOR = 2.0 ** -32
PIXEL_MAX = 255.0
OUTPUT_BIAS_INIT = 0.5


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class ChannelConfig:
    """Per-layer (in, out) widths of both transforms plus kernel geometry."""

    ga: tuple[tuple[int, int], ...]
    gs: tuple[tuple[int, int], ...]
    kernel: int = 5
    stride: int = 2

    def __post_init__(self):
        object.__setattr__(self, "ga", tuple((int(a), int(b)) for a, b in self.ga))
        object.__setattr__(self, "gs", tuple((int(a), int(b)) for a, b in self.gs))
        self.validate()

    @classmethod
    def uniform(cls, hidden: int = 8, latent: int = 12, stages: int = 4,
                kernel: int = 5, stride: int = 2) -> "ChannelConfig":
        ga_widths = [3] + [hidden] * (stages - 1) + [latent]
        gs_widths = [latent] + [hidden] * (stages - 1) + [3]
        return cls(tuple(zip(ga_widths[:-1], ga_widths[1:])),
                   tuple(zip(gs_widths[:-1], gs_widths[1:])), kernel, stride)

    @classmethod
    def desk(cls) -> "ChannelConfig":
        return cls.uniform(8, 12)

    @classmethod
    def from_widths(cls, ga: list[int], gs: list[int], kernel: int = 5,
                    stride: int = 2) -> "ChannelConfig":
        return cls(tuple(zip(ga[:-1], ga[1:])), tuple(zip(gs[:-1], gs[1:])), kernel, stride)

    def validate(self) -> None:
        for name, layers in (("ga", self.ga), ("gs", self.gs)):
            if len(layers) < 1:
                raise ValueError(f"{name} needs at least one layer")
            for (_, out), (nxt_in, _) in zip(layers[:-1], layers[1:]):
                if out != nxt_in:
                    raise ValueError(f"{name} widths do not chain: {layers}")
            if any(a < 1 or b < 1 for a, b in layers):
                raise ValueError(f"{name} has a non-positive width: {layers}")
        if self.ga[0][0] != 3 or self.gs[-1][1] != 3:
            raise ValueError("first ga layer must take 3 channels and last gs layer emit 3")
        if self.ga[-1][1] != self.gs[0][0]:
            raise ValueError("latent width of ga and gs disagree")
        if self.kernel < 1 or self.stride < 1:
            raise ValueError("kernel and stride must be positive")

    @property
    def latent_channels(self) -> int:
        return self.ga[-1][1]

    @property
    def downsample(self) -> int:
        return self.stride ** len(self.ga)

    @property
    def padding(self) -> int:
        return self.kernel // 2

    def widths(self) -> tuple[list[int], list[int]]:
        return ([self.ga[0][0]] + [o for _, o in self.ga],
                [self.gs[0][0]] + [o for _, o in self.gs])

    def table(self) -> str:
        """Module / layer / in / out rows, GDN rows interleaved."""
        lines = ["module  layer  in  out"]
        for name, layers, gdn in (("ga", self.ga, "GDN"), ("gs", self.gs, "IGDN")):
            for i, (cin, cout) in enumerate(layers):
                lines.append(f"{name}  conv  {cin}  {cout}")
                if i < len(layers) - 1:
                    lines.append(f"{name}  {gdn}  {cout}  {cout}")
        return "\n".join(lines)


# ---------------------------------------------------------------- layers


@dataclass
class ConvLayer:
    weight: Tensor
    bias: Tensor
    stride: int
    padding: int
    transposed: bool = False
    output_padding: int = 0

    @property
    def in_channels(self) -> int:
        return self.weight.shape[0] if self.transposed else self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[1] if self.transposed else self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if self.transposed:
            return T.deconv2d(x, self.weight, self.bias, self.stride, self.padding,
                              self.output_padding)
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def params(self) -> list[tuple[str, Tensor]]:
        return [("weight", self.weight), ("bias", self.bias)]


@dataclass
class GDNLayer:
    """Stores square roots of beta/gamma; effective values are squares plus floors."""

    beta_raw: Tensor
    gamma_raw: Tensor
    inverse: bool = False

    @classmethod
    def create(cls, channels: int, inverse: bool = False) -> "GDNLayer":
        beta = np.ones(channels, dtype=np.float32)
        gamma = np.sqrt(np.float32(0.1)) * np.eye(channels, dtype=np.float32)
        return cls(Tensor(beta, True), Tensor(gamma, True), inverse)

    @property
    def channels(self) -> int:
        return self.beta_raw.shape[0]

    def effective(self) -> tuple[Tensor, Tensor]:
        beta = T.square(self.beta_raw) + BETA_FLOOR
        gamma = T.square(self.gamma_raw)
        if GAMMA_FLOOR:
            gamma = gamma + GAMMA_FLOOR
        return beta, gamma

    def __call__(self, x: Tensor) -> Tensor:
        beta, gamma = self.effective()
        return T.gdn(x, beta, gamma, self.inverse)

    def params(self) -> list[tuple[str, Tensor]]:
        return [("beta", self.beta_raw), ("gamma", self.gamma_raw)]


@dataclass
class EntropyModel:
    """Per-channel logistic density; scale = raw^2 + 1e-6."""

    loc: Tensor
    scale_raw: Tensor

    @classmethod
    def create(cls, channels: int, scale: float = 1.0) -> "EntropyModel":
        raw = np.full(channels, math.sqrt(scale), dtype=np.float32)
        return cls(Tensor(np.zeros(channels, dtype=np.float32), True), Tensor(raw, True))

    @property
    def channels(self) -> int:
        return self.loc.shape[0]

    def scale(self) -> Tensor:
        return T.square(self.scale_raw) + SCALE_FLOOR

    def params(self) -> list[tuple[str, Tensor]]:
        return [("loc", self.loc), ("scale", self.scale_raw)]


# ---------------------------------------------------------------- model


class CodecModel:
    """Analysis/synthesis transforms, entropy model and (optionally) mask slots."""

    def __init__(self, config: ChannelConfig, ga: list[ConvLayer], ga_gdn: list[GDNLayer],
                 gs: list[ConvLayer], gs_gdn: list[GDNLayer], entropy: EntropyModel,
                 gate_cfg: GateConfig = GateConfig(),
                 slots: Optional[dict[str, ImportanceVector]] = None):
        self.config = config
        self.ga = ga
        self.ga_gdn = ga_gdn
        self.gs = gs
        self.gs_gdn = gs_gdn
        self.entropy = entropy
        self.gate_cfg = gate_cfg
        self.slots = slots
        self.keep_plan = None  # set on models produced by the pruner
        self._check()

    def _check(self) -> None:
        cfg = self.config
        for name, convs, gdns, layers in (("ga", self.ga, self.ga_gdn, cfg.ga),
                                          ("gs", self.gs, self.gs_gdn, cfg.gs)):
            if len(convs) != len(layers) or len(gdns) != len(layers) - 1:
                raise ValueError(f"{name}: layer count does not match config")
            for i, (conv, (cin, cout)) in enumerate(zip(convs, layers)):
                if (conv.in_channels, conv.out_channels) != (cin, cout):
                    raise ValueError(f"{name}{i}: weights are {conv.in_channels}->"
                                     f"{conv.out_channels}, config says {cin}->{cout}")
                if i < len(gdns) and gdns[i].channels != cout:
                    raise ValueError(f"{name}{i}: GDN width {gdns[i].channels} != {cout}")
        if self.entropy.channels != cfg.latent_channels:
            raise ValueError("entropy model width does not match the latent")
        if self.slots is not None:
            if list(self.slots) != self.slot_ids():
                raise ValueError(f"mask slots {list(self.slots)} != {self.slot_ids()}")
            widths = self.slot_widths()
            for sid, vec in self.slots.items():
                if vec.channels != widths[sid]:
                    raise ValueError(f"slot {sid} has {vec.channels} channels, "
                                     f"conv emits {widths[sid]}")

    @property
    def masked(self) -> bool:
        return self.slots is not None

    def slot_ids(self) -> list[str]:
        """Ids of the maskable convs, encoder first, in forward order."""
        return ([f"ga{i}" for i in range(len(self.config.ga) - 1)]
                + [f"gs{i}" for i in range(len(self.config.gs) - 1)])

    def slot_widths(self) -> dict[str, int]:
        out = {}
        for i in range(len(self.config.ga) - 1):
            out[f"ga{i}"] = self.config.ga[i][1]
        for i in range(len(self.config.gs) - 1):
            out[f"gs{i}"] = self.config.gs[i][1]
        return out

    def mask_slots(self) -> list[tuple[str, ImportanceVector]]:
        return list(self.slots.items()) if self.slots else []

    def masks(self, phase: str = EVAL, rng: Optional[RngState] = None) -> dict[str, Tensor]:
        if not self.slots:
            return {}
        out = {}
        for i, (sid, vec) in enumerate(self.slots.items()):
            out[sid] = vec.mask(self.gate_cfg, phase, rng.split(i) if rng is not None else None)
        return out

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """All tensors in serialization order: codec (theta) then gates (phi)."""
        return self.theta() + self.phi()

    def theta(self) -> list[tuple[str, Tensor]]:
        out = []
        for prefix, convs, gdns in (("ga", self.ga, self.ga_gdn), ("gs", self.gs, self.gs_gdn)):
            for i, conv in enumerate(convs):
                out += [(f"{prefix}{i}.{n}", t) for n, t in conv.params()]
                if i < len(gdns):
                    out += [(f"{prefix}{i}.gdn.{n}", t) for n, t in gdns[i].params()]
        out += [(f"entropy.{n}", t) for n, t in self.entropy.params()]
        return out

    def phi(self) -> list[tuple[str, Tensor]]:
        return [(f"{sid}.abcm", vec.param) for sid, vec in self.mask_slots()]

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.grad = None

    def copy(self) -> "CodecModel":
        return copy.deepcopy(self)


def build_model(config: Optional[ChannelConfig] = None, gate_cfg: GateConfig = GateConfig(),
                seed: int = 0, abcm: bool = True) -> CodecModel:
    """Fresh model; codec weights depend only on (config, seed), not on ``abcm``."""
    config = config or ChannelConfig.desk()
    rng = RngState(seed).split(0)
    k, s, p = config.kernel, config.stride, config.padding
    op = s - 1 if s > 1 else 0

    ga, ga_gdn, gs, gs_gdn = [], [], [], []
    for i, (cin, cout) in enumerate(config.ga):
        std = 1.0 / math.sqrt(cin * k * k)
        w = rng.split(1, i).normal((cout, cin, k, k), std)
        ga.append(ConvLayer(Tensor(w, True), Tensor(np.zeros(cout, np.float32), True), s, p))
        if i < len(config.ga) - 1:
            ga_gdn.append(GDNLayer.create(cout))
    last = len(config.gs) - 1
    for i, (cin, cout) in enumerate(config.gs):
        std = s / math.sqrt(cin * k * k)
        w = rng.split(2, i).normal((cin, cout, k, k), std)
        # reconstructions start at mid-grey instead of black
        bias = np.full(cout, OUTPUT_BIAS_INIT if i == last else 0.0, dtype=np.float32)
        gs.append(ConvLayer(Tensor(w, True), Tensor(bias, True), s, p,
                            transposed=True, output_padding=op))
        if i < len(config.gs) - 1:
            gs_gdn.append(GDNLayer.create(cout, inverse=True))
    entropy = EntropyModel.create(config.latent_channels)

    slots = None
    if abcm:
        slots = {}
        for i in range(len(config.ga) - 1):
            slots[f"ga{i}"] = ImportanceVector(config.ga[i][1], gate_cfg.mode)
        for i in range(len(config.gs) - 1):
            slots[f"gs{i}"] = ImportanceVector(config.gs[i][1], gate_cfg.mode)
    return CodecModel(config, ga, ga_gdn, gs, gs_gdn, entropy, gate_cfg, slots)


# ---------------------------------------------------------------- forward


def _resolve(model: CodecModel, masks, masking: bool) -> dict:
    if not masking:
        return {}
    if masks is None:
        return model.masks(EVAL)
    return masks


def check_geometry(model: CodecModel, image_shape: tuple) -> None:
    if len(image_shape) != 4 or image_shape[1] != 3:
        raise DimensionError(f"expected an image batch [B, 3, H, W], got {image_shape}")
    d = model.config.downsample
    h, w = image_shape[2:]
    if h % d or w % d or h < d or w < d:
        raise GeometryError(f"image size {h}x{w} is not a positive multiple of {d}")


def analyze(model: CodecModel, image: Tensor, masks: Optional[dict] = None,
            masking: bool = True) -> Tensor:
    """Image [B,3,H,W] in [0,1] -> latent [B,M,H/16,W/16].

    ``masks`` maps slot ids to mask tensors; by default the model's eval
    gates are used. ``masking=False`` skips every slot.
    """
    check_geometry(model, image.shape)
    masks = _resolve(model, masks, masking)
    h = image
    last = len(model.ga) - 1
    for i, conv in enumerate(model.ga):
        h = conv(h)
        if i < last:
            m = masks.get(f"ga{i}")
            if m is not None:
                h = T.channel_mask(h, m)
            h = model.ga_gdn[i](h)
    return h


def synthesize(model: CodecModel, y_hat: Tensor, masks: Optional[dict] = None,
               masking: bool = True) -> Tensor:
    """Latent [B,M,h,w] -> reconstruction [B,3,16h,16w]."""
    if y_hat.data.ndim != 4 or y_hat.shape[1] != model.config.latent_channels:
        raise DimensionError(f"latent must be [B, {model.config.latent_channels}, h, w], "
                             f"got {y_hat.shape}")
    masks = _resolve(model, masks, masking)
    h = y_hat
    last = len(model.gs) - 1
    for i, conv in enumerate(model.gs):
        h = conv(h)
        if i < last:
            m = masks.get(f"gs{i}")
            if m is not None:
                h = T.channel_mask(h, m)
            h = model.gs_gdn[i](h)
    return h


def quantize(y: Tensor, mode: str = EVAL, rng: Optional[RngState] = None) -> Tensor:
    """Additive uniform noise (train) or round-half-to-even (eval)."""
    if mode == TRAIN:
        if rng is None:
            raise ValueError("train-mode quantization needs an RngState")
        return y + rng.uniform_noise(y.shape)
    if mode != EVAL:
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    return Tensor(np.round(y.data))


def rate_bits(entropy: EntropyModel, y_hat: Tensor) -> Tensor:
    """Total -log2 probability of ``y_hat`` under the entropy model (bits)."""
    mass = T.logistic_bin_mass(y_hat, entropy.loc, entropy.scale())
    return -T.tsum(T.log2(T.clamp_min(mass, MASS_FLOOR)))


def element_bits(entropy: EntropyModel, y_hat: Tensor) -> np.ndarray:
    with T.no_grad():
        mass = T.logistic_bin_mass(y_hat, entropy.loc, entropy.scale())
    return -np.log2(np.maximum(mass.data, np.float32(MASS_FLOOR)))


def distortion_mse(x: Tensor, x_hat: Tensor) -> Tensor:
    """Mean squared error on the 0-255 scale."""
    if x.shape != x_hat.shape:
        raise DimensionError(f"distortion: shapes {x.shape} and {x_hat.shape} differ")
    diff = (x - x_hat) * PIXEL_MAX
    return T.mean(T.square(diff))


def psnr(mse) -> float:
    value = mse.item() if isinstance(mse, Tensor) else float(mse)
    if not value > 0:
        raise NumericError(f"psnr undefined for mse {value}")
    return 10.0 * math.log10(PIXEL_MAX ** 2 / value)


def bpp(total_bits, image) -> float:
    bits = total_bits.item() if isinstance(total_bits, Tensor) else float(total_bits)
    b, _, h, w = image.shape
    return bits / (b * h * w)


@dataclass
class ForwardResult:
    y: Tensor
    y_hat: Tensor
    x_hat: Tensor
    bits: Tensor
    masks: dict = field(default_factory=dict)


def forward(model: CodecModel, image: Tensor, phase: str = EVAL,
            rng: Optional[RngState] = None, masks: Optional[dict] = None,
            masking: bool = True) -> ForwardResult:
    """analyze -> quantize -> rate -> synthesize with one shared mask draw."""
    if masks is None and masking:
        masks = model.masks(phase, rng.split(0) if rng is not None else None)
    elif not masking:
        masks = {}
    y = analyze(model, image, masks)
    y_hat = quantize(y, phase, rng.split(1) if rng is not None else None)
    bits = rate_bits(model.entropy, y_hat)
    x_hat = synthesize(model, y_hat, masks)
    return ForwardResult(y, y_hat, x_hat, bits, masks)


@dataclass
class EvalResult:
    bpp: float
    mse: float
    psnr: float


def evaluate(model: CodecModel, images: Tensor, masks: Optional[dict] = None,
             batch: int = 8) -> EvalResult:
    """Eval-phase bpp / MSE / PSNR over a stack of images."""
    n = images.shape[0]
    total_bits, sq_err, count = 0.0, 0.0, 0
    with T.no_grad():
        for start in range(0, n, batch):
            chunk = Tensor(images.data[start:start + batch])
            res = forward(model, chunk, EVAL, masks=masks)
            total_bits += float(res.bits.item())
            mse = distortion_mse(chunk, res.x_hat).item()
            sq_err += mse * chunk.size
            count += chunk.size
    b, _, h, w = images.shape
    mse = sq_err / count
    return EvalResult(total_bits / (b * h * w), mse, psnr(mse) if mse > 0 else math.inf)


def check_pixels(image: Tensor) -> None:
    d = image.data
    if d.size and (d.min() < 0.0 or d.max() > 1.0):
        raise ContractError("pixel values must lie in [0, 1]")
