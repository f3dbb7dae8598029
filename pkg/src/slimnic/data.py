"""Image ingestion: binary PPM (P6) files and seeded synthetic textures."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .errors import FormatError
from .tensor import Tensor

SYNTHETIC_PREFIX = "synthetic:"


@dataclass
class ImageRecord:
    width: int
    height: int
    samples: bytes  # 8-bit RGB, row-major
    source: str = ""

    def __post_init__(self):
        if len(self.samples) != 3 * self.width * self.height:
            raise FormatError(f"{self.source or 'image'}: {len(self.samples)} samples for "
                              f"{self.width}x{self.height} RGB")

    def array(self) -> np.ndarray:
        """[3, H, W] float32 in [0, 1]."""
        hwc = np.frombuffer(self.samples, dtype=np.uint8).reshape(self.height, self.width, 3)
        return (hwc.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


# ---------------------------------------------------------------- PPM


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError(f"unexpected end of header at byte {pos}")
    return buf[start:pos], pos


def parse_ppm(buf: bytes, source: str = "") -> ImageRecord:
    """Parse a binary P6 image with maxval <= 255."""
    where = source or "ppm"
    if buf[:2] != b"P6":
        raise FormatError(f"{where}: bad magic {buf[:2]!r} at byte 0, expected b'P6'")
    pos = 2
    fields = []
    for label in ("width", "height", "maxval"):
        token_start = pos
        token, pos = _read_token(buf, pos)
        if not token.isdigit():
            raise FormatError(f"{where}: {label} {token!r} is not a number "
                              f"(byte offset {token_start})")
        fields.append(int(token))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"{where}: non-positive size {width}x{height}")
    if not 0 < maxval <= 255:
        raise FormatError(f"{where}: maxval {maxval} unsupported (need 1..255)")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError(f"{where}: missing whitespace after header at byte offset {pos}")
    pos += 1
    expected = 3 * width * height
    payload = buf[pos:pos + expected]
    if len(payload) != expected:
        raise FormatError(f"{where}: truncated payload at byte offset {pos}: expected "
                          f"{expected} bytes, got {len(payload)}")
    if maxval != 255:
        scaled = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) * 255.0 / maxval
        payload = np.round(scaled).astype(np.uint8).tobytes()
    return ImageRecord(width, height, bytes(payload), source)


def read_ppm(path: Union[str, Path]) -> ImageRecord:
    return parse_ppm(Path(path).read_bytes(), str(path))


def write_ppm(path: Union[str, Path], record: ImageRecord) -> None:
    header = f"P6\n{record.width} {record.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + record.samples)


def record_from_array(arr: np.ndarray, source: str = "") -> ImageRecord:
    """[3, H, W] floats in [0, 1] -> 8-bit record."""
    hwc = np.clip(np.round(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255)
    hwc = hwc.astype(np.uint8).transpose(1, 2, 0)
    return ImageRecord(hwc.shape[1], hwc.shape[0], hwc.tobytes(), source)


# ---------------------------------------------------------------- synthetic


def synthetic_image(seed: int, index: int, size: int) -> ImageRecord:
    """Smooth colour gradient plus a few Gaussian blobs and mild texture."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(index,))))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / max(size - 1, 1)
    img = np.empty((3, size, size))
    for c in range(3):
        a, b, base = rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), rng.uniform(0.25, 0.75)
        img[c] = base + a * (xx - 0.5) + b * (yy - 0.5)
    for _ in range(int(rng.integers(2, 6))):
        cx, cy = rng.uniform(0, 1, 2)
        sigma = rng.uniform(0.05, 0.25)
        colour = rng.uniform(-0.5, 0.5, 3)
        blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma ** 2))
        img += colour[:, None, None] * blob
    freq = rng.uniform(4, 12)
    angle = rng.uniform(0, np.pi)
    stripes = np.sin(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)))
    img += rng.uniform(0.0, 0.08) * stripes
    img += rng.normal(0, 0.01, img.shape)
    return record_from_array(np.clip(img, 0.0, 1.0), f"synthetic:{seed}:{index}:{size}")


def parse_synthetic(spec: str) -> tuple[int, int, int]:
    m = re.fullmatch(r"synthetic:(\d+):(\d+):(\d+)", spec.strip())
    if not m:
        raise ValueError(f"bad synthetic spec {spec!r}; expected synthetic:<seed>:<count>:<size>")
    seed, count, size = (int(g) for g in m.groups())
    if count < 1 or size < 1:
        raise ValueError(f"synthetic spec needs positive count and size: {spec!r}")
    return seed, count, size


def load_images(source: Union[str, Path]) -> list[ImageRecord]:
    """A directory of .ppm files (lexicographic order), one .ppm file, or a synthetic spec."""
    text = str(source)
    if text.startswith(SYNTHETIC_PREFIX):
        seed, count, size = parse_synthetic(text)
        return [synthetic_image(seed, i, size) for i in range(count)]
    path = Path(source)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".ppm", ".pnm"))
        if not files:
            raise FileNotFoundError(f"no .ppm files in {path}")
        return [read_ppm(p) for p in files]
    if path.is_file():
        return [read_ppm(path)]
    raise FileNotFoundError(f"image source not found: {source}")


def to_tensor(records: list[ImageRecord]) -> Tensor:
    """Stack equally sized records into a [N, 3, H, W] tensor in [0, 1]."""
    if not records:
        raise ValueError("no images")
    shapes = {(r.height, r.width) for r in records}
    if len(shapes) != 1:
        raise ValueError(f"images differ in size: {sorted(shapes)}")
    return Tensor(np.stack([r.array() for r in records]))


def crop_to_multiple(records: list[ImageRecord], multiple: int) -> list[ImageRecord]:
    """Top-left crop each image so both sides are multiples of ``multiple``."""
    out = []
    for r in records:
        h, w = (r.height // multiple) * multiple, (r.width // multiple) * multiple
        if h == 0 or w == 0:
            raise ValueError(f"{r.source}: {r.width}x{r.height} smaller than {multiple}")
        hwc = np.frombuffer(r.samples, dtype=np.uint8).reshape(r.height, r.width, 3)[:h, :w]
        out.append(ImageRecord(w, h, np.ascontiguousarray(hwc).tobytes(), r.source))
    return out


def default_output_dir() -> str:
    return os.environ.get("SLIMNIC_OUT", ".")
