"""Model container: "ABCM" magic, u16 version, u32 manifest length, manifest, payload.

The manifest is UTF-8 ``key = value`` lines. It carries the channel
config, gate settings, a human-readable layer table, the keep plan of a
pruned model and one ``tensor.<name> = <shape>`` line per parameter. The
payload is every tensor as little-endian float32, in manifest order.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

from .abcm import GateConfig
from .codec import ChannelConfig, CodecModel, build_model
from .errors import FormatError

MAGIC = b"ABCM"
VERSION = 1
_HEADER = struct.Struct("<4sHI")


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def manifest_lines(model: CodecModel) -> list[tuple[str, str]]:
    cfg = model.config
    ga_w, gs_w = cfg.widths()
    g = model.gate_cfg
    items = [
        ("config.ga", ",".join(map(str, ga_w))),
        ("config.gs", ",".join(map(str, gs_w))),
        ("config.kernel", str(cfg.kernel)),
        ("config.stride", str(cfg.stride)),
        ("gate.mode", g.mode),
        ("gate.epsilon", repr(float(g.epsilon))),
        ("gate.tau", repr(float(g.tau))),
        ("masked", "true" if model.masked else "false"),
    ]
    for i, line in enumerate(cfg.table().splitlines()):
        items.append((f"layer.{i}", line.strip()))
    plan = model.keep_plan
    if plan is not None:
        src_ga, src_gs = plan.source.widths()
        items += [("plan.source.ga", ",".join(map(str, src_ga))),
                  ("plan.source.gs", ",".join(map(str, src_gs))),
                  ("plan.keep", plan.to_text())]
    for name, t in model.named_parameters():
        items.append((f"tensor.{name}", ",".join(map(str, t.shape))))
    return items


def dumps(model: CodecModel) -> bytes:
    manifest = "".join(f"{k} = {v}\n" for k, v in manifest_lines(model)).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(t.data, dtype="<f4").tobytes()
                       for _, t in model.named_parameters())
    return _HEADER.pack(MAGIC, VERSION, len(manifest)) + manifest + payload


def save_model(model: CodecModel, path: Union[str, Path]) -> None:
    Path(path).write_bytes(dumps(model))


def _parse_manifest(text: str) -> list[tuple[str, str]]:
    items = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise FormatError(f"manifest line {n}: expected 'key = value', got {line!r}")
        items.append((key.strip(), value.strip()))
    return items


def loads(blob: bytes) -> CodecModel:
    if len(blob) < _HEADER.size:
        raise FormatError(f"file too short for a header: {len(blob)} bytes")
    magic, version, mlen = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte 0, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version} (reader knows {VERSION})")
    start = _HEADER.size
    if start + mlen > len(blob):
        raise FormatError(f"manifest length {mlen} runs past end of file ({len(blob)} bytes)")
    try:
        items = _parse_manifest(blob[start:start + mlen].decode("utf-8"))
    except UnicodeDecodeError as err:
        raise FormatError(f"manifest is not UTF-8 at byte {start + err.start}") from None
    meta = {k: v for k, v in items if not k.startswith("tensor.")}
    shapes = [(k[len("tensor."):], tuple(_ints(v))) for k, v in items if k.startswith("tensor.")]
    try:
        config = ChannelConfig.from_widths(_ints(meta["config.ga"]), _ints(meta["config.gs"]),
                                           int(meta["config.kernel"]), int(meta["config.stride"]))
        gate_cfg = GateConfig(meta["gate.mode"], float(meta["gate.epsilon"]), float(meta["gate.tau"]))
        masked = meta["masked"] == "true"
    except KeyError as err:
        raise FormatError(f"manifest is missing {err.args[0]!r}") from None
    except ValueError as err:
        raise FormatError(f"manifest: {err}") from None

    model = build_model(config, gate_cfg, seed=0, abcm=masked)
    params = dict(model.named_parameters())
    if [n for n, _ in shapes] != list(params):
        raise FormatError("manifest tensor list does not match the model described by its config")
    expected = sum(int(np.prod(s)) for _, s in shapes) * 4
    payload = blob[start + mlen:]
    if len(payload) != expected:
        raise FormatError(f"payload length mismatch: manifest needs {expected} bytes, "
                          f"file has {len(payload)}")
    offset = 0
    for name, shape in shapes:
        t = params[name]
        if tuple(t.shape) != shape:
            raise FormatError(f"tensor {name}: manifest shape {shape} != model shape {t.shape}")
        n = int(np.prod(shape))
        t.data = np.frombuffer(payload, dtype="<f4", count=n, offset=offset) \
            .astype(np.float32).reshape(shape)
        offset += 4 * n
    if "plan.keep" in meta:
        from .pruner import KeepPlan
        source = ChannelConfig.from_widths(_ints(meta["plan.source.ga"]), _ints(meta["plan.source.gs"]),
                                           config.kernel, config.stride)
        plan = KeepPlan.from_text(source, meta["plan.keep"])
        if plan.config != config:
            raise FormatError("stored keep plan does not produce the stored config")
        model.keep_plan = plan
    return model


def load_model(path: Union[str, Path]) -> CodecModel:
    try:
        blob = Path(path).read_bytes()
    except OSError as err:
        raise FormatError(f"cannot read model {path}: {err.strerror}") from None
    return loads(blob)


def tensors_equal(a: CodecModel, b: CodecModel) -> bool:
    pa, pb = a.named_parameters(), b.named_parameters()
    return len(pa) == len(pb) and all(
        na == nb and ta.data.shape == tb.data.shape and ta.data.tobytes() == tb.data.tobytes()
        for (na, ta), (nb, tb) in zip(pa, pb))

