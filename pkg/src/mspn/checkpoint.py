"""Binary checkpoints for MSPN and patch networks.

Layout (all integers little-endian uint32, all parameters little-endian
float32)::

    b"MSPN" | version byte (1 = MSPN, 2 = patch net)
    config counts (see ``_HEADER_FIELDS``)
    number of class names, then per name: byte length + UTF-8 bytes
    per layer in fixed order conv1..conv4, fc1, fc2, out:
        weight count, bias count, weights, bias
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .baseline import PatchNetConfig, build_patchnet
from .errors import CheckpointError, ConfigError
from .graph import SSP_STAGES, MSPNConfig, Network, build_mspn

MAGIC = b"MSPN"
VERSION_MSPN = 1
VERSION_PATCHNET = 2
_MODES = ("max", "average")
_HEADER_FIELDS = {
    VERSION_MSPN: ("input_height", "n_classes", "c1", "c2", "c3", "c4", "f1", "f2",
                   "ssp_mode", "ssp_mask", "input_norm"),
    VERSION_PATCHNET: ("patch_size", "n_classes", "c1", "c2", "c3", "c4", "f1", "f2",
                       "input_norm"),
}


def _header_values(net: Network) -> tuple[int, list]:
    cfg = net.config
    common = [*cfg.channels, *cfg.fc]
    if net.kind == "mspn":
        mask = sum(1 << i for i, s in enumerate(SSP_STAGES) if s in cfg.ssp)
        return VERSION_MSPN, [cfg.input_height, cfg.n_classes, *common,
                              _MODES.index(cfg.ssp_mode), mask, int(cfg.input_norm)]
    if net.kind == "patchnet":
        return VERSION_PATCHNET, [cfg.patch_size, cfg.n_classes, *common,
                                  int(cfg.input_norm)]
    raise CheckpointError(f"cannot serialize network kind {net.kind!r}")


def dumps(net: Network) -> bytes:
    version, header = _header_values(net)
    parts = [MAGIC, bytes([version]), struct.pack(f"<{len(header)}I", *header)]
    parts.append(struct.pack("<I", len(net.class_names)))
    for name in net.class_names:
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw]
    for name, p in net.params().items():
        w = np.ascontiguousarray(p["weight"], dtype="<f4")
        b = np.ascontiguousarray(p["bias"], dtype="<f4")
        parts += [struct.pack("<II", w.size, b.size), w.tobytes(), b.tobytes()]
    return b"".join(parts)


def save_checkpoint(net: Network, path) -> None:
    """Write ``net`` to ``path``.  Parameters are stored as float32."""
    Path(path).write_bytes(dumps(net))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(
                f"truncated checkpoint: need {n} bytes for {what}, "
                f"{len(self.buf) - self.pos} left", self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def loads(buf: bytes, dtype=np.float32) -> Network:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic, not an MSPN checkpoint", 0)
    version = r.take(1, "version")[0]
    if version not in _HEADER_FIELDS:
        raise CheckpointError(f"unsupported checkpoint version {version}", 4)
    header_at = r.pos
    h = {f: r.u32(f) for f in _HEADER_FIELDS[version]}
    n_names = r.u32("class name count")
    if n_names != h["n_classes"]:
        raise CheckpointError(
            f"{n_names} class names for {h['n_classes']} classes", r.pos - 4)
    names = []
    for i in range(n_names):
        length = r.u32(f"length of class name {i}")
        try:
            names.append(r.take(length, f"class name {i}").decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"class name {i} is not UTF-8", r.pos - length) from exc
    channels = (h["c1"], h["c2"], h["c3"], h["c4"])
    fc = (h["f1"], h["f2"])
    if h["input_norm"] > 1:
        raise CheckpointError(f"input_norm flag must be 0 or 1, got {h['input_norm']}", header_at)
    try:
        if version == VERSION_MSPN:
            if h["ssp_mode"] >= len(_MODES):
                raise CheckpointError(f"unknown ssp mode code {h['ssp_mode']}", header_at)
            ssp = tuple(s for i, s in enumerate(SSP_STAGES) if h["ssp_mask"] >> i & 1)
            cfg = MSPNConfig(channels, fc, _MODES[h["ssp_mode"]], ssp,
                             h["input_height"], h["n_classes"], bool(h["input_norm"]))
            net = build_mspn(cfg, seed=0, dtype=dtype, class_names=names)
        else:
            cfg = PatchNetConfig(channels, fc, h["patch_size"], h["n_classes"],
                                 bool(h["input_norm"]))
            net = build_patchnet(cfg, seed=0, dtype=dtype, class_names=names)
    except ConfigError as exc:
        raise CheckpointError(f"invalid configuration in header: {exc}", header_at) from exc
    for name, p in net.params().items():
        at = r.pos
        n_w, n_b = r.u32(f"{name} weight count"), r.u32(f"{name} bias count")
        if n_w != p["weight"].size or n_b != p["bias"].size:
            raise CheckpointError(
                f"layer {name} declares {n_w}+{n_b} values, config implies "
                f"{p['weight'].size}+{p['bias'].size}", at)
        w = np.frombuffer(r.take(4 * n_w, f"{name} weights"), dtype="<f4")
        b = np.frombuffer(r.take(4 * n_b, f"{name} bias"), dtype="<f4")
        p["weight"][...] = w.reshape(p["weight"].shape)
        p["bias"][...] = b
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after parameters", r.pos)
    return net


def load_checkpoint(path, dtype=np.float32) -> Network:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(buf, dtype)
