"""Small U-shaped segmentation networks built from recorded ops.

One architecture serves every training regime: a contracting path of
single conv+relu blocks, a two-conv bottleneck (where dropout lives),
and an expanding path that upsamples, halves channels, and merges the
matching skip. The two-head variant shares the contracting path and
bottleneck and grows two independent expanding paths.

Also holds the binary tensor-bundle format used for checkpoints.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .tensor import Graph, Tensor

CHECKPOINT_MAGIC = b"JSEGv1"


@dataclass(frozen=True)
class Arch:
    """Shape of the network, independent of any training choices."""

    in_channels: int = 1
    out_channels: int = 2
    base_channels: int = 8
    depth: int = 3

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if min(self.in_channels, self.out_channels, self.base_channels) < 1:
            raise ValueError("channel counts must be positive")

    def level_channels(self, i: int) -> int:
        return self.base_channels * (1 << i)


@dataclass
class NetworkParams:
    arch: Arch
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def tensor_list(self) -> list[Tensor]:
        return list(self.tensors.values())


@dataclass
class MultiHeadParams:
    """Shared trunk plus one expanding path per output head."""

    arch: Arch
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def trunk_names(self) -> list[str]:
        return [n for n in self.tensors if n.startswith(("enc", "mid"))]

    def head_names(self, head: str) -> list[str]:
        prefix = head + "/"
        return [n for n in self.tensors if n.startswith(prefix)]

    def branch_tensors(self, head: str) -> list[Tensor]:
        """Trunk plus one head: the parameters that head's loss regularizes."""
        return [self.tensors[n] for n in self.trunk_names() + self.head_names(head)]

    def tensor_list(self) -> list[Tensor]:
        return list(self.tensors.values())


def _conv_shapes(arch: Arch) -> list[tuple[str, int, int, int]]:
    """(name, out_ch, in_ch, k) for every conv, in forward order."""
    shapes = []
    ch = arch.in_channels
    for i in range(arch.depth):
        out = arch.level_channels(i)
        shapes.append((f"enc{i}", out, ch, 3))
        ch = out
    mid = arch.level_channels(arch.depth)
    shapes.append(("mid0", mid, ch, 3))
    shapes.append(("mid1", mid, mid, 3))
    ch = mid
    for i in reversed(range(arch.depth)):
        out = arch.level_channels(i)
        shapes.append((f"dec{i}/up", out, ch, 3))
        shapes.append((f"dec{i}/merge", out, 2 * out, 3))
        ch = out
    shapes.append(("head", arch.out_channels, ch, 1))
    return shapes


def _draw_conv(rng: np.random.Generator, out_ch: int, in_ch: int, k: int):
    bound = 1.0 / np.sqrt(in_ch * k * k)
    w = rng.uniform(-bound, bound, size=(out_ch, in_ch, k, k)).astype(np.float32)
    b = np.zeros(out_ch, dtype=np.float32)
    return Tensor(w), Tensor(b)


def init_params(arch: Arch, seed: int) -> NetworkParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases.

    Draw order follows the forward pass, so a seed pins every value.
    """
    rng = np.random.default_rng(seed)
    params = NetworkParams(arch)
    for name, out_ch, in_ch, k in _conv_shapes(arch):
        w, b = _draw_conv(rng, out_ch, in_ch, k)
        params.tensors[f"{name}/w"] = w
        params.tensors[f"{name}/b"] = b
    return params


def init_multihead_params(arch: Arch, seed: int,
                          heads: tuple[str, str] = ("myo", "scar")) -> MultiHeadParams:
    """Shared trunk drawn first, then each head's expanding path in turn."""
    rng = np.random.default_rng(seed)
    params = MultiHeadParams(arch)
    trunk = [s for s in _conv_shapes(arch) if s[0].startswith(("enc", "mid"))]
    branch = [s for s in _conv_shapes(arch) if not s[0].startswith(("enc", "mid"))]
    for name, out_ch, in_ch, k in trunk:
        w, b = _draw_conv(rng, out_ch, in_ch, k)
        params.tensors[f"{name}/w"] = w
        params.tensors[f"{name}/b"] = b
    for head in heads:
        for name, out_ch, in_ch, k in branch:
            w, b = _draw_conv(rng, out_ch, in_ch, k)
            params.tensors[f"{head}/{name}/w"] = w
            params.tensors[f"{head}/{name}/b"] = b
    return params


def param_count(params) -> int:
    return sum(t.size for t in params.tensor_list())


def _conv_block(tensors, name, x, g):
    w, b = tensors[f"{name}/w"], tensors[f"{name}/b"]
    pad = (w.shape[2] - 1) // 2
    return ops.relu(ops.conv2d(x, w, b, padding=pad, g=g), g)


def _encode(tensors, arch: Arch, image: Tensor, dropout_p, train, rng, g):
    skips = []
    x = image
    for i in range(arch.depth):
        x = _conv_block(tensors, f"enc{i}", x, g)
        skips.append(x)
        x = ops.max_pool2(x, g)
    x = _conv_block(tensors, "mid0", x, g)
    x = _conv_block(tensors, "mid1", x, g)
    # regularize the bottleneck features only: noise injected closer to the
    # output corrupts the probability maps, and downstream consumers (the
    # mask product) need those to be dependable at train time
    x = ops.dropout(x, dropout_p, train, rng, g)
    return x, skips


def _decode(tensors, arch: Arch, x: Tensor, skips, prefix, g):
    for i in reversed(range(arch.depth)):
        x = ops.upsample2(x, g)
        x = _conv_block(tensors, f"{prefix}dec{i}/up", x, g)
        x = ops.concat_channels([skips[i], x], g)
        x = _conv_block(tensors, f"{prefix}dec{i}/merge", x, g)
    w, b = tensors[f"{prefix}head/w"], tensors[f"{prefix}head/b"]
    return ops.conv2d(x, w, b, padding=0, g=g)


def _check_input(arch: Arch, image: Tensor) -> None:
    if image.data.ndim != 3 or image.shape[0] != arch.in_channels:
        raise ValueError(
            f"expected {arch.in_channels}xHxW input, got shape {image.shape}")
    step = 1 << arch.depth
    _, h, w = image.shape
    if h % step or w % step:
        raise ValueError(f"input {h}x{w} not divisible by 2^depth = {step}")


def unet_forward(params: NetworkParams, image: Tensor, dropout_p: float = 0.0,
                 train: bool = False, rng: Optional[np.random.Generator] = None,
                 g: Optional[Graph] = None) -> Tensor:
    """Per-pixel class logits, shape (out_channels, H, W)."""
    _check_input(params.arch, image)
    x, skips = _encode(params.tensors, params.arch, image, dropout_p, train, rng, g)
    return _decode(params.tensors, params.arch, x, skips, "", g)


def multihead_forward(params: MultiHeadParams, image: Tensor, dropout_p: float = 0.0,
                      train: bool = False, rng: Optional[np.random.Generator] = None,
                      g: Optional[Graph] = None,
                      heads: tuple[str, str] = ("myo", "scar")) -> tuple[Tensor, Tensor]:
    """One shared encoding, one logits map per head."""
    _check_input(params.arch, image)
    x, skips = _encode(params.tensors, params.arch, image, dropout_p, train, rng, g)
    outs = tuple(_decode(params.tensors, params.arch, x, skips, f"{h}/", g)
                 for h in heads)
    return outs


def save_tensors(path, named: dict[str, np.ndarray]) -> None:
    """Write named float32 arrays: magic, then length-prefixed records."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        for name, arr in named.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError(
            f"truncated checkpoint: wanted {n} bytes for {what} at offset "
            f"{f.tell() - len(buf)}, got {len(buf)}")
    return buf


def load_tensors(path) -> dict[str, np.ndarray]:
    """Read records until EOF; inverse of :func:`save_tensors`."""
    named: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r} at offset 0")
        while True:
            head = f.read(4)
            if not head:
                return named
            if len(head) != 4:
                raise ValueError(f"truncated record header at offset {f.tell() - len(head)}")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(f, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
            shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "shape"))
            count = int(np.prod(shape, dtype=np.int64)) if rank else 1
            raw = _read_exact(f, 4 * count, f"values of {name!r}")
            named[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(
                np.float32, copy=True)
