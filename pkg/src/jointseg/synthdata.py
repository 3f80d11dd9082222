"""Seeded synthetic scenes: a noisy annular "myocardium" with optional
"scar" arcs embedded in it, plus bright clutter away from the ring.

Every sample is a pure function of (scene spec, seed). Scars are angular
sectors of the ring, so scar ⊆ myocardium holds by construction. Also
owns the on-disk dataset format and the affine augmentation.
"""

from __future__ import annotations

import ast
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

DATASET_MAGIC = b"JSDSv1"


@dataclass(frozen=True)
class SceneSpec:
    """Scene geometry, intensity levels, and corruption knobs.

    Radius bounds are fractions of the image width; the ranges must be
    ordered and nested so every drawn ring is a proper annulus that
    fits the frame even after center jitter.
    """

    height: int = 64
    width: int = 64
    center_jitter: float = 0.05
    inner_radius: tuple[float, float] = (0.14, 0.18)
    outer_radius: tuple[float, float] = (0.26, 0.32)
    scar_arcs: tuple[int, int] = (0, 3)
    arc_width_deg: tuple[float, float] = (25.0, 80.0)
    clutter_blobs: tuple[int, int] = (1, 3)
    clutter_radius: tuple[float, float] = (2.0, 5.0)
    noise_std: float = 0.03
    background: float = 0.15
    myocardium: float = 0.55
    scar: float = 0.9
    clutter: float = 0.85

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ValueError(f"image {self.height}x{self.width} too small")
        lo_i, hi_i = self.inner_radius
        lo_o, hi_o = self.outer_radius
        if not (0.0 < lo_i <= hi_i < lo_o <= hi_o):
            raise ValueError(
                f"radius ranges must satisfy 0 < inner <= outer, got "
                f"inner={self.inner_radius} outer={self.outer_radius}")
        if hi_o + self.center_jitter >= 0.5:
            raise ValueError("ring can leave the frame: outer radius plus "
                             f"jitter reaches {hi_o + self.center_jitter:.3f} >= 0.5")
        for name in ("background", "myocardium", "scar", "clutter"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"intensity {name}={v} outside [0, 1]")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        for name in ("scar_arcs", "clutter_blobs", "arc_width_deg", "clutter_radius"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} range {lo}..{hi} invalid")


@dataclass
class Sample:
    """One scene: intensity image plus myocardium and scar masks."""

    image: np.ndarray  # float32, 1xHxW, values in [0, 1]
    myo: np.ndarray    # uint8, HxW, binary
    scar: np.ndarray   # uint8, HxW, binary
    id: str


def samples_equal(a: Sample, b: Sample) -> bool:
    return (a.id == b.id
            and a.image.shape == b.image.shape
            and np.array_equal(a.image, b.image)
            and np.array_equal(a.myo, b.myo)
            and np.array_equal(a.scar, b.scar))


def generate_sample(spec: SceneSpec, seed: int, id: Optional[str] = None) -> Sample:
    """Rasterize one scene. Draw order is fixed: center, radii, scar
    arcs, clutter blobs, then the noise field, so a seed pins the scene.
    """
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width
    cy = (h - 1) / 2 + rng.uniform(-spec.center_jitter, spec.center_jitter) * w
    cx = (w - 1) / 2 + rng.uniform(-spec.center_jitter, spec.center_jitter) * w
    r_in = rng.uniform(*spec.inner_radius) * w
    r_out = rng.uniform(*spec.outer_radius) * w

    yy, xx = np.mgrid[0:h, 0:w]
    dist = np.hypot(yy - cy, xx - cx)
    myo = (dist >= r_in) & (dist <= r_out)

    angle = np.arctan2(yy - cy, xx - cx) % (2 * np.pi)
    scar = np.zeros((h, w), dtype=bool)
    n_arcs = int(rng.integers(spec.scar_arcs[0], spec.scar_arcs[1] + 1))
    for _ in range(n_arcs):
        start = rng.uniform(0, 2 * np.pi)
        width = np.deg2rad(rng.uniform(*spec.arc_width_deg))
        scar |= myo & ((angle - start) % (2 * np.pi) <= width)

    image = np.full((h, w), spec.background, dtype=np.float64)
    image[myo] = spec.myocardium
    image[scar] = spec.scar
    n_blobs = int(rng.integers(spec.clutter_blobs[0], spec.clutter_blobs[1] + 1))
    for _ in range(n_blobs):
        by = rng.uniform(0, h)
        bx = rng.uniform(0, w)
        br = rng.uniform(*spec.clutter_radius)
        blob = np.hypot(yy - by, xx - bx) < br
        image[blob & ~myo] = spec.clutter  # clutter never touches the ring

    if spec.noise_std > 0:
        image = image + rng.normal(0.0, spec.noise_std, size=(h, w))
    image = np.clip(image, 0.0, 1.0)

    return Sample(image=image.astype(np.float32)[None],
                  myo=myo.astype(np.uint8),
                  scar=scar.astype(np.uint8),
                  id=id if id is not None else str(seed))


def sample_seeds(master_seed: int, count: int) -> np.ndarray:
    """Independent per-sample seeds from one master seed."""
    return np.random.SeedSequence(master_seed).generate_state(count, np.uint64)


def make_dataset(spec: SceneSpec, count: int, master_seed: int,
                 workers: int = 1) -> list[Sample]:
    """``count`` scenes with ids 0000, 0001, ... The result is identical
    for any worker count because each sample owns a derived seed."""
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    seeds = sample_seeds(master_seed, count)
    jobs = [(spec, int(s), f"{i:04d}") for i, s in enumerate(seeds)]
    if workers <= 1 or count < 2:
        return [generate_sample(*j) for j in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda j: generate_sample(*j), jobs))


@dataclass(frozen=True)
class AffineRanges:
    """Sampling bounds for one random affine map. The defaults are the
    identity; widen them to augment."""

    scale: tuple[float, float] = (1.0, 1.0)
    rotate_deg: tuple[float, float] = (0.0, 0.0)
    translate: tuple[float, float] = (0.0, 0.0)  # fraction of width
    shear_deg: tuple[float, float] = (0.0, 0.0)


def _affine_matrix(sample_shape, scale, rot_rad, tx, ty, shear_rad) -> np.ndarray:
    """Forward homogeneous map about the image center: translate after
    rotate after shear after scale."""
    h, w = sample_shape
    cy, cx = (h - 1) / 2, (w - 1) / 2
    to_center = np.array([[1, 0, -cy], [0, 1, -cx], [0, 0, 1]], dtype=np.float64)
    scl = np.diag([scale, scale, 1.0]).astype(np.float64)
    shr = np.array([[1, np.tan(shear_rad), 0], [0, 1, 0], [0, 0, 1]], dtype=np.float64)
    c, s = np.cos(rot_rad), np.sin(rot_rad)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)
    back = np.array([[1, 0, cy + ty], [0, 1, cx + tx], [0, 0, 1]], dtype=np.float64)
    return back @ rot @ shr @ scl @ to_center


def random_affine(sample: Sample, seed: int,
                  ranges: AffineRanges = AffineRanges()) -> Sample:
    """One drawn affine map applied to image (bilinear) and both masks
    (nearest neighbor), all with zero fill.

    Nearest-neighbor pulls both masks from the same source pixel, so
    the transformed scar stays inside the transformed myocardium.
    """
    rng = np.random.default_rng(seed)
    scale = rng.uniform(*ranges.scale)
    rot = np.deg2rad(rng.uniform(*ranges.rotate_deg))
    tx = rng.uniform(*ranges.translate) * sample.image.shape[2]
    ty = rng.uniform(*ranges.translate) * sample.image.shape[2]
    shear = np.deg2rad(rng.uniform(*ranges.shear_deg))

    fwd = _affine_matrix(sample.image.shape[1:], scale, rot, tx, ty, shear)
    if np.array_equal(fwd, np.eye(3)):
        return Sample(sample.image.copy(), sample.myo.copy(),
                      sample.scar.copy(), sample.id)
    inv = np.linalg.inv(fwd)  # affine_transform maps output to input

    image = ndimage.affine_transform(
        sample.image[0].astype(np.float64), inv[:2, :2], offset=inv[:2, 2],
        order=1, mode="constant", cval=0.0)
    myo = ndimage.affine_transform(
        sample.myo, inv[:2, :2], offset=inv[:2, 2], order=0,
        mode="constant", cval=0)
    scar = ndimage.affine_transform(
        sample.scar, inv[:2, :2], offset=inv[:2, 2], order=0,
        mode="constant", cval=0)
    return Sample(np.clip(image, 0.0, 1.0).astype(np.float32)[None],
                  myo.astype(np.uint8), scar.astype(np.uint8), sample.id)


def _pack_mask(mask: np.ndarray) -> bytes:
    return np.packbits(mask.astype(np.uint8), axis=1).tobytes()


def _unpack_mask(raw: bytes, h: int, w: int) -> np.ndarray:
    packed = np.frombuffer(raw, dtype=np.uint8).reshape(h, -1)
    return np.unpackbits(packed, axis=1, count=w).astype(np.uint8)


def write_dataset(samples: Sequence[Sample], path,
                  spec: Optional[SceneSpec] = None,
                  master_seed: Optional[int] = None) -> None:
    """Binary dataset file, plus a key=value sidecar when the generating
    spec is supplied."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", len(samples)))
        for s in samples:
            if s.image.dtype != np.float32 or s.image.ndim != 3:
                raise ValueError(f"sample {s.id!r}: image must be float32 1xHxW")
            _, h, w = s.image.shape
            if s.myo.shape != (h, w) or s.scar.shape != (h, w):
                raise ValueError(f"sample {s.id!r}: mask shape mismatch")
            sid = s.id.encode("utf-8")
            f.write(struct.pack("<I", len(sid)))
            f.write(sid)
            f.write(struct.pack("<II", h, w))
            f.write(s.image[0].astype("<f4").tobytes())
            f.write(_pack_mask(s.myo))
            f.write(_pack_mask(s.scar))
    if spec is not None:
        write_metadata(sidecar_path(path), spec, master_seed, len(samples))


def sidecar_path(path) -> Path:
    return Path(str(path) + ".meta")


def write_metadata(path, spec: SceneSpec, master_seed: Optional[int],
                   count: int) -> None:
    lines = [f"{k}={v!r}" for k, v in asdict(spec).items()]
    lines.append(f"master_seed={master_seed!r}")
    lines.append(f"count={count!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_metadata(path) -> dict:
    """Parse the sidecar back into python values (literals only)."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}: line {lineno} is not key=value")
        out[key.strip()] = ast.literal_eval(value.strip())
    return out


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated dataset: wanted {n} bytes for {what} at "
                         f"offset {f.tell() - len(buf)}, got {len(buf)}")
    return buf


def read_dataset(path) -> list[Sample]:
    samples = []
    with open(path, "rb") as f:
        magic = f.read(len(DATASET_MAGIC))
        if magic != DATASET_MAGIC:
            raise ValueError(f"bad dataset magic {magic!r} at offset 0")
        (count,) = struct.unpack("<I", _read_exact(f, 4, "sample count"))
        for i in range(count):
            (id_len,) = struct.unpack("<I", _read_exact(f, 4, f"id length [{i}]"))
            sid = _read_exact(f, id_len, f"id [{i}]").decode("utf-8")
            h, w = struct.unpack("<II", _read_exact(f, 8, f"extents of {sid!r}"))
            img = np.frombuffer(
                _read_exact(f, 4 * h * w, f"image of {sid!r}"), dtype="<f4")
            row_bytes = (w + 7) // 8
            myo = _unpack_mask(_read_exact(f, h * row_bytes, f"myo of {sid!r}"), h, w)
            scar = _unpack_mask(_read_exact(f, h * row_bytes, f"scar of {sid!r}"), h, w)
            samples.append(Sample(
                image=img.reshape(h, w).astype(np.float32)[None],
                myo=myo, scar=scar, id=sid))
        trailing = f.read(1)
        if trailing:
            raise ValueError(f"unexpected trailing bytes at offset {f.tell() - 1}")
    return samples
