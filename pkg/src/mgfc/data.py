"""Synthetic domain-shift dataset, binary tensor serialization, checkpoints.

Scenes are simple rasterized shapes with exact per-pixel labels; domains
differ only through photometric style transforms, which never touch labels.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DataError, FormatError, GenerationError, IntegrityError

MAGIC_TENSOR = b"MGT1"
MAGIC_CHECKPOINT = b"MGC1"

CLASS_NAMES = ("background", "circle", "square", "triangle")


@dataclass
class StyleParams:
    hue_deg: float = 0.0
    gamma: float = 1.0
    contrast: float = 1.0
    noise_sigma: float = 0.0
    tint: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.gamma <= 0 or self.contrast <= 0 or self.noise_sigma < 0:
            raise DataError(f"invalid style parameters: {self}")


@dataclass
class StyleRange:
    """Uniform sampling ranges for one domain's style parameters."""
    hue: tuple[float, float] = (0.0, 0.0)
    gamma: tuple[float, float] = (1.0, 1.0)
    contrast: tuple[float, float] = (1.0, 1.0)
    noise: tuple[float, float] = (0.0, 0.0)
    tint: tuple[float, float] = (1.0, 1.0)

    def sample(self, rng: np.random.Generator) -> StyleParams:
        u = lambda lo_hi: float(rng.uniform(*lo_hi))
        return StyleParams(hue_deg=u(self.hue), gamma=u(self.gamma),
                           contrast=u(self.contrast), noise_sigma=u(self.noise),
                           tint=tuple(rng.uniform(*self.tint, size=3)))


# source and target domains draw from deliberately disjoint ranges
SOURCE_STYLE = StyleRange(hue=(-10.0, 10.0), gamma=(0.9, 1.1),
                          contrast=(0.9, 1.1), noise=(0.0, 0.02),
                          tint=(0.95, 1.05))
TARGET_STYLE = StyleRange(hue=(30.0, 60.0), gamma=(0.65, 0.85),
                          contrast=(1.2, 1.5), noise=(0.03, 0.06),
                          tint=(0.75, 0.95))


@dataclass
class SceneConfig:
    size: int = 64
    shapes_per_class: int = 1        # one circle, one square, one triangle
    radius_range: tuple[int, int] = (6, 12)
    max_attempts: int = 100


@dataclass
class Sample:
    image: np.ndarray     # H x W x 3 float in [0, 1]
    labels: np.ndarray    # H x W int class ids
    domain: str
    style: StyleParams
    seed: int


def _hue_rotation_matrix(deg: float) -> np.ndarray:
    # rotation about the gray axis in RGB space
    theta = np.deg2rad(deg)
    c, s = np.cos(theta), np.sin(theta)
    third = 1.0 / 3.0
    sq = np.sqrt(third)
    return np.array([
        [c + (1 - c) * third, third * (1 - c) - sq * s, third * (1 - c) + sq * s],
        [third * (1 - c) + sq * s, c + third * (1 - c), third * (1 - c) - sq * s],
        [third * (1 - c) - sq * s, third * (1 - c) + sq * s, c + third * (1 - c)],
    ])


def apply_style(sample: Sample, p: StyleParams,
                noise_seed: int = 0) -> Sample:
    """Photometric transform chain; labels pass through untouched."""
    img = sample.image.astype(np.float64)
    img = img * np.asarray(p.tint).reshape(1, 1, 3)
    img = np.clip(img, 0.0, None) ** p.gamma
    img = (img - 0.5) * p.contrast + 0.5
    img = img @ _hue_rotation_matrix(p.hue_deg).T
    if p.noise_sigma > 0:
        rng = np.random.default_rng(noise_seed)
        img = img + rng.normal(0.0, p.noise_sigma, img.shape)
    img = np.clip(img, 0.0, 1.0)
    return Sample(image=img.astype(np.float32), labels=sample.labels.copy(),
                  domain=sample.domain, style=p, seed=sample.seed)


def _point_in_triangle(px, py, verts) -> np.ndarray:
    (x1, y1), (x2, y2), (x3, y3) = verts
    d1 = (px - x2) * (y1 - y2) - (x1 - x2) * (py - y2)
    d2 = (px - x3) * (y2 - y3) - (x2 - x3) * (py - y3)
    d3 = (px - x1) * (y3 - y1) - (x3 - x1) * (py - y1)
    neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
    pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
    return ~(neg & pos)


def generate_sample(seed: int, domain: str = "source",
                    style_range: StyleRange | None = None,
                    scene: SceneConfig | None = None) -> Sample:
    """Deterministic scene from seed: textured background plus one shape per
    class, rasterized with exact analytic labels, then styled."""
    scene = scene or SceneConfig()
    if style_range is None:
        style_range = SOURCE_STYLE if domain == "source" else TARGET_STYLE
    rng = np.random.default_rng(seed)
    n = scene.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)

    # low-frequency textured background
    fx, fy = rng.uniform(0.05, 0.2, 2)
    phase = rng.uniform(0, 2 * np.pi)
    texture = 0.08 * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    base = rng.uniform(0.25, 0.45, 3)
    image = np.clip(base.reshape(1, 1, 3) + texture[..., None], 0.0, 1.0)
    labels = np.zeros((n, n), dtype=np.int64)

    class_colors = {1: np.array([0.85, 0.25, 0.25]),
                    2: np.array([0.25, 0.75, 0.3]),
                    3: np.array([0.3, 0.35, 0.9])}

    occupied = np.zeros((n, n), dtype=bool)
    for cls in (1, 2, 3):
        for _ in range(scene.shapes_per_class):
            placed = False
            for _attempt in range(scene.max_attempts):
                r = rng.integers(scene.radius_range[0], scene.radius_range[1] + 1)
                cx = rng.integers(r, n - r)
                cy = rng.integers(r, n - r)
                if cls == 1:
                    mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
                elif cls == 2:
                    mask = (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
                else:
                    verts = [(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)]
                    mask = _point_in_triangle(xx, yy, verts)
                if (mask & occupied).any():
                    continue
                occupied |= mask
                labels[mask] = cls
                jitter = rng.uniform(-0.05, 0.05, 3)
                image[mask] = np.clip(class_colors[cls] + jitter, 0.0, 1.0)
                placed = True
                break
            if not placed:
                raise GenerationError(
                    f"could not place class {cls} after {scene.max_attempts} attempts")

    clean = Sample(image=image.astype(np.float32), labels=labels,
                   domain=domain, style=StyleParams(), seed=seed)
    style = style_range.sample(rng)
    return apply_style(clean, style, noise_seed=seed ^ 0x5EED)


# ---- binary tensor format ---------------------------------------------

def write_tensor(path: str, value) -> None:
    """TensorBlob: magic, u8 dtype code (0 = LE f32), u8 ndim, u64 dims,
    row-major payload."""
    data = value.data if isinstance(value, T.Tensor) else np.asarray(value)
    arr = np.ascontiguousarray(data, dtype="<f4")
    if arr.ndim == 0:
        arr = arr.reshape(1)   # scalars persist as one-element vectors
    with open(path, "wb") as fh:
        fh.write(_tensor_bytes(arr))


def _tensor_bytes(arr: np.ndarray) -> bytes:
    header = MAGIC_TENSOR + struct.pack("<BB", 0, arr.ndim)
    header += b"".join(struct.pack("<Q", d) for d in arr.shape)
    return header + arr.tobytes()


def _read_tensor_from(buf: bytes, offset: int) -> tuple[np.ndarray, int]:
    if buf[offset:offset + 4] != MAGIC_TENSOR:
        raise FormatError(f"bad tensor magic at byte {offset}")
    offset += 4
    if offset + 2 > len(buf):
        raise FormatError(f"truncated tensor header at byte {offset}")
    dtype_code, ndim = struct.unpack_from("<BB", buf, offset)
    offset += 2
    if dtype_code != 0:
        raise FormatError(f"unknown dtype code {dtype_code} at byte {offset - 2}")
    if offset + 8 * ndim > len(buf):
        raise FormatError(f"truncated dims at byte {offset}")
    dims = struct.unpack_from(f"<{ndim}Q", buf, offset) if ndim else ()
    offset += 8 * ndim
    count = int(np.prod(dims)) if ndim else 1
    nbytes = 4 * count
    if offset + nbytes > len(buf):
        raise FormatError(f"truncated payload at byte {offset}")
    arr = np.frombuffer(buf[offset:offset + nbytes], dtype="<f4").reshape(dims)
    return arr.copy(), offset + nbytes


def _read_bytes(path: str) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def read_tensor(path: str) -> np.ndarray:
    buf = _read_bytes(path)
    arr, end = _read_tensor_from(buf, 0)
    if end != len(buf):
        raise FormatError(f"trailing bytes after payload at byte {end}")
    return arr


# ---- checkpoints ------------------------------------------------------

def write_checkpoint(path: str, named: dict[str, T.Tensor],
                     frozen_hash: bytes) -> None:
    if len(frozen_hash) != 32:
        raise FormatError("frozen hash must be 32 bytes")
    with open(path, "wb") as fh:
        fh.write(MAGIC_CHECKPOINT)
        fh.write(struct.pack("<I", len(named)))
        for name, tensor in named.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(_tensor_bytes(np.ascontiguousarray(tensor.data, dtype="<f4")))
        fh.write(frozen_hash)


def read_checkpoint(path: str,
                    expected_hash: bytes | None = None) -> dict[str, np.ndarray]:
    buf = _read_bytes(path)
    if buf[:4] != MAGIC_CHECKPOINT:
        raise FormatError("bad checkpoint magic at byte 0")
    if len(buf) < 8:
        raise FormatError("truncated checkpoint header")
    (count,) = struct.unpack_from("<I", buf, 4)
    offset = 8
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        if offset + 2 > len(buf):
            raise FormatError(f"truncated entry header at byte {offset}")
        (name_len,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        if offset + name_len > len(buf):
            raise FormatError(f"truncated entry name at byte {offset}")
        name = buf[offset:offset + name_len].decode("utf-8")
        offset += name_len
        if name in out:
            raise FormatError(f"duplicate tensor name '{name}'")
        out[name], offset = _read_tensor_from(buf, offset)
    if offset + 32 != len(buf):
        raise FormatError(f"bad frozen-hash trailer at byte {offset}")
    stored_hash = buf[offset:offset + 32]
    if expected_hash is not None and stored_hash != expected_hash:
        raise IntegrityError(
            "frozen-encoder hash mismatch: checkpoint was written against a "
            "different backbone")
    out["__frozen_hash__"] = np.frombuffer(stored_hash, dtype=np.uint8)
    return out


def checkpoint_hash(path: str) -> bytes:
    buf = _read_bytes(path)
    if buf[:4] != MAGIC_CHECKPOINT or len(buf) < 36:
        raise FormatError("not a checkpoint file")
    return buf[-32:]


# ---- dataset persistence ----------------------------------------------

@dataclass
class DatasetSpec:
    source_count: int = 200
    target_count: int = 50
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)


def sample_seed(base_seed: int, domain: str, index: int) -> int:
    return (base_seed * 1_000_003 + (0 if domain == "source" else 500_000)
            + index) & 0x7FFFFFFF


def write_dataset(root: str, spec: DatasetSpec) -> int:
    """Write source/target splits; the manifest is written last and acts as
    the completion marker."""
    lines = []
    for domain, count in (("source", spec.source_count),
                          ("target", spec.target_count)):
        ddir = os.path.join(root, domain)
        os.makedirs(ddir, exist_ok=True)
        for i in range(count):
            seed = sample_seed(spec.seed, domain, i)
            s = generate_sample(seed, domain=domain, scene=spec.scene)
            write_tensor(os.path.join(ddir, f"{i}.img.mgt"), s.image)
            write_tensor(os.path.join(ddir, f"{i}.lbl.mgt"),
                         s.labels.astype(np.float32))
            lines.append(f"{i} {domain} {seed}")
    with open(os.path.join(root, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return len(lines)


def load_split(root: str, domain: str) -> list[tuple[np.ndarray, np.ndarray]]:
    manifest = os.path.join(root, "manifest.txt")
    if not os.path.exists(manifest):
        raise DataError(f"dataset at {root} has no manifest (incomplete write?)")
    samples = []
    with open(manifest) as fh:
        for line in fh:
            idx, dom, _seed = line.split()
            if dom != domain:
                continue
            img = read_tensor(os.path.join(root, dom, f"{idx}.img.mgt"))
            lbl = read_tensor(os.path.join(root, dom, f"{idx}.lbl.mgt"))
            samples.append((img, lbl.astype(np.int64)))
    if not samples:
        raise DataError(f"no '{domain}' samples under {root}")
    return samples
