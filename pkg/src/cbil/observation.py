"""Binary silhouette video: pinhole camera, ellipse rasterizer, clips and patch masks."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .sim import CageSpec, EnvState

CLIP_LEN = 10
MIN_SEMI_AXIS = 0.75  # px; guarantees at least one covered pixel centre


@dataclass(frozen=True)
class CameraSpec:
    position: tuple = (0.0, 0.0, -9.0)
    look_at: tuple = (0.0, 0.0, 0.0)
    up: tuple = (0.0, 1.0, 0.0)
    vertical_fov: float = 70.0
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if not 0.0 < self.vertical_fov < 180.0:
            raise ValueError("vertical_fov must lie in (0, 180) degrees")
        if self.width < 16 or self.height < 16:
            raise ValueError("image must be at least 16x16 pixels")

    @property
    def focal_px(self) -> float:
        return 0.5 * self.height / math.tan(math.radians(self.vertical_fov) / 2.0)

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(right, up, forward) unit vectors of the camera frame."""
        f = np.asarray(self.look_at, float) - np.asarray(self.position, float)
        f /= np.linalg.norm(f)
        r = np.cross(f, np.asarray(self.up, float))
        r /= np.linalg.norm(r)
        u = np.cross(r, f)
        return r, u, f


def wall_camera(cage: CageSpec, distance: float = 3.0, side: str = "front", **kw) -> CameraSpec:
    """Camera ``distance`` metres outside one cage wall, aimed at the cage centre."""
    half = cage.half_extents
    offsets = {
        "front": (0.0, 0.0, -(half[2] + distance)),
        "back": (0.0, 0.0, half[2] + distance),
        "left": (-(half[0] + distance), 0.0, 0.0),
        "right": (half[0] + distance, 0.0, 0.0),
    }
    if side not in offsets:
        raise ValueError(f"unknown camera side {side!r}")
    return CameraSpec(position=offsets[side], **kw)


@dataclass(frozen=True)
class Projection:
    u: float
    v: float
    depth: float


def project_points(camera: CameraSpec, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized pinhole projection. Returns (u, v, depth); u, v are invalid where depth <= 0."""
    r, up, f = camera.basis()
    rel = np.asarray(points, float) - np.asarray(camera.position, float)
    x, y, depth = rel @ r, rel @ up, rel @ f
    safe = np.where(depth > 0, depth, 1.0)
    fpx = camera.focal_px
    u = 0.5 * camera.width + fpx * x / safe
    v = 0.5 * camera.height - fpx * y / safe
    return u, v, depth


def project(camera: CameraSpec, point) -> Projection | None:
    """Project one world point; ``None`` marks a point behind the camera."""
    u, v, d = project_points(camera, np.asarray(point, float)[None, :])
    if d[0] <= 0:
        return None
    return Projection(float(u[0]), float(v[0]), float(d[0]))


@dataclass(frozen=True)
class SilhouetteFrame:
    bits: np.ndarray  # (H, W) uint8 in {0, 1}

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]


@dataclass(frozen=True)
class Clip:
    frames: np.ndarray  # (T, H, W) uint8
    start: int = 0

    def __post_init__(self):
        if self.frames.ndim != 3 or self.frames.shape[0] != CLIP_LEN:
            raise ValueError(f"a clip holds exactly {CLIP_LEN} frames, got shape {self.frames.shape}")


@dataclass(frozen=True)
class MaskedClip:
    clip: Clip
    mask: np.ndarray  # (T, H/p, W/p) bool, True = hidden
    patch_size: int

    @property
    def masked_patch_ids(self) -> frozenset:
        return frozenset((int(t), int(r), int(c)) for t, r, c in np.argwhere(self.mask))

    def visible_frames(self) -> np.ndarray:
        """Frames as fed to the encoder: masked pixels read as 0."""
        p = self.patch_size
        keep = ~np.repeat(np.repeat(self.mask, p, axis=1), p, axis=2)
        return self.clip.frames * keep


def fill_ellipse(img: np.ndarray, cu: float, cv: float, axis_u: float, axis_v: float,
                 semi_major: float, semi_minor: float) -> None:
    """Set every pixel whose centre lies inside the oriented ellipse."""
    h, w = img.shape
    a = max(semi_major, MIN_SEMI_AXIS)
    b = max(semi_minor, MIN_SEMI_AXIS)
    reach = max(a, b)
    c0, c1 = max(int(math.floor(cu - reach)), 0), min(int(math.ceil(cu + reach)) + 1, w)
    r0, r1 = max(int(math.floor(cv - reach)), 0), min(int(math.ceil(cv + reach)) + 1, h)
    if c0 >= c1 or r0 >= r1:
        return
    du = np.arange(c0, c1) + 0.5 - cu
    dv = np.arange(r0, r1) + 0.5 - cv
    du, dv = np.meshgrid(du, dv)
    along = du * axis_u + dv * axis_v
    across = -du * axis_v + dv * axis_u
    inside = (along / a) ** 2 + (across / b) ** 2 <= 1.0
    img[r0:r1, c0:c1] |= inside.astype(np.uint8)


def rasterize_silhouettes(env: EnvState, camera: CameraSpec, body_length: float = 0.4,
                          body_width: float = 0.12) -> SilhouetteFrame:
    """Union of filled ellipses, one per alive agent, major axis along the projected heading."""
    img = np.zeros((camera.height, camera.width), dtype=np.uint8)
    idx = np.flatnonzero(env.alive)
    if len(idx) == 0:
        return SilhouetteFrame(img)
    pos = env.positions[idx]
    half = 0.5 * body_length * env.forwards[idx]
    u, v, d = project_points(camera, pos)
    uh, vh, dh = project_points(camera, pos + half)
    ut, vt, dt = project_points(camera, pos - half)
    fpx = camera.focal_px
    for k in range(len(idx)):
        if d[k] <= 1e-3:
            continue
        if dh[k] > 1e-3 and dt[k] > 1e-3:
            au, av = 0.5 * (uh[k] - ut[k]), 0.5 * (vh[k] - vt[k])
        else:
            au, av = 0.0, 0.0
        semi_major = math.hypot(au, av)
        if semi_major > 1e-9:
            eu, ev = au / semi_major, av / semi_major
        else:
            eu, ev = 1.0, 0.0
        semi_minor = 0.5 * body_width * fpx / d[k]
        fill_ellipse(img, u[k], v[k], eu, ev, semi_major, semi_minor)
    return SilhouetteFrame(img)


def _as_array(frames) -> np.ndarray:
    if isinstance(frames, np.ndarray):
        return frames
    frames = list(frames)
    if not frames:
        return np.zeros((0, 0, 0), dtype=np.uint8)
    return np.stack([f.bits if isinstance(f, SilhouetteFrame) else np.asarray(f) for f in frames])


def window_clips(frames, stride: int) -> list[Clip]:
    """Clips of ``CLIP_LEN`` frames starting at 0, stride, 2*stride, ...; the remainder is dropped."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    arr = _as_array(frames)
    count = len(arr)
    if count < CLIP_LEN:
        return []
    return [Clip(arr[s:s + CLIP_LEN], start=s) for s in range(0, count - CLIP_LEN + 1, stride)]


def mask_clip(clip: Clip, patch_size: int, ratio: float, rng: np.random.Generator) -> MaskedClip:
    """Hide exactly floor(ratio * total) distinct (frame, row, col) patches, uniformly at random."""
    t, h, w = clip.frames.shape
    if patch_size < 1 or h % patch_size or w % patch_size:
        raise ValueError(f"frame size {h}x{w} is not divisible by patch size {patch_size}")
    if not 0.0 <= ratio < 1.0:
        raise ValueError("mask ratio must lie in [0, 1)")
    grid = (t, h // patch_size, w // patch_size)
    total = grid[0] * grid[1] * grid[2]
    k = int(math.floor(ratio * total))
    mask = np.zeros(total, dtype=bool)
    if k:
        mask[rng.choice(total, size=k, replace=False)] = True
    return MaskedClip(clip, mask.reshape(grid), patch_size)


def clip_mask_rng(seed: int, epoch: int, clip_index: int) -> np.random.Generator:
    """Independent mask stream per (seed, epoch, clip) so masking is order-independent."""
    return np.random.default_rng([seed, epoch, clip_index])


# --------------------------------------------------------------------------- PGM I/O


class PGMError(ValueError):
    pass


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
    return buf[start:pos], pos


def parse_pgm_images(buf: bytes, name: str = "<bytes>") -> list[np.ndarray]:
    """Decode one or more concatenated binary (P5) PGM images; pixels >= 128 become 1."""
    images = []
    pos = 0
    while True:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            break
        magic, pos = _read_token(buf, pos)
        if magic != b"P5":
            raise PGMError(f"{name}: not a binary PGM (magic {magic!r})")
        try:
            w_tok, pos = _read_token(buf, pos)
            h_tok, pos = _read_token(buf, pos)
            m_tok, pos = _read_token(buf, pos)
            width, height, maxval = int(w_tok), int(h_tok), int(m_tok)
        except ValueError as exc:
            raise PGMError(f"{name}: malformed PGM header") from exc
        if not 0 < maxval < 256 or width <= 0 or height <= 0:
            raise PGMError(f"{name}: unsupported PGM header {width}x{height} maxval {maxval}")
        pos += 1  # single whitespace after maxval
        size = width * height
        data = buf[pos:pos + size]
        if len(data) != size:
            raise PGMError(f"{name}: truncated pixel data ({len(data)} of {size} bytes)")
        pos += size
        px = np.frombuffer(data, dtype=np.uint8).reshape(height, width)
        images.append((px >= 128).astype(np.uint8))
    return images


def encode_pgm(bits: np.ndarray) -> bytes:
    h, w = bits.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + (np.asarray(bits, dtype=np.uint8) * 255).tobytes()


def write_pgm(path, bits: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(bits))


def load_segmented_frames(path) -> list[SilhouetteFrame]:
    """Read a directory of binary PGM frames in lexicographic file order."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"frame directory {root} does not exist")
    frames: list[SilhouetteFrame] = []
    shape = None
    for name in sorted(os.listdir(root)):
        if not name.lower().endswith(".pgm"):
            continue
        file = root / name
        try:
            images = parse_pgm_images(file.read_bytes(), str(file))
        except OSError as exc:
            raise PGMError(f"{file}: unreadable ({exc})") from exc
        for img in images:
            if shape is None:
                shape = img.shape
            elif img.shape != shape:
                raise PGMError(f"{file}: resolution {img.shape} differs from {shape}")
            frames.append(SilhouetteFrame(img))
    return frames


def write_frames(directory, frames: Iterable, start: int = 0) -> list[str]:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    names = []
    for k, f in enumerate(frames):
        bits = f.bits if isinstance(f, SilhouetteFrame) else f
        name = f"frame_{start + k:06d}.pgm"
        write_pgm(root / name, bits)
        names.append(name)
    return names


def export_clip(stem, masked: MaskedClip) -> None:
    """Write ``stem.pgm`` (T concatenated frames) and the ``stem.json`` sidecar."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    frames = masked.clip.frames
    stem.with_suffix(".pgm").write_bytes(b"".join(encode_pgm(f) for f in frames))
    t, h, w = frames.shape
    sidecar = {"T": t, "W": w, "H": h, "patch_size": masked.patch_size,
               "mask_ids": sorted([list(x) for x in masked.masked_patch_ids])}
    stem.with_suffix(".json").write_text(json.dumps(sidecar))


def import_clip(stem) -> MaskedClip:
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    frames = np.stack(parse_pgm_images(stem.with_suffix(".pgm").read_bytes(), str(stem)))
    p = meta["patch_size"]
    mask = np.zeros((meta["T"], meta["H"] // p, meta["W"] // p), dtype=bool)
    for t, r, c in meta["mask_ids"]:
        mask[t, r, c] = True
    return MaskedClip(Clip(frames), mask, p)
