"""Deterministic synthetic video clips and portable pixmap I/O.

A scene is a handful of textured shapes drifting and pulsing over a
textured background for a 10-tick base timeline; a clip samples T frames
from that timeline (the last tick and, by default, every third tick
before it). Class identity is carried mostly by texture frequency, with
mild shade differences, so segmenting well requires looking at local
spatial frequency rather than raw color.

Frames are stored as 8-bit binary PPM (P6), masks as binary PGM (P5),
plus a small manifest, so a clip written to disk reads back bit-exactly.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .tensor import Tensor, get_default_dtype

BASE_TIMELINE = 10  # ticks 0..9; clips sample from these
SAMPLE_STEP = 3


class PnmError(ValueError):
    """Malformed or truncated PPM/PGM data."""


class SceneSpecError(ValueError):
    """Raised for a scene description that cannot be rasterized safely."""


# ---------------------------------------------------------------------------
# scene description
# ---------------------------------------------------------------------------

@dataclass
class ShapeSpec:
    kind: str            # "circle" or "box"
    cls: int
    cx: float            # center at tick 0
    cy: float
    vx: float            # drift per tick
    vy: float
    rx: float            # radius, or half extents for boxes
    ry: float
    deform_amp: float    # relative size oscillation amplitude
    deform_phase: float

    def extent_scale(self, tick: float) -> float:
        return 1.0 + self.deform_amp * math.sin(2.0 * math.pi * tick / BASE_TIMELINE
                                                + self.deform_phase)

    def center(self, tick: float) -> Tuple[float, float]:
        return self.cx + self.vx * tick, self.cy + self.vy * tick


@dataclass
class SceneSpec:
    seed: int
    height: int
    width: int
    frames: int
    n_classes: int
    shapes: List[ShapeSpec]
    tex_freq: List[float]                  # cycles per pixel, per class
    tex_angle: List[float]
    tex_phase: List[List[float]]           # per class, per color channel
    shade: List[float]
    allow_occlusion: bool = True
    noise_amp: float = 0.0                 # per-frame observation noise
    tex_amp: float = 0.38                  # grating contrast around the shade

    def sample_ticks(self) -> List[int]:
        """Ticks the clip samples: the final tick and SAMPLE_STEP-spaced
        predecessors, oldest first."""
        last = BASE_TIMELINE - 1
        step = SAMPLE_STEP if (self.frames - 1) * SAMPLE_STEP <= last else max(
            1, last // max(1, self.frames - 1))
        ticks = [last - step * (self.frames - 1 - i) for i in range(self.frames)]
        if ticks[0] < 0:
            raise SceneSpecError(f"cannot sample {self.frames} frames from "
                                 f"{BASE_TIMELINE} ticks")
        return ticks

    def validate(self) -> None:
        if self.height < 8 or self.width < 8:
            raise SceneSpecError("canvas too small")
        if not 2 <= self.n_classes <= 255:
            raise SceneSpecError(f"class count {self.n_classes} outside [2, 255]")
        if len(self.tex_freq) != self.n_classes or len(self.shade) != self.n_classes:
            raise SceneSpecError("texture tables must have one entry per class")
        if not self.shapes:
            raise SceneSpecError("a scene needs at least one shape")
        for i, s in enumerate(self.shapes):
            if s.kind not in ("circle", "box"):
                raise SceneSpecError(f"shape {i}: unknown kind {s.kind!r}")
            if not 1 <= s.cls < self.n_classes:
                raise SceneSpecError(f"shape {i}: class {s.cls} outside "
                                     f"[1, {self.n_classes - 1}]")
            for tick in range(BASE_TIMELINE):
                cx, cy = s.center(tick)
                scale = s.extent_scale(tick)
                ex, ey = s.rx * scale, s.ry * scale
                if (cx - ex < 1.0 or cx + ex > self.width - 2.0
                        or cy - ey < 1.0 or cy + ey > self.height - 2.0):
                    raise SceneSpecError(
                        f"shape {i} leaves the canvas at tick {tick} "
                        f"(center {cx:.1f},{cy:.1f} extent {ex:.1f}x{ey:.1f})")
        if not self.allow_occlusion:
            for tick in range(BASE_TIMELINE):
                for i, a in enumerate(self.shapes):
                    for j in range(i + 1, len(self.shapes)):
                        b = self.shapes[j]
                        ax, ay = a.center(tick)
                        bx, by = b.center(tick)
                        ra = max(a.rx, a.ry) * a.extent_scale(tick)
                        rb = max(b.rx, b.ry) * b.extent_scale(tick)
                        if math.hypot(ax - bx, ay - by) < ra + rb:
                            raise SceneSpecError(
                                f"shapes {i} and {j} may overlap at tick {tick} "
                                f"but occlusion is disabled")


def random_scene(seed: int, height: int = 64, width: int = 64, frames: int = 4,
                 n_classes: int = 4, n_shapes: int = 3,
                 noise_amp: float = 0.0) -> SceneSpec:
    """Draw a valid scene. Same seed, same scene, always."""
    rng = np.random.default_rng(seed)
    size = min(height, width)
    shapes: List[ShapeSpec] = []
    for _ in range(n_shapes):
        kind = "circle" if rng.random() < 0.5 else "box"
        rx = size * rng.uniform(0.09, 0.19)
        ry = rx if kind == "circle" else size * rng.uniform(0.09, 0.19)
        amp = rng.uniform(0.0, 0.22)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        margin_x = rx * (1.0 + amp) + 1.5
        margin_y = ry * (1.0 + amp) + 1.5
        cx = rng.uniform(margin_x, width - 1 - margin_x)
        cy = rng.uniform(margin_y, height - 1 - margin_y)
        span = BASE_TIMELINE - 1
        vcap = size * 0.02
        vx = rng.uniform(max(-vcap, (margin_x - cx) / span),
                         min(vcap, (width - 1 - margin_x - cx) / span))
        vy = rng.uniform(max(-vcap, (margin_y - cy) / span),
                         min(vcap, (height - 1 - margin_y - cy) / span))
        cls = int(rng.integers(1, n_classes))
        shapes.append(ShapeSpec(kind, cls, cx, cy, vx, vy, rx, ry, amp, phase))

    # Class textures: frequency climbs with the class index so classes are
    # separable by local spectrum; shades overlap heavily on purpose.
    freqs = [0.02]
    angles = [rng.uniform(0.0, math.pi)]
    for c in range(1, n_classes):
        lo = 0.06 + 0.34 * (c - 1) / max(1, n_classes - 2) if n_classes > 2 else 0.2
        freqs.append(lo + rng.uniform(0.0, 0.04))
        angles.append(rng.uniform(0.0, math.pi))
    shades = [0.42 + 0.16 * rng.random() for _ in range(n_classes)]
    phases = [[rng.uniform(0.0, 2.0 * math.pi) for _ in range(3)]
              for _ in range(n_classes)]

    spec = SceneSpec(seed, height, width, frames, n_classes, shapes,
                     freqs, angles, phases, shades, noise_amp=noise_amp)
    spec.validate()
    return spec


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

@dataclass
class VideoClip:
    frames: np.ndarray   # (T, 3, H, W) uint8
    masks: np.ndarray    # (T, H, W) uint8 class ids
    n_classes: int
    seed: int


def rasterize_mask(spec: SceneSpec, tick: float) -> np.ndarray:
    """Class-id mask at one tick; later shapes paint over earlier ones."""
    ys = np.arange(spec.height)[:, None]
    xs = np.arange(spec.width)[None, :]
    mask = np.zeros((spec.height, spec.width), dtype=np.uint8)
    for s in spec.shapes:
        cx, cy = s.center(tick)
        scale = s.extent_scale(tick)
        ex, ey = s.rx * scale, s.ry * scale
        if s.kind == "circle":
            inside = ((xs - cx) / ex) ** 2 + ((ys - cy) / ey) ** 2 <= 1.0
        else:
            inside = (np.abs(xs - cx) <= ex) & (np.abs(ys - cy) <= ey)
        mask[inside] = s.cls
    return mask


def _class_textures(spec: SceneSpec) -> np.ndarray:
    """(n_classes, 3, H, W) uint8 texture bank, static in world coords."""
    ys = np.arange(spec.height)[:, None]
    xs = np.arange(spec.width)[None, :]
    bank = np.empty((spec.n_classes, 3, spec.height, spec.width), dtype=np.uint8)
    for c in range(spec.n_classes):
        theta = spec.tex_angle[c]
        coord = xs * math.cos(theta) + ys * math.sin(theta)
        for ch in range(3):
            wave = np.sin(2.0 * math.pi * spec.tex_freq[c] * coord
                          + spec.tex_phase[c][ch])
            values = np.clip(spec.shade[c] + spec.tex_amp * wave, 0.0, 1.0)
            bank[c, ch] = np.round(values * 255.0).astype(np.uint8)
    return bank


def generate_clip(spec: SceneSpec) -> VideoClip:
    """Rasterize the sampled frames of a scene. Pure function of the spec."""
    spec.validate()
    bank = _class_textures(spec)
    ticks = spec.sample_ticks()
    frames = np.empty((spec.frames, 3, spec.height, spec.width), dtype=np.uint8)
    masks = np.empty((spec.frames, spec.height, spec.width), dtype=np.uint8)
    for i, tick in enumerate(ticks):
        mask = rasterize_mask(spec, tick)
        masks[i] = mask
        frame = bank[0].copy()
        for c in range(1, spec.n_classes):
            hit = mask == c
            if hit.any():
                frame[:, hit] = bank[c][:, hit]
        if spec.noise_amp > 0.0:
            # Observation noise, fresh per tick but fixed by the scene seed,
            # so single frames are degraded while the clip stays deterministic.
            noise_rng = np.random.default_rng((spec.seed, 9176, tick))
            noisy = (frame.astype(np.float64) / 255.0
                     + noise_rng.normal(0.0, spec.noise_amp, frame.shape))
            frame = np.round(np.clip(noisy, 0.0, 1.0) * 255.0).astype(np.uint8)
        frames[i] = frame
    return VideoClip(frames, masks, spec.n_classes, spec.seed)


def boundary_density(mask: np.ndarray) -> float:
    """Fraction of pixels with a 4-neighbor of a different class (canvas
    borders do not count as boundaries)."""
    edge = np.zeros(mask.shape, dtype=bool)
    edge[:-1, :] |= mask[:-1, :] != mask[1:, :]
    edge[1:, :] |= mask[1:, :] != mask[:-1, :]
    edge[:, :-1] |= mask[:, :-1] != mask[:, 1:]
    edge[:, 1:] |= mask[:, 1:] != mask[:, :-1]
    return float(edge.mean())


def normalize_frames(frames_u8: np.ndarray) -> Tensor:
    """uint8 frames -> model input tensor in [-1, 1] at the default dtype."""
    dt = get_default_dtype()
    scaled = frames_u8.astype(dt) / 255.0
    return Tensor((scaled - 0.5) * 2.0)


def make_scene_specs(count: int, base_seed: int, min_boundary_density: float = 0.0,
                     **kwargs) -> List[SceneSpec]:
    """A reproducible list of scenes, drawn from seeds base_seed, base_seed+1,
    and so on. Scenes whose final-tick mask has boundary density below the
    minimum are skipped, so the returned list still depends only on the
    arguments."""
    specs: List[SceneSpec] = []
    seed = base_seed
    attempts = 0
    while len(specs) < count:
        spec = random_scene(seed, **kwargs)
        seed += 1
        attempts += 1
        if attempts > 50 * count + 100:
            raise SceneSpecError(
                f"could not draw {count} scenes with boundary density >= "
                f"{min_boundary_density} after {attempts} attempts")
        if min_boundary_density > 0.0:
            density = boundary_density(rasterize_mask(spec, BASE_TIMELINE - 1))
            if density < min_boundary_density:
                continue
        specs.append(spec)
    return specs


# ---------------------------------------------------------------------------
# PPM / PGM
# ---------------------------------------------------------------------------

def _format_header(magic: bytes, width: int, height: int) -> bytes:
    return magic + b"\n" + f"{width} {height}".encode() + b"\n255\n"


def write_ppm(path, image: np.ndarray) -> None:
    """8-bit binary PPM from an (H, W, 3) uint8 array."""
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise PnmError(f"write_ppm needs (H, W, 3) uint8, got {image.shape} {image.dtype}")
    with open(path, "wb") as f:
        f.write(_format_header(b"P6", image.shape[1], image.shape[0]))
        f.write(np.ascontiguousarray(image).tobytes())


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM from an (H, W) uint8 array."""
    if image.ndim != 2 or image.dtype != np.uint8:
        raise PnmError(f"write_pgm needs (H, W) uint8, got {image.shape} {image.dtype}")
    with open(path, "wb") as f:
        f.write(_format_header(b"P5", image.shape[1], image.shape[0]))
        f.write(np.ascontiguousarray(image).tobytes())


def _parse_pnm(buf: bytes, expect_magic: bytes, path) -> np.ndarray:
    pos = 0
    tokens: List[bytes] = []
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if pos == start:
            raise PnmError(f"{path}: malformed header, ran out of data at byte {pos}")
        tokens.append(buf[start:pos])
    magic, w_tok, h_tok, max_tok = tokens
    if magic != expect_magic:
        raise PnmError(f"{path}: bad magic {magic!r} at byte 0, expected {expect_magic!r}")
    try:
        width, height, maxval = int(w_tok), int(h_tok), int(max_tok)
    except ValueError:
        raise PnmError(f"{path}: non-numeric header field before byte {pos}") from None
    if width < 1 or height < 1:
        raise PnmError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise PnmError(f"{path}: only maxval 255 is supported, got {maxval}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PnmError(f"{path}: missing whitespace after header at byte {pos}")
    pos += 1
    channels = 3 if expect_magic == b"P6" else 1
    need = width * height * channels
    if len(buf) - pos < need:
        raise PnmError(f"{path}: truncated pixel data at byte {len(buf)}: "
                       f"expected {need} bytes from byte {pos}, found {len(buf) - pos}")
    data = np.frombuffer(buf[pos:pos + need], dtype=np.uint8)
    if channels == 3:
        return data.reshape(height, width, 3)
    return data.reshape(height, width)


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        return _parse_pnm(f.read(), b"P6", path)


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        return _parse_pnm(f.read(), b"P5", path)


# ---------------------------------------------------------------------------
# clip directories
# ---------------------------------------------------------------------------

def write_clip(clip_dir, clip: VideoClip) -> None:
    """Store one clip: frames/, masks/, and a manifest tying them together."""
    os.makedirs(os.path.join(clip_dir, "frames"), exist_ok=True)
    os.makedirs(os.path.join(clip_dir, "masks"), exist_ok=True)
    lines = [f"frames {clip.frames.shape[0]}",
             f"classes {clip.n_classes}",
             f"seed {clip.seed}"]
    for t in range(clip.frames.shape[0]):
        frame_rel = f"frames/frame_{t:03d}.ppm"
        mask_rel = f"masks/mask_{t:03d}.pgm"
        write_ppm(os.path.join(clip_dir, frame_rel),
                  np.ascontiguousarray(clip.frames[t].transpose(1, 2, 0)))
        write_pgm(os.path.join(clip_dir, mask_rel), clip.masks[t])
        lines.append(f"frame {t} {frame_rel} {mask_rel}")
    with open(os.path.join(clip_dir, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")


def read_clip(clip_dir) -> VideoClip:
    manifest = os.path.join(clip_dir, "manifest.txt")
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"no manifest at {manifest}")
    meta = {}
    entries = []
    with open(manifest) as f:
        for line_no, raw in enumerate(f, 1):
            parts = raw.split()
            if not parts:
                continue
            if parts[0] == "frame":
                if len(parts) != 4:
                    raise PnmError(f"{manifest}:{line_no}: bad frame entry")
                entries.append((int(parts[1]), parts[2], parts[3]))
            elif len(parts) == 2:
                meta[parts[0]] = parts[1]
            else:
                raise PnmError(f"{manifest}:{line_no}: unrecognized line {raw!r}")
    for key in ("frames", "classes", "seed"):
        if key not in meta:
            raise PnmError(f"{manifest}: missing {key!r} entry")
    count = int(meta["frames"])
    if len(entries) != count:
        raise PnmError(f"{manifest}: lists {len(entries)} frames, header says {count}")
    entries.sort()
    frames = []
    masks = []
    for _, frame_rel, mask_rel in entries:
        frames.append(read_ppm(os.path.join(clip_dir, frame_rel)).transpose(2, 0, 1))
        masks.append(read_pgm(os.path.join(clip_dir, mask_rel)))
    return VideoClip(np.stack(frames), np.stack(masks),
                     int(meta["classes"]), int(meta["seed"]))


def write_dataset(root, specs: Sequence[SceneSpec]) -> None:
    for i, spec in enumerate(specs):
        write_clip(os.path.join(root, f"clip_{i:05d}"), generate_clip(spec))


def read_dataset(root, count: int) -> List[VideoClip]:
    if not os.path.isdir(root):
        raise FileNotFoundError(f"dataset directory {root!r} does not exist")
    clips = []
    for i in range(count):
        clip_dir = os.path.join(root, f"clip_{i:05d}")
        if not os.path.isdir(clip_dir):
            raise FileNotFoundError(f"dataset at {root!r} is missing clip {i} "
                                    f"(wanted {count} clips)")
        clips.append(read_clip(clip_dir))
    return clips


# ---------------------------------------------------------------------------
# grayscale heatmaps (gate inspection output)
# ---------------------------------------------------------------------------

def heatmap_u8(matrix: np.ndarray) -> Tuple[np.ndarray, float, float]:
    """Linear rescale of a 2-D array to uint8; returns (image, lo, hi)."""
    m = np.asarray(matrix, dtype=np.float64)
    lo, hi = float(m.min()), float(m.max())
    if hi > lo:
        img = np.round((m - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        img = np.zeros(m.shape, dtype=np.uint8)
    return img, lo, hi
