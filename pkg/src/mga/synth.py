"""Synthetic video saliency benchmark with exact optical flow.

Each clip is a periodic textured background drifting by an integer velocity,
optional distractor objects that ride with the background (salient by
appearance, never by motion) and one to three foreground shapes moving on
their own integer trajectories. Because every surface translates rigidly by
whole pixels, the stored flow is the exact displacement of whichever surface
owns a pixel, and the ground-truth mask is the union of foreground shapes.

The flow stored with frame ``t`` maps frame ``t-1`` onto frame ``t``:
``frame_t[y, x] == frame_{t-1}[y - dy, x - dx]`` wherever the owning surface
is visible in both frames. Frame 0 has no predecessor and zero flow.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import FormatError, ValidationError

SHAPE_KINDS = ("disc", "rectangle", "lshape")
BORDER = 2


@dataclass
class ClipParams:
    seed: int = 0
    height: int = 64
    width: int = 64
    frames: int = 8
    min_shapes: int = 1
    max_shapes: int = 3
    shape_kinds: tuple[str, ...] = SHAPE_KINDS
    # Half-extent of a shape in pixels, as a fraction of min(H, W).
    min_size: float = 0.08
    max_size: float = 0.16
    fg_speed: tuple[int, int] = (1, 3)
    bg_speed: int = 1
    # Per-frame chance that a foreground shape moves exactly with the background.
    still_prob: float = 0.2
    texture_noise: float = 0.08
    distractor_prob: float = 0.3

    def validate(self) -> None:
        if self.height % 8 or self.width % 8:
            raise ValidationError(f"clip resolution {self.height}x{self.width} must be divisible by 8")
        if self.frames < 1:
            raise ValidationError("a clip needs at least one frame")
        if not 1 <= self.min_shapes <= self.max_shapes <= 3:
            raise ValidationError("shape count must satisfy 1 <= min_shapes <= max_shapes <= 3")
        unknown = set(self.shape_kinds) - set(SHAPE_KINDS)
        if unknown or not self.shape_kinds:
            raise ValidationError(f"unknown shape kinds {sorted(unknown)}")
        if not 0 < self.min_size <= self.max_size:
            raise ValidationError("need 0 < min_size <= max_size")
        largest = 2 * int(np.ceil(self.max_size * min(self.height, self.width))) + 1 + 2 * BORDER
        if largest > min(self.height, self.width):
            raise ValidationError(f"shapes up to {largest} px (with border) do not fit a "
                                  f"{self.height}x{self.width} frame")
        if self.fg_speed[0] < 0 or self.fg_speed[1] < self.fg_speed[0] or self.bg_speed < 0:
            raise ValidationError("speed ranges must be non-negative and ordered")
        for name in ("still_prob", "distractor_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must be a probability")


@dataclass
class VideoSample:
    """One frame of a clip: image, exact flow, its rendering and the saliency mask."""

    frame: np.ndarray        # [3,H,W] float in [0,1]
    flow: np.ndarray         # [2,H,W] float32 (dx, dy) in pixels
    flow_image: np.ndarray   # [3,H,W] float in [0,1]
    mask: np.ndarray         # [1,H,W] float, exactly 0 or 1
    clip_id: str = "clip_00000"
    index: int = 0
    # Which surface owns each pixel (-1 background, k = k-th object); generator-only, not serialized.
    owner: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def has_motion(self) -> bool:
        """False for the first frame of a clip (no previous frame, flow identically zero)."""
        return self.index > 0


# --------------------------------------------------------------------------
# flow rendering


def _make_colorwheel() -> np.ndarray:
    ry, yg, gc, cb, bm, mr = 15, 6, 4, 11, 13, 6
    wheel = []
    for i in range(ry):
        wheel.append((255, np.floor(255 * i / ry), 0))
    for i in range(yg):
        wheel.append((255 - np.floor(255 * i / yg), 255, 0))
    for i in range(gc):
        wheel.append((0, 255, np.floor(255 * i / gc)))
    for i in range(cb):
        wheel.append((0, 255 - np.floor(255 * i / cb), 255))
    for i in range(bm):
        wheel.append((np.floor(255 * i / bm), 0, 255))
    for i in range(mr):
        wheel.append((255, 0, 255 - np.floor(255 * i / mr)))
    return np.array(wheel, dtype=np.float64)


COLORWHEEL = _make_colorwheel()


def wheel_position(flow: np.ndarray) -> np.ndarray:
    """Fractional colour-wheel angle in [0, 1) for each flow vector (0.5 = opposite direction)."""
    dx, dy = flow[0].astype(np.float64), flow[1].astype(np.float64)
    return (np.arctan2(-dy, -dx) / np.pi + 1.0) / 2.0 % 1.0


def flow_to_color(flow: np.ndarray, max_magnitude: Optional[float] = None) -> np.ndarray:
    """Render a [2,H,W] flow field with the Middlebury colour wheel, returning [3,H,W] in [0,1].

    Direction selects the hue, magnitude (divided by ``max_magnitude``, by
    default the field's own maximum, floored at 1e-6) the saturation; zero
    flow is white.
    """
    dx, dy = flow[0].astype(np.float64), flow[1].astype(np.float64)
    mag = np.sqrt(dx * dx + dy * dy)
    if max_magnitude is None:
        max_magnitude = float(mag.max()) if mag.size else 0.0
    rad = mag / max(max_magnitude, 1e-6)
    ncols = len(COLORWHEEL)
    fk = (np.arctan2(-dy, -dx) / np.pi + 1.0) / 2.0 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = k0 + 1
    k1[k1 == ncols] = 0
    f = fk - k0
    out = np.empty((3,) + dx.shape)
    for c in range(3):
        col0 = COLORWHEEL[k0, c] / 255.0
        col1 = COLORWHEEL[k1, c] / 255.0
        col = (1 - f) * col0 + f * col1
        out[c] = np.where(rad <= 1, 1 - rad * (1 - col), col * 0.75)
    return out


# --------------------------------------------------------------------------
# geometry


def _shape_mask(kind: str, half: int, rng: np.random.Generator) -> np.ndarray:
    size = 2 * half + 1
    yy, xx = np.mgrid[-half:half + 1, -half:half + 1]
    if kind == "disc":
        return (xx * xx + yy * yy) <= half * half + half
    hy = int(rng.integers(max(1, half // 2), half + 1))
    hx = int(rng.integers(max(1, half // 2), half + 1))
    rect = (np.abs(yy) <= hy) & (np.abs(xx) <= hx)
    if kind == "rectangle":
        return rect
    # L-shape: remove one quadrant of the rectangle.
    qy, qx = rng.choice([-1, 1], size=2)
    cut = (yy * qy > 0) & (xx * qx > 0)
    return rect & ~cut if size > 2 else rect


def _texture(rng: np.random.Generator, shape: tuple[int, int], sigma: float, wrap: bool) -> np.ndarray:
    noise = rng.normal(size=shape)
    smooth = gaussian_filter(noise, sigma, mode="wrap" if wrap else "reflect")
    smooth /= max(np.abs(smooth).max(), 1e-12)
    return smooth


def _random_color(rng: np.random.Generator, vivid: bool) -> np.ndarray:
    if vivid:
        c = rng.uniform(0.0, 0.25, 3)
        hi = rng.integers(3)
        c[hi] = rng.uniform(0.8, 1.0)
        if rng.uniform() < 0.5:
            c[(hi + 1) % 3] = rng.uniform(0.6, 1.0)
        return c
    return rng.uniform(0.35, 0.65, 3)


@dataclass
class _Surface:
    shape: np.ndarray            # bool [h,w] footprint
    pixels: np.ndarray           # [3,h,w]
    positions: np.ndarray        # [T,2] top-left (y, x) per frame
    foreground: bool


def _trajectory(rng, params: ClipParams, extent: tuple[int, int], velocities: np.ndarray) -> np.ndarray:
    """Top-left positions per frame, placed so the footprint stays BORDER px inside."""
    h, w = extent
    disp = np.vstack([np.zeros((1, 2), int), np.cumsum(velocities, axis=0)])
    lo = BORDER - disp.min(axis=0)
    hi = np.array([params.height - h - BORDER, params.width - w - BORDER]) - disp.max(axis=0)
    if np.any(hi < lo):
        return None
    start = np.array([rng.integers(lo[0], hi[0] + 1), rng.integers(lo[1], hi[1] + 1)])
    return start + disp


def _velocity(rng, lo: int, hi: int) -> np.ndarray:
    speed = int(rng.integers(lo, hi + 1))
    angle = rng.uniform(0, 2 * np.pi)
    v = np.rint([speed * np.sin(angle), speed * np.cos(angle)]).astype(int)
    return v


# --------------------------------------------------------------------------
# clip generation


def gen_clip(params: ClipParams, clip_id: Optional[str] = None) -> list[VideoSample]:
    """Render ``params.frames`` consecutive samples; deterministic in ``params.seed``."""
    params.validate()
    rng = np.random.default_rng(params.seed)
    H, W, T = params.height, params.width, params.frames
    clip_id = clip_id or f"clip_{params.seed:05d}"

    bg_tex = _texture(rng, (H, W), sigma=max(1.0, min(H, W) / 16), wrap=True)
    bg_tint = _random_color(rng, vivid=False)
    fine = rng.uniform(-1, 1, (H, W))
    background = np.clip(bg_tint[:, None, None] + 0.15 * bg_tex[None] + params.texture_noise * fine[None], 0, 1)
    bg_vel = _velocity(rng, 0, params.bg_speed) if params.bg_speed > 0 else np.zeros(2, int)
    bg_steps = np.tile(bg_vel, (max(T - 1, 0), 1))

    surfaces: list[_Surface] = []
    side = min(H, W)
    kinds = list(params.shape_kinds)

    def make_surface(foreground: bool) -> Optional[_Surface]:
        for _ in range(50):
            half = int(rng.integers(int(np.ceil(params.min_size * side)), int(np.ceil(params.max_size * side)) + 1))
            kind = kinds[int(rng.integers(len(kinds)))]
            footprint = _shape_mask(kind, half, rng)
            size = footprint.shape
            color = _random_color(rng, vivid=True)
            tex = _texture(rng, size, sigma=1.0, wrap=False)
            pixels = np.clip(color[:, None, None] + 0.1 * tex[None]
                             + params.texture_noise * rng.uniform(-1, 1, size)[None], 0, 1)
            if foreground:
                v = _velocity(rng, params.fg_speed[0], params.fg_speed[1])
                if params.fg_speed[0] > 0 and np.array_equal(v, bg_vel):
                    # Keep shapes moving relative to the scene unless speed 0 was allowed.
                    v = v + np.array([0, 1])
                steps = np.tile(v, (max(T - 1, 0), 1))
                for t in range(T - 1):
                    if rng.uniform() < params.still_prob:
                        steps[t] = bg_vel
            else:
                steps = bg_steps
            pos = _trajectory(rng, params, size, steps)
            if pos is not None:
                return _Surface(footprint, pixels, pos, foreground)
        return None

    if rng.uniform() < params.distractor_prob:
        s = make_surface(foreground=False)
        if s is not None:
            surfaces.append(s)
    n_fg = int(rng.integers(params.min_shapes, params.max_shapes + 1))
    for _ in range(n_fg):
        s = make_surface(foreground=True)
        if s is None:
            raise ValidationError("could not place a foreground shape inside the frame; "
                                  "reduce speeds or sizes")
        surfaces.append(s)

    frames, flows, masks, owners = [], [], [], []
    for t in range(T):
        shift = bg_vel * t
        img = np.roll(background, shift=(int(shift[0]), int(shift[1])), axis=(1, 2)).copy()
        flow = np.zeros((2, H, W), dtype=np.float32)
        if t > 0:
            flow[0] = bg_vel[1]
            flow[1] = bg_vel[0]
        mask = np.zeros((1, H, W))
        owner = np.full((H, W), -1, dtype=np.int64)
        for k, s in enumerate(surfaces):
            y, x = s.positions[t]
            h, w = s.shape.shape
            region = (slice(None), slice(y, y + h), slice(x, x + w))
            img[region] = np.where(s.shape[None], s.pixels, img[region])
            owner[y:y + h, x:x + w] = np.where(s.shape, k, owner[y:y + h, x:x + w])
            if t > 0:
                v = s.positions[t] - s.positions[t - 1]
                flow[0, y:y + h, x:x + w] = np.where(s.shape, v[1], flow[0, y:y + h, x:x + w])
                flow[1, y:y + h, x:x + w] = np.where(s.shape, v[0], flow[1, y:y + h, x:x + w])
            if s.foreground:
                mask[0, y:y + h, x:x + w] = np.maximum(mask[0, y:y + h, x:x + w], s.shape)
        frames.append(img)
        flows.append(flow)
        masks.append(mask)
        owners.append(owner)

    max_mag = max(float(np.sqrt((f.astype(np.float64) ** 2).sum(axis=0)).max()) for f in flows)
    return [VideoSample(frames[t], flows[t], flow_to_color(flows[t], max_mag), masks[t], clip_id, t, owners[t])
            for t in range(T)]


def clip_seeds(seed: int, count: int) -> list[int]:
    """Independent per-clip seeds derived from one master seed."""
    ss = np.random.SeedSequence(seed)
    return [int(child.generate_state(1)[0]) for child in ss.spawn(count)]


def gen_dataset(seed: int, clips: int, base: Optional[ClipParams] = None, prefix: str = "clip") -> list[VideoSample]:
    base = base or ClipParams()
    out = []
    for i, s in enumerate(clip_seeds(seed, clips)):
        out.extend(gen_clip(replace(base, seed=s), clip_id=f"{prefix}_{i:05d}"))
    return out


def gen_stills(seed: int, count: int, base: Optional[ClipParams] = None) -> list[VideoSample]:
    """Single-frame samples without distractors: the static-image saliency task."""
    base = replace(base or ClipParams(), frames=1, distractor_prob=0.0)
    return gen_dataset(seed, count, base, prefix="still")


# --------------------------------------------------------------------------
# file formats

FLO2_MAGIC = b"FLO2"


def _to_bytes8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path: Union[str, Path], image: np.ndarray) -> None:
    """Binary P6 from a [3,H,W] float image in [0,1]."""
    data = _to_bytes8(image).transpose(1, 2, 0)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data).tobytes())


def write_pgm(path: Union[str, Path], image: np.ndarray) -> None:
    """Binary P5 from a [1,H,W] or [H,W] float map in [0,1]."""
    data = _to_bytes8(np.asarray(image).reshape(np.asarray(image).shape[-2:]))
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _read_netpbm(path: Union[str, Path], magic: bytes) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} header, found {tokens[0]!r}")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise FormatError(f"{path}: malformed header") from None
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit images are supported")
    channels = 3 if magic == b"P6" else 1
    n = w * h * channels
    body = raw[pos:pos + n]
    if len(body) != n:
        raise FormatError(f"{path}: expected {n} pixel bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, channels).transpose(2, 0, 1)
    return arr.astype(np.float64) / 255.0


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6")


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5")


def write_flo2(path: Union[str, Path], flow: np.ndarray) -> None:
    """Magic ``FLO2``, uint32 H, uint32 W, then row-major little-endian float32 (dx, dy) pairs."""
    flow = np.asarray(flow)
    _, h, w = flow.shape
    body = np.ascontiguousarray(flow.transpose(1, 2, 0), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FLO2_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(body.tobytes())


def read_flo2(path: Union[str, Path]) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated flo2 header")
    if raw[:4] != FLO2_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {FLO2_MAGIC!r}")
    h, w = struct.unpack("<II", raw[4:12])
    n = h * w * 2 * 4
    if len(raw) - 12 != n:
        raise FormatError(f"{path}: expected {n} payload bytes for {h}x{w}, found {len(raw) - 12}")
    arr = np.frombuffer(raw[12:], dtype="<f4").reshape(h, w, 2).transpose(2, 0, 1)
    return arr.astype(np.float32)


def write_dataset(samples: Sequence[VideoSample], root: Union[str, Path]) -> None:
    """Lay samples out as ``root/<clip_id>/{frame,flow,flowimg,mask}_%05d.*``."""
    root = Path(root)
    for s in samples:
        d = root / s.clip_id
        d.mkdir(parents=True, exist_ok=True)
        write_ppm(d / f"frame_{s.index:05d}.ppm", s.frame)
        write_flo2(d / f"flow_{s.index:05d}.flo2", s.flow)
        write_ppm(d / f"flowimg_{s.index:05d}.ppm", s.flow_image)
        write_pgm(d / f"mask_{s.index:05d}.pgm", s.mask)


def read_dataset(root: Union[str, Path]) -> list[VideoSample]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(2, "dataset root not found", str(root))
    out = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        for fp in sorted(d.glob("frame_*.ppm")):
            idx = int(fp.stem.split("_")[1])
            frame = read_ppm(fp)
            flow = read_flo2(d / f"flow_{idx:05d}.flo2")
            flow_image = read_ppm(d / f"flowimg_{idx:05d}.ppm")
            mask = read_pgm(d / f"mask_{idx:05d}.pgm")
            if not np.all((mask == 0) | (mask == 1)):
                raise FormatError(f"{d / f'mask_{idx:05d}.pgm'}: mask is not binary")
            out.append(VideoSample(frame, flow, flow_image, mask, d.name, idx))
    return out


def channel_stats(images: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over a list of [3,H,W] images."""
    stack = np.stack([np.asarray(im) for im in images])
    return stack.mean(axis=(0, 2, 3)), stack.std(axis=(0, 2, 3))
