"""Synthetic single-object videos with exact ground-truth masks.

Objects are saturated primaries (red, green or blue); an optional distractor
uses a different primary. Backgrounds are a flat grey, a static grey noise
texture, or flat grey with the moving distractor.

On disk a scene is ``scene_NNN/frames/NNNNN.ppm``, ``scene_NNN/masks/NNNNN.pgm``
and ``scene_NNN/spec.txt`` (the :class:`SceneSpec` as ``key = value`` lines).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .numerics import FormatError, Rng

PRIMARIES = {
    "red": (0.95, 0.1, 0.1),
    "green": (0.1, 0.9, 0.1),
    "blue": (0.1, 0.15, 0.95),
}
BACKGROUNDS = ("constant", "noise", "distractor")
SHAPES = ("disk", "rect")


@dataclass(frozen=True)
class SceneSpec:
    size: tuple[int, int] = (64, 64)
    n_frames: int = 20
    shape: str = "disk"
    radius: float = 8.0
    color: str = "red"
    start: tuple[float, float] = (32.0, 32.0)  # (y, x)
    velocity: tuple[float, float] = (0.0, 1.0)
    occluded: tuple[int, int] = (0, 0)  # frames [a, b) hide the object
    background: str = "constant"
    level: float = 0.5
    noise: float = 0.08
    distractor_color: str = "green"
    distractor_start: tuple[float, float] = (16.0, 16.0)
    distractor_velocity: tuple[float, float] = (1.0, 0.0)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_frames < 1:
            raise ValueError("a scene needs at least one frame")
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"unknown background {self.background!r}")
        for c in (self.color, self.distractor_color):
            if c not in PRIMARIES:
                raise ValueError(f"unknown colour {c!r}")
        if self.radius < 1:
            raise ValueError("object radius must be >= 1")
        H, W = self.size
        if not (0 <= self.start[0] < H and 0 <= self.start[1] < W):
            raise ValueError("object must start on the canvas")


def _bounce(p0: float, v: float, t: int, lo: float, hi: float) -> float:
    """Position after ``t`` frames of reflecting motion inside ``[lo, hi]``."""
    if hi <= lo or v == 0:
        return min(max(p0, lo), hi)
    span = hi - lo
    u = (p0 - lo + v * t) % (2 * span)
    return lo + (u if u <= span else 2 * span - u)


def centre(spec: SceneSpec, t: int, start=None, velocity=None) -> tuple[float, float]:
    start = spec.start if start is None else start
    velocity = spec.velocity if velocity is None else velocity
    H, W = spec.size
    r = spec.radius
    return (
        _bounce(start[0], velocity[0], t, min(r, start[0]), max(H - 1 - r, start[0])),
        _bounce(start[1], velocity[1], t, min(r, start[1]), max(W - 1 - r, start[1])),
    )


def shape_mask(spec: SceneSpec, cy: float, cx: float) -> np.ndarray:
    H, W = spec.size
    yy, xx = np.mgrid[0:H, 0:W]
    if spec.shape == "disk":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= spec.radius**2
    return (np.abs(yy - cy) <= spec.radius) & (np.abs(xx - cx) <= spec.radius)


def _background(spec: SceneSpec) -> np.ndarray:
    H, W = spec.size
    img = np.full((H, W, 3), spec.level, dtype=np.float32)
    if spec.background == "noise":
        tex = Rng(spec.seed).fork(1).normal((H, W, 1), spec.noise)
        img = np.clip(img + tex, 0.0, 1.0)
    return img


def generate(spec: SceneSpec) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Frames ``(H, W, 3)`` in [0, 1] (8-bit quantised) and boolean masks."""
    base = _background(spec)
    frames, masks = [], []
    a, b = spec.occluded
    for t in range(spec.n_frames):
        img = base.copy()
        if spec.background == "distractor":
            dy, dx = centre(spec, t, spec.distractor_start, spec.distractor_velocity)
            img[shape_mask(spec, dy, dx)] = PRIMARIES[spec.distractor_color]
        if a <= t < b:
            m = np.zeros(spec.size, dtype=bool)
        else:
            m = shape_mask(spec, *centre(spec, t))
            img[m] = PRIMARIES[spec.color]
        frames.append(quantize(img))
        masks.append(m)
    return frames, masks


def quantize(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def random_scene_spec(seed: int, n_frames: int = 20, size: tuple[int, int] = (64, 64), static: bool = False) -> SceneSpec:
    rng = Rng(seed)
    u = rng.uniform(12)
    H, W = size
    colors = list(PRIMARIES)
    color = colors[int(u[0] * 3)]
    others = [c for c in colors if c != color]
    radius = float(6 + int(u[1] * 5))
    start = (float(radius + u[2] * (H - 2 * radius - 1)), float(radius + u[3] * (W - 2 * radius - 1)))
    speed = 0.0 if static else 1.0 + 1.0 * u[4]
    angle = 2 * np.pi * u[5]
    velocity = (round(float(speed * np.sin(angle)), 3), round(float(speed * np.cos(angle)), 3))
    background = BACKGROUNDS[int(u[6] * 3)]
    occluded = (0, 0)
    if not static and n_frames >= 12 and u[7] < 0.3:
        a = int(n_frames // 2)
        occluded = (a, a + 3)
    return SceneSpec(
        size=size,
        n_frames=n_frames,
        shape=SHAPES[int(u[8] * 2)],
        radius=radius,
        color=color,
        start=(round(start[0], 3), round(start[1], 3)),
        velocity=(0.0, 0.0) if static else velocity,
        occluded=occluded,
        background=background,
        level=round(0.35 + 0.3 * float(u[9]), 3),
        distractor_color=others[int(u[10] * 2)],
        distractor_start=(float(H - 1 - start[0]), float(W - 1 - start[1])),
        distractor_velocity=(-velocity[0], velocity[1]),
        seed=seed,
    )


# -- spec text ---------------------------------------------------------------------


def spec_to_text(spec: SceneSpec) -> str:
    lines = []
    for f in dataclasses.fields(spec):
        v = getattr(spec, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def spec_from_text(text: str) -> SceneSpec:
    types = {f.name: f.type for f in dataclasses.fields(SceneSpec)}
    kw: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"spec line {lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in types:
            raise ValueError(f"spec line {lineno}: unknown key {key!r}")
        default = getattr(SceneSpec(), key)
        if isinstance(default, tuple):
            cast = type(default[0])
            kw[key] = tuple(cast(x) for x in value.split(","))
        else:
            kw[key] = type(default)(value)
    return SceneSpec(**kw)


# -- Netpbm IO ---------------------------------------------------------------------


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    H, W, _ = arr.shape
    Path(path).write_bytes(f"P6\n{W} {H}\n255\n".encode() + arr.tobytes())


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    arr = np.asarray(img)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    else:
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    H, W = arr.shape
    Path(path).write_bytes(f"P5\n{W} {H}\n255\n".encode() + arr.tobytes())


def _read_netpbm(path: str | Path, magic: bytes, channels: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        tokens.append(buf[start:pos])
    pos += 1
    if tokens[0] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} header, got {tokens[0]!r}")
    W, H, maxval = (int(x) for x in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit images are supported")
    n = W * H * channels
    if len(buf) - pos < n:
        raise FormatError(f"{path}: truncated pixel data")
    arr = np.frombuffer(buf, dtype=np.uint8, count=n, offset=pos)
    return arr.reshape((H, W, channels) if channels > 1 else (H, W))


def read_ppm(path: str | Path) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3).astype(np.float32) / np.float32(255.0)


def read_pgm(path: str | Path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)


# -- corpora -----------------------------------------------------------------------


@dataclass
class Scene:
    name: str
    spec: SceneSpec
    frames: list[np.ndarray] = field(repr=False)
    masks: list[np.ndarray] = field(repr=False)

    def __len__(self) -> int:
        return len(self.frames)


def write_scene(root: str | Path, name: str, spec: SceneSpec) -> Path:
    d = Path(root) / name
    (d / "frames").mkdir(parents=True, exist_ok=True)
    (d / "masks").mkdir(parents=True, exist_ok=True)
    frames, masks = generate(spec)
    for t, (f, m) in enumerate(zip(frames, masks)):
        write_ppm(d / "frames" / f"{t:05d}.ppm", f)
        write_pgm(d / "masks" / f"{t:05d}.pgm", m)
    (d / "spec.txt").write_text(spec_to_text(spec))
    return d


def read_scene(path: str | Path) -> Scene:
    d = Path(path)
    spec = spec_from_text((d / "spec.txt").read_text())
    frames = [read_ppm(p) for p in sorted((d / "frames").glob("*.ppm"))]
    masks = [read_pgm(p) > 127 for p in sorted((d / "masks").glob("*.pgm"))]
    if len(frames) != len(masks) or not frames:
        raise FormatError(f"{d}: {len(frames)} frames but {len(masks)} masks")
    return Scene(d.name, spec, frames, masks)


def scene_from_spec(name: str, spec: SceneSpec) -> Scene:
    frames, masks = generate(spec)
    return Scene(name, spec, frames, masks)


def corpus_specs(n_scenes: int, seed: int = 0, n_frames: int = 20, static: bool = False) -> list[SceneSpec]:
    root = Rng(seed)
    return [random_scene_spec(int(root.fork(i).next_u64(1)[0] >> 1), n_frames, static=static) for i in range(n_scenes)]


def make_corpus(n_scenes: int, seed: int = 0, n_frames: int = 20, static: bool = False) -> list[Scene]:
    return [scene_from_spec(f"scene_{i:03d}", s) for i, s in enumerate(corpus_specs(n_scenes, seed, n_frames, static))]


def write_corpus(root: str | Path, specs: list[SceneSpec]) -> list[Path]:
    return [write_scene(root, f"scene_{i:03d}", s) for i, s in enumerate(specs)]


def iter_corpus(root: str | Path) -> Iterator[Scene]:
    dirs = sorted(p for p in Path(root).iterdir() if p.is_dir() and (p / "spec.txt").exists())
    if not dirs:
        raise FileNotFoundError(f"no scenes under {root}")
    for d in dirs:
        yield read_scene(d)
