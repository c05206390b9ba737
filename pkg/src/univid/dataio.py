"""Synthetic moving-shapes corpus, bit-exact file formats, and the latent codec.

Tensor files (UVTF) are fully specified so round-trips are byte-stable across
platforms:

    magic "UVTF" | version u8=1 | dtype u8=1 (f32) | ndim u8 | pad u8=0
    | ndim x u32-LE dims | row-major f32-LE payload

Checkpoints store one tensor file per parameter plus a manifest.txt listing
name, group, shape and file. Stored pixel videos stay in [0, 1]; the [-1, 1]
normalization for diffusion lives outside the (lossless) codec.
"""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from einops import rearrange

from .errors import CheckpointError, DataError, FormatError, ShapeError

MAGIC = b"UVTF"
VERSION = 1
DTYPE_F32 = 1
MAX_RANK = 8

COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
}
SHAPES = ("circle", "square", "triangle")
MOTIONS = {
    "left": (-1, 0),
    "right": (1, 0),
    "up": (0, -1),
    "down": (0, 1),
    "diagonal": (1, 1),
}
SPEEDS = {"slow": 1, "fast": 2}

VOCAB_TOKENS = list(COLORS) + list(SHAPES) + ["moving"] + list(MOTIONS) + list(SPEEDS)


# ---------------------------------------------------------------------------
# tensor file format


def write_tensor(path: str | Path, tensor: torch.Tensor | np.ndarray):
    arr = tensor.detach().cpu().numpy() if isinstance(tensor, torch.Tensor) else np.asarray(tensor)
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim > MAX_RANK:
        raise FormatError(f"rank {arr.ndim} exceeds maximum {MAX_RANK}")
    header = MAGIC + bytes([VERSION, DTYPE_F32, arr.ndim, 0])
    dims = b"".join(struct.pack("<I", d) for d in arr.shape)
    Path(path).write_bytes(header + dims + arr.tobytes(order="C"))


def read_tensor(path: str | Path) -> torch.Tensor:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, dtype, ndim, pad = raw[4], raw[5], raw[6], raw[7]
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    if ndim > MAX_RANK:
        raise FormatError(f"{path}: rank {ndim} exceeds maximum {MAX_RANK}")
    if pad != 0:
        raise FormatError(f"{path}: nonzero pad byte {pad}")
    need = 8 + 4 * ndim
    if len(raw) < need:
        raise FormatError(f"{path}: truncated dims")
    shape = struct.unpack(f"<{ndim}I", raw[8:need]) if ndim else ()
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    payload = raw[need:]
    if len(payload) != 4 * count:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {4 * count}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
    return torch.from_numpy(arr.copy())


# ---------------------------------------------------------------------------
# latent codec


class VideoCodec:
    """Lossless pixel<->latent rearrangement; D(E(x)) is bitwise x.

    identity: no-op. patchify2: folds 2x2 pixel blocks into channels,
    [*, C, H, W] -> [*, 4C, H/2, W/2].
    """

    KINDS = ("identity", "patchify2")

    def __init__(self, kind: str):
        if kind not in self.KINDS:
            raise FormatError(f"unknown codec kind {kind!r}; expected one of {self.KINDS}")
        self.kind = kind

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if self.kind == "identity":
            return x
        H, W = x.shape[-2], x.shape[-1]
        if H % 2 or W % 2:
            raise ShapeError(f"patchify2 needs even H, W; got {H}x{W}")
        return rearrange(x, "... c (h p1) (w p2) -> ... (c p1 p2) h w", p1=2, p2=2)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if self.kind == "identity":
            return z
        C = z.shape[-3]
        if C % 4:
            raise ShapeError(f"patchify2 latent channel count {C} not divisible by 4")
        return rearrange(z, "... (c p1 p2) h w -> ... c (h p1) (w p2)", p1=2, p2=2)

    def latent_geometry(self, channels: int, height: int, width: int) -> tuple[int, int, int]:
        if self.kind == "identity":
            return channels, height, width
        if height % 2 or width % 2:
            raise ShapeError(f"patchify2 needs even H, W; got {height}x{width}")
        return 4 * channels, height // 2, width // 2


def to_diffusion_space(x01: torch.Tensor) -> torch.Tensor:
    """[0, 1] pixels -> [-1, 1] diffusion values."""
    return 2.0 * x01 - 1.0


def from_diffusion_space(x: torch.Tensor) -> torch.Tensor:
    """[-1, 1] diffusion values -> clamped [0, 1] pixels."""
    return torch.clamp((x + 1.0) / 2.0, 0.0, 1.0)


# ---------------------------------------------------------------------------
# synthetic clips


@dataclass(frozen=True)
class ClipSpec:
    shape: str
    color: str
    motion: str
    speed: str
    frames: int
    height: int
    width: int

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise DataError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise DataError(f"unknown color {self.color!r}")
        if self.motion not in MOTIONS:
            raise DataError(f"unknown motion {self.motion!r}")
        if self.speed not in SPEEDS:
            raise DataError(f"unknown speed {self.speed!r}")
        if self.frames < 1 or self.height < 8 or self.width < 8:
            raise DataError(f"bad geometry F={self.frames} H={self.height} W={self.width}")

    @property
    def rgb(self) -> tuple[float, float, float]:
        return COLORS[self.color]

    @property
    def caption(self) -> list[str]:
        return [self.color, self.shape, "moving", self.motion, self.speed]


def _raster_mask(shape: str, cx: int, cy: int, radius: int, height: int, width: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    if shape == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= radius**2
    if shape == "square":
        return np.maximum(np.abs(xs - cx), np.abs(ys - cy)) <= radius
    # upward triangle with apex (cx, cy - radius) and base y = cy + radius
    in_band = (ys >= cy - radius) & (ys <= cy + radius)
    half = (ys - (cy - radius)) / 2.0
    return in_band & (np.abs(xs - cx) <= half)


def gen_clip(spec: ClipSpec, seed: int) -> tuple[torch.Tensor, list[str], torch.Tensor]:
    """Rasterize one clip; returns (video [F,3,H,W] in [0,1], caption, frame 0).

    The object moves at an integer velocity per frame and must remain fully
    inside the frame for all F frames; the start position is drawn from the
    valid band with a seeded RNG.
    """
    radius = max(2, min(spec.height, spec.width) // 8)
    v = SPEEDS[spec.speed]
    dx, dy = (d * v for d in MOTIONS[spec.motion])
    total_dx, total_dy = dx * (spec.frames - 1), dy * (spec.frames - 1)

    x_lo = radius + max(0, -total_dx)
    x_hi = spec.width - 1 - radius - max(0, total_dx)
    y_lo = radius + max(0, -total_dy)
    y_hi = spec.height - 1 - radius - max(0, total_dy)
    if x_lo > x_hi or y_lo > y_hi:
        raise DataError(
            f"object cannot stay inside {spec.width}x{spec.height} for {spec.frames} frames "
            f"at velocity ({dx},{dy}) with radius {radius}"
        )
    rng = np.random.default_rng(seed)
    cx0 = int(rng.integers(x_lo, x_hi + 1))
    cy0 = int(rng.integers(y_lo, y_hi + 1))

    video = np.zeros((spec.frames, 3, spec.height, spec.width), dtype=np.float32)
    color = np.array(spec.rgb, dtype=np.float32)
    for f in range(spec.frames):
        mask = _raster_mask(spec.shape, cx0 + f * dx, cy0 + f * dy, radius, spec.height, spec.width)
        video[f][:, mask] = color[:, None]
    clip = torch.from_numpy(video)
    return clip, spec.caption, clip[0].clone()


# ---------------------------------------------------------------------------
# dataset directory


MANIFEST_FIELDS = ["id", "shape", "color", "motion", "speed", "frames", "height", "width", "seed", "caption"]


def write_dataset(out_dir: str | Path, specs: list[tuple[ClipSpec, int]]):
    """Write clip-<id>.uvt, caption-<id>.txt, manifest.csv and vocab.txt."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (spec, seed) in enumerate(specs):
        video, caption, _ = gen_clip(spec, seed)
        write_tensor(out / f"clip-{i:04d}.uvt", video)
        (out / f"caption-{i:04d}.txt").write_text(" ".join(caption) + "\n", encoding="utf-8")
        rows.append(
            dict(id=f"{i:04d}", shape=spec.shape, color=spec.color, motion=spec.motion,
                 speed=spec.speed, frames=spec.frames, height=spec.height, width=spec.width,
                 seed=seed, caption=" ".join(caption))
        )
    with open(out / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    (out / "vocab.txt").write_text("\n".join(VOCAB_TOKENS) + "\n", encoding="utf-8")


class ClipDataset:
    """Reader for a dataset directory written by write_dataset."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        manifest = self.root / "manifest.csv"
        if not manifest.exists():
            raise DataError(f"no manifest.csv under {self.root}")
        with open(manifest, newline="", encoding="utf-8") as fh:
            self.rows = list(csv.DictReader(fh))
        if not self.rows:
            raise DataError(f"{manifest} lists no clips")

    def __len__(self):
        return len(self.rows)

    def spec(self, i: int) -> ClipSpec:
        r = self.rows[i]
        return ClipSpec(shape=r["shape"], color=r["color"], motion=r["motion"], speed=r["speed"],
                        frames=int(r["frames"]), height=int(r["height"]), width=int(r["width"]))

    def clip(self, i: int) -> tuple[torch.Tensor, list[str], torch.Tensor]:
        """(video [F,3,H,W], caption tokens, reference image = frame 0)."""
        video = read_tensor(self.root / f"clip-{self.rows[i]['id']}.uvt")
        caption = self.rows[i]["caption"].split()
        return video, caption, video[0].clone()

    @property
    def frames(self) -> int:
        return int(self.rows[0]["frames"])

    @property
    def vocab_path(self) -> Path:
        return self.root / "vocab.txt"


# ---------------------------------------------------------------------------
# checkpoints


def _param_filename(name: str) -> str:
    return name + ".uvt"


def save_checkpoint(ckpt_dir: str | Path, params: dict[str, torch.Tensor],
                    groups: dict[str, str], extras: dict[str, str] | None = None):
    """One tensor file per parameter plus manifest.txt (name, group, shape, file)."""
    out = Path(ckpt_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["univid-checkpoint v1"]
    for key, value in sorted((extras or {}).items()):
        lines.append(f"extra {key}={value}")
    for name in sorted(params):
        if name not in groups:
            raise CheckpointError(f"parameter {name} has no group tag")
        fname = _param_filename(name)
        write_tensor(out / fname, params[name])
        shape = "x".join(str(d) for d in params[name].shape) or "scalar"
        lines.append(f"param {name} {groups[name]} {shape} {fname}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(ckpt_dir: str | Path) -> tuple[dict[str, torch.Tensor], dict[str, str], dict[str, str]]:
    """Returns (params, groups, extras); validates shapes and the group partition."""
    root = Path(ckpt_dir)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise CheckpointError(f"no manifest.txt under {root}")
    lines = manifest.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "univid-checkpoint v1":
        raise CheckpointError(f"{manifest}: bad header")
    params: dict[str, torch.Tensor] = {}
    groups: dict[str, str] = {}
    extras: dict[str, str] = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        kind, _, rest = line.partition(" ")
        if kind == "extra":
            key, _, value = rest.partition("=")
            extras[key] = value
        elif kind == "param":
            try:
                name, group, shape_s, fname = rest.split(" ")
            except ValueError as exc:
                raise CheckpointError(f"{manifest}: malformed line {line!r}") from exc
            if group not in ("spatial", "temporal", "conditioning"):
                raise CheckpointError(f"parameter {name}: unknown group {group!r}")
            if name in params:
                raise CheckpointError(f"duplicate parameter {name}")
            path = root / fname
            if not path.exists():
                raise CheckpointError(f"missing tensor file for parameter {name}: {fname}")
            tensor = read_tensor(path)
            want = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split("x"))
            if tuple(tensor.shape) != want:
                raise CheckpointError(
                    f"parameter {name}: file shape {tuple(tensor.shape)} != manifest {want}"
                )
            params[name] = tensor
            groups[name] = group
        else:
            raise CheckpointError(f"{manifest}: unknown record kind {kind!r}")
    if not params:
        raise CheckpointError(f"{manifest}: no parameters listed")
    return params, groups, extras


# ---------------------------------------------------------------------------
# PPM frame grid


def write_ppm(path: str | Path, video: torch.Tensor):
    """P6 frame grid: frames tiled horizontally, round(255 * clamp(x, 0, 1))."""
    if video.dim() == 3:
        video = video.unsqueeze(0)
    if video.dim() != 4 or video.shape[1] != 3:
        raise ShapeError(f"expected [F, 3, H, W], got {tuple(video.shape)}")
    arr = video.detach().cpu().numpy()
    F, _, H, W = arr.shape
    grid = np.concatenate(list(arr), axis=2)  # [3, H, F*W]
    pixels = np.rint(255.0 * np.clip(grid, 0.0, 1.0)).astype(np.uint8)
    header = f"P6\n{F * W} {H}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pixels.transpose(1, 2, 0).tobytes())


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
