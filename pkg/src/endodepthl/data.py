"""Frame triplets: on-disk sequences, training augmentation and a synthetic
scene renderer with exact depth and pose.

On-disk layout of one sequence::

    sequence_<n>/frames/%06d.png     8-bit RGB
    sequence_<n>/intrinsics.json     {fx, fy, cx, cy, width, height}
    sequence_<n>/depth/%06d.png      optional, uint16, 1/256 mm per step, 0 = invalid
    sequence_<n>/poses.json          optional, list of 4x4 row-major camera-to-world
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torchvision.transforms.functional as TF
from PIL import Image

from .geometry import CameraIntrinsics

DEPTH_SCALE = 256.0
MAX_DEPTH = 65535 / DEPTH_SCALE
GEOMETRIES = ("plane", "tilted_plane", "sphere")
_FRAME_RE = re.compile(r"^(\d{6})\.png$")


@dataclass
class FrameTriplet:
    prev: torch.Tensor  # (3, H, W)
    target: torch.Tensor
    next: torch.Tensor
    intrinsics: CameraIntrinsics
    gt_depth: torch.Tensor | None = None  # (1, H, W) mm, 0 = invalid
    pose_prev: torch.Tensor | None = None  # target -> prev camera, (4, 4)
    pose_next: torch.Tensor | None = None  # target -> next camera
    index: int = 0

    @property
    def images(self):
        return self.prev, self.target, self.next


def relative_pose(cam_to_world_target: np.ndarray, cam_to_world_source: np.ndarray) -> np.ndarray:
    """Transform taking target-camera points to source-camera points."""
    return np.linalg.inv(cam_to_world_source) @ cam_to_world_target


# -- disk format -------------------------------------------------------------

def write_sequence(seq_dir, images, intrinsics: CameraIntrinsics, depths=None, poses=None) -> Path:
    """Write frames (``(3, H, W)`` in [0, 1]), optional depth (mm) and
    camera-to-world poses in the documented layout."""
    seq_dir = Path(seq_dir)
    (seq_dir / "frames").mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        arr = np.asarray(img.permute(1, 2, 0).cpu().numpy() if torch.is_tensor(img) else img)
        Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8), "RGB").save(
            seq_dir / "frames" / f"{i:06d}.png")
    (seq_dir / "intrinsics.json").write_text(json.dumps(intrinsics.to_dict(), indent=2))
    if depths is not None:
        (seq_dir / "depth").mkdir(exist_ok=True)
        for i, d in enumerate(depths):
            d = np.asarray(d.cpu().numpy() if torch.is_tensor(d) else d, dtype=np.float64).squeeze()
            if np.nanmax(d, initial=0.0) > MAX_DEPTH:
                raise ValueError(f"depth frame {i} exceeds the storable maximum of {MAX_DEPTH:.2f} mm")
            raw = np.clip(np.round(np.nan_to_num(d) * DEPTH_SCALE), 0, 65535).astype(np.uint16)
            Image.fromarray(raw).save(seq_dir / "depth" / f"{i:06d}.png")
    if poses is not None:
        (seq_dir / "poses.json").write_text(json.dumps([np.asarray(p, dtype=float).tolist() for p in poses]))
    return seq_dir


def _frame_numbers(frames_dir: Path) -> list[int]:
    numbers = []
    for p in frames_dir.iterdir():
        m = _FRAME_RE.match(p.name)
        if m:
            numbers.append(int(m.group(1)))
    numbers.sort()
    for a, b in zip(numbers, numbers[1:]):
        if b != a + 1:
            missing = ", ".join(f"{n:06d}" for n in range(a + 1, min(b, a + 6)))
            raise ValueError(f"{frames_dir}: frame numbering has a gap after {a:06d} (missing {missing})")
    return numbers


def read_image(path) -> torch.Tensor:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as e:
        raise ValueError(f"unreadable frame {path}: {e}") from e
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def read_depth(path) -> torch.Tensor:
    try:
        with Image.open(path) as im:
            raw = np.asarray(im, dtype=np.float64)
    except (OSError, ValueError) as e:
        raise ValueError(f"unreadable depth map {path}: {e}") from e
    return torch.from_numpy((raw / DEPTH_SCALE).astype(np.float32)).unsqueeze(0)


def load_sequence(path) -> Iterator[FrameTriplet]:
    """Lazily yield consecutive triplets of one sequence directory."""
    seq = Path(path)
    intr_path = seq / "intrinsics.json"
    if not intr_path.is_file():
        raise FileNotFoundError(f"missing intrinsics file {intr_path}")
    intrinsics = CameraIntrinsics.from_dict(json.loads(intr_path.read_text()))
    numbers = _frame_numbers(seq / "frames")
    poses = None
    if (seq / "poses.json").is_file():
        poses = [np.asarray(p, dtype=np.float64) for p in json.loads((seq / "poses.json").read_text())]
        if len(poses) < len(numbers):
            raise ValueError(f"{seq / 'poses.json'} has {len(poses)} poses for {len(numbers)} frames")
    depth_dir = seq / "depth"

    def pose_at(n):
        return poses[n - numbers[0]]

    # sliding window, each frame read once
    window = []
    for n in numbers:
        window.append((n, read_image(seq / "frames" / f"{n:06d}.png")))
        if len(window) < 3:
            continue
        window = window[-3:]
        (n0, a), (n1, b), (n2, c) = window
        depth = None
        if (depth_dir / f"{n1:06d}.png").is_file():
            depth = read_depth(depth_dir / f"{n1:06d}.png")
        pp = pn = None
        if poses is not None:
            pp = torch.from_numpy(relative_pose(pose_at(n1), pose_at(n0))).float()
            pn = torch.from_numpy(relative_pose(pose_at(n1), pose_at(n2))).float()
        yield FrameTriplet(a, b, c, intrinsics, depth, pp, pn, index=n1)


def sequence_dirs(root) -> list[Path]:
    root = Path(root)
    if (root / "intrinsics.json").is_file():
        return [root]
    dirs = sorted(p for p in root.glob("sequence_*") if p.is_dir())
    if not dirs:
        raise FileNotFoundError(f"no sequence_* directories or intrinsics.json under {root}")
    return dirs


def load_dataset(root) -> list[FrameTriplet]:
    """All triplets from a dataset root (or a single sequence directory)."""
    return [t for d in sequence_dirs(root) for t in load_sequence(d)]


# -- augmentation -------------------------------------------------------------

@dataclass
class AugmentationConfig:
    flip_prob: float = 0.5
    color_prob: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.05
    seed: int = 0

    def __post_init__(self):
        for name in ("flip_prob", "color_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be in [0, 1], got {getattr(self, name)}")


_FLIP_X = torch.diag(torch.tensor([-1.0, 1.0, 1.0, 1.0]))


def flip_triplet(t: FrameTriplet) -> FrameTriplet:
    """Horizontal mirror of images, depth, principal point and poses."""
    def mirror_pose(p):
        return None if p is None else _FLIP_X.to(p.dtype) @ p @ _FLIP_X.to(p.dtype)

    return replace(
        t, prev=t.prev.flip(-1), target=t.target.flip(-1), next=t.next.flip(-1),
        intrinsics=t.intrinsics.flipped(),
        gt_depth=None if t.gt_depth is None else t.gt_depth.flip(-1),
        pose_prev=mirror_pose(t.pose_prev), pose_next=mirror_pose(t.pose_next),
    )


def augment(triplet: FrameTriplet, cfg: AugmentationConfig, rng: np.random.Generator):
    """Return ``(network_input, loss_target)`` copies of a triplet.

    Flip applies to both; colour jitter, drawn once per triplet, applies to all
    three frames of the network input only.
    """
    if rng.random() < cfg.flip_prob:
        triplet = flip_triplet(triplet)
    target = triplet
    ops = []
    if rng.random() < cfg.color_prob:
        f = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
        ops.append(lambda x, f=f: TF.adjust_brightness(x, f))
    if rng.random() < cfg.color_prob:
        f = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
        ops.append(lambda x, f=f: TF.adjust_contrast(x, f))
    if rng.random() < cfg.color_prob:
        f = rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)
        ops.append(lambda x, f=f: TF.adjust_saturation(x, f))
    if rng.random() < cfg.color_prob:
        f = rng.uniform(-cfg.hue, cfg.hue)
        ops.append(lambda x, f=f: TF.adjust_hue(x, f))
    if not ops:
        return triplet, target

    def jitter(x):
        for op in ops:
            x = op(x)
        return x.clamp(0, 1)

    net_input = replace(triplet, prev=jitter(triplet.prev), target=jitter(triplet.target),
                        next=jitter(triplet.next))
    return net_input, target


# -- synthetic scenes ---------------------------------------------------------

@dataclass
class SyntheticSceneConfig:
    geometry: str = "tilted_plane"
    width: int = 64
    height: int = 64
    n_frames: int = 20
    focal: float | None = None  # pixels; default 0.9 * width
    distance: float = 50.0  # mm along the optical axis to the surface at frame 0
    tilt_deg: float = 30.0
    sphere_radius: float = 120.0
    texture_components: int = 8
    min_wavelength_px: float = 9.0
    motion: float = 2.0  # mm amplitude of the default trajectory
    trajectory: list | None = None  # camera-to-world 4x4 matrices
    blob_count: int = 0
    blob_radius: float = 3.0  # pixels (Gaussian sigma)
    blob_peak: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.geometry not in GEOMETRIES:
            raise ValueError(f"geometry must be one of {GEOMETRIES}, got {self.geometry!r}")
        n = len(self.trajectory) if self.trajectory is not None else self.n_frames
        if n < 3:
            raise ValueError(f"trajectory needs at least 3 poses, got {n}")
        if not 0 < self.blob_peak <= 1:
            raise ValueError(f"blob_peak must be in (0, 1], got {self.blob_peak}")

    def intrinsics(self) -> CameraIntrinsics:
        f = self.focal if self.focal is not None else 0.9 * self.width
        return CameraIntrinsics(f, f, (self.width - 1) / 2, (self.height - 1) / 2, self.width, self.height)


@dataclass
class SyntheticSequence:
    images: list  # (3, H, W) tensors
    depths: list  # (1, H, W) tensors, mm
    poses: list  # camera-to-world 4x4 float64 arrays
    intrinsics: CameraIntrinsics
    clean_images: list = field(default_factory=list)  # before specular blobs

    def triplets(self) -> list[FrameTriplet]:
        out = []
        for i in range(1, len(self.images) - 1):
            out.append(FrameTriplet(
                self.images[i - 1], self.images[i], self.images[i + 1], self.intrinsics,
                self.depths[i],
                torch.from_numpy(relative_pose(self.poses[i], self.poses[i - 1])).float(),
                torch.from_numpy(relative_pose(self.poses[i], self.poses[i + 1])).float(),
                index=i,
            ))
        return out

    def save(self, seq_dir) -> Path:
        return write_sequence(seq_dir, self.images, self.intrinsics, self.depths, self.poses)


def _rotation(rx, ry, rz) -> np.ndarray:
    cx, sx, cy, sy, cz, sz = math.cos(rx), math.sin(rx), math.cos(ry), math.sin(ry), math.cos(rz), math.sin(rz)
    r_x = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    r_y = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    r_z = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return r_z @ r_y @ r_x


def default_trajectory(n: int, amplitude: float, rng: np.random.Generator) -> list[np.ndarray]:
    """Smooth wobbling camera path, identity at frame 0."""
    ph = rng.uniform(0, 2 * math.pi, size=6)
    fr = rng.uniform(0.25, 0.45, size=6)
    rot_amp = math.radians(1.5)
    poses = []
    for i in range(n):
        t = np.array([amplitude * 2.0 * (math.sin(fr[0] * i + ph[0]) - math.sin(ph[0])),
                      amplitude * 1.5 * (math.sin(fr[1] * i + ph[1]) - math.sin(ph[1])),
                      amplitude * 1.0 * (math.sin(fr[2] * i + ph[2]) - math.sin(ph[2]))])
        r = _rotation(*(rot_amp * (math.sin(fr[3 + j] * i + ph[3 + j]) - math.sin(ph[3 + j]))
                        for j in range(3)))
        pose = np.eye(4)
        pose[:3, :3] = r
        pose[:3, 3] = t
        poses.append(pose)
    return poses


class _Texture:
    """Band-limited colour field over world coordinates."""

    base = np.array([0.55, 0.32, 0.28])
    gain = np.array([0.25, 0.18, 0.15])

    def __init__(self, n, min_wavelength, rng):
        dirs = rng.normal(size=(2, n, 3))
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        wavelengths = min_wavelength * rng.uniform(1.0, 3.0, size=(2, n, 1))
        self.omega = 2 * math.pi * dirs / wavelengths
        self.phase = rng.uniform(0, 2 * math.pi, size=(2, n))
        amp = rng.uniform(0.5, 1.0, size=(2, n))
        self.amp = amp / amp.sum(axis=1, keepdims=True)

    def __call__(self, points):  # (..., 3) -> (..., 3)
        waves = np.sin(np.einsum("...k,snk->...sn", points, self.omega) + self.phase)
        pattern = (waves * self.amp).sum(-1)  # (..., 2), each in [-1, 1]
        shade, tint = pattern[..., 0:1], pattern[..., 1:2]
        rgb = self.base + self.gain * shade + 0.05 * tint * np.array([1.0, -1.0, 0.0])
        return np.clip(rgb, 0.0, 1.0)


def _intersect(cfg: SyntheticSceneConfig, origin, dirs):
    """Ray parameter ``s`` of the first hit for rays ``origin + s * dirs``."""
    z0 = cfg.distance
    if cfg.geometry in ("plane", "tilted_plane"):
        tilt = math.radians(cfg.tilt_deg) if cfg.geometry == "tilted_plane" else 0.0
        normal = np.array([0.0, math.sin(tilt), -math.cos(tilt)])
        # plane through (0, 0, z0): normal . X = normal . (0, 0, z0)
        c = normal @ np.array([0.0, 0.0, z0])
        denom = dirs @ normal
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (c - normal @ origin) / denom
        if normal @ origin <= c:
            raise ValueError("degenerate trajectory: camera is on or behind the surface")
        hit = np.isfinite(s) & (s > 0)
    else:
        centre = np.array([0.0, 0.0, z0 + cfg.sphere_radius])
        oc = origin - centre
        if np.linalg.norm(oc) <= cfg.sphere_radius:
            raise ValueError("degenerate trajectory: camera is inside the sphere")
        b = dirs @ oc
        a = (dirs * dirs).sum(-1)
        disc = b * b - a * (oc @ oc - cfg.sphere_radius ** 2)
        hit = disc >= 0
        s = (-b - np.sqrt(np.where(hit, disc, 0.0))) / a
        hit &= s > 0
    if not hit.all():
        raise ValueError(f"degenerate trajectory: {int((~hit).sum())} pixel rays miss the {cfg.geometry}")
    return s


def render_frame(cfg: SyntheticSceneConfig, texture, cam_to_world: np.ndarray):
    """Ray-cast one view; returns ``(rgb (H, W, 3), depth (H, W))``."""
    k = cfg.intrinsics()
    v, u = np.meshgrid(np.arange(cfg.height, dtype=np.float64), np.arange(cfg.width, dtype=np.float64),
                       indexing="ij")
    rays_cam = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)
    rot, origin = cam_to_world[:3, :3], cam_to_world[:3, 3]
    dirs = rays_cam @ rot.T
    s = _intersect(cfg, origin, dirs)
    points = origin + s[..., None] * dirs
    # rays_cam has unit z, so the ray parameter is the camera-frame depth
    return texture(points), s


def _add_blobs(img: np.ndarray, cfg: SyntheticSceneConfig, rng) -> np.ndarray:
    h, w = img.shape[:2]
    v, u = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    for _ in range(cfg.blob_count):
        cu = rng.uniform(0.1 * w, 0.9 * w)
        cv = rng.uniform(0.1 * h, 0.9 * h)
        g = np.exp(-((u - cu) ** 2 + (v - cv) ** 2) / (2 * cfg.blob_radius ** 2))[..., None]
        img = img + (cfg.blob_peak - img) * g
    return np.clip(img, 0.0, 1.0)


def synth_generate(cfg: SyntheticSceneConfig) -> SyntheticSequence:
    """Render a textured surface along a camera path with exact depth.

    Specular blobs are composited per frame at random image positions and
    never touch the depth maps.
    """
    rng = np.random.default_rng(cfg.seed)
    k = cfg.intrinsics()
    poses = ([np.asarray(p, dtype=np.float64) for p in cfg.trajectory] if cfg.trajectory is not None
             else default_trajectory(cfg.n_frames, cfg.motion, rng))
    texture = _Texture(cfg.texture_components, cfg.min_wavelength_px * cfg.distance / k.fx, rng)
    blob_rng = np.random.default_rng([cfg.seed, 1])
    images, clean, depths = [], [], []
    for pose in poses:
        rgb, depth = render_frame(cfg, texture, pose)
        clean.append(torch.from_numpy(rgb.transpose(2, 0, 1).astype(np.float32)))
        if cfg.blob_count:
            rgb = _add_blobs(rgb, cfg, blob_rng)
        images.append(torch.from_numpy(rgb.transpose(2, 0, 1).astype(np.float32)))
        depths.append(torch.from_numpy(depth.astype(np.float32)).unsqueeze(0))
    return SyntheticSequence(images, depths, poses, k, clean)
