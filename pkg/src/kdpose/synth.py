"""Synthetic cuboid scenes with exact 6D labels, augmentation and dataset I/O.

Dataset layout::

    <dir>/manifest.json
    <dir>/samples/00000.img   TEN1 float32 image (3, H, W)
    <dir>/samples/00000.gt    JSON: instances with pose, class id, keypoints
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import (DEFAULT_INTRINSICS, CameraIntrinsics, ObjectModel, Pose, project,
                       random_rotation, rot_z, rotation_about, rotation_geodesic, transform_points)
from .tenfile import TensorFormatError, read_tensor, write_tensor

DEFAULT_RESOLUTION = (128, 128)

# vertex index = 4*ix + 2*iy + iz; each face listed as a boundary cycle
FACES = (
    ((0, 1, 3, 2), (-1, 0, 0)),
    ((4, 5, 7, 6), (1, 0, 0)),
    ((0, 1, 5, 4), (0, -1, 0)),
    ((2, 3, 7, 6), (0, 1, 0)),
    ((0, 2, 6, 4), (0, 0, -1)),
    ((1, 3, 7, 5), (0, 0, 1)),
)
# unit vector from the surface towards the light (camera side, up-right)
LIGHT_DIRECTION = np.array([0.35, -0.45, -1.0]) / np.linalg.norm([0.35, -0.45, -1.0])
AMBIENT = 0.35

_CLASS_DIMS = ((320.0, 260.0, 200.0), (300.0, 300.0, 180.0), (360.0, 220.0, 240.0), (280.0, 280.0, 280.0))
_FACE_COLORS = np.array([
    [0.90, 0.15, 0.15], [0.15, 0.75, 0.20], [0.15, 0.30, 0.90],
    [0.95, 0.85, 0.15], [0.85, 0.20, 0.85], [0.15, 0.85, 0.85],
])


class FrustumError(RuntimeError):
    """Rejection sampling could not place the objects inside the frame."""


class ResampleRequested(ValueError):
    """An augmentation pushed keypoints out of frame; draw another sample."""


class DatasetFormatError(ValueError):
    pass


def default_models(n_classes: int = 1) -> list[ObjectModel]:
    models = []
    for c in range(n_classes):
        dims = _CLASS_DIMS[c % len(_CLASS_DIMS)]
        colors = np.roll(_FACE_COLORS, c, axis=0)
        models.append(ObjectModel.cuboid(dims, class_id=c, face_colors=colors))
    return models


@dataclass
class InstanceLabel:
    pose: Pose
    class_id: int
    keypoints2d: np.ndarray  # (9, 2) input-resolution pixels

    def to_dict(self) -> dict:
        return {"pose": self.pose.to_dict(), "class_id": self.class_id,
                "keypoints2d": np.asarray(self.keypoints2d).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "InstanceLabel":
        return cls(Pose.from_dict(d["pose"]), int(d["class_id"]), np.array(d["keypoints2d"], dtype=np.float64))


@dataclass
class SceneSample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    instances: list[InstanceLabel]
    intrinsics: CameraIntrinsics
    mask: np.ndarray | None = None  # (H, W) int16 instance index, -1 background

    @property
    def resolution(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


@dataclass
class SceneOptions:
    resolution: tuple[int, int] = DEFAULT_RESOLUTION
    min_instances: int = 1
    max_instances: int = 2
    depth_range: tuple[float, float] = (600.0, 1200.0)
    margin: float = 8.0
    backgrounds: tuple[str, ...] = ("noise", "gradient", "checkerboard")
    min_separation: float = 48.0
    max_tries: int = 100
    fixed_pose: Pose | None = None
    # rotations are drawn uniformly within this geodesic angle of VIEW_ROTATION; 180 means anywhere
    max_rotation_deg: float = 180.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fixed_pose"] = self.fixed_pose.to_dict() if self.fixed_pose is not None else None
        d["resolution"] = list(self.resolution)
        d["depth_range"] = list(self.depth_range)
        d["backgrounds"] = list(self.backgrounds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneOptions":
        d = dict(d)
        if d.get("fixed_pose") is not None:
            d["fixed_pose"] = Pose.from_dict(d["fixed_pose"])
        d["resolution"] = tuple(d.get("resolution", DEFAULT_RESOLUTION))
        d["depth_range"] = tuple(d.get("depth_range", (600.0, 1200.0)))
        d["backgrounds"] = tuple(d.get("backgrounds", ("noise", "gradient", "checkerboard")))
        return cls(**d)


# single instance, viewpoints within 45 degrees of a corner-on view
EASY_OPTIONS = SceneOptions(min_instances=1, max_instances=1, max_rotation_deg=45.0)


# ------------------------------------------------------------------ render


def render_background(rng: np.random.Generator, resolution, kinds=("noise", "gradient", "checkerboard")) -> np.ndarray:
    h, w = resolution
    kind = kinds[int(rng.integers(len(kinds)))]
    c0 = rng.uniform(0.1, 0.9, size=3)
    if kind == "noise":
        img = c0[:, None, None] + rng.uniform(-0.12, 0.12, size=(3, h, w))
    elif kind == "gradient":
        c1 = rng.uniform(0.1, 0.9, size=3)
        ang = rng.uniform(0, 2 * np.pi)
        ys, xs = np.mgrid[0:h, 0:w]
        s = (np.cos(ang) * xs / w + np.sin(ang) * ys / h)
        s = (s - s.min()) / max(s.max() - s.min(), 1e-9)
        img = c0[:, None, None] * (1 - s) + c1[:, None, None] * s
    elif kind == "checkerboard":
        c1 = rng.uniform(0.1, 0.9, size=3)
        cell = int(rng.integers(8, 25))
        ys, xs = np.mgrid[0:h, 0:w]
        check = ((xs // cell + ys // cell) % 2).astype(bool)
        img = np.where(check, c1[:, None, None], c0[:, None, None])
    else:
        raise ValueError(f"unknown background kind {kind!r}")
    return np.clip(img, 0.0, 1.0)


def _fill_polygon(poly: np.ndarray, resolution) -> tuple[slice, slice, np.ndarray] | None:
    """Pixel-centre coverage of a convex polygon, as (rows, cols, mask)."""
    h, w = resolution
    x0, y0 = np.floor(poly.min(axis=0)).astype(int)
    x1, y1 = np.ceil(poly.max(axis=0)).astype(int)
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, w - 1), min(y1, h - 1)
    if x1 < x0 or y1 < y0:
        return None
    ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    pos = np.ones(xs.shape, dtype=bool)
    neg = np.ones(xs.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        ax, ay = poly[i]
        bx, by = poly[(i + 1) % n]
        cross = (bx - ax) * (ys - ay) - (by - ay) * (xs - ax)
        pos &= cross >= 0
        neg &= cross <= 0
    inside = pos | neg
    return slice(y0, y1 + 1), slice(x0, x1 + 1), inside


def render_instances(image: np.ndarray, models_by_class: dict, instances: list[InstanceLabel],
                     intrinsics: CameraIntrinsics) -> np.ndarray:
    """Painter's-algorithm flat-shaded cuboids drawn in place; returns the instance mask."""
    _, h, w = image.shape
    mask = np.full((h, w), -1, dtype=np.int16)
    faces = []
    for idx, inst in enumerate(instances):
        model = models_by_class[inst.class_id]
        verts_cam = transform_points(inst.pose, model.keypoints3d[:8])
        colors = model.face_colors if model.face_colors is not None else _FACE_COLORS
        for f, (cycle, normal) in enumerate(FACES):
            n_cam = inst.pose.R @ np.asarray(normal, dtype=np.float64)
            centre = verts_cam[list(cycle)].mean(axis=0)
            if n_cam @ centre >= 0:  # back face
                continue
            shade = AMBIENT + (1 - AMBIENT) * max(0.0, float(n_cam @ LIGHT_DIRECTION))
            faces.append((float(np.linalg.norm(centre)), idx, project(intrinsics, verts_cam[list(cycle)]),
                          colors[f] * shade))
    faces.sort(key=lambda f: -f[0])
    for _, idx, poly, color in faces:
        cov = _fill_polygon(poly, (h, w))
        if cov is None:
            continue
        rs, cs, inside = cov
        for ch in range(3):
            image[ch, rs, cs][inside] = color[ch]
        mask[rs, cs][inside] = idx
    return mask


def _keypoints_inside(kp: np.ndarray, resolution, margin: float) -> bool:
    h, w = resolution
    return bool(kp[:, 0].min() >= margin and kp[:, 1].min() >= margin
                and kp[:, 0].max() <= w - 1 - margin and kp[:, 1].max() <= h - 1 - margin)


# a corner-on view that shows three faces of the cuboid
VIEW_ROTATION = rotation_about((1.0, 0.0, 0.0), np.deg2rad(-25.0)) @ rotation_about((0.0, 1.0, 0.0), np.deg2rad(35.0))


def sample_rotation(rng: np.random.Generator, max_angle_deg: float = 180.0) -> np.ndarray:
    """Uniform rotation, restricted to a geodesic ball around ``VIEW_ROTATION`` when the bound is < 180."""
    if max_angle_deg >= 180.0:
        return random_rotation(rng)
    while True:
        R = random_rotation(rng)
        if rotation_geodesic(R, np.eye(3)) <= max_angle_deg:
            return R @ VIEW_ROTATION


def _sample_pose(model: ObjectModel, intrinsics, rng, options: SceneOptions):
    h, w = options.resolution
    z = rng.uniform(*options.depth_range)
    u = rng.uniform(options.margin, w - 1 - options.margin)
    v = rng.uniform(options.margin, h - 1 - options.margin)
    t = np.array([(u - intrinsics.cx) * z / intrinsics.fx, (v - intrinsics.cy) * z / intrinsics.fy, z])
    return Pose(sample_rotation(rng, options.max_rotation_deg), t)


def label_instance(model: ObjectModel, pose: Pose, intrinsics: CameraIntrinsics) -> InstanceLabel:
    kp = project(intrinsics, transform_points(pose, model.keypoints3d))
    return InstanceLabel(pose, model.class_id, kp)


def generate_scene(models, intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS,
                   rng: np.random.Generator | None = None, options: SceneOptions = SceneOptions()) -> SceneSample:
    """Render 1..max_instances cuboids over a procedural background."""
    if not models:
        raise ValueError("generate_scene needs at least one object model")
    rng = rng if rng is not None else np.random.default_rng()
    by_class = {m.class_id: m for m in models}
    n_inst = int(rng.integers(options.min_instances, options.max_instances + 1))
    instances: list[InstanceLabel] = []
    for _ in range(n_inst):
        model = models[int(rng.integers(len(models)))]
        for _attempt in range(options.max_tries):
            pose = options.fixed_pose if options.fixed_pose is not None else _sample_pose(
                model, intrinsics, rng, options)
            try:
                label = label_instance(model, pose, intrinsics)
            except ValueError:
                continue
            if not _keypoints_inside(label.keypoints2d, options.resolution, options.margin):
                if options.fixed_pose is not None:
                    raise FrustumError("fixed pose does not fit inside the frame")
                continue
            if any(np.linalg.norm(label.keypoints2d[8] - o.keypoints2d[8]) < options.min_separation
                   for o in instances):
                continue
            instances.append(label)
            break
        else:
            if not instances:
                raise FrustumError(f"no valid placement after {options.max_tries} attempts")
        if options.fixed_pose is not None:
            break
    image = render_background(rng, options.resolution, options.backgrounds)
    mask = render_instances(image, by_class, instances, intrinsics)
    return SceneSample(image.astype(np.float32), instances, intrinsics, mask)


def cut_and_paste(foreground: SceneSample, background: SceneSample, rng: np.random.Generator | None = None) -> SceneSample:
    """Composite the foreground's object pixels onto another image; labels are kept."""
    if foreground.image.shape != background.image.shape:
        raise ValueError("cut_and_paste needs matching resolutions")
    if foreground.mask is None:
        raise ValueError("foreground sample carries no render mask")
    obj = foreground.mask >= 0
    img = np.where(obj[None], foreground.image, background.image).astype(np.float32)
    return SceneSample(img, [replace(i) for i in foreground.instances], foreground.intrinsics,
                       foreground.mask.copy())


# ------------------------------------------------------------- augmentation


@dataclass
class AugmentConfig:
    blur_prob: float = 0.5
    jitter_range: tuple[float, float] = (0.8, 1.2)
    rotation_range: tuple[float, float] = (-30.0, 30.0)

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(0.0, (1.0, 1.0), (0.0, 0.0))


def box_blur3(image: np.ndarray) -> np.ndarray:
    c, h, w = image.shape
    p = np.pad(image, ((0, 0), (1, 1), (1, 1)), mode="edge")
    out = np.zeros_like(image, dtype=np.float64)
    for dr in range(3):
        for dc in range(3):
            out += p[:, dr:dr + h, dc:dc + w]
    return (out / 9.0).astype(image.dtype)


def _in_plane_affine(intrinsics: CameraIntrinsics, theta_deg: float) -> np.ndarray:
    """2x3 pixel map induced by rotating the camera frame by ``theta`` about its optical axis."""
    Kxy = np.array([[intrinsics.fx, 0, intrinsics.cx], [0, intrinsics.fy, intrinsics.cy], [0, 0, 1.0]])
    return (Kxy @ rot_z(theta_deg) @ np.linalg.inv(Kxy))[:2]


def rotate_image(image: np.ndarray, affine_inv: np.ndarray, order: int = 1) -> np.ndarray:
    """Resample ``image`` at ``affine_inv @ (x, y, 1)`` (bilinear, edge-clamped)."""
    c, h, w = image.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = affine_inv[0, 0] * xs + affine_inv[0, 1] * ys + affine_inv[0, 2]
    sy = affine_inv[1, 0] * xs + affine_inv[1, 1] * ys + affine_inv[1, 2]
    sx = np.clip(sx, 0, w - 1)
    sy = np.clip(sy, 0, h - 1)
    if order == 0:
        return image[:, np.rint(sy).astype(int), np.rint(sx).astype(int)]
    x0 = np.minimum(np.floor(sx).astype(int), w - 2)
    y0 = np.minimum(np.floor(sy).astype(int), h - 2)
    fx, fy = sx - x0, sy - y0
    out = (image[:, y0, x0] * (1 - fx) * (1 - fy) + image[:, y0, x0 + 1] * fx * (1 - fy)
           + image[:, y0 + 1, x0] * (1 - fx) * fy + image[:, y0 + 1, x0 + 1] * fx * fy)
    return out.astype(image.dtype)


def augment(sample: SceneSample, rng: np.random.Generator, config: AugmentConfig = AugmentConfig(),
            models=None) -> SceneSample:
    """Blur, colour jitter and in-plane rotation about the principal point.

    The rotation updates every pose to ``Rz(theta) R, Rz(theta) t`` and the
    keypoints are re-projected from the new pose, so labels stay exact.
    Raises ``ResampleRequested`` if a keypoint would leave the frame.
    """
    img = sample.image.astype(np.float32, copy=True)
    if config.blur_prob > 0 and rng.uniform() < config.blur_prob:
        img = box_blur3(img)
    lo, hi = config.jitter_range
    gains = rng.uniform(lo, hi, size=3) if hi > lo else np.full(3, lo)
    if not np.all(gains == 1.0):
        img = np.clip(img * gains[:, None, None].astype(np.float32), 0.0, 1.0)
    rlo, rhi = config.rotation_range
    theta = float(rng.uniform(rlo, rhi)) if rhi > rlo else float(rlo)
    instances = sample.instances
    mask = sample.mask
    if theta != 0.0:
        Rz = rot_z(theta)
        h, w = sample.resolution
        instances = []
        for inst in sample.instances:
            pose = Pose(Rz @ inst.pose.R, Rz @ inst.pose.t)
            model = models.get(inst.class_id) if isinstance(models, dict) else None
            if model is not None:
                kp = project(sample.intrinsics, transform_points(pose, model.keypoints3d))
            else:
                kp = _reproject_keypoints(inst, pose, sample.intrinsics)
            if not _keypoints_inside(kp, (h, w), 0.0):
                raise ResampleRequested(f"rotation by {theta:.1f} deg moves keypoints out of frame")
            instances.append(InstanceLabel(pose, inst.class_id, kp))
        inv = _in_plane_affine(sample.intrinsics, -theta)
        img = rotate_image(img, inv)
        if mask is not None:
            mask = rotate_image(mask[None].astype(np.float32), inv, order=0)[0].astype(np.int16)
    return SceneSample(img, instances, sample.intrinsics, mask)


def _reproject_keypoints(inst: InstanceLabel, new_pose: Pose, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Project the keypoints under ``new_pose`` without the object model.

    The update is a pure rotation of the camera frame, so rotating each
    keypoint's viewing ray gives the exact projection regardless of depth.
    """
    K = intrinsics
    old = inst.pose
    pts = np.asarray(inst.keypoints2d, dtype=np.float64)
    rays = np.column_stack([(pts[:, 0] - K.cx) / K.fx, (pts[:, 1] - K.cy) / K.fy, np.ones(len(pts))])
    Rz = new_pose.R @ old.R.T
    rotated = rays @ Rz.T
    return project(K, rotated)


# ----------------------------------------------------------------- dataset


@dataclass
class DatasetManifest:
    sample_count: int
    resolution: tuple[int, int]
    intrinsics: CameraIntrinsics
    models: list[ObjectModel]
    splits: dict[str, list[int]]
    seed: int
    options: dict = field(default_factory=dict)

    def validate(self) -> None:
        idx = [i for split in self.splits.values() for i in split]
        if len(idx) != len(set(idx)):
            raise DatasetFormatError("dataset splits overlap")
        if sorted(idx) != list(range(self.sample_count)):
            raise DatasetFormatError(
                f"splits cover {len(idx)} samples but manifest declares {self.sample_count}")

    def to_dict(self) -> dict:
        return {
            "format": "kdpose-dataset-1",
            "sample_count": self.sample_count,
            "resolution": list(self.resolution),
            "intrinsics": self.intrinsics.to_dict(),
            "models": [m.to_dict() for m in self.models],
            "splits": self.splits,
            "seed": self.seed,
            "options": self.options,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(int(d["sample_count"]), tuple(d["resolution"]), CameraIntrinsics.from_dict(d["intrinsics"]),
                   [ObjectModel.from_dict(m) for m in d["models"]],
                   {k: [int(i) for i in v] for k, v in d["splits"].items()}, int(d["seed"]),
                   d.get("options", {}))


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def generate_dataset(n_train: int, n_test: int, seed: int = 0, n_classes: int = 1,
                     options: SceneOptions = EASY_OPTIONS, cut_paste_fraction: float = 0.5,
                     intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS):
    """Samples ``0..n_train-1`` train, the rest test; each index has its own sub-seed.

    A ``cut_paste_fraction`` of the training samples composite the rendered
    object onto a freshly drawn background.
    """
    models = default_models(n_classes)
    samples = []
    n = n_train + n_test
    for i in range(n):
        rng = _sample_rng(seed, i)
        s = generate_scene(models, intrinsics, rng, options)
        if i < n_train and rng.uniform() < cut_paste_fraction:
            bg = SceneSample(render_background(rng, options.resolution, options.backgrounds).astype(np.float32),
                             [], intrinsics)
            s = cut_and_paste(s, bg, rng)
        samples.append(s)
    manifest = DatasetManifest(n, tuple(options.resolution), intrinsics, models,
                               {"train": list(range(n_train)), "test": list(range(n_train, n))}, seed,
                               {"scene": options.to_dict(), "cut_paste_fraction": cut_paste_fraction,
                                "n_classes": n_classes})
    return samples, manifest


def write_dataset(samples, manifest: DatasetManifest, directory) -> Path:
    manifest.validate()
    if len(samples) != manifest.sample_count:
        raise DatasetFormatError(f"{len(samples)} samples but manifest declares {manifest.sample_count}")
    directory = Path(directory)
    (directory / "samples").mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        write_tensor(directory / "samples" / f"{i:05d}.img", np.asarray(s.image, dtype=np.float32))
        gt = {"instances": [inst.to_dict() for inst in s.instances], "intrinsics": s.intrinsics.to_dict()}
        (directory / "samples" / f"{i:05d}.gt").write_text(json.dumps(gt, sort_keys=True) + "\n")
    (directory / "manifest.json").write_text(json.dumps(manifest.to_dict(), sort_keys=True, indent=1) + "\n")
    return directory


def read_dataset(directory) -> tuple[list[SceneSample], DatasetManifest]:
    directory = Path(directory)
    try:
        manifest = DatasetManifest.from_dict(json.loads((directory / "manifest.json").read_text()))
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise DatasetFormatError(f"{directory}: unreadable manifest ({exc})") from exc
    manifest.validate()
    files = sorted((directory / "samples").glob("*.img"))
    if len(files) != manifest.sample_count:
        raise DatasetFormatError(
            f"manifest declares {manifest.sample_count} samples, found {len(files)} image files")
    samples = []
    for i in range(manifest.sample_count):
        stem = directory / "samples" / f"{i:05d}"
        try:
            img = read_tensor(stem.with_suffix(".img"))
            gt = json.loads(stem.with_suffix(".gt").read_text())
            instances = [InstanceLabel.from_dict(d) for d in gt["instances"]]
            intr = CameraIntrinsics.from_dict(gt["intrinsics"])
        except (OSError, TensorFormatError, KeyError, ValueError, TypeError) as exc:
            raise DatasetFormatError(f"sample {i:05d}: {exc}") from exc
        if img.ndim != 3 or img.shape[0] != 3 or tuple(img.shape[1:]) != tuple(manifest.resolution):
            raise DatasetFormatError(f"sample {i:05d}: image shape {img.shape} does not match manifest")
        samples.append(SceneSample(img, instances, intr))
    return samples, manifest


def split(samples, manifest: DatasetManifest, name: str) -> list[SceneSample]:
    return [samples[i] for i in manifest.splits.get(name, [])]
