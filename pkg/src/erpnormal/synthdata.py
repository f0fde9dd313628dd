"""Procedural box-room panoramas with analytic normals, depth and masks."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio
from .sphere_geom import ErpGridSpec, erp_pixel_to_dir

AMBIENT = 0.2
MANIFEST_FORMAT = "erpnormal-synth-v1"


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    # one RGB albedo per face, ordered -x, +x, -y, +y, -z, +z
    albedo: np.ndarray = field(default_factory=lambda: np.full((6, 3), 0.7))

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(6, 3)
        if np.any(self.hi <= self.lo):
            raise ValueError("box must have positive extent on every axis")

    def contains(self, p, margin=0.0) -> bool:
        p = np.asarray(p, dtype=np.float64)
        return bool(np.all(p > self.lo - margin) and np.all(p < self.hi + margin))


@dataclass
class SceneSpec:
    room: Box
    furniture: list
    camera: np.ndarray
    light_dir: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.camera = np.asarray(self.camera, dtype=np.float64)
        light = np.asarray(self.light_dir, dtype=np.float64)
        self.light_dir = light / np.linalg.norm(light)

    def validate(self):
        if not (np.all(self.camera > self.room.lo) and np.all(self.camera < self.room.hi)):
            raise ValueError("camera must be strictly inside the room")
        for i, box in enumerate(self.furniture):
            if np.any(box.lo < self.room.lo) or np.any(box.hi > self.room.hi):
                raise ValueError(f"furniture box {i} leaves the room")
            if np.all(self.camera >= box.lo) and np.all(self.camera <= box.hi):
                raise ValueError(f"camera lies inside or on furniture box {i}")


@dataclass
class RenderedSample:
    rgb: np.ndarray        # (3, H, W) in [0, 1]
    normal: np.ndarray     # (3, H, W), unit on valid pixels, camera frame
    depth: np.ndarray      # (H, W) metres, 0 where invalid
    mask: np.ndarray       # (H, W) bool
    face_id: np.ndarray    # (H, W) int, object * 6 + face


def ray_directions(grid: ErpGridSpec) -> np.ndarray:
    v, u = np.meshgrid(np.arange(grid.height, dtype=np.float64), np.arange(grid.width, dtype=np.float64), indexing="ij")
    return erp_pixel_to_dir(u, v, grid)


def _slab(lo, hi, d):
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = lo / d
        t2 = hi / d
    return np.fmin(t1, t2), np.fmax(t1, t2)


def render_scene(spec: SceneSpec, grid: ErpGridSpec, invalid_fraction: float = 0.0) -> RenderedSample:
    """Ray-cast the scene from the camera for every ERP pixel centre."""
    spec.validate()
    d = ray_directions(grid)
    o = spec.camera
    H, W = grid.height, grid.width

    # room interior: first exit through the walls
    lo = spec.room.lo - o
    hi = spec.room.hi - o
    with np.errstate(divide="ignore", invalid="ignore"):
        t_axes = np.where(d > 0, hi / d, np.where(d < 0, lo / d, np.inf))
    if np.any(lo >= 0) or np.any(hi <= 0):
        raise ValueError("degenerate scene: camera on a room face")
    axis = np.argmin(t_axes, axis=-1)
    t = np.take_along_axis(t_axes, axis[..., None], -1)[..., 0]
    d_ax = np.take_along_axis(d, axis[..., None], -1)[..., 0]
    obj = np.zeros((H, W), dtype=np.int64)
    side = (d_ax > 0).astype(np.int64)

    for i, box in enumerate(spec.furniture, start=1):
        tmin, tmax = _slab(box.lo - o, box.hi - o, d)
        t_near = tmin.max(-1)
        t_far = tmax.min(-1)
        b_axis = tmin.argmax(-1)
        hit = (t_near <= t_far) & (t_near > 0) & (t_near < t)
        if not hit.any():
            continue
        t = np.where(hit, t_near, t)
        axis = np.where(hit, b_axis, axis)
        d_ax = np.take_along_axis(d, axis[..., None], -1)[..., 0]
        obj = np.where(hit, i, obj)
        side = np.where(hit, (d_ax < 0).astype(np.int64), side)

    normal = np.zeros((H, W, 3))
    np.put_along_axis(normal, axis[..., None], -np.sign(d_ax)[..., None], -1)
    face = 2 * axis + side
    face_id = obj * 6 + face

    albedos = np.stack([spec.room.albedo] + [b.albedo for b in spec.furniture])
    albedo = albedos[obj, face]
    shade = np.maximum(0.0, normal @ spec.light_dir)
    rgb = np.clip(albedo * shade[..., None] + AMBIENT, 0.0, 1.0)

    mask = np.ones((H, W), dtype=bool)
    if invalid_fraction > 0:
        rng = np.random.default_rng(spec.seed)
        mask = rng.random((H, W)) >= invalid_fraction
    depth = np.where(mask, t, 0.0)
    normal = np.where(mask[..., None], normal, 0.0)
    return RenderedSample(
        rgb=rgb.transpose(2, 0, 1).copy(),
        normal=normal.transpose(2, 0, 1).copy(),
        depth=depth,
        mask=mask,
        face_id=np.where(mask, face_id, -1),
    )


def _rot_y90(p):
    p = np.asarray(p, dtype=np.float64)
    return np.array([p[2], p[1], -p[0]])


def _rot_box(box: Box) -> Box:
    lo, hi = box.lo, box.hi
    a = box.albedo
    # new -x,+x come from old -z,+z; new -z,+z from old +x,-x
    albedo = np.stack([a[4], a[5], a[2], a[3], a[1], a[0]])
    return Box([lo[2], lo[1], -hi[0]], [hi[2], hi[1], -lo[0]], albedo)


def rotate_scene_y90(spec: SceneSpec) -> SceneSpec:
    """Rotate the whole scene by +90 degrees of longitude about the vertical axis."""
    return SceneSpec(
        room=_rot_box(spec.room),
        furniture=[_rot_box(b) for b in spec.furniture],
        camera=_rot_y90(spec.camera),
        light_dir=_rot_y90(spec.light_dir),
        seed=spec.seed,
    )


def random_scene(rng: np.random.Generator, seed: int = 0, max_furniture: int = 5) -> SceneSpec:
    size = rng.uniform(2.0, 8.0, size=3)
    room = Box(np.zeros(3), size, rng.uniform(0.2, 1.0, size=(6, 3)))
    margin = 0.3
    camera = rng.uniform(margin, size - margin)
    furniture = []
    for _ in range(int(rng.integers(0, max_furniture + 1))):
        for _attempt in range(20):
            ext = np.array([rng.uniform(0.3, max(0.35, min(2.0, s / 2))) for s in size])
            lo = np.array([rng.uniform(0.0, size[0] - ext[0]), 0.0, rng.uniform(0.0, size[2] - ext[2])])
            box = Box(lo, lo + ext, rng.uniform(0.2, 1.0, size=(6, 3)))
            if not box.contains(camera, margin=0.2):
                furniture.append(box)
                break
    light = rng.normal(size=3)
    light[1] = abs(light[1]) + 0.5
    return SceneSpec(room, furniture, camera, light, seed)


def save_sample(sample: RenderedSample, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fileio.write_rgb8(out_dir / "rgb.png", sample.rgb)
    fileio.write_normal16(out_dir / "normal.png", sample.normal)
    fileio.write_depth(out_dir / "depth.bin", sample.depth)
    fileio.write_mask(out_dir / "mask.png", sample.mask)


def load_sample(sample_dir, tol: float = 1e-4) -> dict:
    """Read one sample directory; normals are re-validated and renormalised."""
    sample_dir = Path(sample_dir)
    rgb = fileio.read_rgb(sample_dir / "rgb.png")
    normal = fileio.read_normal16(sample_dir / "normal.png")
    depth = fileio.read_depth(sample_dir / "depth.bin")
    mask = fileio.read_mask(sample_dir / "mask.png")
    norm = np.linalg.norm(normal, axis=0)
    bad = mask & (np.abs(norm - 1.0) > tol)
    if bad.any():
        raise ValueError(f"{sample_dir}: {int(bad.sum())} valid normals are not unit length")
    normal = np.where(mask[None], normal / np.maximum(norm, 1e-12), 0.0)
    return {"rgb": rgb, "normal": normal.astype(np.float32), "depth": depth, "mask": mask}


def split_tags(n: int, val_fraction: float = 0.1, test_fraction: float = 0.1) -> list:
    """Contiguous train/val/test tags; non-zero fractions get at least one sample when n allows."""
    n_test = int(n * test_fraction)
    n_val = int(n * val_fraction)
    if n >= 2 and val_fraction > 0:
        n_val = max(n_val, 1)
    if n >= 3 and test_fraction > 0:
        n_test = max(n_test, 1)
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ValueError("split leaves no training samples")
    return ["train"] * n_train + ["val"] * n_val + ["test"] * n_test


def make_dataset(n: int, seed: int, grid: ErpGridSpec, out_dir, invalid_fraction: float = 0.0,
                 val_fraction: float = 0.1, test_fraction: float = 0.1, max_furniture: int = 5) -> Path:
    """Render ``n`` random scenes into ``out_dir`` and write ``manifest.json``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out_dir}: {e}") from e
    tags = split_tags(n, val_fraction, test_fraction)
    seeds = np.random.SeedSequence(seed).spawn(n)
    samples = []
    for i, (ss, tag) in enumerate(zip(seeds, tags)):
        rng = np.random.default_rng(ss)
        scene_seed = int(ss.generate_state(1)[0])
        spec = random_scene(rng, scene_seed, max_furniture)
        sample = render_scene(spec, grid, invalid_fraction)
        name = f"sample_{i:05d}"
        save_sample(sample, out_dir / name)
        samples.append({"dir": name, "split": tag})
    manifest = {
        "format": MANIFEST_FORMAT,
        "seed": seed,
        "grid": {"height": grid.height, "width": grid.width},
        "invalid_fraction": invalid_fraction,
        "samples": samples,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out_dir / "manifest.json"


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path}: unsupported manifest format {manifest.get('format')!r}")
    for s in manifest["samples"]:
        if not (path.parent / s["dir"]).is_dir():
            raise FileNotFoundError(f"{path}: missing sample directory {s['dir']}")
    manifest["root"] = str(path.parent)
    return manifest
