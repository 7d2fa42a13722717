"""Procedural scene generation, oracle feature synthesis and dataset loading.

The generator ray-traces box and sphere primitives analytically (flat-shaded
Lambertian, one fixed directional light, no shadows), which makes ground-truth
masks and depth exact by construction. Feature maps are synthesized from the
ground-truth masks: every object id maps to a fixed random unit vector plus
per-pixel noise, standing in for a pretrained 2D feature extractor.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .formats import (
    load_image,
    load_label_png,
    read_feature_map,
    save_image,
    save_label_png,
    write_depth,
    write_feature_map,
)
from .rendering import Camera
from .validation import check_bbox, check_rotation

__all__ = [
    "SceneObject",
    "SceneSpec",
    "SceneDataset",
    "gen_scene",
    "oracle_features",
    "load_scene",
    "builtin_scene_spec",
]

MANIFEST_SCHEMA = "voxparts-scene-1"


@dataclass
class SceneObject:
    primitive: str  # "box" | "sphere"
    albedo: list[float]
    position: list[float]
    trajectory: dict = field(default_factory=lambda: {"kind": "still"})
    size: list[float] | None = None  # box edge lengths
    radius: float | None = None  # sphere radius

    def bounding_radius(self) -> float:
        if self.primitive == "sphere":
            return float(self.radius)
        s = np.asarray(self.size, dtype=np.float64)
        return float(np.linalg.norm(s / 2))

    def pose_at(self, tau: float):
        """(rotation, translation) of the object frame at normalized time tau."""
        p = np.asarray(self.position, dtype=np.float64).copy()
        traj = self.trajectory
        kind = traj.get("kind", "still")
        rot = np.eye(3)
        if kind == "still":
            pass
        elif kind == "linear":
            p += np.asarray(traj["velocity"], dtype=np.float64) * tau
        elif kind == "fall":
            g = float(traj.get("gravity", 2.0))
            drop = 0.5 * g * tau * tau
            floor_z = traj.get("rest_z")
            z = p[2] - drop
            if floor_z is not None:
                z = max(z, float(floor_z))
            p[2] = z
        elif kind == "rotate":
            a = math.radians(float(traj.get("omega_deg", 180.0))) * tau
            c, s = math.cos(a), math.sin(a)
            rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        else:
            raise DataError(f"unknown trajectory kind '{kind}'")
        return rot, p

    def half_height(self) -> float:
        if self.primitive == "sphere":
            return float(self.radius)
        return float(self.size[2]) / 2

    def surface_points(self, n: int, tau: float, rng: np.random.Generator) -> np.ndarray:
        """Uniform samples on the primitive surface at time tau, world frame."""
        rot, p = self.pose_at(tau)
        if self.primitive == "sphere":
            v = rng.standard_normal((n, 3))
            v /= np.linalg.norm(v, axis=-1, keepdims=True)
            local = v * self.radius
        else:
            sx, sy, sz = [float(s) / 2 for s in self.size]
            areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
            faces = rng.choice(6, size=n, p=areas / areas.sum())
            uv = rng.uniform(-1.0, 1.0, size=(n, 2))
            local = np.zeros((n, 3))
            for f in range(6):
                m = faces == f
                axis, sign = f // 2, 1.0 if f % 2 == 0 else -1.0
                others = [a for a in range(3) if a != axis]
                half = [sx, sy, sz]
                local[m, axis] = sign * half[axis]
                local[m, others[0]] = uv[m, 0] * half[others[0]]
                local[m, others[1]] = uv[m, 1] * half[others[1]]
        return local @ rot.T + p


@dataclass
class SceneSpec:
    resolution: list[int]
    frames: int
    objects: list[SceneObject]
    camera: dict
    bbox: list[list[float]]
    floor: dict | None = None
    fov_deg: float = 45.0
    supersample: int = 2
    ambient: float = 0.35
    light_dir: list[float] = field(default_factory=lambda: [0.35, 0.25, 1.0])

    @staticmethod
    def from_json(payload: dict) -> "SceneSpec":
        objs = [SceneObject(**o) for o in payload["objects"]]
        fields = {k: v for k, v in payload.items() if k != "objects"}
        return SceneSpec(objects=objs, **fields)

    def to_json(self) -> dict:
        out = {
            "resolution": list(self.resolution),
            "frames": self.frames,
            "camera": self.camera,
            "bbox": self.bbox,
            "floor": self.floor,
            "fov_deg": self.fov_deg,
            "supersample": self.supersample,
            "ambient": self.ambient,
            "light_dir": list(self.light_dir),
            "objects": [
                {k: v for k, v in vars(o).items() if v is not None} for o in self.objects
            ],
        }
        return out


def _look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = x, y, z, eye
    return pose


def _camera_poses(spec: SceneSpec, rng: np.random.Generator) -> list[np.ndarray]:
    cam = spec.camera
    radius = float(cam.get("radius", 3.8))
    target = cam.get("target", [0.0, 0.0, 0.3])
    lo, hi = cam.get("elevation_deg", [30.0, 70.0])
    poses = []
    if cam.get("path", "hemisphere_random") == "hemisphere_random":
        # uniform in solid angle between the elevation bounds
        s_lo, s_hi = math.sin(math.radians(lo)), math.sin(math.radians(hi))
        for _ in range(spec.frames):
            phi = rng.uniform(0.0, 2 * math.pi)
            sin_el = rng.uniform(s_lo, s_hi)
            el = math.asin(sin_el)
            eye = np.array(target) + radius * np.array(
                [math.cos(phi) * math.cos(el), math.sin(phi) * math.cos(el), math.sin(el)]
            )
            poses.append(_look_at(eye, target))
    elif cam["path"] == "smooth_orbit":
        el = math.radians(float(cam.get("elevation_deg_fixed", 42.0)))
        phi0 = float(cam.get("azimuth0", rng.uniform(0.0, 2 * math.pi)))
        sweep = math.radians(float(cam.get("sweep_deg", 300.0)))
        for k in range(spec.frames):
            tau = k / max(spec.frames - 1, 1)
            phi = phi0 + sweep * tau
            eye = np.array(target) + radius * np.array(
                [math.cos(phi) * math.cos(el), math.sin(phi) * math.cos(el), math.sin(el)]
            )
            poses.append(_look_at(eye, target))
    else:
        raise DataError(f"unknown camera path '{cam['path']}'")
    return poses


def _intersect_sphere(o, d, center, radius):
    oc = o - center
    b = np.sum(oc * d, axis=-1)
    c = np.sum(oc * oc, axis=-1) - radius * radius
    disc = b * b - c
    hit = disc >= 0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t = -b - sq
    t2 = -b + sq
    t = np.where(t > 1e-6, t, t2)
    hit &= t > 1e-6
    return np.where(hit, t, np.inf)


def _intersect_box(o, d, half):
    inv = 1.0 / np.where(np.abs(d) < 1e-12, 1e-12, d)
    t0 = (-half - o) * inv
    t1 = (half - o) * inv
    tn = np.minimum(t0, t1).max(axis=-1)
    tf = np.maximum(t0, t1).min(axis=-1)
    hit = (tf >= tn) & (tf > 1e-6)
    t = np.where(tn > 1e-6, tn, tf)
    hit &= t > 1e-6
    return np.where(hit, t, np.inf)


def _trace(spec: SceneSpec, origins, dirs, tau):
    """Nearest hit over all primitives; returns (t, object_id, normal).

    object ids are 1-based; the floor, when present, hits as id 0 with a
    +z normal (it is background scenery, not an object).
    """
    n = origins.shape[0]
    best_t = np.full(n, np.inf)
    best_id = np.full(n, -1, dtype=np.int64)
    normals = np.zeros((n, 3))

    def consider(t, oid, normal_fn):
        closer = t < best_t
        if np.any(closer):
            best_t[closer] = t[closer]
            best_id[closer] = oid
            normals[closer] = normal_fn(closer)

    for i, obj in enumerate(spec.objects):
        rot, p = obj.pose_at(tau)
        o_l = (origins - p) @ rot
        d_l = dirs @ rot
        if obj.primitive == "sphere":
            t = _intersect_sphere(o_l, d_l, np.zeros(3), obj.radius)

            def sphere_normal(m, rot=rot, p=p, t=t, o_l=o_l, d_l=d_l, obj=obj):
                x_l = o_l[m] + d_l[m] * t[m][:, None]
                return (x_l / obj.radius) @ rot.T

            consider(t, i + 1, sphere_normal)
        else:
            half = np.asarray(obj.size, dtype=np.float64) / 2
            t = _intersect_box(o_l, d_l, half)

            def box_normal(m, rot=rot, t=t, o_l=o_l, d_l=d_l, half=half):
                x_l = o_l[m] + d_l[m] * t[m][:, None]
                rel = x_l / half
                axis = np.argmax(np.abs(rel), axis=-1)
                n_l = np.zeros_like(x_l)
                n_l[np.arange(len(axis)), axis] = np.sign(
                    rel[np.arange(len(axis)), axis]
                )
                return n_l @ rot.T

            consider(t, i + 1, box_normal)

    if spec.floor is not None:
        size = float(spec.floor.get("size", 3.2))
        thickness = float(spec.floor.get("thickness", 0.12))
        half = np.array([size / 2, size / 2, thickness / 2])
        center = np.array([0.0, 0.0, -thickness / 2])
        t = _intersect_box(origins - center, dirs, half)

        def floor_normal(m):
            return np.tile(np.array([0.0, 0.0, 1.0]), (int(m.sum()), 1))

        consider(t, 0, floor_normal)
    return best_t, best_id, normals


def _shade(spec: SceneSpec, object_ids, normals):
    light = np.asarray(spec.light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    albedos = np.zeros((len(spec.objects) + 1, 3))
    if spec.floor is not None:
        albedos[0] = spec.floor.get("albedo", [0.6, 0.6, 0.6])
    for i, obj in enumerate(spec.objects):
        albedos[i + 1] = obj.albedo
    colors = np.zeros((object_ids.shape[0], 3))
    hit = object_ids >= 0
    lam = np.clip(normals[hit] @ light, 0.0, None)
    shade = spec.ambient + (1.0 - spec.ambient) * lam
    colors[hit] = albedos[object_ids[hit]] * shade[:, None]
    return np.clip(colors, 0.0, 1.0)


def _check_initial_overlap(spec: SceneSpec) -> None:
    objs = spec.objects
    for i in range(len(objs)):
        for j in range(i + 1, len(objs)):
            pi = np.asarray(objs[i].position, dtype=np.float64)
            pj = np.asarray(objs[j].position, dtype=np.float64)
            if np.linalg.norm(pi - pj) < objs[i].bounding_radius() + objs[j].bounding_radius():
                raise DataError(
                    f"objects {i} and {j} overlap at the initial timestamp"
                )


def _intrinsics(spec: SceneSpec) -> dict:
    h, w = spec.resolution
    f = 0.5 * w / math.tan(math.radians(spec.fov_deg) / 2)
    return {"fx": f, "fy": f, "cx": (w - 1) / 2, "cy": (h - 1) / 2}


def oracle_features(image, gt_masks, d_out=16, noise_sigma=0.05, seed=0) -> np.ndarray:
    """Per-object fixed random unit vectors plus Gaussian noise, (C,H,W).

    The vector of an object id depends only on (seed, id), so the same id is
    consistent across frames when the per-frame call reuses the scene seed.
    """
    masks = np.asarray(gt_masks)
    h, w = masks.shape
    ids = np.unique(masks)
    vectors = np.zeros((int(ids.max()) + 1, d_out), dtype=np.float64)
    for oid in ids:
        r = np.random.default_rng([int(seed), int(oid)])
        v = r.standard_normal(d_out)
        vectors[oid] = v / np.linalg.norm(v)
    feat = vectors[masks]  # (H, W, C)
    if noise_sigma > 0:
        nrng = np.random.default_rng([int(seed), 7919, h, w])
        feat = feat + nrng.standard_normal(feat.shape) * noise_sigma
    return np.transpose(feat, (2, 0, 1)).astype(np.float32)


def gen_scene(spec: SceneSpec, seed: int, out_dir, features=True,
              feature_dim=16, feature_noise=0.05) -> Path:
    """Render the scene to a dataset directory; pure function of (spec, seed)."""
    _check_initial_overlap(spec)
    out = Path(out_dir)
    for sub in ("frames", "masks", "depth") + (("features",) if features else ()):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    poses = _camera_poses(spec, rng)
    intr = _intrinsics(spec)
    h, w = spec.resolution
    ss = max(int(spec.supersample), 1)
    # sub-pixel offsets centred on the integer pixel coordinate
    offs = (np.arange(ss) + 0.5) / ss - 0.5
    vv, uu = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    frame_data = []
    for k, pose in enumerate(poses):
        tau = k / max(spec.frames - 1, 1)
        r = pose[:3, :3]
        eye = pose[:3, 3]
        img = np.zeros((h, w, 3))
        for ov in offs:
            for ou in offs:
                du = (uu + ou - intr["cx"]) / intr["fx"]
                dv = (vv + ov - intr["cy"]) / intr["fy"]
                d_cam = np.stack((du, dv, np.ones_like(du)), axis=-1).reshape(-1, 3)
                d_world = d_cam @ r.T
                d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
                o_world = np.tile(eye, (d_world.shape[0], 1))
                _, ids, normals = _trace(spec, o_world, d_world, tau)
                img += _shade(spec, ids, normals).reshape(h, w, 3)
        img /= ss * ss
        # masks and depth from the centre ray
        du = (uu - intr["cx"]) / intr["fx"]
        dv = (vv - intr["cy"]) / intr["fy"]
        d_cam = np.stack((du, dv, np.ones_like(du)), axis=-1).reshape(-1, 3)
        d_world = d_cam @ r.T
        d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
        o_world = np.tile(eye, (d_world.shape[0], 1))
        t, ids, _ = _trace(spec, o_world, d_world, tau)
        mask = np.maximum(ids, 0).reshape(h, w)
        depth = np.where(np.isfinite(t), t, 0.0).reshape(h, w)

        save_image(out / "frames" / f"{k:04d}.png", img)
        save_label_png(out / "masks" / f"{k:04d}.png", mask)
        write_depth(out / "depth" / f"{k:04d}.bin", depth)
        entry = {
            "image": f"frames/{k:04d}.png",
            "mask": f"masks/{k:04d}.png",
            "depth": f"depth/{k:04d}.bin",
            "pose": [float(x) for x in pose.reshape(-1)],
            "time": tau,
        }
        if features:
            fmap = oracle_features(img, mask, feature_dim, feature_noise, seed=seed)
            write_feature_map(out / "features" / f"{k:04d}.dvft", fmap)
            entry["features"] = f"features/{k:04d}.dvft"
        frame_data.append(entry)

    manifest = {
        "schema": MANIFEST_SCHEMA,
        "frames": spec.frames,
        "resolution": list(spec.resolution),
        "intrinsics": intr,
        "bbox": spec.bbox,
        "frame_data": frame_data,
        "objects": [
            dict({k: v for k, v in vars(o).items() if v is not None}, id=i + 1)
            for i, o in enumerate(spec.objects)
        ],
        "floor": spec.floor,
        "generator": {"spec": spec.to_json(), "seed": int(seed)},
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return out


@dataclass
class SceneDataset:
    root: Path
    images: np.ndarray  # (T, H, W, 3) float32 in [0, 1]
    poses: np.ndarray  # (T, 4, 4)
    times: np.ndarray  # (T,) normalized
    intrinsics: dict
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    features: np.ndarray | None = None  # (T, C, H, W)
    gt_masks: np.ndarray | None = None  # (T, H, W) int
    objects: list[SceneObject] | None = None
    manifest: dict | None = None

    @property
    def frame_count(self) -> int:
        return self.images.shape[0]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def camera(self, frame: int) -> Camera:
        h, w = self.resolution
        intr = self.intrinsics
        return Camera(intr["fx"], intr["fy"], intr["cx"], intr["cy"],
                      self.poses[frame], h, w)

    def gt_surface_points(self, per_object=10000, tau=0.0, seed=0):
        """Labeled surface samples of the ground-truth objects at time tau."""
        if not self.objects:
            raise DataError("scene has no ground-truth object table")
        rng = np.random.default_rng(seed)
        pts, labels = [], []
        for i, obj in enumerate(self.objects):
            pts.append(obj.surface_points(per_object, tau, rng))
            labels.append(np.full(per_object, i + 1, dtype=np.int64))
        return np.concatenate(pts), np.concatenate(labels)


def load_scene(scene_dir, load_features=True) -> SceneDataset:
    root = Path(scene_dir)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DataError(f"missing manifest: {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("schema") != MANIFEST_SCHEMA:
        raise DataError(f"unknown manifest schema {manifest.get('schema')!r}")
    t_count = int(manifest["frames"])
    if t_count < 2:
        raise DataError("scene must have at least 2 frames")
    h, w = manifest["resolution"]
    images, poses, times, feats, masks = [], [], [], [], []
    for entry in manifest["frame_data"]:
        ipath = root / entry["image"]
        if not ipath.exists():
            raise DataError(f"missing image file: {ipath}")
        img = load_image(ipath)
        if img.shape[:2] != (h, w):
            raise DataError(f"{ipath}: resolution {img.shape[:2]} != manifest {(h, w)}")
        images.append(img)
        pose = np.asarray(entry["pose"], dtype=np.float64).reshape(4, 4)
        check_rotation(pose[:3, :3], tol=1e-3, context=str(ipath))
        poses.append(pose)
        times.append(float(entry["time"]))
        if load_features and "features" in entry:
            fpath = root / entry["features"]
            if not fpath.exists():
                raise DataError(f"missing feature file: {fpath}")
            feats.append(read_feature_map(fpath))
        if "mask" in entry:
            mpath2 = root / entry["mask"]
            if not mpath2.exists():
                raise DataError(f"missing mask file: {mpath2}")
            masks.append(load_label_png(mpath2))
    bbox = manifest["bbox"]
    check_bbox(bbox[0], bbox[1])
    objects = None
    if manifest.get("objects"):
        objects = [
            SceneObject(**{k: v for k, v in o.items() if k != "id"})
            for o in manifest["objects"]
        ]
    return SceneDataset(
        root=root,
        images=np.stack(images),
        poses=np.stack(poses),
        times=np.asarray(times, dtype=np.float64),
        intrinsics=manifest["intrinsics"],
        bbox_min=np.asarray(bbox[0], dtype=np.float64),
        bbox_max=np.asarray(bbox[1], dtype=np.float64),
        features=np.stack(feats) if feats else None,
        gt_masks=np.stack(masks) if masks else None,
        objects=objects,
        manifest=manifest,
    )


def builtin_scene_spec(name: str) -> SceneSpec:
    """Bundled desk-scale scene layouts."""
    floor = {"albedo": [0.62, 0.60, 0.58], "size": 3.2, "thickness": 0.12}
    camera = {"path": "hemisphere_random", "radius": 3.8,
              "elevation_deg": [30.0, 70.0], "target": [0.0, 0.0, 0.35]}
    base = dict(
        resolution=[96, 96], frames=20, camera=camera, floor=floor,
        bbox=[[-1.7, -1.7, -0.13], [1.7, 1.7, 2.2]],
    )
    if name == "toy2":
        objects = [
            SceneObject("sphere", [0.88, 0.22, 0.18], [0.55, -0.45, 1.05], radius=0.32,
                        trajectory={"kind": "fall", "gravity": 1.6, "rest_z": 0.32}),
            SceneObject("box", [0.16, 0.35, 0.85], [-0.55, 0.40, 0.30],
                        size=[0.5, 0.5, 0.5],
                        trajectory={"kind": "linear", "velocity": [0.55, -0.35, 0.0]}),
        ]
    elif name == "toy3fall":
        objects = [
            SceneObject("box", [0.86, 0.25, 0.21], [0.62, -0.50, 0.95],
                        size=[0.46, 0.46, 0.46],
                        trajectory={"kind": "fall", "gravity": 1.5, "rest_z": 0.23}),
            SceneObject("box", [0.20, 0.62, 0.24], [-0.62, 0.48, 1.15],
                        size=[0.44, 0.44, 0.44],
                        trajectory={"kind": "fall", "gravity": 1.9, "rest_z": 0.22}),
            SceneObject("sphere", [0.22, 0.35, 0.86], [0.05, 0.62, 0.75], radius=0.28,
                        trajectory={"kind": "fall", "gravity": 1.1, "rest_z": 0.28}),
        ]
    elif name == "toy3rand":
        objects = [
            SceneObject("box", [0.86, 0.25, 0.21], [0.55, -0.55, 0.85],
                        size=[0.46, 0.46, 0.46],
                        trajectory={"kind": "linear", "velocity": [-0.55, 0.45, 0.15]}),
            SceneObject("box", [0.20, 0.62, 0.24], [-0.60, 0.42, 0.55],
                        size=[0.44, 0.44, 0.44],
                        trajectory={"kind": "linear", "velocity": [0.5, 0.25, 0.3]}),
            SceneObject("sphere", [0.22, 0.35, 0.86], [0.1, -0.3, 1.3], radius=0.28,
                        trajectory={"kind": "linear", "velocity": [0.1, 0.55, -0.45]}),
        ]
    elif name == "toy_still":
        objects = [
            SceneObject("box", [0.86, 0.25, 0.21], [0.62, -0.50, 0.95],
                        size=[0.46, 0.46, 0.46],
                        trajectory={"kind": "fall", "gravity": 1.5, "rest_z": 0.23}),
            SceneObject("sphere", [0.22, 0.35, 0.86], [0.05, 0.62, 0.75], radius=0.28,
                        trajectory={"kind": "fall", "gravity": 1.1, "rest_z": 0.28}),
            SceneObject("box", [0.88, 0.75, 0.25], [-0.72, -0.55, 0.21],
                        size=[0.42, 0.42, 0.42], trajectory={"kind": "still"}),
            SceneObject("sphere", [0.45, 0.28, 0.75], [-0.15, -0.85, 0.26], radius=0.26,
                        trajectory={"kind": "still"}),
        ]
    else:
        raise DataError(f"unknown bundled scene '{name}'")
    return SceneSpec(objects=objects, **base)
