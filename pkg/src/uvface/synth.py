"""Synthetic identities rendered over a pitch x yaw grid.

Stands in for detection, landmarking and 3D reconstruction: every rendered
image comes with exact 2D landmarks, the camera that produced it and the mesh
it was rendered from.

Model frame: x to the subject's left as seen by a frontal camera (image
right), y up, z out of the face. The UV chart is a latitude/longitude map
with the nose at ``u = 0.5`` and the seam at the back of the head.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import ImageBuffer, Sigset, SigsetEntry, write_sigset
from .errors import PoseRangeError
from .evaluation import GALLERY_CELL as GALLERY_POSE, GRID_PITCHES as PITCHES, GRID_YAWS as YAWS
from .geometry import AnnotatedFaceModel, ProjectionMatrix, depth_of, project
from .raster import bilinear_sample, cover_pixel_centers

MAX_PITCH, MAX_YAW, MAX_ROLL = 30, 90, 30

DEFAULT_IMAGE_SIZE = (128, 128)  # width, height
ALBEDO_SIZE = 256
BASE_AXES = (0.8, 1.0, 0.9)

# (longitude, colatitude) in degrees; all lie on the default 64 x 32 grid.
LANDMARK_ANGLES = (
    (0.0, 90.0),  # nose tip
    (0.0, 67.5),  # nose bridge
    (0.0, 45.0),  # forehead
    (0.0, 112.5),  # mouth center
    (0.0, 135.0),  # chin
    (-22.5, 67.5),
    (22.5, 67.5),  # inner eye corners
    (-45.0, 67.5),
    (45.0, 67.5),  # outer eye corners
    (-22.5, 112.5),
    (22.5, 112.5),  # mouth corners
    (-45.0, 112.5),
    (45.0, 112.5),  # jaw
    (-90.0, 90.0),
    (90.0, 90.0),  # ears
)


def _uniform_u(lon: np.ndarray) -> np.ndarray:
    return (lon + np.pi) / (2 * np.pi)


def _face_weighted_u(lon: np.ndarray) -> np.ndarray:
    """Front hemisphere gets u in [0.1, 0.9]; the back of the head is squeezed."""
    return np.interp(lon, [-np.pi, -np.pi / 2, np.pi / 2, np.pi], [0.0, 0.1, 0.9, 1.0])


def _directions(lon: np.ndarray, colat: np.ndarray) -> np.ndarray:
    return np.stack([np.sin(colat) * np.sin(lon), np.cos(colat), np.sin(colat) * np.cos(lon)], axis=-1)


def ellipsoid_model(
    axes=BASE_AXES,
    n_lon: int = 64,
    n_lat: int = 32,
    face_weighted: bool = False,
    radial=None,
) -> AnnotatedFaceModel:
    """Closed latitude/longitude ellipsoid mesh with per-vertex UVs.

    ``radial`` optionally maps unit directions (N x 3) to a radial scale
    factor (bumps). The longitude seam and the poles carry duplicated
    vertices so each vertex has a single UV.
    """
    if n_lon % 4 or n_lat % 2:
        raise ValueError("n_lon must be a multiple of 4 and n_lat even")
    lon = -np.pi + 2 * np.pi * np.arange(n_lon + 1) / n_lon
    colat = np.pi * np.arange(n_lat + 1) / n_lat
    lon_g, colat_g = np.meshgrid(lon, colat)  # rows: colatitude
    dirs = _directions(lon_g, colat_g).reshape(-1, 3)
    scale = np.ones(len(dirs)) if radial is None else radial(dirs)
    verts = dirs * np.asarray(axes, dtype=np.float64) * scale[:, None]
    u = (_face_weighted_u if face_weighted else _uniform_u)(lon_g).reshape(-1)
    v = (colat_g / np.pi).reshape(-1)
    uv = np.clip(np.stack([u, v], axis=1), 0.0, 1.0)

    ii, jj = np.meshgrid(np.arange(n_lat), np.arange(n_lon), indexing="ij")
    a = (ii * (n_lon + 1) + jj).ravel()
    b = a + 1
    d = a + (n_lon + 1)
    c = d + 1
    tris = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])

    step = 360.0 / n_lon
    lmk = []
    for lon_deg, colat_deg in LANDMARK_ANGLES:
        j = int(round((lon_deg + 180.0) / step))
        i = int(round(colat_deg / (180.0 / n_lat)))
        lmk.append(i * (n_lon + 1) + j)
    return AnnotatedFaceModel(verts, tris, uv, np.array(lmk))


def nose_tip_index(model: AnnotatedFaceModel) -> int:
    return int(model.landmark_indices[0])


@dataclass(frozen=True, eq=False)
class SyntheticIdentity:
    seed: int
    mesh: AnnotatedFaceModel
    albedo: np.ndarray  # ALBEDO_SIZE x ALBEDO_SIZE x 1, indexed like a UV image


@dataclass(frozen=True, eq=False)
class RenderedSample:
    image: ImageBuffer
    pose: tuple[float, float, float]
    gt_landmarks2d: np.ndarray
    gt_projection: ProjectionMatrix


def _angular_bumps(dirs: np.ndarray, centers: np.ndarray, widths: np.ndarray, amps: np.ndarray) -> np.ndarray:
    cosang = np.clip(dirs @ centers.T, -1.0, 1.0)
    ang = np.arccos(cosang)
    return (amps * np.exp(-0.5 * (ang / widths) ** 2)).sum(axis=1)


def _albedo(rng: np.random.Generator, symmetric: bool) -> np.ndarray:
    n = ALBEDO_SIZE
    u = (np.arange(n) + 0.5) / n
    uu, vv = np.meshgrid(u, u)
    tex = np.zeros((n, n))
    for _ in range(14):
        fu = rng.integers(1, 9) * rng.choice([-1, 1])
        fv = rng.uniform(0.5, 8.0)
        amp = rng.uniform(0.5, 1.0) / np.sqrt(abs(fu) + fv)
        tex += amp * np.cos(2 * np.pi * (fu * uu + fv * vv) + rng.uniform(0, 2 * np.pi))
    for _ in range(10):
        cu, cv = rng.uniform(0.15, 0.85), rng.uniform(0.2, 0.8)
        su, sv = rng.uniform(0.015, 0.05, size=2)
        tex += rng.uniform(-0.8, 0.8) * np.exp(-0.5 * (((uu - cu) / su) ** 2 + ((vv - cv) / sv) ** 2))
    if symmetric:
        tex = 0.5 * (tex + tex[:, ::-1])
    lo, hi = tex.min(), tex.max()
    return (0.1 + 0.8 * (tex - lo) / (hi - lo))[:, :, None]


def generate_identity(seed: int, symmetric: bool = False) -> SyntheticIdentity:
    """Deterministic face-like identity: bumped ellipsoid plus procedural albedo.

    ``symmetric`` mirrors shape and albedo about the sagittal plane.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(seed) >> 32 & 0xFFFFFFFF]))
    axes = np.array(BASE_AXES) * (1.0 + rng.uniform(-0.05, 0.05, size=3))
    k = 6
    lon = np.radians(rng.uniform(-80, 80, size=k))
    colat = np.radians(rng.uniform(50, 130, size=k))
    widths = rng.uniform(0.25, 0.5, size=k)
    amps = rng.uniform(-0.05, 0.05, size=k)
    if symmetric:
        lon = np.concatenate([lon, -lon])
        colat = np.concatenate([colat, colat])
        widths = np.concatenate([widths, widths])
        amps = np.concatenate([amps, amps]) * 0.5
    centers = _directions(np.append(lon, 0.0), np.append(colat, np.pi / 2))
    widths = np.append(widths, 0.22)
    amps = np.append(amps, 0.12)  # nose

    def radial(dirs):
        return 1.0 + _angular_bumps(dirs, centers, widths, amps)

    mesh = ellipsoid_model(axes, face_weighted=True, radial=radial)
    return SyntheticIdentity(int(seed), mesh, _albedo(rng, symmetric))


def rotation(pitch: float, yaw: float, roll: float) -> np.ndarray:
    """``Rz(roll) @ Ry(yaw) @ Rx(pitch)``, angles in degrees."""
    p, y, r = np.radians([pitch, yaw, roll])
    rx = np.array([[1, 0, 0], [0, np.cos(p), -np.sin(p)], [0, np.sin(p), np.cos(p)]])
    ry = np.array([[np.cos(y), 0, np.sin(y)], [0, 1, 0], [-np.sin(y), 0, np.cos(y)]])
    rz = np.array([[np.cos(r), -np.sin(r), 0], [np.sin(r), np.cos(r), 0], [0, 0, 1]])
    return rz @ ry @ rx


def camera_for_pose(pose, image_size=DEFAULT_IMAGE_SIZE) -> ProjectionMatrix:
    """Affine camera centering the head; image y points down."""
    width, height = image_size
    rot = rotation(*pose)
    s = min(width, height) / 2.6
    affine = np.zeros((2, 4))
    affine[0, :3] = s * rot[0]
    affine[1, :3] = -s * rot[1]
    affine[:, 3] = (width / 2.0, height / 2.0)
    return ProjectionMatrix(affine)


def render(identity: SyntheticIdentity, pose, image_size=DEFAULT_IMAGE_SIZE) -> RenderedSample:
    """Z-buffered rendering of the albedo-mapped mesh; background is 0."""
    pose = tuple(float(a) for a in (tuple(pose) + (0.0,) * (3 - len(pose))))
    pitch, yaw, roll = pose
    if abs(pitch) > MAX_PITCH or abs(yaw) > MAX_YAW or abs(roll) > MAX_ROLL:
        raise PoseRangeError(f"pose {pose} outside |pitch|<={MAX_PITCH}, |yaw|<={MAX_YAW}, |roll|<={MAX_ROLL}")
    width, height = image_size
    cam = camera_for_pose(pose, image_size)
    mesh = identity.mesh
    vxy = project(cam, mesh.vertices)
    vdepth = depth_of(cam, mesh.vertices)

    tri, rows, cols, bary = cover_pixel_centers(vxy, mesh.triangles, height, width)
    corners = mesh.triangles[tri]
    depth = np.einsum("nk,nk->n", bary, vdepth[corners])
    pix = rows * width + cols
    order = np.lexsort((depth, pix))
    ps = pix[order]
    win = order[np.r_[True, ps[1:] != ps[:-1]]] if len(order) else order

    uv = np.einsum("nk,nkd->nd", bary[win], mesh.uv[corners[win]])
    n = identity.albedo.shape[0]
    colors = bilinear_sample(identity.albedo, uv[:, 0] * n, uv[:, 1] * n)
    pixels = np.zeros((height * width, identity.albedo.shape[2]))
    pixels[pix[win]] = colors
    image = ImageBuffer(pixels.reshape(height, width, -1))
    return RenderedSample(image, pose, project(cam, mesh.landmarks3d), cam)


def pose_tag(pitch: int, yaw: int) -> str:
    return f"p{pitch:+d}_y{yaw:+d}"


def identity_seed(base_seed: int, index: int) -> int:
    return int(base_seed) * 100003 + int(index)


def save_landmarks(path: str | os.PathLike, pts: np.ndarray) -> None:
    np.savetxt(path, np.asarray(pts).reshape(-1, 2), fmt="%.17g")


def load_landmarks(path: str | os.PathLike) -> np.ndarray:
    return np.loadtxt(path, dtype=np.float64, ndmin=2).reshape(-1, 2)


def build_pose_grid_dataset(
    n_identities: int,
    out_dir: str | os.PathLike,
    seed: int = 0,
    image_size=DEFAULT_IMAGE_SIZE,
) -> list[tuple[Path, Path]]:
    """Render every identity over the 3 x 7 pitch/yaw grid and write sigsets.

    Frontal renders form ``sigsets/gallery.csv``; each other pose gets its own
    probe sigset. A ready-to-run ``config.json`` is written at the root.
    Returns ``(gallery, probe)`` sigset path pairs in grid order.
    """
    if n_identities < 2:
        raise ValueError("identification needs at least 2 identities")
    out = Path(out_dir)
    img_dir, mesh_dir, set_dir = out / "images", out / "meshes", out / "sigsets"
    for d in (img_dir, mesh_dir, set_dir):
        d.mkdir(parents=True, exist_ok=True)

    per_pose: dict[tuple[int, int], list[SigsetEntry]] = {(p, y): [] for p in PITCHES for y in YAWS}
    for i in range(n_identities):
        subject = f"s{i:03d}"
        ident = generate_identity(identity_seed(seed, i))
        ident.mesh.save(mesh_dir / f"{subject}.obj")
        for pitch in PITCHES:
            for yaw in YAWS:
                sample = render(ident, (pitch, yaw, 0), image_size)
                stem = f"{subject}_{pose_tag(pitch, yaw)}"
                sample.image.save(img_dir / f"{stem}.png")
                save_landmarks(img_dir / f"{stem}.lmk", sample.gt_landmarks2d)
                sample.gt_projection.save(img_dir / f"{stem}.proj")
                per_pose[(pitch, yaw)].append(SigsetEntry(stem, subject, str(img_dir / f"{stem}.png")))

    gallery = set_dir / "gallery.csv"
    write_sigset(Sigset("gallery", tuple(per_pose[GALLERY_POSE])), gallery, relative_to=set_dir)
    pairs = []
    for yaw in YAWS:
        for pitch in PITCHES:
            if (pitch, yaw) == GALLERY_POSE:
                continue
            name = f"probe_{pose_tag(pitch, yaw)}"
            path = set_dir / f"{name}.csv"
            write_sigset(Sigset(name, tuple(per_pose[(pitch, yaw)])), path, relative_to=set_dir)
            pairs.append((gallery, path))

    config = {
        "dataset": {"name": f"synthetic-{n_identities}", "path": "."},
        "input": {
            "galleries": [os.path.relpath(gallery, out)],
            "probes": [os.path.relpath(p, out) for _, p in pairs],
        },
        "output": {"signatures_dir": "signatures", "results_dir": "results"},
        "pipelines": {
            "modules": ["landmarks", "reconstruction", "pose", "lifting", "signature", "matching", "evaluation"],
            "model_paths": {"reconstruction": "meshes"},
        },
        "evaluation": {"metric": "rank1", "options": {"pose_grid": True, "max_rank": 10}},
    }
    (out / "config.json").write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")
    return pairs
