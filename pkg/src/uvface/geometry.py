"""Annotated face model, affine camera, and landmark-driven pose estimation.

The camera is a 2x4 affine map on homogeneous model points. Pose is fitted to
2D/3D landmark correspondences by ridge-regularized least squares, either in
closed form or with Levenberg-Marquardt.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import (
    DegeneratePoseError,
    FormatError,
    InsufficientLandmarksError,
    SingularDesignError,
)

MIN_LANDMARKS = 4
DEGENERATE_CROSS_NORM = 1e-12


@dataclass(frozen=True, eq=False)
class AnnotatedFaceModel:
    vertices: np.ndarray  # V x 3
    triangles: np.ndarray  # F x 3
    uv: np.ndarray  # V x 2, in [0, 1]
    landmark_indices: np.ndarray  # L

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=np.float64)
        tris = np.asarray(self.triangles, dtype=np.int64)
        uv = np.asarray(self.uv, dtype=np.float64)
        lmk = np.asarray(self.landmark_indices, dtype=np.int64).reshape(-1)
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise ValueError(f"vertices must be V x 3, got {verts.shape}")
        if tris.ndim != 2 or tris.shape[1] != 3:
            raise ValueError(f"triangles must be F x 3, got {tris.shape}")
        if uv.shape != (len(verts), 2):
            raise ValueError(f"uv must be {len(verts)} x 2, got {uv.shape}")
        if tris.size and (tris.min() < 0 or tris.max() >= len(verts)):
            raise ValueError("triangle index out of range")
        if np.any(uv < 0.0) or np.any(uv > 1.0):
            raise ValueError("uv coordinates must lie in [0, 1]")
        if len(lmk) < MIN_LANDMARKS:
            raise ValueError(f"need at least {MIN_LANDMARKS} landmark vertices, got {len(lmk)}")
        if lmk.min() < 0 or lmk.max() >= len(verts):
            raise ValueError("landmark index out of range")
        area = uv_areas(uv, tris)
        if np.any(np.abs(area) <= 0.0):
            bad = int(np.flatnonzero(np.abs(area) <= 0.0)[0])
            raise ValueError(f"triangle {bad} is degenerate in UV space")
        for name, arr in (("vertices", verts), ("triangles", tris), ("uv", uv), ("landmark_indices", lmk)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def landmarks3d(self) -> np.ndarray:
        return self.vertices[self.landmark_indices]

    def save(self, obj_path: str | os.PathLike) -> None:
        """Write ``<name>.obj`` plus the ``<name>.landmarks`` index sidecar."""
        obj_path = Path(obj_path)
        lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in self.vertices]
        lines += [f"vt {u:.17g} {v:.17g}" for u, v in self.uv]
        lines += [f"f {a}/{a} {b}/{b} {c}/{c}" for a, b, c in self.triangles + 1]
        obj_path.write_text("\n".join(lines) + "\n", encoding="ascii")
        landmark_sidecar(obj_path).write_text(
            "\n".join(str(int(i)) for i in self.landmark_indices) + "\n", encoding="ascii"
        )

    @classmethod
    def load(cls, obj_path: str | os.PathLike) -> "AnnotatedFaceModel":
        obj_path = Path(obj_path)
        verts, texcoords, faces = _parse_obj(obj_path)
        uv = np.full((len(verts), 2), np.nan)
        if faces and faces[0][1] is None:
            if len(texcoords) != len(verts):
                raise FormatError(f"{obj_path}: faces lack vt indices and vt count != v count")
            uv[:] = texcoords
        else:
            for vids, tids in faces:
                if tids is None:
                    raise FormatError(f"{obj_path}: mixed faces with and without vt indices")
                for vi, ti in zip(vids, tids):
                    t = texcoords[ti]
                    if not np.isnan(uv[vi, 0]) and not np.array_equal(uv[vi], t):
                        raise FormatError(f"{obj_path}: vertex {vi + 1} has conflicting texture coords")
                    uv[vi] = t
        if np.isnan(uv).any():
            raise FormatError(f"{obj_path}: some vertices have no texture coordinate")
        sidecar = landmark_sidecar(obj_path)
        try:
            lmk = [int(tok) for tok in sidecar.read_text(encoding="ascii").split()]
        except FileNotFoundError:
            raise FormatError(f"{obj_path}: missing landmark sidecar {sidecar}") from None
        except ValueError as exc:
            raise FormatError(f"{sidecar}: {exc}") from None
        tris = np.array([f[0] for f in faces], dtype=np.int64).reshape(-1, 3)
        try:
            return cls(np.array(verts).reshape(-1, 3), tris, uv, np.array(lmk))
        except ValueError as exc:
            raise FormatError(f"{obj_path}: {exc}") from None


def landmark_sidecar(obj_path: str | os.PathLike) -> Path:
    return Path(obj_path).with_suffix(".landmarks")


def _parse_obj(path: Path):
    verts, texcoords, faces = [], [], []
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            toks = line.split()
            if not toks or toks[0].startswith("#"):
                continue
            try:
                if toks[0] == "v":
                    verts.append([float(t) for t in toks[1:4]])
                elif toks[0] == "vt":
                    texcoords.append([float(t) for t in toks[1:3]])
                elif toks[0] == "f":
                    if len(toks) != 4:
                        raise FormatError(f"{path}:{lineno}: only triangles are supported")
                    parts = [t.split("/") for t in toks[1:]]
                    vids = [int(p[0]) - 1 for p in parts]
                    has_vt = [len(p) > 1 and p[1] != "" for p in parts]
                    if any(has_vt) and not all(has_vt):
                        raise FormatError(f"{path}:{lineno}: partial vt indices")
                    tids = [int(p[1]) - 1 for p in parts] if all(has_vt) else None
                    faces.append((vids, tids))
            except (ValueError, IndexError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return verts, texcoords, faces


def uv_areas(uv: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Signed UV-space area of each triangle."""
    a, b, c = uv[tris[:, 0]], uv[tris[:, 1]], uv[tris[:, 2]]
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1]))


@dataclass(frozen=True, eq=False)
class ProjectionMatrix:
    """Affine camera ``x = affine @ [X, 1]`` with a derived depth row.

    The depth row's linear part is ``r1 x r2`` normalized and rescaled to the
    mean norm of ``r1`` and ``r2``; its offset is zero. Smaller depth means
    closer to the camera.
    """

    affine: np.ndarray
    depth_row: np.ndarray | None = field(init=False)

    def __post_init__(self):
        aff = np.array(self.affine, dtype=np.float64).reshape(2, 4)
        if not np.all(np.isfinite(aff)):
            raise ValueError("projection matrix has non-finite entries")
        aff.setflags(write=False)
        object.__setattr__(self, "affine", aff)
        r1, r2 = aff[0, :3], aff[1, :3]
        cross = np.cross(r1, r2)
        norm = np.linalg.norm(cross)
        if norm < DEGENERATE_CROSS_NORM:
            depth = None
        else:
            scale = 0.5 * (np.linalg.norm(r1) + np.linalg.norm(r2))
            depth = np.append(cross / norm * scale, 0.0)
            depth.setflags(write=False)
        object.__setattr__(self, "depth_row", depth)

    def __eq__(self, other):
        if not isinstance(other, ProjectionMatrix):
            return NotImplemented
        return np.array_equal(self.affine, other.affine)

    def save(self, path: str | os.PathLike) -> None:
        np.savetxt(path, self.affine, fmt="%.17g")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ProjectionMatrix":
        return cls(np.loadtxt(path, dtype=np.float64).reshape(2, 4))


@dataclass(frozen=True)
class PoseSolveReport:
    objective_value: float
    iterations: int
    converged: bool
    history: tuple[float, ...] = ()


def homogeneous(pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    return np.hstack([pts, np.ones((len(pts), 1))])


def project(p: ProjectionMatrix, pts: np.ndarray) -> np.ndarray:
    """Image coordinates (N x 2) of model points (N x 3)."""
    return homogeneous(np.asarray(pts, dtype=np.float64).reshape(-1, 3)) @ p.affine.T


def depth_of(p: ProjectionMatrix, pts: np.ndarray) -> np.ndarray:
    """Per-point depth along the viewing direction (smaller = nearer)."""
    if p.depth_row is None:
        raise DegeneratePoseError("projection rows are (nearly) parallel; depth is undefined")
    return homogeneous(np.asarray(pts, dtype=np.float64).reshape(-1, 3)) @ p.depth_row


def pose_objective(affine: np.ndarray, x2d: np.ndarray, x3d: np.ndarray, lam: float) -> float:
    """``||x2d - P X3D_h||^2 + lam ||P||^2``."""
    resid = np.asarray(x2d, dtype=np.float64) - homogeneous(x3d) @ np.asarray(affine).T
    return float(np.sum(resid**2) + lam * np.sum(np.asarray(affine) ** 2))


def default_lambda(x3d: np.ndarray) -> float:
    a = homogeneous(x3d)
    return 1e-3 * float(np.trace(a.T @ a)) / 12.0


def _check_inputs(x2d, x3d, lam):
    x2d = np.asarray(x2d, dtype=np.float64).reshape(-1, 2)
    x3d = np.asarray(x3d, dtype=np.float64).reshape(-1, 3)
    if len(x2d) != len(x3d):
        raise ValueError(f"{len(x2d)} 2D landmarks vs {len(x3d)} 3D landmarks")
    if len(x2d) < MIN_LANDMARKS:
        raise InsufficientLandmarksError(f"need at least {MIN_LANDMARKS} landmarks, got {len(x2d)}")
    if not (np.all(np.isfinite(x2d)) and np.all(np.isfinite(x3d))):
        raise ValueError("landmarks must be finite")
    if lam is None:
        lam = default_lambda(x3d)
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    a = homogeneous(x3d)
    if lam == 0 and np.linalg.matrix_rank(a) < 4:
        raise SingularDesignError(
            "3D landmarks do not span 3D space; the unregularized problem is singular, use lambda > 0"
        )
    return x2d, x3d, float(lam), a


def estimate_pose(x2d, x3d, lam: float | None = None) -> tuple[ProjectionMatrix, PoseSolveReport]:
    """Closed-form ridge solution of the landmark fitting problem.

    ``lam=None`` uses :func:`default_lambda`.
    """
    x2d, x3d, lam, a = _check_inputs(x2d, x3d, lam)
    normal = a.T @ a + lam * np.eye(4)
    affine = np.linalg.solve(normal, a.T @ x2d).T
    obj = pose_objective(affine, x2d, x3d, lam)
    return ProjectionMatrix(affine), PoseSolveReport(obj, 0, True, (obj,))


def levenberg_marquardt(
    residual: Callable[[np.ndarray], np.ndarray],
    jacobian: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    max_iters: int = 100,
    tol: float = 1e-12,
    mu_factor: float = 1e-3,
):
    """Minimize ``||residual(x)||^2``.

    Damping starts at ``mu_factor * max(diag(J^T J))`` and is divided by 10 on
    accepted steps and multiplied by 10 on rejected ones. Stops when the
    proposed step satisfies ``||dx|| < tol * (||x|| + tol)`` (converged) or
    after ``max_iters`` iterations.

    Returns ``(x, iterations, converged, objective_history)``; the history
    holds the objective after every accepted step, starting at ``x0``.
    """
    x = np.array(x0, dtype=np.float64)
    r = residual(x)
    cost = float(r @ r)
    history = [cost]
    mu = None
    converged = False
    it = 0
    while it < max_iters:
        it += 1
        jac = jacobian(x)
        hess = jac.T @ jac
        grad = jac.T @ r
        if mu is None:
            mu = mu_factor * max(float(np.max(np.diag(hess))), np.finfo(float).tiny)
        step = np.linalg.solve(hess + mu * np.eye(len(x)), -grad)
        if np.linalg.norm(step) < tol * (np.linalg.norm(x) + tol):
            converged = True
            break
        x_new = x + step
        r_new = residual(x_new)
        cost_new = float(r_new @ r_new)
        if cost_new < cost:
            x, r, cost = x_new, r_new, cost_new
            history.append(cost)
            mu /= 10.0
        else:
            mu *= 10.0
    return x, it, converged, history


def refine_pose_lm(
    p0: ProjectionMatrix,
    x2d,
    x3d,
    lam: float | None = None,
    max_iters: int = 100,
    tol: float = 1e-12,
) -> tuple[ProjectionMatrix, PoseSolveReport]:
    """Iteratively refine an affine pose with Levenberg-Marquardt."""
    x2d, x3d, lam, a = _check_inputs(x2d, x3d, lam)
    n = len(a)
    sqrt_lam = np.sqrt(lam)
    target = x2d.ravel()

    # Parameters are the affine entries, row-major; residuals interleave (x, y) per landmark.
    jac = np.zeros((2 * n + 8, 8))
    jac[0 : 2 * n : 2, 0:4] = a
    jac[1 : 2 * n : 2, 4:8] = a
    jac[2 * n :, :] = sqrt_lam * np.eye(8)

    def residual(p):
        return np.concatenate([(a @ p.reshape(2, 4).T).ravel() - target, sqrt_lam * p])

    x, iters, converged, history = levenberg_marquardt(
        residual, lambda p: jac, p0.affine.ravel(), max_iters=max_iters, tol=tol
    )
    affine = x.reshape(2, 4)
    obj = pose_objective(affine, x2d, x3d, lam)
    result = p0 if np.array_equal(affine, p0.affine) else ProjectionMatrix(affine)
    return result, PoseSolveReport(obj, iters, converged, tuple(history))
