"""Small meshes and cameras shared by the tests."""

import numpy as np

from uvface.geometry import AnnotatedFaceModel, ProjectionMatrix

# Filled by the acceptance module; echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def quad_model(corners3d, uv_box=(0.0, 0.0, 1.0, 1.0)) -> AnnotatedFaceModel:
    """Two-triangle quad; ``corners3d`` ordered to match UV corners (u0,v0),(u1,v0),(u1,v1),(u0,v1)."""
    u0, v0, u1, v1 = uv_box
    uv = np.array([[u0, v0], [u1, v0], [u1, v1], [u0, v1]], dtype=float)
    tris = np.array([[0, 1, 2], [0, 2, 3]])
    return AnnotatedFaceModel(np.asarray(corners3d, dtype=float), tris, uv, np.arange(4))


def plane_stack(x0, x1, y0, y1, z_near, z_far) -> AnnotatedFaceModel:
    """Two parallel rectangles; near plane on the left UV half, far plane on the right."""
    verts, uv = [], []
    for z, (ua, ub) in ((z_near, (0.0, 0.5)), (z_far, (0.5, 1.0))):
        verts += [[x0, y0, z], [x1, y0, z], [x1, y1, z], [x0, y1, z]]
        uv += [[ua, 0.0], [ub, 0.0], [ub, 1.0], [ua, 1.0]]
    tris = np.array([[0, 1, 2], [0, 2, 3], [4, 5, 6], [4, 6, 7]])
    return AnnotatedFaceModel(np.array(verts, float), tris, np.array(uv), np.arange(8))


# Maps model (x, y) straight to pixel (x, y). Rows (1,0,0) and (0,1,0) give
# depth direction +z, so smaller z is nearer.
PIXEL_CAMERA = ProjectionMatrix(np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]]))


def raster_oracle(model: AnnotatedFaceModel, height: int, width: int):
    """Per-pixel, per-triangle point-in-triangle test; the lowest triangle index wins.

    Returns ``(triangle H x W, positions H x W x 3)`` with -1 / 0 where uncovered.
    """
    tri_map = np.full((height, width), -1)
    pos = np.zeros((height, width, 3))
    uv = model.uv * [width, height]
    for i in range(height):
        for j in range(width):
            px, py = j + 0.5, i + 0.5
            for t, (a, b, c) in enumerate(model.triangles):
                (ax, ay), (bx, by), (cx, cy) = uv[a], uv[b], uv[c]
                den = (bx - ax) * (cy - ay) - (cx - ax) * (by - ay)
                w1 = ((px - ax) * (cy - ay) - (cx - ax) * (py - ay)) / den
                w2 = ((bx - ax) * (py - ay) - (px - ax) * (by - ay)) / den
                w0 = 1.0 - w1 - w2
                if min(w0, w1, w2) >= -1e-9:
                    tri_map[i, j] = t
                    pos[i, j] = w0 * model.vertices[a] + w1 * model.vertices[b] + w2 * model.vertices[c]
                    break
    return tri_map, pos


def ellipsoid_raycast_visible(points: np.ndarray, axes, toward_camera: np.ndarray) -> np.ndarray:
    """Analytic visibility on an ellipsoid centered at the origin.

    Each point is pushed radially onto the surface, then the ray toward the
    camera is intersected with the quadric. Besides ``t = 0`` the ray meets
    the surface at ``t* = -2 p.D.d / d.D.d``; the point is hidden iff ``t* > 0``.
    """
    d_mat = np.diag(1.0 / np.asarray(axes, dtype=float) ** 2)
    p = np.asarray(points, dtype=float)
    p = p / np.sqrt(np.einsum("ni,ij,nj->n", p, d_mat, p))[:, None]
    d = np.asarray(toward_camera, dtype=float)
    t_other = -2.0 * (p @ d_mat @ d) / (d @ d_mat @ d)
    return t_other <= 0.0
