"""Binary mask -> surface mesh -> point cloud -> spatial graph pipeline.

Point coordinates follow array index order throughout: column 0 is axis 0
of the volume (D), column 1 is axis 1 (H), column 2 is axis 2 (W). File
exports relabel columns to x,y,z with x = fastest-varying axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage import measure

from .autograd import Tensor, index_select

__all__ = [
    "SurfaceMesh", "PointCloud", "SpatialGraph", "FpsSelection",
    "CloudNormalization", "EmptyMaskError", "DisconnectedMaskError",
    "marching_cubes", "sample_point_cloud", "normalize_cloud",
    "cloud_normalization", "radius_graph", "fps", "geometric_start",
    "pool_cloud",
    "write_mesh_off", "write_cloud_csv",
]

_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


class EmptyMaskError(ValueError):
    """Mask has no foreground voxels."""


class DisconnectedMaskError(ValueError):
    """Mask foreground is not a single 6-connected component."""


@dataclass
class SurfaceMesh:
    """Triangulated isosurface in voxel coordinates."""
    vertices: np.ndarray   # (V, 3) float
    triangles: np.ndarray  # (F, 3) int


@dataclass
class SpatialGraph:
    """Radius graph over a point cloud.

    Directed edge e runs src[e] -> dst[e]; messages flow from the source
    (the neighbor) into the destination. Edge features are coordinate
    differences p_src - p_dst. The edge set is symmetric: both directions
    of every linked pair are present.
    """
    points: np.ndarray     # (N, 3)
    node_features: np.ndarray  # (N, F); initialized to the coordinates
    src: np.ndarray        # (E,) int
    dst: np.ndarray        # (E,) int
    edge_features: np.ndarray  # (E, 3)

    @property
    def num_nodes(self) -> int:
        return self.points.shape[0]

    @property
    def num_edges(self) -> int:
        return self.src.shape[0]


@dataclass
class FpsSelection:
    """Ordered farthest-point-sampling result."""
    indices: np.ndarray    # (K,) int, distinct, in selection order
    start: int


@dataclass
class CloudNormalization:
    """Invertible map used by normalize_cloud: p -> (p - center) / scale."""
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (points - self.center) / self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return points * self.scale + self.center


# PointCloud is a plain (N, 3) float array; a type alias keeps signatures
# readable without wrapping every array.
PointCloud = np.ndarray


def marching_cubes(mask: np.ndarray) -> SurfaceMesh:
    """Extract the closed isosurface of a binary mask at level 0.5.

    Uses the topologically consistent 256-case marching-cubes variant with
    vertices at edge midpoints (exact for a 0/1 field at level 0.5). The
    volume is padded by one voxel so surfaces never touch the border.

    Raises EmptyMaskError for masks without foreground and
    DisconnectedMaskError when the foreground is not one 6-connected
    component.
    """
    m = np.asarray(mask)
    if m.ndim != 3:
        raise ValueError(f"mask must be 3-d, got shape {m.shape}")
    fg = m > 0.5
    if not fg.any():
        raise EmptyMaskError("cannot mesh an empty mask")
    _, n_comp = ndimage.label(fg, structure=_SIX_CONNECTED)
    if n_comp != 1:
        raise DisconnectedMaskError(
            f"mask has {n_comp} 6-connected components, expected 1")
    padded = np.pad(fg, 1).astype(np.float64)
    verts, faces, _, _ = measure.marching_cubes(padded, level=0.5)
    return SurfaceMesh(vertices=verts - 1.0,
                       triangles=faces.astype(np.int64))


def sample_point_cloud(mesh: SurfaceMesh, n: int,
                       rng: np.random.Generator) -> PointCloud:
    """Draw n mesh vertices uniformly: without replacement when the mesh
    has at least n vertices, with replacement otherwise."""
    if n <= 0:
        raise ValueError(f"sample size must be positive, got {n}")
    nv = mesh.vertices.shape[0]
    if nv == 0:
        raise EmptyMaskError("mesh has no vertices")
    idx = rng.choice(nv, size=n, replace=nv < n)
    return mesh.vertices[idx].astype(np.float64)


def cloud_normalization(points: PointCloud) -> CloudNormalization:
    """Bounding-box normalization: center on the box midpoint and scale all
    axes by the single largest half-extent. Degenerate clouds (zero extent
    on every axis) map to the origin."""
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3 or p.shape[0] < 1:
        raise ValueError(f"expected (N, 3) points with N >= 1, got {p.shape}")
    lo = p.min(axis=0)
    hi = p.max(axis=0)
    center = (lo + hi) / 2.0
    half = float((hi - lo).max()) / 2.0
    if half == 0.0:
        return CloudNormalization(center=center, scale=1.0)
    return CloudNormalization(center=center, scale=half)


def normalize_cloud(points: PointCloud) -> PointCloud:
    """Map a cloud into [-1, 1]^3 (shared scale across axes)."""
    return cloud_normalization(points).apply(np.asarray(points, np.float64))


def radius_graph(points: PointCloud, r: float,
                 max_degree: int = 32) -> SpatialGraph:
    """Link points within Euclidean distance r (self-loops excluded).

    Each node keeps at most its max_degree nearest in-radius neighbors
    (ties broken by lower index); a link survives only if both endpoints
    keep each other, so the edge set stays symmetric under the cap.
    """
    if r <= 0:
        raise ValueError(f"radius must be positive, got {r}")
    if max_degree < 1:
        raise ValueError(f"max_degree must be >= 1, got {max_degree}")
    p = np.asarray(points, dtype=np.float64)
    n = p.shape[0]
    diff = p[:, None, :] - p[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    r2 = float(r) * float(r)

    kept: list[set] = []
    order_key = np.arange(n)
    for i in range(n):
        cand = np.nonzero((d2[i] <= r2) & (order_key != i))[0]
        if cand.size > max_degree:
            sel = np.lexsort((cand, d2[i, cand]))[:max_degree]
            cand = cand[sel]
        kept.append(set(cand.tolist()))

    src_list: list[int] = []
    dst_list: list[int] = []
    for i in range(n):
        for j in sorted(kept[i]):
            if i in kept[j]:
                src_list.append(j)
                dst_list.append(i)
    src = np.asarray(src_list, dtype=np.intp)
    dst = np.asarray(dst_list, dtype=np.intp)
    efeat = (p[src] - p[dst]) if src.size else np.zeros((0, 3))
    return SpatialGraph(points=p, node_features=p.copy(),
                        src=src, dst=dst, edge_features=efeat)


def fps(points: PointCloud, ratio: float, start: int = 0) -> FpsSelection:
    """Greedy farthest-point sampling of ceil(ratio * N) points.

    Repeatedly picks the unchosen point with the largest minimum (squared)
    distance to the chosen set, ties broken by lowest index.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    p = np.asarray(points, dtype=np.float64)
    n = p.shape[0]
    if not 0 <= start < n:
        raise IndexError(f"start index {start} out of range for {n} points")
    k = math.ceil(ratio * n)
    chosen = np.empty(k, dtype=np.intp)
    chosen[0] = start
    mind = ((p - p[start]) ** 2).sum(axis=1)
    mind[start] = -1.0  # sentinel: never re-pick a chosen point
    for step in range(1, k):
        nxt = int(np.argmax(mind))
        chosen[step] = nxt
        d2 = ((p - p[nxt]) ** 2).sum(axis=1)
        np.minimum(mind, d2, out=mind)
        mind[nxt] = -1.0
    return FpsSelection(indices=chosen, start=start)


def geometric_start(points: PointCloud) -> int:
    """Index of the point farthest from the cloud centroid (ties to the
    lowest index).  Depends on the point set, not its ordering, so using
    it as the fps start makes pooling order-insensitive up to ties."""
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2 or len(p) == 0:
        raise ValueError("need a non-empty (N, 3) cloud")
    d2 = ((p - p.mean(axis=0)) ** 2).sum(axis=1)
    return int(np.argmax(d2))


def pool_cloud(points: PointCloud, node_features, selection: FpsSelection):
    """Keep the selected points and feature rows, in selection order.

    node_features may be a numpy array or an autograd Tensor; gradient
    flows through the Tensor path.
    """
    idx = selection.indices
    n = points.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError("selection indices out of range for cloud")
    pooled_points = points[idx]
    if isinstance(node_features, Tensor):
        return pooled_points, index_select(node_features, idx, axis=0)
    return pooled_points, np.asarray(node_features)[idx]


# ---------------------------------------------------------------------------
# File exports
# ---------------------------------------------------------------------------

def write_mesh_off(mesh: SurfaceMesh, path) -> None:
    """ASCII OFF: counts, vertex coordinates (x y z), then index triples."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("OFF\n")
        fh.write(f"{len(mesh.vertices)} {len(mesh.triangles)} 0\n")
        for v in mesh.vertices:
            fh.write(f"{float(v[2])!r} {float(v[1])!r} {float(v[0])!r}\n")
        for t in mesh.triangles:
            fh.write(f"3 {int(t[0])} {int(t[1])} {int(t[2])}\n")


def write_cloud_csv(points: PointCloud, path,
                    importance: np.ndarray | None = None) -> None:
    """CSV export with header x,y,z and an optional importance column."""
    with open(path, "w", encoding="ascii") as fh:
        if importance is None:
            fh.write("x,y,z\n")
            for p in points:
                fh.write(f"{float(p[2])!r},{float(p[1])!r},"
                         f"{float(p[0])!r}\n")
        else:
            if len(importance) != len(points):
                raise ValueError("importance length does not match points")
            fh.write("x,y,z,importance\n")
            for p, w in zip(points, importance):
                fh.write(f"{float(p[2])!r},{float(p[1])!r},"
                         f"{float(p[0])!r},{float(w)!r}\n")
