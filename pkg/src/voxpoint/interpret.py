"""Attribution for both branches.

Image branch: gradient-weighted class activation maps over a chosen conv
stage, upsampled to the crop and restricted to the tumor mask, with a
projection that carries surface-voxel importance onto the point cloud.
Geometry branch: a learned per-edge mask on the first-layer graph, found
by gradient descent against the model's own prediction plus sparsity and
entropy penalties; point importance is the max over incident edges.
Threshold reports group the highlighted points into single-linkage
clusters at the 0.5 and 0.8 levels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.sparse.csgraph import connected_components
from scipy.sparse import csr_matrix

from . import autograd as ag
from . import collab as co
from . import data as vdata
from . import geometry as geo
from . import model as vmodel

__all__ = [
    "AttributionMap", "ExplainResult", "ExplainerDivergenceError",
    "minmax_normalize", "cam_from_activation", "upsample_trilinear",
    "grad_cam_3d", "project_cam_to_points", "gnn_explain",
    "threshold_report", "write_cam_volume", "write_point_importance",
    "write_cluster_report",
]

KINDS = ("voxel", "point", "edge")
DEFAULT_THRESHOLDS = (0.5, 0.8)
LINK_DISTANCE = 0.25
MASK_INIT = 0.9


class ExplainerDivergenceError(RuntimeError):
    """The edge-mask optimization produced a non-finite loss."""


@dataclass
class AttributionMap:
    """Importance values in [0, 1] for voxels, points or edges."""

    kind: str
    values: np.ndarray
    sample_id: str = ""
    model_ref: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        self.values = np.asarray(self.values, dtype=np.float64)
        want = 3 if self.kind == "voxel" else 1
        if self.values.ndim != want:
            raise ValueError(f"{self.kind} map must be {want}-d, "
                             f"got shape {self.values.shape}")
        if self.values.size and not np.isfinite(self.values).all():
            raise ValueError("importance values must be finite")
        if self.values.size and (self.values.min() < 0.0
                                 or self.values.max() > 1.0):
            raise ValueError("importance values must lie in [0, 1]")


def minmax_normalize(values: np.ndarray) -> np.ndarray:
    """Affine map onto [0, 1]; an all-zero field stays zero and any other
    constant field maps to ones."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return v.copy()
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return np.zeros_like(v) if hi == 0.0 else np.ones_like(v)
    return (v - lo) / (hi - lo)


def _model_ref(state: vmodel.ModelState) -> str:
    return f"seed={state.seed},step={state.step}"


# ---------------------------------------------------------------------------
# Image-branch attribution
# ---------------------------------------------------------------------------

def cam_from_activation(activation: np.ndarray,
                        gradient: np.ndarray) -> np.ndarray:
    """Channel weights = spatial mean of the gradient; map = relu of the
    weighted activation sum.  Inputs are (K, d, d, d)."""
    act = np.asarray(activation, dtype=np.float64)
    grad = np.asarray(gradient, dtype=np.float64)
    if act.shape != grad.shape or act.ndim != 4:
        raise ValueError("activation and gradient must share a (K,d,d,d) "
                         f"shape, got {act.shape} and {grad.shape}")
    alpha = grad.mean(axis=(1, 2, 3))
    return np.maximum(np.einsum("k,kxyz->xyz", alpha, act), 0.0)


def upsample_trilinear(volume: np.ndarray, size: int) -> np.ndarray:
    """Trilinear resampling of a cubic field with voxel-center alignment."""
    v = np.asarray(volume, dtype=np.float64)
    if v.ndim != 3:
        raise ValueError(f"expected a 3-d field, got shape {v.shape}")
    if size < 1:
        raise ValueError("size must be positive")
    coords = [np.clip((np.arange(size) + 0.5) * (d / size) - 0.5, 0, d - 1)
              for d in v.shape]
    grid = np.meshgrid(*coords, indexing="ij")
    return ndimage.map_coordinates(v, [g.reshape(-1) for g in grid],
                                   order=1).reshape(size, size, size)


def grad_cam_3d(state: vmodel.ModelState, sample: vdata.VolumeSample,
                target_layer: Optional[int] = None,
                target_class: int = 1) -> AttributionMap:
    """Class-evidence map for the image branch, on the sample's crop grid.

    The gradient of the chosen class's logit is taken at one conv stage's
    post-activation map (default: the last stage); the result is upsampled
    to the crop, zeroed outside the tumor, and min-max normalized.
    """
    n_layers = len(state.cnn.conv_widths)
    layer = n_layers if target_layer is None else target_layer
    if not 1 <= layer <= n_layers:
        raise ValueError(f"target_layer must lie in 1..{n_layers}")
    if target_class not in (0, 1):
        raise ValueError("target_class must be 0 or 1")

    size = state.cnn.crop_size
    crop = vdata.extract_crop(sample, size)
    grid = vdata.crop_grid(sample, size)

    capture: dict = {}
    vmodel.cnn_forward(crop[None].astype(np.float64), state, "eval",
                       capture=capture)
    logit = capture["logit"]
    score = logit if target_class == 1 else ag.mul(logit, -1.0)
    ag.zero_grads(state.params.values())
    score.backward()

    act = capture[layer]
    if act.grad is None:
        cam_small = np.zeros(act.shape[2:])
    else:
        cam_small = cam_from_activation(act.data[0], act.grad[0])
    cam = upsample_trilinear(cam_small, size)
    cam *= grid.mask
    return AttributionMap(kind="voxel", values=minmax_normalize(cam),
                          sample_id=sample.sample_id,
                          model_ref=_model_ref(state))


def project_cam_to_points(cam: AttributionMap, cloud: np.ndarray,
                          transform: geo.CloudNormalization,
                          grid: vdata.CropGrid) -> AttributionMap:
    """Carry voxel importance onto a normalized cloud.

    Each point is mapped back through the cloud normalization into volume
    voxel coordinates and takes the value of the nearest crop voxel
    (ties: lowest index, axis by axis).
    """
    if cam.kind != "voxel":
        raise ValueError(f"need a voxel map, got kind {cam.kind!r}")
    if transform is None or grid is None:
        raise ValueError("projection needs the cloud normalization and "
                         "crop grid metadata")
    p = np.asarray(cloud, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3:
        raise ValueError(f"expected (N,3) cloud, got shape {p.shape}")
    volume_coords = transform.invert(p)
    idx = []
    for axis in range(3):
        centers = grid.origin[axis] + grid.indices[axis]
        dist = np.abs(centers[None, :] - volume_coords[:, axis][:, None])
        idx.append(np.argmin(dist, axis=1))
    values = cam.values[idx[0], idx[1], idx[2]]
    return AttributionMap(kind="point", values=values,
                          sample_id=cam.sample_id, model_ref=cam.model_ref)


# ---------------------------------------------------------------------------
# Geometry-branch attribution
# ---------------------------------------------------------------------------

@dataclass
class ExplainResult:
    """Learned first-layer edge masks and the point importance they imply."""

    points: AttributionMap
    edges: AttributionMap
    src: np.ndarray
    dst: np.ndarray
    raw_edge_values: np.ndarray     # sigmoid masks before normalization
    predicted_label: int
    losses: list = field(default_factory=list)


def _binary_entropy(mask: ag.Tensor) -> ag.Tensor:
    m = ag.clamp(mask, 1e-7, 1.0 - 1e-7)
    one_minus = ag.add(ag.mul(m, -1.0), 1.0)
    ent = ag.add(ag.mul(m, ag.log(m)),
                 ag.mul(one_minus, ag.log(one_minus)))
    return ag.mul(ag.reduce_sum(ent), -1.0)


def gnn_explain(state: vmodel.ModelState, cloud: np.ndarray,
                steps: int = 200, size_weight: float = 0.005,
                entropy_weight: float = 0.1, lr: float = 0.01,
                rng=None, sample_id: str = "") -> ExplainResult:
    """Fit per-edge masks that keep the geometry branch's own prediction.

    Masks start at sigmoid(theta) = 0.9 and follow Adam on
    BCE(predicted label | masked forward) + size and entropy penalties.
    The rng argument is accepted for interface stability; the
    optimization itself is deterministic.
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if size_weight < 0 or entropy_weight < 0:
        raise ValueError("penalty weights must be non-negative")
    hierarchy = vmodel.build_hierarchy(np.asarray(cloud, np.float64),
                                       state.gnn)
    level = hierarchy.levels[0]
    n_points, n_edges = len(level.points), len(level.src)
    ref = _model_ref(state)

    base = vmodel.gnn_forward(None, state, "eval", hierarchies=[hierarchy])
    predicted = int(base.probability.data[0] >= 0.5)

    if n_edges == 0:
        empty = AttributionMap(kind="edge", values=np.zeros(0),
                               sample_id=sample_id, model_ref=ref)
        pts = AttributionMap(kind="point", values=np.zeros(n_points),
                             sample_id=sample_id, model_ref=ref)
        return ExplainResult(points=pts, edges=empty, src=level.src,
                             dst=level.dst, raw_edge_values=np.zeros(0),
                             predicted_label=predicted, losses=[])

    theta0 = math.log(MASK_INIT / (1.0 - MASK_INIT))
    theta = ag.Tensor(np.full(n_edges, theta0), requires_grad=True)
    opt_state = vmodel.ModelState(cnn=state.cnn, gnn=state.gnn, seed=0,
                                  params={"edge_mask": theta}, running={})
    y = np.array([float(predicted)])
    losses = []
    for t in range(1, steps + 1):
        ag.zero_grads([theta])
        mask = ag.sigmoid(theta)
        out = vmodel.gnn_forward(None, state, "eval",
                                 hierarchies=[hierarchy], edge_mask=mask)
        loss = co.bce_single_loss(y, out.probability)
        loss = ag.add(loss, ag.mul(ag.reduce_sum(mask), float(size_weight)))
        loss = ag.add(loss, ag.mul(_binary_entropy(mask),
                                   float(entropy_weight)))
        value = loss.item()
        if not np.isfinite(value):
            raise ExplainerDivergenceError(
                f"non-finite explainer loss at step {t}")
        losses.append(value)
        loss.backward()
        co.adam_step(opt_state, {"edge_mask": theta.grad}, t=t, lr=lr)

    raw = 1.0 / (1.0 + np.exp(-theta.data))
    importance = np.zeros(n_points)
    np.maximum.at(importance, level.src, raw)
    np.maximum.at(importance, level.dst, raw)
    edges = AttributionMap(kind="edge", values=minmax_normalize(raw),
                           sample_id=sample_id, model_ref=ref)
    points = AttributionMap(kind="point",
                            values=minmax_normalize(importance),
                            sample_id=sample_id, model_ref=ref)
    return ExplainResult(points=points, edges=edges, src=level.src,
                         dst=level.dst, raw_edge_values=raw,
                         predicted_label=predicted, losses=losses)


# ---------------------------------------------------------------------------
# Threshold clusters
# ---------------------------------------------------------------------------

def threshold_report(points: AttributionMap, cloud: np.ndarray,
                     thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
                     link_distance: float = LINK_DISTANCE) -> list:
    """Single-linkage clusters of the points above each threshold.

    Returns one record per threshold: the selected indices grouped into
    clusters, each with its size and centroid in cloud coordinates.
    """
    if points.kind != "point":
        raise ValueError(f"need a point map, got kind {points.kind!r}")
    p = np.asarray(cloud, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3 or len(p) != len(points.values):
        raise ValueError("cloud must be (N,3) with one point per value")
    if link_distance <= 0:
        raise ValueError("link distance must be positive")

    report = []
    for threshold in thresholds:
        selected = np.flatnonzero(points.values > threshold)
        clusters = []
        if selected.size:
            sub = p[selected]
            diff = sub[:, None, :] - sub[None, :, :]
            close = (diff ** 2).sum(axis=2) <= link_distance ** 2
            n_comp, labels = connected_components(
                csr_matrix(close), directed=False)
            for comp in range(n_comp):
                members = selected[labels == comp]
                clusters.append({
                    "size": int(members.size),
                    "centroid": p[members].mean(axis=0).tolist(),
                    "indices": members.tolist(),
                })
            clusters.sort(key=lambda c: c["indices"][0])
        report.append({"threshold": float(threshold), "clusters": clusters})
    return report


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------

def write_cam_volume(cam: AttributionMap, directory) -> Path:
    """Single-channel binary volume next to a JSON header, named after the
    sample; same byte layout as cohort volumes but without mask bytes."""
    if cam.kind != "voxel":
        raise ValueError(f"need a voxel map, got kind {cam.kind!r}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    name = cam.sample_id or "cam"
    header = {
        "id": name,
        "dims": list(cam.values.shape),
        "channels": 1,
        "dtype": "f32-le",
    }
    header_path = directory / f"{name}.cam.json"
    header_path.write_text(json.dumps(header, indent=2) + "\n")
    payload = cam.values.astype("<f4").tobytes()
    (directory / f"{name}.cam.bin").write_bytes(payload)
    return header_path


def write_point_importance(path, cloud: np.ndarray,
                           points: AttributionMap) -> Path:
    """CSV rows of x,y,z,importance for every point."""
    if points.kind != "point":
        raise ValueError(f"need a point map, got kind {points.kind!r}")
    p = np.asarray(cloud, dtype=np.float64)
    if len(p) != len(points.values):
        raise ValueError("cloud and importance lengths differ")
    path = Path(path)
    geo.write_cloud_csv(p, path, importance=points.values)
    return path


def write_cluster_report(path, report: list) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report, indent=2) + "\n")
    return path
