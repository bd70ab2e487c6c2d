"""The two classifier branches and their parameter state.

Image branch: four [conv3d -> batchnorm -> relu -> maxpool] stages over a
masked 4-channel crop, then FC(256) -> FC(128) -> FC(1).  Geometry branch:
four edge-conditioned graph convolution stages over a surface point cloud
(radius graph per stage, farthest-point pooling at ratio 0.5), a global
max readout, then the same FC head.  Both heads expose the 128-d
activation before the final FC as the branch latent, and the sigmoid of
the final FC as the branch probability.

The graph convolution computes x_i' = W x_i + sum_{j in N(i)} x_j H(e_ij)
where H maps the 3-d edge offset through a one-hidden-layer MLP (width 32,
batchnorm on the hidden layer) to an F_in x F_out matrix.  The per-edge
matrix product is evaluated in a reassociated form: the row-wise outer
product of the MLP hidden vector with x_j is contracted against a fixed
rearrangement of the output-layer weights.  That avoids materializing the
(E, F_in*F_out) matrix batch and is algebraically identical; tests compare
it against a direct per-edge evaluation.

Graph structure depends only on the input cloud, never on parameters, so
the per-sample hierarchy of graphs and poolings can be built once and
reused across epochs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from . import geometry as geo

__all__ = [
    "CnnConfig", "GnnConfig", "BranchOutput", "ModelState",
    "GraphLevel", "GraphHierarchy", "CheckpointError",
    "CheckpointVersionError", "CheckpointFormatError",
    "init_params", "cnn_forward", "pointconv_layer", "build_hierarchy",
    "gnn_forward", "save_state", "load_state",
]

CHECKPOINT_VERSION = 1
LATENT_WIDTH = 128
POINT_FEATURES = 3


class CheckpointError(ValueError):
    """Base class for checkpoint file problems."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an incompatible format version."""


class CheckpointFormatError(CheckpointError):
    """Manifest malformed or payload inconsistent with the manifest."""


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CnnConfig:
    in_channels: int = 4
    conv_widths: tuple = (8, 16, 32, 64)
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    pool_window: int = 2
    fc_widths: tuple = (256, 128, 1)
    dropout: float = 0.2
    crop_size: int = 32

    def __post_init__(self):
        object.__setattr__(self, "conv_widths", tuple(self.conv_widths))
        object.__setattr__(self, "fc_widths", tuple(self.fc_widths))
        if len(self.conv_widths) != 4:
            raise ValueError("image branch uses exactly 4 conv layers")
        if len(self.fc_widths) != 3 or self.fc_widths[-1] != 1:
            raise ValueError("image branch uses 3 FC layers ending in width 1")
        if self.fc_widths[1] != LATENT_WIDTH:
            raise ValueError(f"latent width must be {LATENT_WIDTH}")
        if self.kernel % 2 != 1 or self.kernel < 1:
            raise ValueError("kernel size must be odd")
        if self.stride != 1 or self.padding != self.kernel // 2:
            raise ValueError("conv stages must preserve spatial extent")
        if self.pool_window < 2:
            raise ValueError("pool window must be at least 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.crop_size < 2 or self.in_channels < 1:
            raise ValueError("crop size must be >= 2 and channels >= 1")

    def spatial_sizes(self) -> list:
        """Spatial extent after each conv/pool stage (pool skipped when
        the extent is smaller than the window)."""
        s = self.crop_size
        sizes = [s]
        for _ in self.conv_widths:
            if s >= self.pool_window:
                s = s // self.pool_window
            sizes.append(s)
        return sizes

    def flat_features(self) -> int:
        return self.conv_widths[-1] * self.spatial_sizes()[-1] ** 3


@dataclass(frozen=True)
class GnnConfig:
    radii: tuple = (0.25, 0.5, 0.75, 1.0)
    fps_ratio: float = 0.5
    node_widths: tuple = (16, 32, 64, 128)
    edge_hidden: int = 32
    fc_widths: tuple = (256, 128, 1)
    dropout: float = 0.2
    max_degree: int = 32

    def __post_init__(self):
        object.__setattr__(self, "radii", tuple(float(r) for r in self.radii))
        object.__setattr__(self, "node_widths", tuple(self.node_widths))
        object.__setattr__(self, "fc_widths", tuple(self.fc_widths))
        if len(self.radii) != 4 or len(self.node_widths) != 4:
            raise ValueError("geometry branch uses exactly 4 conv layers")
        if any(b <= a for a, b in zip(self.radii, self.radii[1:])) \
                or self.radii[0] <= 0:
            raise ValueError("radii must be positive and strictly increasing")
        if self.node_widths[-1] != LATENT_WIDTH:
            raise ValueError(f"final node width must be {LATENT_WIDTH}")
        if len(self.fc_widths) != 3 or self.fc_widths[-1] != 1:
            raise ValueError("geometry branch uses 3 FC layers ending in 1")
        if self.fc_widths[1] != LATENT_WIDTH:
            raise ValueError(f"latent width must be {LATENT_WIDTH}")
        if not 0.0 < self.fps_ratio <= 1.0:
            raise ValueError("fps_ratio must lie in (0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.edge_hidden < 1 or self.max_degree < 1:
            raise ValueError("edge_hidden and max_degree must be positive")

    def layer_widths(self) -> list:
        """(F_in, F_out) per graph conv layer."""
        ins = (POINT_FEATURES,) + self.node_widths[:-1]
        return list(zip(ins, self.node_widths))


@dataclass
class BranchOutput:
    """Per-sample probability and 128-d latent, as autograd tensors."""

    probability: ag.Tensor      # (B,)
    latent: ag.Tensor           # (B, 128)


# ---------------------------------------------------------------------------
# Model state
# ---------------------------------------------------------------------------

@dataclass
class ModelState:
    cnn: CnnConfig
    gnn: GnnConfig
    seed: int
    params: dict                # name -> Tensor (requires_grad)
    running: dict               # name -> np.ndarray (batchnorm stats)
    moments: dict = field(default_factory=dict)   # optimizer state
    step: int = 0

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def astype(self, dtype) -> "ModelState":
        """Deep copy with every array cast to dtype."""
        return ModelState(
            cnn=self.cnn, gnn=self.gnn, seed=self.seed,
            params={k: ag.Tensor(v.data.astype(dtype), requires_grad=True)
                    for k, v in self.params.items()},
            running={k: v.astype(dtype) for k, v in self.running.items()},
            moments={k: v.astype(dtype) for k, v in self.moments.items()},
            step=self.step)


def _uniform(rng, shape, fan_in):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


def init_params(cnn: CnnConfig = None, gnn: GnnConfig = None,
                seed: int = 0) -> ModelState:
    """Fan-in-scaled uniform weights, zero biases, unit batchnorm."""
    cnn = cnn if cnn is not None else CnnConfig()
    gnn = gnn if gnn is not None else GnnConfig()
    rng = np.random.default_rng(seed)
    params: dict = {}
    running: dict = {}

    def weight(name, shape, fan_in):
        params[name] = ag.Tensor(_uniform(rng, shape, fan_in),
                                 requires_grad=True)

    def bias(name, width):
        params[name] = ag.Tensor(np.zeros(width), requires_grad=True)

    def bn(name, width):
        params[f"{name}.gamma"] = ag.Tensor(np.ones(width),
                                            requires_grad=True)
        params[f"{name}.beta"] = ag.Tensor(np.zeros(width),
                                           requires_grad=True)
        running[f"{name}.mean"] = np.zeros(width)
        running[f"{name}.var"] = np.ones(width)

    c_in = cnn.in_channels
    for i, c_out in enumerate(cnn.conv_widths, start=1):
        k = cnn.kernel
        weight(f"cnn.conv{i}.kernel", (c_out, c_in, k, k, k), c_in * k ** 3)
        bias(f"cnn.conv{i}.bias", c_out)
        bn(f"cnn.bn{i}", c_out)
        c_in = c_out
    f_in = cnn.flat_features()
    for j, f_out in enumerate(cnn.fc_widths, start=1):
        weight(f"cnn.fc{j}.weight", (f_out, f_in), f_in)
        bias(f"cnn.fc{j}.bias", f_out)
        f_in = f_out

    for i, (f_in, f_out) in enumerate(gnn.layer_widths(), start=1):
        weight(f"gnn.l{i}.root", (f_out, f_in), f_in)
        bias(f"gnn.l{i}.bias", f_out)
        weight(f"gnn.l{i}.edge1.weight", (gnn.edge_hidden, POINT_FEATURES),
               POINT_FEATURES)
        bias(f"gnn.l{i}.edge1.bias", gnn.edge_hidden)
        bn(f"gnn.l{i}.ebn", gnn.edge_hidden)
        weight(f"gnn.l{i}.edge2.weight", (f_in * f_out, gnn.edge_hidden),
               gnn.edge_hidden)
        bias(f"gnn.l{i}.edge2.bias", f_in * f_out)
    f_in = gnn.node_widths[-1]
    for j, f_out in enumerate(gnn.fc_widths, start=1):
        weight(f"gnn.fc{j}.weight", (f_out, f_in), f_in)
        bias(f"gnn.fc{j}.bias", f_out)
        f_in = f_out

    return ModelState(cnn=cnn, gnn=gnn, seed=seed, params=params,
                      running=running)


# ---------------------------------------------------------------------------
# Image branch
# ---------------------------------------------------------------------------

def _check_mode(mode):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


def _fc_head(x: ag.Tensor, prefix: str, dropout: float, state: ModelState,
             mode: str, rng, capture=None) -> BranchOutput:
    p = state.params
    h = ag.relu(ag.linear(x, p[f"{prefix}.fc1.weight"],
                          p[f"{prefix}.fc1.bias"]))
    if mode == "train" and dropout > 0.0:
        if rng is None:
            raise ValueError("train mode with dropout needs an rng")
        h = ag.dropout(h, dropout, mode, rng)
    z = ag.relu(ag.linear(h, p[f"{prefix}.fc2.weight"],
                          p[f"{prefix}.fc2.bias"]))
    logit = ag.linear(z, p[f"{prefix}.fc3.weight"], p[f"{prefix}.fc3.bias"])
    if capture is not None:
        capture["logit"] = logit
    prob = ag.sigmoid(ag.reshape(logit, (logit.shape[0],)))
    return BranchOutput(probability=prob, latent=z)


def _batchnorm_stage(x, name, state, mode):
    out, (rm, rv) = ag.batchnorm(
        x, state.params[f"{name}.gamma"], state.params[f"{name}.beta"],
        state.running[f"{name}.mean"], state.running[f"{name}.var"], mode)
    if mode == "train":
        state.running[f"{name}.mean"] = rm
        state.running[f"{name}.var"] = rv
    return out


def cnn_forward(volume, state: ModelState, mode: str = "eval",
                rng=None, capture: Optional[dict] = None) -> BranchOutput:
    """Run the image branch on one crop (4,s,s,s) or a batch (B,4,s,s,s).

    When a dict is passed as `capture` it receives the post-activation
    tensor of each conv stage (keys 1..4) and the pre-sigmoid logit (key
    "logit"), still attached to the graph, for attribution work.
    """
    _check_mode(mode)
    cfg = state.cnn
    x = volume.data if isinstance(volume, ag.Tensor) else np.asarray(volume)
    if x.ndim == 4:
        x = x[None]
    if x.ndim != 5 or x.shape[1] != cfg.in_channels:
        raise ag.ShapeError(f"expected (B,{cfg.in_channels},s,s,s) input, "
                            f"got {x.shape}")
    if x.shape[2:] != (cfg.crop_size,) * 3:
        raise ag.ShapeError(f"expected crop size {cfg.crop_size}, "
                            f"got {x.shape[2:]}")
    if not np.isfinite(x).all():
        raise ValueError("image branch input must be finite")
    t = ag.Tensor(x.astype(np.float64, copy=False))
    for i in range(1, 5):
        t = ag.conv3d(t, state.params[f"cnn.conv{i}.kernel"],
                      state.params[f"cnn.conv{i}.bias"],
                      stride=cfg.stride, padding=cfg.padding)
        t = _batchnorm_stage(t, f"cnn.bn{i}", state, mode)
        t = ag.relu(t)
        if capture is not None:
            capture[i] = t
        if t.shape[2] >= cfg.pool_window:
            t = ag.maxpool3d(t, cfg.pool_window)
    flat = ag.reshape(t, (t.shape[0], cfg.flat_features()))
    return _fc_head(flat, "cnn", cfg.dropout, state, mode, rng, capture)


# ---------------------------------------------------------------------------
# Geometry branch
# ---------------------------------------------------------------------------

@dataclass
class GraphLevel:
    """One stage's graph over the current cloud plus its pooling choice."""

    points: np.ndarray          # (N, 3)
    src: np.ndarray             # (E,)
    dst: np.ndarray             # (E,)
    edge_features: np.ndarray   # (E, 3) = points[src] - points[dst]
    keep: np.ndarray            # fps indices into the N points


@dataclass
class GraphHierarchy:
    levels: list                # one GraphLevel per conv layer


def build_hierarchy(cloud: np.ndarray, cfg: GnnConfig) -> GraphHierarchy:
    """Precompute graphs and poolings for every stage of one cloud."""
    points = np.asarray(cloud, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or len(points) == 0:
        raise ValueError(f"cloud must be non-empty (N,3), got {points.shape}")
    levels = []
    for radius in cfg.radii:
        graph = geo.radius_graph(points, radius, max_degree=cfg.max_degree)
        sel = geo.fps(points, cfg.fps_ratio,
                      start=geo.geometric_start(points))
        levels.append(GraphLevel(points=points, src=graph.src, dst=graph.dst,
                                 edge_features=graph.edge_features,
                                 keep=sel.indices))
        points = points[sel.indices]
    return GraphHierarchy(levels=levels)


_REARRANGE_CACHE: dict = {}


def _rearranged_edge_weights(layer: int, f_in: int, f_out: int, hidden: int,
                             state: ModelState):
    """Views of the edge-MLP output layer arranged for the reassociated
    contraction: V[(o),(k,f)] = W2[(f*f_out+o),k], Bw[o,f] = b2[f*f_out+o]."""
    key = (f_in, f_out, hidden)
    if key not in _REARRANGE_CACHE:
        pos = np.arange(f_out * hidden * f_in)
        o = pos // (hidden * f_in)
        k = (pos % (hidden * f_in)) // f_in
        f = pos % f_in
        w_perm = (f * f_out + o) * hidden + k
        pos2 = np.arange(f_out * f_in)
        b_perm = (pos2 % f_in) * f_out + pos2 // f_in
        _REARRANGE_CACHE[key] = (w_perm, b_perm)
    w_perm, b_perm = _REARRANGE_CACHE[key]
    w2 = state.params[f"gnn.l{layer}.edge2.weight"]
    b2 = state.params[f"gnn.l{layer}.edge2.bias"]
    flat = ag.reshape(w2, (w2.size,))
    v = ag.reshape(ag.index_select(flat, w_perm), (f_out, hidden * f_in))
    bw = ag.reshape(ag.index_select(b2, b_perm), (f_out, f_in))
    return v, bw


def _nnconv(feats: ag.Tensor, src, dst, edge_features, n_nodes: int,
            layer: int, f_in: int, f_out: int, state: ModelState,
            mode: str, edge_mask: Optional[ag.Tensor] = None) -> ag.Tensor:
    """Edge-conditioned convolution: root transform plus summed messages."""
    p = state.params
    out = ag.linear(feats, p[f"gnn.l{layer}.root"], p[f"gnn.l{layer}.bias"])
    n_edges = len(src)
    if n_edges == 0:
        return out
    hidden = state.gnn.edge_hidden
    e = ag.Tensor(np.asarray(edge_features, dtype=feats.data.dtype))
    h = ag.linear(e, p[f"gnn.l{layer}.edge1.weight"],
                  p[f"gnn.l{layer}.edge1.bias"])
    # single-edge batches carry no usable batch statistics
    bn_mode = mode if (mode == "eval" or n_edges >= 2) else "eval"
    h = _batchnorm_stage(h, f"gnn.l{layer}.ebn", state, bn_mode)
    h = ag.relu(h)
    v, bw = _rearranged_edge_weights(layer, f_in, f_out, hidden, state)
    xj = ag.index_select(feats, src, axis=0)
    outer = ag.row_outer(h, xj)
    msg = ag.add(ag.linear(outer, v), ag.linear(xj, bw))
    if edge_mask is not None:
        if edge_mask.shape != (n_edges,):
            raise ag.ShapeError(f"edge mask must have shape ({n_edges},), "
                                f"got {edge_mask.shape}")
        msg = ag.row_outer(ag.reshape(edge_mask, (n_edges, 1)), msg)
    return ag.add(out, ag.scatter_sum(msg, dst, n_nodes))


def pointconv_layer(cloud: np.ndarray, feats, layer: int, state: ModelState,
                    mode: str = "eval"):
    """One geometry stage on a single cloud: radius graph at the stage's
    radius, edge-conditioned conv, relu, then farthest-point pooling.
    Returns (pooled cloud, pooled features)."""
    _check_mode(mode)
    cfg = state.gnn
    if not 1 <= layer <= 4:
        raise ValueError("layer must lie in 1..4")
    points = np.asarray(cloud, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or len(points) == 0:
        raise ValueError(f"cloud must be non-empty (N,3), got {points.shape}")
    if not isinstance(feats, ag.Tensor):
        feats = ag.Tensor(np.asarray(feats, dtype=np.float64))
    f_in, f_out = cfg.layer_widths()[layer - 1]
    if feats.shape != (len(points), f_in):
        raise ag.ShapeError(f"expected features ({len(points)},{f_in}), "
                            f"got {feats.shape}")
    graph = geo.radius_graph(points, cfg.radii[layer - 1],
                             max_degree=cfg.max_degree)
    h = ag.relu(_nnconv(feats, graph.src, graph.dst, graph.edge_features,
                        len(points), layer, f_in, f_out, state, mode))
    sel = geo.fps(points, cfg.fps_ratio, start=geo.geometric_start(points))
    return geo.pool_cloud(points, h, sel)


def _as_cloud_batch(clouds):
    arr = np.asarray(clouds, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (B,N,3) or (N,3) clouds, got {arr.shape}")
    return arr


def gnn_forward(clouds, state: ModelState, mode: str = "eval", rng=None,
                hierarchies: Optional[Sequence[GraphHierarchy]] = None,
                edge_mask: Optional[ag.Tensor] = None) -> BranchOutput:
    """Run the geometry branch on one cloud (N,3) or a batch (B,N,3).

    All clouds in a batch must have the same point count N >= 16 so the
    four ratio-0.5 poolings leave at least one point.  Pass precomputed
    hierarchies to skip graph construction (clouds is then ignored).
    An edge_mask tensor (single-cloud batches only) scales each first-layer
    message, which is how the explainer probes the graph.
    """
    _check_mode(mode)
    cfg = state.gnn
    if hierarchies is None:
        batch = _as_cloud_batch(clouds)
        if batch.shape[1] < 16:
            raise ValueError(f"need at least 16 points, got {batch.shape[1]}")
        hierarchies = [build_hierarchy(c, cfg) for c in batch]
    hierarchies = list(hierarchies)
    b = len(hierarchies)
    if b == 0:
        raise ValueError("empty batch")
    if len(hierarchies[0].levels[0].points) < 16:
        raise ValueError("need at least 16 points")
    if edge_mask is not None and b != 1:
        raise ValueError("edge masking applies to single-cloud batches only")

    feats = ag.Tensor(np.concatenate(
        [h.levels[0].points for h in hierarchies], axis=0))
    for layer, (f_in, f_out) in enumerate(cfg.layer_widths(), start=1):
        lev = [h.levels[layer - 1] for h in hierarchies]
        n = len(lev[0].points)
        if any(len(v.points) != n for v in lev):
            raise ValueError("batched clouds must share point counts")
        src = np.concatenate([v.src + i * n for i, v in enumerate(lev)])
        dst = np.concatenate([v.dst + i * n for i, v in enumerate(lev)])
        efeat = np.concatenate([v.edge_features for v in lev], axis=0)
        h = ag.relu(_nnconv(feats, src, dst, efeat, b * n, layer,
                            f_in, f_out, state, mode,
                            edge_mask=edge_mask if layer == 1 else None))
        keep = np.concatenate([v.keep + i * n for i, v in enumerate(lev)])
        feats = ag.index_select(h, keep, axis=0)

    n_last = len(hierarchies[0].levels[-1].keep)
    grid = ag.reshape(feats, (b, n_last, cfg.node_widths[-1]))
    pooled = ag.reduce_max(grid, axis=1)
    return _fc_head(pooled, "gnn", cfg.dropout, state, mode, rng)


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def _entry_kind(state: ModelState):
    for name, t in state.params.items():
        yield name, "param", t.data
    for name, arr in state.running.items():
        yield name, "running", arr
    for name, arr in state.moments.items():
        yield name, "moment", arr


def save_state(state: ModelState, path) -> Path:
    """Write manifest JSON and f32 payload; returns the manifest path.

    Saving canonicalizes the live state to the serialized precision, so a
    saved state and its reload produce bit-identical forward passes.
    """
    path = Path(path)
    base = path.with_suffix("") if path.suffix == ".json" else path
    entries = []
    chunks = []
    for name, kind, arr in _entry_kind(state):
        arr32 = arr.astype("<f4")
        canon = arr32.astype(np.float64)
        if kind == "param":
            state.params[name].data = canon
        elif kind == "running":
            state.running[name] = canon
        else:
            state.moments[name] = canon
        entries.append({"name": name, "kind": kind,
                        "shape": list(arr.shape)})
        chunks.append(arr32.tobytes())
    manifest = {
        "version": CHECKPOINT_VERSION,
        "seed": state.seed,
        "step": state.step,
        "cnn": _cfg_dict(state.cnn),
        "gnn": _cfg_dict(state.gnn),
        "entries": entries,
    }
    manifest_path = base.with_suffix(".json")
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    base.with_suffix(".bin").write_bytes(b"".join(chunks))
    return manifest_path


def _cfg_dict(cfg):
    return {k: list(v) if isinstance(v, tuple) else v
            for k, v in asdict(cfg).items()}


def _cfg_from_dict(cls, d, label):
    fields = {f for f in cls.__dataclass_fields__}
    if not isinstance(d, dict) or set(d) != fields:
        raise CheckpointFormatError(f"bad {label} config block")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"bad {label} config: {exc}") from exc


def load_state(path) -> ModelState:
    path = Path(path)
    manifest_path = path if path.suffix == ".json" \
        else path.with_suffix(".json")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointFormatError(f"unparseable manifest: {exc}") from exc
    if not isinstance(manifest, dict) or "version" not in manifest:
        raise CheckpointFormatError("manifest missing version")
    if manifest["version"] != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {manifest['version']} unsupported, "
            f"expected {CHECKPOINT_VERSION}")
    required = {"version", "seed", "step", "cnn", "gnn", "entries"}
    if set(manifest) != required:
        raise CheckpointFormatError(
            f"manifest must carry exactly the keys {sorted(required)}")
    cnn = _cfg_from_dict(CnnConfig, manifest["cnn"], "image branch")
    gnn = _cfg_from_dict(GnnConfig, manifest["gnn"], "geometry branch")

    payload = manifest_path.with_suffix(".bin").read_bytes()
    expected = sum(int(np.prod(e["shape"])) for e in manifest["entries"]) * 4
    if len(payload) != expected:
        raise CheckpointFormatError(
            f"payload holds {len(payload)} bytes, manifest promises "
            f"{expected}")
    state = ModelState(cnn=cnn, gnn=gnn, seed=int(manifest["seed"]),
                       params={}, running={}, moments={},
                       step=int(manifest["step"]))
    offset = 0
    for entry in manifest["entries"]:
        if set(entry) != {"name", "kind", "shape"}:
            raise CheckpointFormatError(f"bad manifest entry: {entry}")
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count,
                            offset=offset).reshape(shape)
        offset += count * 4
        value = arr.astype(np.float64)
        if entry["kind"] == "param":
            state.params[entry["name"]] = ag.Tensor(value,
                                                    requires_grad=True)
        elif entry["kind"] == "running":
            state.running[entry["name"]] = value
        elif entry["kind"] == "moment":
            state.moments[entry["name"]] = value
        else:
            raise CheckpointFormatError(
                f"unknown entry kind {entry['kind']!r}")
    return state
