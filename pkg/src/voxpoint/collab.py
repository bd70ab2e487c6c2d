"""Collaborative objective, optimizer, training loop and evaluation.

The objective couples the two branches: the sum of both branches' binary
cross-entropies plus a weighted symmetric KL divergence between their
128-d latents.  Latents are turned into distributions by softmax before
the KL terms; applied to raw latents the textbook expression can go
negative, so the normalized reading keeps the penalty a true divergence.

Training is plain minibatch Adam (decoupled weight decay, linear learning
rate decay) with early stopping on validation loss and restoration of the
best-scoring state.  Sample preparation (crop extraction and the mesh ->
cloud -> graph hierarchy) happens once up front; graphs depend only on
the inputs, so they are reused across every epoch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from . import data as vdata
from . import geometry as geo
from . import model as vmodel

__all__ = [
    "LossBreakdown", "TrainConfig", "EvalReport", "PreparedSample",
    "NonFiniteGradientError", "bce_pair_loss", "bce_single_loss",
    "kl_pair_loss", "total_loss", "adam_step", "lr_at", "prepare_samples",
    "train", "confusion_report", "evaluate", "report_to_dict",
    "mean_report", "cross_validate",
    "ablate",
]

PROB_CLAMP = 1e-7
FUSIONS = ("average", "cnn_only", "gnn_only")
BRANCHES = ("collab", "cnn", "gnn")


class NonFiniteGradientError(RuntimeError):
    """A gradient went NaN or infinite; carries the parameter name."""


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

@dataclass
class LossBreakdown:
    """Differentiable loss components; total = bce + kl_weight * kl."""

    bce: ag.Tensor
    kl: ag.Tensor
    kl_weight: float
    total: ag.Tensor

    def floats(self) -> dict:
        return {"bce": float(self.bce.item()), "kl": float(self.kl.item()),
                "total": float(self.total.item())}


def _as_prob_tensor(x) -> ag.Tensor:
    if not isinstance(x, ag.Tensor):
        x = ag.Tensor(np.atleast_1d(np.asarray(x, dtype=np.float64)))
    if x.data.ndim == 0:
        x = ag.reshape(x, (1,))
    return x


def bce_single_loss(y, x: ag.Tensor) -> ag.Tensor:
    """Mean over samples of -[y log x + (1-y) log(1-x)], x clamped."""
    x = _as_prob_tensor(x)
    yv = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if yv.shape != x.shape:
        raise ag.ShapeError(f"labels {yv.shape} do not match "
                            f"probabilities {x.shape}")
    if not np.isin(yv, (0.0, 1.0)).all():
        raise ValueError("labels must be 0 or 1")
    p = ag.clamp(x, PROB_CLAMP, 1.0 - PROB_CLAMP)
    one_minus = ag.add(ag.mul(p, -1.0), 1.0)
    ll = ag.add(ag.mul(ag.log(p), ag.Tensor(yv)),
                ag.mul(ag.log(one_minus), ag.Tensor(1.0 - yv)))
    return ag.mul(ag.reduce_mean(ll), -1.0)


def bce_pair_loss(y, x_u, x_v) -> ag.Tensor:
    """Sum of the two branch cross-entropies (mean over a batch)."""
    return ag.add(bce_single_loss(y, _as_prob_tensor(x_u)),
                  bce_single_loss(y, _as_prob_tensor(x_v)))


def _as_latent_tensor(z) -> ag.Tensor:
    if not isinstance(z, ag.Tensor):
        z = ag.Tensor(np.asarray(z, dtype=np.float64))
    if z.data.ndim == 1:
        z = ag.reshape(z, (1, z.shape[0]))
    if z.data.ndim != 2:
        raise ag.ShapeError(f"latent must be (B, F) or (F,), got {z.shape}")
    return z


def _kl_direction(lp: ag.Tensor, lq: ag.Tensor) -> ag.Tensor:
    # sum_f p * (log p - log q), then mean over the batch
    diff = ag.add(lp, ag.mul(lq, -1.0))
    per = ag.reduce_sum(ag.mul(ag.exp(lp), diff), axis=1)
    return ag.reduce_mean(per)


def kl_pair_loss(z_u, z_v) -> ag.Tensor:
    """Symmetric KL between softmax-normalized latents, batch mean."""
    zu, zv = _as_latent_tensor(z_u), _as_latent_tensor(z_v)
    if zu.shape != zv.shape:
        raise ag.ShapeError(f"latent shapes differ: {zu.shape} vs {zv.shape}")
    lp = ag.log_softmax(zu, axis=1)
    lq = ag.log_softmax(zv, axis=1)
    return ag.add(_kl_direction(lp, lq), _kl_direction(lq, lp))


def total_loss(y, out_u: vmodel.BranchOutput, out_v: vmodel.BranchOutput,
               kl_weight: float = 1.0) -> LossBreakdown:
    """Dual cross-entropy plus weighted symmetric latent KL."""
    if kl_weight < 0:
        raise ValueError("kl_weight must be non-negative")
    bce = bce_pair_loss(y, out_u.probability, out_v.probability)
    kl = kl_pair_loss(out_u.latent, out_v.latent)
    return LossBreakdown(bce=bce, kl=kl, kl_weight=float(kl_weight),
                         total=ag.add(bce, ag.mul(kl, float(kl_weight))))


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr_start: float = 0.001
    lr_end: float = 0.0001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    dropout: Optional[float] = None   # overrides both branch configs if set
    patience: int = 20
    batch_size: int = 8
    kl_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2 for batchnorm")
        if self.kl_weight < 0 or self.weight_decay < 0:
            raise ValueError("kl_weight and weight_decay must be >= 0")
        if self.dropout is not None and not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear interpolation from lr_start (epoch 0) to lr_end (last)."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside 0..{cfg.epochs - 1}")
    if cfg.epochs == 1:
        return cfg.lr_start
    frac = epoch / (cfg.epochs - 1)
    return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * frac


def adam_step(state: vmodel.ModelState, grads: dict, t: int, lr: float,
              weight_decay: float = 0.0, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> vmodel.ModelState:
    """One Adam update with bias correction at step t (1-based).

    Weight decay is decoupled: theta <- theta - lr*wd*theta happens before
    the moment update.  Only parameters named in grads move.  Moments live
    in state.moments under "<name>.m" / "<name>.v".
    """
    if t < 1:
        raise ValueError("step t is 1-based")
    for name, g in grads.items():
        if name not in state.params:
            raise KeyError(f"unknown parameter {name!r}")
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(
                f"non-finite gradient in parameter {name!r}")
        p = state.params[name]
        if weight_decay:
            p.data = p.data - lr * weight_decay * p.data
        m = state.moments.get(f"{name}.m")
        v = state.moments.get(f"{name}.v")
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.moments[f"{name}.m"] = m
        state.moments[f"{name}.v"] = v
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    state.step = t
    return state


# ---------------------------------------------------------------------------
# Sample preparation
# ---------------------------------------------------------------------------

@dataclass
class PreparedSample:
    """Model-ready inputs for one volume: image crop plus graph pyramid."""

    sample_id: str
    label: int
    crop: np.ndarray                   # (4, s, s, s) float32
    cloud: np.ndarray                  # (n_points, 3) normalized
    hierarchy: vmodel.GraphHierarchy


def prepare_samples(samples: Sequence[vdata.VolumeSample],
                    cnn: vmodel.CnnConfig, gnn: vmodel.GnnConfig,
                    n_points: int = 512, seed: int = 0) -> list:
    """Crop, mesh, sample, normalize and graph every sample once.

    Point sampling draws from a per-sample stream derived from (seed,
    position), so preparation order does not leak across samples.
    """
    if n_points < 16:
        raise ValueError("need at least 16 points per cloud")
    out = []
    for i, sample in enumerate(samples):
        rng = np.random.default_rng([seed, i])
        mesh = geo.marching_cubes(sample.mask)
        cloud = geo.sample_point_cloud(mesh, n_points, rng)
        cloud = geo.normalize_cloud(cloud)
        out.append(PreparedSample(
            sample_id=sample.sample_id, label=sample.label,
            crop=vdata.extract_crop(sample, cnn.crop_size),
            cloud=cloud, hierarchy=vmodel.build_hierarchy(cloud, gnn)))
    return out


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    accuracy: float                    # percent
    sensitivity: float                 # percent
    specificity: float                 # percent
    tp: int
    fp: int
    tn: int
    fn: int
    ids: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    probabilities: list = field(default_factory=list)


def _percent(num: int, den: int) -> float:
    return 100.0 * num / den if den else 0.0


def _batches(n: int, size: int):
    """Index blocks of at most `size`, merging a trailing singleton into
    the previous block (train-mode batchnorm needs >= 2 rows)."""
    blocks = [list(range(i, min(i + size, n))) for i in range(0, n, size)]
    if len(blocks) > 1 and len(blocks[-1]) == 1:
        blocks[-2].extend(blocks.pop())
    return blocks


def _forward_probs(state, prepared, fusion, batch_size=32):
    probs = np.empty(len(prepared))
    for block in _batches(len(prepared), batch_size):
        chunk = [prepared[i] for i in block]
        p = np.zeros(len(chunk))
        if fusion in ("average", "cnn_only"):
            crops = np.stack([s.crop for s in chunk]).astype(np.float64)
            p_u = vmodel.cnn_forward(crops, state, "eval").probability.data
            p = p + p_u
        if fusion in ("average", "gnn_only"):
            p_v = vmodel.gnn_forward(
                None, state, "eval",
                hierarchies=[s.hierarchy for s in chunk]).probability.data
            p = p + p_v
        if fusion == "average":
            p = p / 2.0
        probs[block] = p
    return probs


def confusion_report(labels, probabilities, ids=None) -> EvalReport:
    """Threshold probabilities at 0.5 and report the confusion matrix."""
    labels = np.asarray(labels, dtype=int)
    probs = np.asarray(probabilities, dtype=np.float64)
    if labels.shape != probs.shape or labels.ndim != 1 or not len(labels):
        raise ValueError("need matching non-empty 1-d labels/probabilities")
    preds = (probs >= 0.5).astype(int)
    tp = int(np.sum((preds == 1) & (labels == 1)))
    fp = int(np.sum((preds == 1) & (labels == 0)))
    tn = int(np.sum((preds == 0) & (labels == 0)))
    fn = int(np.sum((preds == 0) & (labels == 1)))
    return EvalReport(
        accuracy=_percent(tp + tn, len(labels)),
        sensitivity=_percent(tp, tp + fn),
        specificity=_percent(tn, tn + fp),
        tp=tp, fp=fp, tn=tn, fn=fn,
        ids=list(ids) if ids is not None else [],
        labels=labels.tolist(),
        probabilities=probs.tolist())


def evaluate(state: vmodel.ModelState, prepared: Sequence[PreparedSample],
             fusion: str = "average") -> EvalReport:
    """Run the branches on prepared samples and score the fused output."""
    if fusion not in FUSIONS:
        raise ValueError(f"fusion must be one of {FUSIONS}, got {fusion!r}")
    if not prepared:
        raise ValueError("cannot evaluate an empty dataset")
    probs = _forward_probs(state, prepared, fusion)
    return confusion_report([s.label for s in prepared], probs,
                            ids=[s.sample_id for s in prepared])


def report_to_dict(report: EvalReport, decimals: int = 1) -> dict:
    """JSON-ready rendering with percent metrics at fixed precision."""
    return {
        "accuracy": round(report.accuracy, decimals),
        "sensitivity": round(report.sensitivity, decimals),
        "specificity": round(report.specificity, decimals),
        "confusion": {"tp": report.tp, "fp": report.fp,
                      "tn": report.tn, "fn": report.fn},
    }


def mean_report(reports: Sequence[EvalReport]) -> dict:
    """Arithmetic mean of the percent metrics across reports."""
    if not reports:
        raise ValueError("no reports to average")
    return {
        "accuracy": float(np.mean([r.accuracy for r in reports])),
        "sensitivity": float(np.mean([r.sensitivity for r in reports])),
        "specificity": float(np.mean([r.specificity for r in reports])),
    }


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def _branch_loss(y, batch, state, mode, rng, branch, kl_weight):
    if branch == "collab":
        out_u = vmodel.cnn_forward(
            np.stack([s.crop for s in batch]).astype(np.float64),
            state, mode, rng)
        out_v = vmodel.gnn_forward(None, state, mode, rng,
                                   hierarchies=[s.hierarchy for s in batch])
        return total_loss(y, out_u, out_v, kl_weight)
    if branch == "cnn":
        out = vmodel.cnn_forward(
            np.stack([s.crop for s in batch]).astype(np.float64),
            state, mode, rng)
    else:
        out = vmodel.gnn_forward(None, state, mode, rng,
                                 hierarchies=[s.hierarchy for s in batch])
    bce = bce_single_loss(y, out.probability)
    zero = ag.Tensor(np.zeros(()))
    return LossBreakdown(bce=bce, kl=zero, kl_weight=0.0, total=bce)


def _snapshot(state):
    return ({k: t.data.copy() for k, t in state.params.items()},
            {k: v.copy() for k, v in state.running.items()},
            {k: v.copy() for k, v in state.moments.items()},
            state.step)


def _restore(state, snap):
    params, running, moments, step = snap
    for k, v in params.items():
        state.params[k].data = v.copy()
    state.running = {k: v.copy() for k, v in running.items()}
    state.moments = {k: v.copy() for k, v in moments.items()}
    state.step = step


def _val_metrics(state, val, branch, kl_weight):
    fusion = {"collab": "average", "cnn": "cnn_only",
              "gnn": "gnn_only"}[branch]
    losses = []
    for block in _batches(len(val), 32):
        chunk = [val[i] for i in block]
        y = np.array([s.label for s in chunk], dtype=np.float64)
        lb = _branch_loss(y, chunk, state, "eval", None, branch, kl_weight)
        losses.append(lb.total.item() * len(chunk))
    report = evaluate(state, val, fusion)
    return sum(losses) / len(val), report.accuracy / 100.0


def train(fit: Sequence[PreparedSample], val: Sequence[PreparedSample],
          cnn: vmodel.CnnConfig = None, gnn: vmodel.GnnConfig = None,
          cfg: TrainConfig = None, branch: str = "collab"):
    """Train on `fit`, early-stop on `val` loss, restore the best state.

    branch selects the objective: "collab" couples both branches with the
    dual-BCE-plus-KL loss; "cnn" / "gnn" train one branch on its own BCE
    and never touch the other branch's parameters.

    Returns (state, history); history holds one record per epoch with
    {epoch, lr, train_bce, train_kl, val_loss, val_acc}.
    """
    cfg = cfg if cfg is not None else TrainConfig()
    cnn = cnn if cnn is not None else vmodel.CnnConfig()
    gnn = gnn if gnn is not None else vmodel.GnnConfig()
    if branch not in BRANCHES:
        raise ValueError(f"branch must be one of {BRANCHES}, got {branch!r}")
    if len(fit) < 2:
        raise ValueError("need at least 2 training samples")
    if not val:
        raise ValueError("need a non-empty validation set")
    if cfg.dropout is not None:
        cnn = replace(cnn, dropout=cfg.dropout)
        gnn = replace(gnn, dropout=cfg.dropout)

    state = vmodel.init_params(cnn, gnn, seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 0xC0FFEE])
    history = []
    best_loss = math.inf
    best_snap = _snapshot(state)
    stale = 0

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = rng.permutation(len(fit))
        bce_sum = kl_sum = 0.0
        for block in _batches(len(fit), cfg.batch_size):
            batch = [fit[order[i]] for i in block]
            y = np.array([s.label for s in batch], dtype=np.float64)
            ag.zero_grads(state.params.values())
            lb = _branch_loss(y, batch, state, "train", rng, branch,
                              cfg.kl_weight)
            lb.total.backward()
            grads = {name: t.grad for name, t in state.params.items()
                     if t.grad is not None}
            adam_step(state, grads, state.step + 1, lr, cfg.weight_decay,
                      cfg.beta1, cfg.beta2, cfg.eps)
            bce_sum += lb.bce.item() * len(batch)
            kl_sum += lb.kl.item() * len(batch)
        val_loss, val_acc = _val_metrics(state, val, branch, cfg.kl_weight)
        history.append({
            "epoch": epoch, "lr": lr,
            "train_bce": bce_sum / len(fit),
            "train_kl": kl_sum / len(fit),
            "val_loss": val_loss, "val_acc": val_acc,
        })
        if val_loss < best_loss:
            best_loss = val_loss
            best_snap = _snapshot(state)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    _restore(state, best_snap)
    return state, history


# ---------------------------------------------------------------------------
# Cross-validation and ablation
# ---------------------------------------------------------------------------

def _index_by_id(samples):
    return {s.sample_id: s for s in samples}


def _prep_split(fit_samples, val_samples, cnn, gnn, n_points, seed,
                balance=True):
    if balance:
        fit_samples = vdata.balance_minority(fit_samples)
    fit = prepare_samples(fit_samples, cnn, gnn, n_points, seed=seed)
    val = prepare_samples(val_samples, cnn, gnn, n_points, seed=seed + 1)
    return fit, val


def cross_validate(samples: Sequence[vdata.VolumeSample], k: int,
                   cnn: vmodel.CnnConfig = None,
                   gnn: vmodel.GnnConfig = None, cfg: TrainConfig = None,
                   n_points: int = 512, branch: str = "collab",
                   balance: bool = True):
    """Train one model per fold; returns (fold reports, mean metrics)."""
    cfg = cfg if cfg is not None else TrainConfig()
    cnn = cnn if cnn is not None else vmodel.CnnConfig()
    gnn = gnn if gnn is not None else vmodel.GnnConfig()
    by_id = _index_by_id(samples)
    folds = vdata.cv_folds([s.sample_id for s in samples], k, seed=cfg.seed)
    fusion = {"collab": "average", "cnn": "cnn_only",
              "gnn": "gnn_only"}[branch]
    reports = []
    for i, (fit_ids, val_ids) in enumerate(folds):
        fit, val = _prep_split([by_id[x] for x in fit_ids],
                               [by_id[x] for x in val_ids],
                               cnn, gnn, n_points, seed=cfg.seed,
                               balance=balance)
        fold_cfg = replace(cfg, seed=cfg.seed + i)
        state, _ = train(fit, val, cnn, gnn, fold_cfg, branch=branch)
        reports.append(evaluate(state, val, fusion))
    return reports, mean_report(reports)


def ablate(train_samples: Sequence[vdata.VolumeSample],
           test_samples: Sequence[vdata.VolumeSample],
           cnn: vmodel.CnnConfig = None, gnn: vmodel.GnnConfig = None,
           cfg: TrainConfig = None, n_points: int = 512,
           balance: bool = True):
    """Three runs on identical splits: image branch alone, geometry branch
    alone, and the collaborative pair.  Returns {arm: {"val": report,
    "test": report, "history": history}}."""
    cfg = cfg if cfg is not None else TrainConfig()
    cnn = cnn if cnn is not None else vmodel.CnnConfig()
    gnn = gnn if gnn is not None else vmodel.GnnConfig()
    ids = [s.sample_id for s in train_samples]
    labels = [s.label for s in train_samples]
    fit_ids, val_ids = vdata.split_dataset(ids, labels, stratify=True,
                                           seed=cfg.seed)
    by_id = _index_by_id(train_samples)
    fit, val = _prep_split([by_id[x] for x in fit_ids],
                           [by_id[x] for x in val_ids],
                           cnn, gnn, n_points, seed=cfg.seed,
                           balance=balance)
    test = prepare_samples(test_samples, cnn, gnn, n_points,
                           seed=cfg.seed + 2) if test_samples else []

    arms = {"cnn_only": ("cnn", "cnn_only"),
            "gnn_only": ("gnn", "gnn_only"),
            "collaborative": ("collab", "average")}
    table = {}
    for arm, (branch, fusion) in arms.items():
        state, history = train(fit, val, cnn, gnn, cfg, branch=branch)
        entry = {"val": evaluate(state, val, fusion), "history": history}
        if test:
            entry["test"] = evaluate(state, test, fusion)
        table[arm] = entry
    return table
