"""Joint optimization of the Gaussian set and the SDF network.

Phase 1 (iterations below the switch) trains the Gaussians alone on the
rendering loss with periodic densification and pruning.  Phase 2 pulls every
Gaussian center onto the current zero-level set, renders the pulled set, and
adds the geometry terms; both parameter groups share one Adam instance.

Randomness is drawn from per-iteration seed sequences, so a run is a pure
function of (config, dataset) and resuming from a checkpoint reproduces the
uninterrupted iteration stream bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .camera import CameraView
from .gaussians import GaussianSet, covariance, load_set, quat_to_rotation, save_set
from .losses import (
    LossReport, LossWeights, SpatialGrid, loss_eikonal_graph,
    loss_orthogonal_graph, loss_pull_centers_graph, loss_pull_graph,
    loss_splatting_graph, loss_tangent_graph, loss_thin_graph, nearest_pulled,
    total_graph,
)
from .raster import RenderSettings, register_set, render_graph
from .sdf import SdfNetwork, init_sphere, load_network, save_network
from .synth import Dataset
from .tape import Tape


class TrainingError(RuntimeError):
    """Raised when training hits an invalid state (NaN loss, bad config)."""


@dataclass
class TrainConfig:
    """Desk-scale defaults; the paper-scale schedule is 15000/7000."""

    total_iters: int = 3000
    phase_switch_iter: int = 1400
    weights: LossWeights = field(default_factory=LossWeights)

    lr_centers: float = 1.6e-4
    lr_centers_final: float = 1.6e-6
    lr_centers_horizon: float = 2.0  # decay span in units of total_iters
    lr_scales: float = 5e-3
    lr_rotations: float = 1e-3
    lr_opacities: float = 5e-3
    lr_colors: float = 2.5e-3
    lr_network: float = 2e-3
    lr_network_final: float = 2e-4

    densify_interval: int = 300
    densify_grad_threshold: float = 2e-5
    densify_size_threshold: float = 0.01  # half the usual clone/split boundary
    densify_max_gaussians: int = 20000
    prune_opacity: float = 0.005
    prune_footprint: float = 1.0  # 3 sigma footprint vs half the scene extent

    queries_per_iter: int = 1024
    query_neighbor_rank: int = 25
    query_noise_min: float = 0.01
    query_noise_max: float = 0.3

    net_layers: int = 4
    net_width: int = 128
    net_radius: float = 0.5

    background: tuple = (0.0, 0.0, 0.0)
    footprint_sigma: float = 3.5
    early_stop: float = 1e-4

    pull_to_centers: bool = False
    detach_pull_direction: bool = False
    no_pull_gaussians: bool = False

    checkpoint_every: int = 1000
    seed: int = 0
    dtype: str = "f64"

    def __post_init__(self):
        if not (0 < self.phase_switch_iter < self.total_iters):
            raise TrainingError(
                f"phase switch {self.phase_switch_iter} must lie inside "
                f"(0, {self.total_iters})")
        for f in fields(self):
            if f.name.startswith("lr_") and getattr(self, f.name) <= 0:
                raise TrainingError(f"{f.name} must be positive")

    def render_settings(self) -> RenderSettings:
        return RenderSettings(background=np.asarray(self.background, dtype=np.float64),
                              footprint_sigma=self.footprint_sigma,
                              early_stop=self.early_stop)

    def np_dtype(self):
        if self.dtype == "f64":
            return np.float64
        if self.dtype == "f32":
            return np.float32
        raise TrainingError(f"dtype must be 'f64' or 'f32', got {self.dtype!r}")

    # -- key = value config file ------------------------------------------

    def to_file(self, path) -> None:
        with open(path, "w") as f:
            f.write("# splatfield training configuration\n")
            for name, value in self.as_flat_dict().items():
                f.write(f"{name} = {value}\n")

    def as_flat_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "weights":
                out["weight_alpha"] = v.alpha
                out["weight_beta"] = v.beta
                out["weight_gamma"] = v.gamma
                out["weight_delta"] = v.delta
                out["weight_eikonal"] = v.eikonal
            elif f.name == "background":
                out["background"] = ",".join(repr(float(c)) for c in v)
            else:
                out[f.name] = v
        return out

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "TrainConfig":
        raw = {}
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                body = line.split("#", 1)[0].strip()
                if not body:
                    continue
                if "=" not in body:
                    raise TrainingError(f"{path}:{lineno}: expected 'key = value'")
                key, value = (s.strip() for s in body.split("=", 1))
                raw[key] = value
        if overrides:
            raw.update({k: str(v) for k, v in overrides.items()})
        return cls.from_flat_dict(raw)

    @classmethod
    def from_flat_dict(cls, raw: dict) -> "TrainConfig":
        kwargs = {}
        weights = LossWeights()
        weight_names = {"weight_alpha": "alpha", "weight_beta": "beta",
                        "weight_gamma": "gamma", "weight_delta": "delta",
                        "weight_eikonal": "eikonal"}
        by_name = {f.name: f for f in fields(cls)}
        for key, value in raw.items():
            if key in weight_names:
                setattr(weights, weight_names[key], float(value))
            elif key == "background":
                kwargs["background"] = tuple(float(x) for x in str(value).split(","))
            elif key in by_name:
                f = by_name[key]
                if f.type in ("int",):
                    kwargs[key] = int(value)
                elif f.type in ("float",):
                    kwargs[key] = float(value)
                elif f.type in ("bool",):
                    kwargs[key] = str(value).lower() in ("1", "true", "yes", "on")
                else:
                    kwargs[key] = value
            else:
                raise TrainingError(f"unknown config key {key!r}")
        kwargs["weights"] = weights
        return cls(**kwargs)


@dataclass
class QueryBatch:
    """Query points with their (frozen) nearest pulled-Gaussian assignment."""

    queries: np.ndarray
    assigned: np.ndarray | None = None


class Adam:
    """One shared adaptive-moment optimizer over all named parameter groups."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state: dict = {}

    def step(self, params: dict, grads: dict, lrs: dict) -> None:
        for name, grad in grads.items():
            target = params[name]
            st = self.state.get(name)
            if st is None:
                st = {"m": np.zeros_like(target), "v": np.zeros_like(target), "t": 0}
                self.state[name] = st
            st["t"] += 1
            st["m"] = self.beta1 * st["m"] + (1 - self.beta1) * grad
            st["v"] = self.beta2 * st["v"] + (1 - self.beta2) * grad * grad
            mhat = st["m"] / (1 - self.beta1 ** st["t"])
            vhat = st["v"] / (1 - self.beta2 ** st["t"])
            target -= lrs[name] * mhat / (np.sqrt(vhat) + self.eps)

    def select_rows(self, name: str, keep) -> None:
        st = self.state.get(name)
        if st is not None:
            st["m"] = st["m"][keep]
            st["v"] = st["v"][keep]

    def append_rows(self, name: str, count: int) -> None:
        st = self.state.get(name)
        if st is not None:
            pad_m = np.zeros((count,) + st["m"].shape[1:], dtype=st["m"].dtype)
            st["m"] = np.concatenate([st["m"], pad_m])
            st["v"] = np.concatenate([st["v"], np.zeros_like(pad_m)])


GAUSS_PARAM_NAMES = ("gauss.centers", "gauss.log_scales", "gauss.quats",
                     "gauss.opacity_logits", "gauss.colors")


def _rng(seed: int, iteration: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, iteration, stream)))


# ---------------------------------------------------------------------------
# query sampling
# ---------------------------------------------------------------------------

def sample_queries(gset: GaussianSet, n: int, seed, pulled_centers=None) -> QueryBatch:
    """Queries around Gaussian centers with locally adapted noise.

    Noise standard deviation per source Gaussian is its distance to the
    25th-nearest neighboring center (rank clamped for small sets), clamped to
    [0.01, 0.3] scene units.  `seed` may be an int or a Generator.  When
    `pulled_centers` is given, each query is assigned its nearest pulled
    Gaussian; otherwise the original centers stand in.
    """
    if len(gset) == 0:
        raise TrainingError("cannot sample queries from an empty Gaussian set")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if n == 0:
        return QueryBatch(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
    centers = gset.centers
    rank = min(25, len(centers) - 1)
    if rank >= 1:
        tree = cKDTree(centers)
        dist, _ = tree.query(centers, k=rank + 1)
        std = np.clip(dist[:, rank], 0.01, 0.3)
    else:
        std = np.full(len(centers), 0.01)
    picks = rng.integers(0, len(centers), size=n)
    noise = rng.normal(size=(n, 3)) * std[picks][:, None]
    queries = np.clip(centers[picks] + noise, -1.0, 1.0)
    targets = pulled_centers if pulled_centers is not None else centers
    assigned = nearest_pulled(queries, targets)
    return QueryBatch(queries=queries, assigned=assigned)


# ---------------------------------------------------------------------------
# densify / prune
# ---------------------------------------------------------------------------

def densify(gset: GaussianSet, grad_threshold: float, size_threshold: float,
            rng: np.random.Generator, optimizer: Adam | None = None,
            max_gaussians: int = 20000) -> dict:
    """Clone small / split large Gaussians whose screen gradients are high.

    Clones draw the new center from the source's own N(mu, Sigma) rather
    than duplicating the position; splits produce two children with scales
    divided by 1.6 and remove the source.  Statistics reset afterwards.
    """
    n = len(gset)
    mean_grad = gset.grad_accum / np.maximum(gset.hit_count, 1)
    hot = mean_grad > grad_threshold
    if n >= max_gaussians:
        hot[:] = False
    max_scale = np.exp(gset.log_scales).max(axis=1)
    clone_idx = np.where(hot & (max_scale < size_threshold))[0]
    split_idx = np.where(hot & (max_scale >= size_threshold))[0]
    if len(clone_idx) == 0 and len(split_idx) == 0:
        gset.reset_stats()
        return {"cloned": 0, "split": 0}

    def sample_own(i, count):
        g = gset.gaussian(i)
        r = quat_to_rotation(g.rotation)
        eps = rng.normal(size=(count, 3))
        return g.center + (eps * g.scales) @ r.T

    new_centers, new_logs, new_quats, new_logits, new_colors = [], [], [], [], []
    for i in clone_idx:
        new_centers.append(sample_own(i, 1))
        new_logs.append(gset.log_scales[i][None])
        new_quats.append(gset.rotations[i][None])
        new_logits.append([gset.opacity_logits[i]])
        new_colors.append(gset.colors[i][None])
    shrink = np.log(1.6)
    for i in split_idx:
        new_centers.append(sample_own(i, 2))
        new_logs.append(np.tile(gset.log_scales[i] - shrink, (2, 1)))
        new_quats.append(np.tile(gset.rotations[i], (2, 1)))
        new_logits.append([gset.opacity_logits[i]] * 2)
        new_colors.append(np.tile(gset.colors[i], (2, 1)))

    keep = np.ones(n, dtype=bool)
    keep[split_idx] = False
    added = GaussianSet(np.concatenate(new_centers), np.concatenate(new_logs),
                        np.concatenate(new_quats), np.concatenate(new_logits),
                        np.concatenate(new_colors))
    survivors = gset.select(keep)
    gset.centers = np.concatenate([survivors.centers, added.centers])
    gset.log_scales = np.concatenate([survivors.log_scales, added.log_scales])
    gset.rotations = np.concatenate([survivors.rotations, added.rotations])
    gset.opacity_logits = np.concatenate([survivors.opacity_logits,
                                          added.opacity_logits])
    gset.colors = np.concatenate([survivors.colors, added.colors])
    gset.reset_stats()
    if optimizer is not None:
        for name in GAUSS_PARAM_NAMES:
            optimizer.select_rows(name, keep)
            optimizer.append_rows(name, len(added))
    return {"cloned": len(clone_idx), "split": len(split_idx)}


def prune(gset: GaussianSet, opacity_threshold: float = 0.005,
          footprint_threshold: float = 1.0, optimizer: Adam | None = None) -> int:
    """Drop nearly transparent Gaussians and ones spanning half the scene."""
    if len(gset) == 0:
        return 0
    footprint = 3.0 * np.exp(gset.log_scales).max(axis=1)
    keep = (gset.opacities >= opacity_threshold) & (footprint <= footprint_threshold)
    dropped = int(np.sum(~keep))
    if dropped:
        kept = gset.select(keep)
        gset.centers = kept.centers
        gset.log_scales = kept.log_scales
        gset.rotations = kept.rotations
        gset.opacity_logits = kept.opacity_logits
        gset.colors = kept.colors
        if optimizer is not None:
            for name in GAUSS_PARAM_NAMES:
                optimizer.select_rows(name, keep)
    gset.reset_stats()
    return dropped


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

class TrainState:
    def __init__(self, config: TrainConfig, dataset: Dataset, gset: GaussianSet,
                 net: SdfNetwork | None = None):
        if not dataset.train_views():
            raise TrainingError("dataset has no training views")
        if len(gset) == 0:
            raise TrainingError("cannot train an empty Gaussian set")
        self.config = config
        self.dataset = dataset
        self.gset = gset
        self.net = net or init_sphere(config.net_layers, config.net_width,
                                      config.net_radius, config.seed)
        self.net.transform = dataset.transform
        self.optimizer = Adam()
        self.iteration = 0
        self.reports: list = []

    def lr_for(self, name: str) -> float:
        cfg = self.config
        frac = self.iteration / max(cfg.total_iters, 1)
        if name == "gauss.centers":
            span = frac / cfg.lr_centers_horizon
            return cfg.lr_centers * (cfg.lr_centers_final / cfg.lr_centers) ** span
        fixed = {
            "gauss.log_scales": cfg.lr_scales,
            "gauss.quats": cfg.lr_rotations,
            "gauss.opacity_logits": cfg.lr_opacities,
            "gauss.colors": cfg.lr_colors,
        }
        if name in fixed:
            return fixed[name]
        return cfg.lr_network * (cfg.lr_network_final / cfg.lr_network) ** frac


def train_step(state: TrainState, view: CameraView | None = None) -> LossReport:
    """One optimization step; phase is derived from the iteration counter."""
    cfg = state.config
    it = state.iteration
    phase2 = it >= cfg.phase_switch_iter
    if view is None:
        train_views = state.dataset.train_views()
        pick = int(_rng(cfg.seed, it, 0).integers(0, len(train_views)))
        view = train_views[pick]
    settings = cfg.render_settings()

    tape = Tape(dtype=cfg.np_dtype())
    gvals = register_set(tape, state.gset)

    if not phase2:
        img, aux = render_graph(tape, gvals, view, settings)
        splat = loss_splatting_graph(tape, img, view.image)
        total, report = total_graph(tape, cfg.weights, splatting=splat)
    else:
        wvals = state.net.register(tape)
        if cfg.no_pull_gaussians:
            pulled_centers = gvals["centers"]
        else:
            pulled_centers, _, _, _ = state.net.pull_graph(
                tape, wvals, gvals["centers"],
                detach_direction=cfg.detach_pull_direction)
        img, aux = render_graph(tape, gvals, view, settings, centers=pulled_centers)
        splat = loss_splatting_graph(tape, img, view.image)

        # Pull targets: the pulled disk positions with their field dependence
        # held constant for the step.  The query losses would otherwise be
        # free to drag the zero level set along with its own targets (the
        # drift is loss-neutral), which collapses the field; gradients still
        # reach the Gaussian through the center offset, Sigma and the normal,
        # and the field still learns through the pulled queries and the
        # rendered pulled centers.
        targets = gvals["centers"] + (pulled_centers.data - gvals["centers"].data)

        batch = sample_queries(state.gset, cfg.queries_per_iter,
                               _rng(cfg.seed, it, 1),
                               pulled_centers=targets.data)
        pulled_q, _, grads_q, _ = state.net.pull_graph(
            tape, wvals, batch.queries,
            detach_direction=cfg.detach_pull_direction)

        thin = loss_thin_graph(tape, gvals["log_scales"])
        _, masks_pc = state.net.eval_graph(tape, wvals, pulled_centers)
        grads_pc = state.net.grad_graph(tape, wvals, masks_pc)
        tangent = loss_tangent_graph(tape, grads_pc, gvals)
        if cfg.pull_to_centers:
            pull = loss_pull_centers_graph(tape, pulled_q, batch.assigned,
                                           targets)
        else:
            pull = loss_pull_graph(tape, pulled_q, batch.assigned,
                                   targets, gvals)
        orthogonal = loss_orthogonal_graph(tape, grads_q, batch.assigned, gvals)
        eikonal = (loss_eikonal_graph(tape, grads_q)
                   if cfg.weights.eikonal > 0 else None)
        total, report = total_graph(tape, cfg.weights, splatting=splat, thin=thin,
                                    tangent=tangent, pull=pull,
                                    orthogonal=orthogonal, eikonal=eikonal)

    for term in ("splatting", "thin", "tangent", "pull", "orthogonal",
                 "eikonal", "total"):
        if not np.isfinite(getattr(report, term)):
            raise TrainingError(f"non-finite loss term {term!r} at iteration {it}")

    grads = tape.backward(total)
    lrs = {name: state.lr_for(name) for name in grads}
    params = {
        "gauss.centers": state.gset.centers,
        "gauss.log_scales": state.gset.log_scales,
        "gauss.quats": state.gset.rotations,
        "gauss.opacity_logits": state.gset.opacity_logits,
        "gauss.colors": state.gset.colors,
    }
    for i, (w, b) in enumerate(zip(state.net.weights, state.net.biases)):
        params[f"sdf.w{i}"] = w
        params[f"sdf.b{i}"] = b
    state.optimizer.step(params, grads, lrs)
    state.gset.normalize_rotations()
    np.clip(state.gset.colors, 0.0, 1.0, out=state.gset.colors)

    if not phase2:
        state.gset.grad_accum += aux.positional_grad
        state.gset.hit_count += (aux.hit_count > 0).astype(np.int64)
        if it > 0 and it % cfg.densify_interval == 0:
            densify(state.gset, cfg.densify_grad_threshold,
                    cfg.densify_size_threshold, _rng(cfg.seed, it, 2),
                    optimizer=state.optimizer,
                    max_gaussians=cfg.densify_max_gaussians)
            prune(state.gset, cfg.prune_opacity, cfg.prune_footprint,
                  optimizer=state.optimizer)

    state.iteration += 1
    return report


def fit(config: TrainConfig, dataset: Dataset, gset: GaussianSet | None = None,
        out_dir=None, log_every: int = 0) -> TrainState:
    """Run the full schedule with periodic checkpoints and a CSV loss log."""
    if gset is None:
        from .synth import init_gaussians
        gset = init_gaussians(dataset, 6000, seed=config.seed)
    state = TrainState(config, dataset, gset)
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        config.to_file(out / "config.txt")
        log_file = open(out / "train_log.csv", "w")
        log_file.write(LossReport.csv_header() + "\n")
    try:
        _run(state, log_file, out, log_every)
    finally:
        if log_file is not None:
            log_file.close()
    return state


def resume(out_dir, dataset: Dataset, checkpoint: str | None = None) -> TrainState:
    """Rebuild a TrainState from a checkpoint directory and keep training."""
    out = Path(out_dir)
    config = TrainConfig.from_file(out / "config.txt")
    if checkpoint is None:
        candidates = sorted(out.glob("ckpt_*"))
        if not candidates:
            raise TrainingError(f"no checkpoints under {out}")
        ckpt = candidates[-1]
    else:
        ckpt = out / checkpoint
    gset = load_set(ckpt / "gaussians.bin")
    net = load_network(ckpt / "network.bin")
    state = TrainState(config, dataset, gset, net=net)
    meta = json.loads((ckpt / "meta.json").read_text())
    state.iteration = int(meta["iteration"])
    blob = np.load(ckpt / "optim.npz")
    names = json.loads(str(blob["names"]))
    for name in names:
        state.optimizer.state[name] = {
            "m": blob[f"{name}.m"], "v": blob[f"{name}.v"],
            "t": int(blob[f"{name}.t"]),
        }
    gset.grad_accum = blob["stats.grad_accum"]
    gset.hit_count = blob["stats.hit_count"]
    return state


def continue_fit(state: TrainState, out_dir=None, log_every: int = 0) -> TrainState:
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        log_path = out / "train_log.csv"
        fresh = not log_path.exists()
        log_file = open(log_path, "a")
        if fresh:
            log_file.write(LossReport.csv_header() + "\n")
    try:
        _run(state, log_file, out, log_every)
    finally:
        if log_file is not None:
            log_file.close()
    return state


def _run(state: TrainState, log_file, out, log_every: int):
    cfg = state.config
    while state.iteration < cfg.total_iters:
        began = time.perf_counter()
        it = state.iteration
        report = train_step(state)
        state.reports.append(report)
        wall = time.perf_counter() - began
        if log_file is not None:
            log_file.write(report.csv_row(it, wall) + "\n")
        if log_every and it % log_every == 0:
            print(f"iter {it:6d}  total {report.total:.5f}  "
                  f"splat {report.splatting:.5f}  gaussians {len(state.gset)}")
        done = state.iteration
        if out is not None and (done % cfg.checkpoint_every == 0
                                or done == cfg.total_iters):
            save_checkpoint(state, out)


def save_checkpoint(state: TrainState, out_dir) -> Path:
    out = Path(out_dir)
    ckpt = out / f"ckpt_{state.iteration:06d}"
    ckpt.mkdir(parents=True, exist_ok=True)
    save_set(state.gset, ckpt / "gaussians.bin")
    save_network(state.net, ckpt / "network.bin")
    arrays = {"stats.grad_accum": state.gset.grad_accum,
              "stats.hit_count": state.gset.hit_count}
    names = sorted(state.optimizer.state)
    for name in names:
        st = state.optimizer.state[name]
        arrays[f"{name}.m"] = st["m"]
        arrays[f"{name}.v"] = st["v"]
        arrays[f"{name}.t"] = np.int64(st["t"])
    arrays["names"] = np.array(json.dumps(names))
    np.savez(ckpt / "optim.npz", **arrays)
    (ckpt / "meta.json").write_text(json.dumps(
        {"iteration": state.iteration,
         "config": {k: (v if not isinstance(v, tuple) else list(v))
                    for k, v in state.config.as_flat_dict().items()}}, indent=1))
    return ckpt
