"""Self-supervised fitting of a neural field to polychromatic sinograms.

The loss is the mean absolute difference between predicted and measured
projection values over a batch of rays; parameters are updated with Adam.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .field import (EncodingConfig, ForwardCache, GradientBundle, NeuralField, encode,
                    init_field, mlp_backward, mlp_forward, save_checkpoint)
from .geometry import ScanGeometry, fov_radius, rays_for, sample_plan
from .projector import MM_TO_CM, Sinogram, attenuation_matrix, spectral_terms
from .spectra import MaterialTable, SpectrumTable

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    """Non-finite gradients or loss during training."""


class TrainingDiverged(NumericalError):
    def __init__(self, msg, last_good: NeuralField | None = None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1200
    rays_per_batch: int = 1024
    step_mm: float | None = None        # None: half a pixel of an n_grid image
    n_grid: int = 512
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 0
    precision: str = "float64"
    deterministic: bool = True
    workers: int = 1
    chunk_rays: int = 64
    # architecture of a freshly initialised field
    d_freq: int = 8
    include_raw: bool = False
    hidden: tuple = (256,) * 8
    skip_at: tuple = (4,)
    head_scale: float = 1.0
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.rays_per_batch < 1:
            raise ValueError("rays_per_batch must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be 'float32' or 'float64'")
        object.__setattr__(self, "hidden", tuple(self.hidden))
        object.__setattr__(self, "skip_at", tuple(self.skip_at))

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def resolved_step(self, geom: ScanGeometry) -> float:
        if self.step_mm is not None:
            return float(self.step_mm)
        return 2.0 * fov_radius(geom) / (2 * self.n_grid)


@dataclass
class RayRecord:
    k: int
    angle: float
    det: int
    p: float


@dataclass
class RaySet:
    """Struct-of-arrays view of every measured ray."""

    k: np.ndarray
    angle: np.ndarray
    det: np.ndarray
    p: np.ndarray

    def __len__(self):
        return self.p.size

    def record(self, i: int) -> RayRecord:
        return RayRecord(int(self.k[i]), float(self.angle[i]), int(self.det[i]), float(self.p[i]))

    def subset(self, idx) -> "RaySet":
        return RaySet(self.k[idx], self.angle[idx], self.det[idx], self.p[idx])

    @classmethod
    def from_records(cls, recs: Sequence[RayRecord]) -> "RaySet":
        return cls(np.array([r.k for r in recs], dtype=np.int64),
                   np.array([r.angle for r in recs], dtype=np.float64),
                   np.array([r.det for r in recs], dtype=np.int64),
                   np.array([r.p for r in recs], dtype=np.float64))


def rays_from_sinogram(sino: Sinogram) -> RaySet:
    ks, angs, dets, ps = [], [], [], []
    geom = sino.geometry
    for k, (arr, angles) in enumerate(zip(sino.data, geom.angle_sets)):
        ks.append(np.full(arr.size, k, dtype=np.int64))
        angs.append(np.repeat(np.asarray(angles, dtype=np.float64), geom.n_det))
        dets.append(np.tile(np.arange(geom.n_det, dtype=np.int64), len(angles)))
        ps.append(arr.ravel())
    return RaySet(np.concatenate(ks), np.concatenate(angs), np.concatenate(dets), np.concatenate(ps))


class ProjectionModel:
    """Geometry, spectra and attenuation tables shared by every ray."""

    def __init__(self, geom: ScanGeometry, spectra: Sequence[SpectrumTable],
                 materials: Sequence[MaterialTable], step: float):
        if len(spectra) != geom.n_spectra:
            raise ValueError(f"{len(spectra)} spectra for {geom.n_spectra} angle sets")
        self.geom = geom
        self.theta = attenuation_matrix(materials)             # (M, E)
        if any(s.grid != materials[0].grid for s in spectra):
            raise ValueError("spectra and materials must share one energy grid")
        self.w = np.stack([s.bin_weights for s in spectra])   # (K, E)
        self.plan = sample_plan(geom, step)
        self.step_cm = self.plan.step * MM_TO_CM

    @property
    def n_materials(self) -> int:
        return self.theta.shape[0]

    def points(self, rays: RaySet) -> np.ndarray:
        o, d = rays_for(self.geom, rays.angle, rays.det)
        t = self.plan.t
        return o[:, None, :2] + t[None, :, None] * d[:, None, :2]


@dataclass
class ProjectionCache:
    net: ForwardCache
    g: np.ndarray          # (B, M) line integrals, g/cm^2
    dp_dg: np.ndarray      # (B, M)
    step_cm: float
    n_points: int


def _spectral_head(w: np.ndarray, theta: np.ndarray, g: np.ndarray):
    """Projection values and their gradient with respect to the line integrals."""
    e, s, a_min = spectral_terms(w, g @ theta)
    p = a_min - np.log(s / w.sum(axis=-1))
    dp_dg = (e @ theta.T) / s[:, None]
    return p, dp_dg


def forward_rays(fld: NeuralField, model: ProjectionModel, rays: RaySet):
    """Predicted projections ``(B,)`` for a batch of rays and the backward cache."""
    pts = model.points(rays)
    B, N = pts.shape[:2]
    x = fld.normalize(pts.reshape(B * N, 2)).astype(fld.dtype, copy=False)
    out, net = mlp_forward(fld, encode(x, fld.enc))
    g = out.reshape(B, N, -1).sum(axis=1, dtype=np.float64) * model.step_cm
    p, dp_dg = _spectral_head(model.w[rays.k], model.theta, g)
    return p, ProjectionCache(net, g, dp_dg, model.step_cm, N)


def predict_projection(fld: NeuralField, rec: RayRecord, geom: ScanGeometry,
                       spectra, materials, step: float):
    model = ProjectionModel(geom, spectra, materials, step)
    p, cache = forward_rays(fld, model, RaySet.from_records([rec]))
    return float(p[0]), cache


def grad_projection(cache: ProjectionCache) -> np.ndarray:
    """``d p / d f_m(x_i)`` for every sample point, shape ``(B, N, M)``."""
    per_point = cache.dp_dg * cache.step_cm
    return np.broadcast_to(per_point[:, None, :], (per_point.shape[0], cache.n_points, per_point.shape[1]))


def loss(p_hat, p) -> float:
    p_hat, p = np.asarray(p_hat, dtype=np.float64), np.asarray(p, dtype=np.float64)
    if p_hat.shape != p.shape or p.size == 0:
        raise ValueError("loss needs two equal-length non-empty batches")
    return float(np.mean(np.abs(p_hat - p)))


def backward_rays(fld: NeuralField, cache: ProjectionCache, dl_dp: np.ndarray) -> GradientBundle:
    """Chain ``dL/dp`` per ray through the spectral head and the network."""
    per_ray = (np.asarray(dl_dp)[:, None] * cache.dp_dg * cache.step_cm).astype(fld.dtype)
    B, M = per_ray.shape
    upstream = np.broadcast_to(per_ray[:, None, :], (B, cache.n_points, M)).reshape(B * cache.n_points, M)
    return mlp_backward(fld, cache.net, upstream)


def loss_and_grad(fld: NeuralField, model: ProjectionModel, rays: RaySet,
                  chunk_rays: int | None = None, deterministic: bool = True,
                  pool: ThreadPoolExecutor | None = None):
    """Batch L1 loss, its parameter gradient, and per-ray absolute residuals.

    The batch is split into chunks of ``chunk_rays`` whose gradients are summed
    in chunk order (or completion order when ``deterministic`` is false).
    """
    B = len(rays)
    chunk_rays = chunk_rays or B

    def work(s):
        sub = rays.subset(slice(s, s + chunk_rays))
        p_hat, cache = forward_rays(fld, model, sub)
        r = p_hat - sub.p
        return np.abs(r), backward_rays(fld, cache, np.sign(r) / B)

    starts = range(0, B, chunk_rays)
    if pool is None:
        results = [work(s) for s in starts]
    else:
        futs = [pool.submit(work, s) for s in starts]
        results = [f.result() for f in (futs if deterministic else as_completed(futs))]
    total = None
    for _, gb in results:
        total = gb if total is None else _accumulate(total, gb)
    resid = np.concatenate([r for r, _ in results]) if deterministic or pool is None else None
    l1 = float(sum(r.sum() for r, _ in results) / B)
    return l1, total, resid


def _accumulate(acc: GradientBundle, g: GradientBundle) -> GradientBundle:
    for (aw, ab), (gw, gb) in zip(acc.grads, g.grads):
        aw += gw
        ab += gb
    return acc


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, fld: NeuralField) -> "AdamState":
        return cls([np.zeros_like(a) for a in fld.params()], [np.zeros_like(a) for a in fld.params()])


def adam_step(fld: NeuralField, grads: GradientBundle, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update applied in place; returns ``(fld, state)``."""
    gs = grads.params()
    for i, g in enumerate(gs):
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise NumericalError(f"non-finite gradient: {bad} entries in parameter block {i} "
                                 f"(layer {i // 2}, {'weight' if i % 2 == 0 else 'bias'}) at step {state.t + 1}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    lr_t = cfg.learning_rate / (1.0 - b1 ** state.t)
    c2 = 1.0 / (1.0 - b2 ** state.t)
    for p, g, m, v in zip(fld.params(), gs, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr_t * m / (np.sqrt(v * c2) + cfg.eps_adam)).astype(p.dtype, copy=False)
    fld.bump()
    return fld, state


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    wall: list = field(default_factory=list)

    def append(self, epoch, mean_loss, wall_seconds):
        self.epochs.append(epoch)
        self.losses.append(mean_loss)
        self.wall.append(wall_seconds)

    def to_csv(self, path) -> None:
        lines = ["epoch,mean_loss,wall_seconds"]
        lines += [f"{e},{l:.10g},{w:.3f}" for e, l, w in zip(self.epochs, self.losses, self.wall)]
        Path(path).write_text("\n".join(lines) + "\n")


def epoch_batches(n_rays: int, batch: int, rng: np.random.Generator) -> list:
    """A fresh permutation of all rays cut into consecutive batches."""
    perm = rng.permutation(n_rays)
    return [perm[s:s + batch] for s in range(0, n_rays, batch)]


def new_field(cfg: TrainConfig, geom: ScanGeometry, n_materials: int) -> NeuralField:
    enc = EncodingConfig(cfg.d_freq, cfg.include_raw, 2)
    return init_field(enc, cfg.hidden, cfg.skip_at, n_materials, fov_radius(geom),
                      seed=cfg.seed, dtype=cfg.dtype, head_scale=cfg.head_scale)


def train(sino: Sinogram, geom: ScanGeometry, spectra: Sequence[SpectrumTable],
          materials: Sequence[MaterialTable], cfg: TrainConfig,
          fld: NeuralField | None = None, progress=None) -> tuple[NeuralField, TrainLog]:
    """Fit a neural field to ``sino``; returns the field and per-epoch losses.

    Every epoch visits each ray of every spectrum exactly once, in an order
    drawn from a generator seeded by ``cfg.seed``.
    """
    if sino.geometry != geom:
        raise ValueError("sinogram geometry does not match the scan geometry")
    model = ProjectionModel(geom, spectra, materials, cfg.resolved_step(geom))
    fld = new_field(cfg, geom, model.n_materials) if fld is None else fld.astype(cfg.dtype)
    if fld.n_materials != model.n_materials:
        raise ValueError("field and material tables disagree on M")
    rays = rays_from_sinogram(sino)
    state = AdamState.zeros_like(fld)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    history = TrainLog()
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    t0 = time.perf_counter()
    try:
        for epoch in range(1, cfg.epochs + 1):
            last_good = fld.copy()
            total = 0.0
            for idx in epoch_batches(len(rays), cfg.rays_per_batch, rng):
                batch = rays.subset(idx)
                l1, grads, _ = loss_and_grad(fld, model, batch, cfg.chunk_rays, cfg.deterministic, pool)
                if not np.isfinite(l1):
                    raise TrainingDiverged(f"loss became {l1} in epoch {epoch}", last_good)
                total += l1 * len(batch)
                try:
                    adam_step(fld, grads, state, cfg)
                except NumericalError as exc:
                    raise TrainingDiverged(str(exc), last_good) from exc
            history.append(epoch, total / len(rays), time.perf_counter() - t0)
            if progress is not None:
                progress(epoch, history.losses[-1], fld)
            log.debug("epoch %d loss %.6g", epoch, history.losses[-1])
            if cfg.checkpoint_every and cfg.checkpoint_dir and epoch % cfg.checkpoint_every == 0:
                save_checkpoint(fld, Path(cfg.checkpoint_dir) / f"epoch{epoch:05d}.ckpt")
    finally:
        if pool is not None:
            pool.shutdown()
    return fld, history
