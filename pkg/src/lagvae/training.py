"""Objective, optimisation loop and pixel-error evaluation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import integrators
from .cavae import build_initial_state, initial_state_from_means, make_vae
from .checkpoint import load_into, read_checkpoint, restore_rng, rng_state, save_checkpoint
from .dataset import Dataset, reorganize, sample_batch
from .latent import SingularMassError, make_dynamics
from .systems import SystemSpec

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "vae_nll", "kl", "pred", "vm_reg", "total", "val_pixel_mse", "lambda")
VARIANTS = (
    ("lagrangian", "coordinate-aware"),
    ("lagrangian", "traditional"),
    ("mlp", "coordinate-aware"),
    ("mlp", "traditional"),
)


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    T_pred: int = 2
    epochs: int = 3000
    batches_per_epoch: int = 1
    batch_size: int = 64
    lr: float = 1e-3
    train_solver: str = "euler"
    eval_solver: str = "rk4"
    batching: str = "homogeneous"
    zero_weight: float = 0.5
    anneal_rate: float = 1.0 / 8000.0
    anneal_cap: float = 0.375
    dynamics: str = "lagrangian"
    vae: str = "coordinate-aware"
    el_form: str = "eq3"
    constant_g: bool = False
    val_every: int = 100
    val_records: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.T_pred < 1:
            raise ValueError("T_pred must be >= 1")
        integrators.get_stepper(self.train_solver)
        integrators.get_stepper(self.eval_solver)
        if self.batching not in ("standard", "homogeneous"):
            raise ValueError(f"unknown batching mode {self.batching!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    vae_nll: torch.Tensor
    kl: torch.Tensor
    pred: torch.Tensor
    vm_reg: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("vae_nll", "kl", "pred", "vm_reg", "total")}


class LatentModel(nn.Module):
    """Encoder/decoder plus latent vector field, either variant of each."""

    def __init__(
        self,
        spec: SystemSpec,
        dynamics: str = "lagrangian",
        vae: str = "coordinate-aware",
        H: int = 32,
        W: int = 32,
        dt: float = 0.05,
        el_form: str = "eq3",
        constant_g: bool = False,
    ):
        super().__init__()
        self.spec, self.dt, self.H, self.W = spec, dt, H, W
        self.dynamics_kind, self.vae_kind = dynamics, vae
        self.el_form, self.constant_g = el_form, constant_g
        self.vae = make_vae(spec, vae, H, W)
        self.dyn = make_dynamics(spec, dynamics, el_form=el_form, constant_g=constant_g)

    def field(self, s: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
        return self.dyn(s, u)

    def encode(self, x):
        return self.vae.encode(x)

    def decode(self, z):
        return self.vae.decode(z)

    @property
    def nz(self) -> int:
        return self.spec.n_trans + 2 * self.spec.n_rot

    def describe(self) -> dict:
        return {
            "system": self.spec.to_dict(),
            "dynamics": self.dynamics_kind,
            "vae": self.vae_kind,
            "H": self.H,
            "W": self.W,
            "dt": self.dt,
            "el_form": self.el_form,
            "constant_g": self.constant_g,
        }

    @classmethod
    def from_description(cls, d: dict) -> "LatentModel":
        spec = SystemSpec.from_dict(d["system"])
        return cls(spec, d["dynamics"], d["vae"], d["H"], d["W"], d["dt"], d["el_form"], d["constant_g"])

    def rollout(self, s0: torch.Tensor, u: torch.Tensor, T: int, method: str) -> torch.Tensor:
        return integrators.rollout(self.field, s0, u, self.dt, T, method).states

    def predict_images(self, x0, x1, u, T: int, method: str = "rk4") -> torch.Tensor:
        """Deterministic prediction ``(T+1, B, n_bodies, H, W)`` from two frames."""
        s0 = initial_state_from_means(self, x0, x1, self.dt)
        states = self.rollout(s0, u, T, method)
        return self.decode(states[..., : self.nz])


def anneal_lambda(epoch: float, rate: float = 1.0 / 8000.0, cap: float = 0.375) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return min(epoch * rate, cap)


def compute_loss(
    model: LatentModel,
    images: torch.Tensor,
    u: torch.Tensor,
    lam: float,
    generator: torch.Generator | None = None,
    solver: str = "euler",
) -> LossBreakdown:
    """Loss of a batch of windows ``images`` (B, T_pred+1, n_bodies, H, W).

    Squared errors are summed over pixels and frames and averaged over the
    batch.  The reconstruction term is the identity-covariance Gaussian
    negative log-likelihood without its constant.
    """
    T_pred = images.shape[1] - 1
    x0, x1 = images[:, 0], images[:, 1]
    s0, post0, _ = build_initial_state(model, x0, x1, model.dt, generator)
    xhat0 = model.decode(s0[:, : model.nz])
    vae_nll = 0.5 * ((xhat0 - x0) ** 2).flatten(1).sum(-1).mean()
    kl = post0.kl().mean()
    states = model.rollout(s0, u, T_pred, solver)
    xhat = model.decode(states[1:, :, : model.nz])  # (T_pred, B, ...)
    pred = ((xhat - images[:, 1:].transpose(0, 1)) ** 2).flatten(2).sum(-1).sum(0).mean()
    vm_reg = lam * post0.norm_penalty().mean() if post0.dir_norm is not None else xhat0.new_zeros(())
    total = vae_nll + kl + pred + vm_reg
    return LossBreakdown(vae_nll, kl, pred, vm_reg, total)


@torch.no_grad()
def eval_pixel_mse(
    model: LatentModel,
    data: Dataset,
    horizon: int | None = None,
    records=None,
    method: str = "rk4",
    batch: int = 256,
    per_step: bool = False,
):
    """Mean squared pixel error of rollouts from frames 0 and 1.

    Every record is predicted ``horizon`` steps ahead (default: the whole
    recording) and compared with the recorded frames ``0..horizon``.  With
    ``per_step`` the per-frame averages are returned as an array as well.
    """
    T = data.images.shape[1] - 1
    horizon = T if horizon is None else horizon
    if not 1 <= horizon <= T:
        raise ValueError(f"horizon must lie in [1, {T}]")
    recs = np.arange(len(data)) if records is None else np.asarray(records)
    sq = np.zeros(horizon + 1)
    dtype = next(model.parameters()).dtype
    for a in range(0, len(recs), batch):
        idx = recs[a : a + batch]
        x = torch.as_tensor(data.images[idx, : horizon + 1], dtype=dtype)
        u = torch.as_tensor(data.controls[idx], dtype=dtype)
        pred = model.predict_images(x[:, 0], x[:, 1], u, horizon, method)
        err = (pred - x.transpose(0, 1)) ** 2
        sq += err.flatten(2).mean(-1).sum(-1).double().numpy()
    per = sq / len(recs)
    mse = float(per.mean())
    return (mse, per) if per_step else mse


def build_model(spec: SystemSpec, cfg: TrainConfig, H: int, W: int, dt: float) -> LatentModel:
    torch.manual_seed(cfg.seed)
    return LatentModel(spec, cfg.dynamics, cfg.vae, H, W, dt, cfg.el_form, cfg.constant_g)


@dataclass
class FitResult:
    model: LatentModel
    history: list[dict] = field(default_factory=list)
    skipped_batches: int = 0
    best_val: float = math.inf


def _write_log(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else repr(r[k])) for k in LOG_COLUMNS})


def fit(
    train: Dataset,
    cfg: TrainConfig,
    val: Dataset | None = None,
    out_dir=None,
    resume=None,
    model: LatentModel | None = None,
    stop_epoch: int | None = None,
) -> FitResult:
    """Adam training; writes ``train_log.csv``, ``last.ckpt`` and ``best.ckpt``.

    ``resume`` is a checkpoint path whose model, optimiser and RNG states are
    restored before continuing.  ``stop_epoch`` ends the run early (used to
    split a run for resume checks) without changing the schedule.
    """
    man = train.manifest
    spec = train.spec
    if model is None:
        model = build_model(spec, cfg, man.H, man.W, man.dt)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    np_rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    windows = reorganize(train, cfg.T_pred)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    result = FitResult(model)
    start = 0
    if resume is not None:
        ck = read_checkpoint(resume)
        load_into(ck, model, opt)
        restore_rng(ck.meta["rng"], np_rng, gen)
        start = ck.meta["epoch"] + 1
        result.history = ck.meta.get("history", [])
        result.best_val = ck.meta.get("best_val", math.inf)
        result.skipped_batches = ck.meta.get("skipped_batches", 0)

    val_recs = None
    if val is not None:
        val_recs = np.random.default_rng(cfg.seed + 1).permutation(len(val))[: cfg.val_records]

    def meta(epoch: int) -> dict:
        return {
            "model": model.describe(),
            "config": cfg.to_dict(),
            "epoch": epoch,
            "rng": rng_state(np_rng, gen),
            "history": result.history,
            "best_val": result.best_val if math.isfinite(result.best_val) else None,
            "skipped_batches": result.skipped_batches,
        }

    end = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
    for epoch in range(start, end):
        lam = anneal_lambda(epoch, cfg.anneal_rate, cfg.anneal_cap)
        sums = dict.fromkeys(("vae_nll", "kl", "pred", "vm_reg", "total"), 0.0)
        n_ok = 0
        for _ in range(cfg.batches_per_epoch):
            b = sample_batch(windows, cfg.batch_size, cfg.batching, np_rng, cfg.zero_weight)
            try:
                loss = compute_loss(model, b.images, b.u, lam, gen, cfg.train_solver)
            except (integrators.IntegrationDivergedError, SingularMassError) as exc:
                result.skipped_batches += 1
                log.warning("epoch %d: batch skipped (%s)", epoch, exc)
                continue
            if not torch.isfinite(loss.total):
                if out is not None:
                    _write_log(out / "train_log.csv", result.history)
                raise TrainingAborted(f"non-finite loss at epoch {epoch}; last good checkpoint kept")
            opt.zero_grad()
            loss.total.backward()
            opt.step()
            for k, v in loss.as_floats().items():
                sums[k] += v
            n_ok += 1
        row = {k: v / max(n_ok, 1) for k, v in sums.items()}
        row.update(epoch=epoch, val_pixel_mse=None, **{"lambda": lam})
        last = epoch == cfg.epochs - 1
        if val is not None and (epoch % cfg.val_every == cfg.val_every - 1 or last):
            row["val_pixel_mse"] = eval_pixel_mse(model, val, cfg.T_pred, val_recs, cfg.eval_solver)
            if row["val_pixel_mse"] < result.best_val:
                result.best_val = row["val_pixel_mse"]
                if out is not None:
                    save_checkpoint(out / "best.ckpt", model, None, meta(epoch))
        result.history.append(row)
        if epoch % 100 == 0:
            log.info("epoch %d total %.3f pred %.3f", epoch, row["total"], row["pred"])
    if out is not None:
        save_checkpoint(out / "last.ckpt", model, opt, meta(end - 1))
        _write_log(out / "train_log.csv", result.history)
    return result


def load_model(path) -> LatentModel:
    ck = read_checkpoint(path)
    model = LatentModel.from_description(ck.meta["model"])
    load_into(ck, model)
    model.eval()
    return model
