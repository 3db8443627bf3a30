"""``lagvae`` command line: gen-data, train, predict, control, eval.

Every command resolves one effective configuration (defaults, then a JSON
``--config`` file, then explicit flags), writes it to ``OUT/config.json`` and
works only from that document, so rerunning with ``--config OUT/config.json``
repeats the run.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import control, dataset, plotting, training
from .cavae import initial_state_from_means
from .checkpoint import CheckpointFormatError, read_checkpoint
from .dataset import DatasetFormatError
from .integrators import IntegrationDivergedError
from .latent import SingularMassError, learned_energy
from .systems import EL_FORMS, SYSTEM_NAMES, make_system

DEFAULT_OUT = "lagvae_out"


@dataclass
class RunConfig:
    system: str = "pendulum"
    seed: int = 0
    out: str = DEFAULT_OUT
    # data
    data: str | None = None
    n_ic: int = 256
    n_test_ic: int = 32
    T: int = 20
    dt: float = 0.05
    H: int = 32
    W: int = 32
    controls: list = field(default_factory=lambda: list(dataset.DEFAULT_CONTROLS))
    sim_el_form: str = "full"
    substeps: int = dataset.DEFAULT_SUBSTEPS
    # training
    t_pred: int = 2
    epochs: int = 3000
    batches_per_epoch: int = 1
    batch_size: int = 64
    lr: float = 1e-3
    solver: str = "euler"
    eval_solver: str = "rk4"
    dynamics: str = "lagrangian"
    vae: str = "coordinate-aware"
    batching: str = "homogeneous"
    zero_weight: float = 0.5
    el_form: str = "eq3"
    constant_g: bool = False
    val_every: int = 100
    # prediction / evaluation
    checkpoint: list = field(default_factory=list)
    horizon: int = 48
    n_records: int = 16
    eval_horizon: int | None = None
    # control
    mode: str = "oracle"
    kp: float = 10.0
    kd: float = 3.0
    control_steps: int = 500
    q0: list | None = None
    qdot0: list | None = None
    goal: list | None = None
    goal_image: str | None = None
    saturation: float | None = None

    def __post_init__(self):
        if self.system not in SYSTEM_NAMES:
            raise ValueError(f"unknown system {self.system!r}")
        for name in ("el_form", "sim_el_form"):
            if getattr(self, name) not in EL_FORMS:
                raise ValueError(f"{name} must be one of {EL_FORMS}")
        if self.mode not in ("oracle", "learned"):
            raise ValueError("mode must be 'oracle' or 'learned'")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**d)

    def train_config(self) -> training.TrainConfig:
        return training.TrainConfig(
            T_pred=self.t_pred,
            epochs=self.epochs,
            batches_per_epoch=self.batches_per_epoch,
            batch_size=self.batch_size,
            lr=self.lr,
            train_solver=self.solver,
            eval_solver=self.eval_solver,
            batching=self.batching,
            zero_weight=self.zero_weight,
            dynamics=self.dynamics,
            vae=self.vae,
            el_form=self.el_form,
            constant_g=self.constant_g,
            val_every=self.val_every,
            seed=self.seed,
        )


# flag name -> RunConfig field, argparse kwargs
_FLAGS = {
    "--system": ("system", dict(choices=SYSTEM_NAMES)),
    "--seed": ("seed", dict(type=int)),
    "--out": ("out", dict()),
    "--data": ("data", dict(help="dataset root holding train/ and test/")),
    "--n-ic": ("n_ic", dict(type=int)),
    "--n-test-ic": ("n_test_ic", dict(type=int)),
    "--substeps": ("substeps", dict(type=int, help="RK4 steps per recorded frame")),
    "--t-pred": ("t_pred", dict(type=int)),
    "--epochs": ("epochs", dict(type=int)),
    "--batch-size": ("batch_size", dict(type=int)),
    "--lr": ("lr", dict(type=float)),
    "--solver": ("solver", dict(choices=("euler", "rk4"), help="training solver")),
    "--dynamics": ("dynamics", dict(choices=("lagrangian", "mlp"))),
    "--vae": ("vae", dict(choices=("coordinate-aware", "traditional"))),
    "--batching": ("batching", dict(choices=("standard", "homogeneous"))),
    "--el-form": ("el_form", dict(choices=EL_FORMS, help="learned-model Euler-Lagrange form")),
    "--sim-el-form": ("sim_el_form", dict(choices=EL_FORMS, help="ground-truth simulator form")),
    "--checkpoint": ("checkpoint", dict(action="append")),
    "--horizon": ("horizon", dict(type=int)),
    "--n-records": ("n_records", dict(type=int)),
    "--eval-horizon": ("eval_horizon", dict(type=int)),
    "--mode": ("mode", dict(choices=("oracle", "learned"))),
    "--kp": ("kp", dict(type=float)),
    "--kd": ("kd", dict(type=float)),
    "--steps": ("control_steps", dict(type=int)),
    "--q0": ("q0", dict(type=float, nargs="+")),
    "--qdot0": ("qdot0", dict(type=float, nargs="+")),
    "--goal": ("goal", dict(type=float, nargs="+")),
    "--goal-image": ("goal_image", dict(help=".npy array (n_bodies, H, W)")),
    "--saturation": ("saturation", dict(type=float)),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lagvae", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("gen-data", "simulate and render train/test datasets"),
        ("train", "fit a model, write checkpoints and a loss log"),
        ("predict", "roll a trained model forward and compare with simulation"),
        ("control", "drive a system to a goal with energy shaping"),
        ("eval", "pixel MSE table for one or more checkpoints"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON file with RunConfig keys")
        for flag, (dest, kw) in _FLAGS.items():
            p.add_argument(flag, dest=dest, default=None, **kw)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    doc = asdict(RunConfig())
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"cannot read config {args.config}: {exc}") from None
        RunConfig.from_dict({**doc, **loaded})  # validates keys
        doc.update(loaded)
    for _, (dest, _) in _FLAGS.items():
        v = getattr(args, dest, None)
        if v is not None:
            doc[dest] = v
    return RunConfig.from_dict(doc)


def _echo(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    def fmt(v):
        return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)

    lines = [",".join(header)] + [",".join(fmt(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def _datasets(cfg: RunConfig):
    if cfg.data:
        root = Path(cfg.data)
        return dataset.read_dataset(root / "train"), dataset.read_dataset(root / "test")
    spec = make_system(cfg.system, el_form=cfg.sim_el_form)
    kw = dict(controls=cfg.controls, T=cfg.T, dt=cfg.dt, H=cfg.H, W=cfg.W, substeps=cfg.substeps)
    return (
        dataset.generate_dataset(spec, n_ic=cfg.n_ic, seed=cfg.seed, **kw),
        dataset.generate_dataset(spec, n_ic=cfg.n_test_ic, seed=cfg.seed + 1, **kw),
    )


def _one_checkpoint(cfg: RunConfig) -> Path:
    if not cfg.checkpoint:
        raise ValueError("--checkpoint is required")
    path = Path(cfg.checkpoint[0])
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, out: Path) -> int:
    train, test = _datasets(RunConfig.from_dict({**asdict(cfg), "data": None}))
    for name, d in (("train", train), ("test", test)):
        dataset.write_dataset(out / name, d)
        text = (out / name / "manifest.json").read_bytes()
        m = d.manifest
        print(
            f"{name}: {m.n_records} records of {m.T + 1} frames, {m.n_bodies} bodies, "
            f"{m.H}x{m.W}, dt={m.dt}, manifest sha256 {hashlib.sha256(text).hexdigest()[:16]}"
        )
    return 0


def cmd_train(cfg: RunConfig, out: Path) -> int:
    train, test = _datasets(cfg)
    result = training.fit(train, cfg.train_config(), test, out_dir=out)
    plotting.loss_curves(result.history, out / "loss_curves.png")
    model = result.model
    mse = training.eval_pixel_mse(model, test, cfg.eval_horizon or cfg.t_pred)
    print(f"trained {cfg.epochs} epochs; skipped batches {result.skipped_batches}; test pixel MSE {mse:.6g}")
    if cfg.system == "pendulum" and model.dynamics_kind == "lagrangian":
        _potential_report(model, out / "learned_potential.png")
    return 0


def _potential_report(model, path: Path) -> None:
    spec = model.spec
    angles = -math.pi + (np.arange(64) + 0.5) * (2 * math.pi / 64)
    x = torch.as_tensor(dataset.render(spec, angles[:, None], model.H, model.W))
    with torch.no_grad():
        z = model.encode(x).mean()
        V = model.dyn.nets.potential(z).numpy()
    plotting.potential_curve(angles, V, path)


def _simulate_reference(spec, y0: np.ndarray, u: np.ndarray, man, T: int, H: int, W: int) -> np.ndarray:
    with torch.no_grad():
        states = dataset.simulate(spec, y0, u, man.dt, T, man.substeps)
    q = states[..., : spec.dof].reshape(-1, spec.dof)
    return dataset.render(spec, q, H, W).reshape(len(y0), T + 1, spec.n_bodies, H, W)


def cmd_predict(cfg: RunConfig, out: Path) -> int:
    model = training.load_model(_one_checkpoint(cfg))
    _, test = _datasets(cfg)
    if test.gt_states is None:
        raise DatasetFormatError("predict needs ground-truth states in the test split")
    n = min(cfg.n_records, len(test))
    spec = test.spec
    y0 = test.gt_states[:n, 0].astype(np.float64)
    ref = _simulate_reference(spec, y0, test.controls[:n], test.manifest, cfg.horizon, model.H, model.W)
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(ref, dtype=dtype)
    u = torch.as_tensor(test.controls[:n], dtype=dtype)
    with torch.no_grad():
        s0 = initial_state_from_means(model, x[:, 0], x[:, 1], model.dt)
        states = model.rollout(s0, u, cfg.horizon, cfg.eval_solver)
        pred = model.decode(states[..., : model.nz]).transpose(0, 1).numpy()
        energy = learned_energy(model.dyn.nets, states).numpy() if model.dynamics_kind == "lagrangian" else None
    per = ((pred - ref) ** 2).reshape(n, cfg.horizon + 1, -1).mean(-1).mean(0)
    rows = []
    for k in range(cfg.horizon + 1):
        e = float(energy[k].mean()) if energy is not None else float("nan")
        rows.append([k, float(per[k]), e])
    _write_csv(out / "predict_mse.csv", ["step", "pixel_mse", "learned_energy"], rows)
    plotting.image_strip([("truth", ref[0]), ("prediction", pred[0])], out / "prediction_strip.png")
    plotting.step_errors(per, out / "prediction_mse.png")
    print(f"mean pixel MSE over {cfg.horizon} steps: {per.mean():.6g}")
    return 0


def cmd_control(cfg: RunConfig, out: Path) -> int:
    spec = make_system(cfg.system, el_form=cfg.sim_el_form)
    m = spec.dof
    gains = control.ControllerGains.scaled_identity(m, cfg.kp, cfg.kd)
    default_q0 = [0.0] * spec.n_trans + [math.pi] * spec.n_rot
    q0 = np.array(cfg.q0 if cfg.q0 is not None else default_q0, dtype=np.float64)
    qdot0 = np.array(cfg.qdot0 if cfg.qdot0 is not None else [0.0] * m, dtype=np.float64)
    goal = np.array(cfg.goal if cfg.goal is not None else [0.0] * m, dtype=np.float64)
    if cfg.mode == "oracle":
        ep = control.closed_loop_oracle(spec, q0, qdot0, goal, gains, cfg.dt, cfg.control_steps, cfg.saturation)
        frames = dataset.render(spec, ep.q, cfg.H, cfg.W)
    else:
        model = training.load_model(_one_checkpoint(cfg))
        if cfg.goal_image:
            goal_img = np.load(cfg.goal_image)
        else:
            goal_img = dataset.render(spec, goal, model.H, model.W)
        ep = control.closed_loop_learned(
            spec, model, goal_img, q0, qdot0, gains, cfg.dt, cfg.control_steps, cfg.saturation, true_goal=goal
        )
        frames = ep.frames
    ep.write_csv(out / "episode.csv")
    every = max(1, len(frames) // 20)
    plotting.image_strip([("episode", frames)], out / "control_strip.png", every=every)
    plotting.control_traces(ep, out / "control_traces.png")
    summary = {
        "mode": cfg.mode,
        "converged": ep.converged(),
        "final_goal_distance": float(ep.goal_distance[-1]),
        "first_step_within_0.05": ep.first_within(0.05),
        "saturated_steps": int(ep.saturated_steps),
    }
    (out / "control_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def _variant_name(model) -> str:
    dyn = "Lagrangian" if model.dynamics_kind == "lagrangian" else "MLPdyn"
    vae = "caVAE" if model.vae_kind == "coordinate-aware" else "VAE"
    return f"{dyn}+{vae}"


def cmd_eval(cfg: RunConfig, out: Path) -> int:
    if not cfg.checkpoint:
        raise ValueError("--checkpoint is required (repeat it for several models)")
    train, test = _datasets(cfg)
    order = {v: i for i, v in enumerate(training.VARIANTS)}
    rows = []
    for path in cfg.checkpoint:
        if not Path(path).exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        model = training.load_model(path)
        h = cfg.eval_horizon or read_checkpoint(path).meta["config"]["T_pred"]
        sub = np.random.default_rng(cfg.seed).permutation(len(train))[: len(test)]
        tr = training.eval_pixel_mse(model, train, h, sub)
        te = training.eval_pixel_mse(model, test, h)
        try:
            full = f"{training.eval_pixel_mse(model, test, None) * 1e3:.2f}"
        except (IntegrationDivergedError, SingularMassError) as exc:
            full = f"diverged (step {exc.step})" if isinstance(exc, IntegrationDivergedError) else "singular mass"
        key = order.get((model.dynamics_kind, model.vae_kind), len(order))
        cells = [_variant_name(model), f"{tr * 1e3:.2f}", f"{te * 1e3:.2f}", full, h]
        rows.append((key, str(path), cells))
    rows.sort(key=lambda r: (r[0], r[1]))
    table = [r[2] for r in rows]
    header = ["model", "train_mse_x1e3", "test_mse_x1e3", "test_full_trajectory_mse_x1e3", "horizon"]
    _write_csv(out / "eval.csv", header, table)
    for r in table:
        print(", ".join(str(v) for v in r))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "predict": cmd_predict,
    "control": cmd_control,
    "eval": cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(int(os.environ.get("LGV_NUM_THREADS", "1")))
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out)
        _echo(cfg, out)
        torch.manual_seed(cfg.seed)
        return COMMANDS[args.command](cfg, out)
    except (
        ValueError,
        OSError,
        DatasetFormatError,
        CheckpointFormatError,
        IntegrationDivergedError,
        SingularMassError,
        training.TrainingAborted,
    ) as exc:
        print(f"lagvae {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
