"""Teacher-to-student data collection and supervised distillation.

Collection rolls the environment forward under the configured driver and
records, at every step, the student's noisy view (sensor history, action
context, command) together with the teacher's deterministic action and the
noise-free state labels.  Training then regresses the student on those
records with AdamW.

The dataset is persisted as a fixed-stride binary file so runs are exactly
reproducible: header (magic, version, T, D, sample count), float32 records,
CRC32 trailer.
"""

from __future__ import annotations

import struct
import sys
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io_utils
from .env.hand_env import SimulationDiverged
from .optim import AdamW
from .student import LossWeights, build_student, student_loss

DATASET_MAGIC = b"PTDS"
DATASET_VERSION = 1

DRIVERS = ("teacher", "dagger")

# keeps the weight-init stream disjoint from the per-step minibatch streams
_INIT_STREAM = 0x7FFF_FFFF


class DistillationDiverged(RuntimeError):
    """Training loss went non-finite; the last good checkpoint was written."""


@dataclass
class DistillConfig:
    dataset_size: int = 50_000
    batch_size: int = 256
    lr: float = 1e-5
    weight_decay: float = 0.01
    epochs: int | None = 1200
    max_steps: int | None = 6000      # authoritative when both budgets are set
    driver: str = "teacher"
    dagger_beta_start: float = 1.0    # linear teacher-mixing schedule start
    dagger_beta_end: float = 0.0      # and end; start == end pins beta
    history_len: int = 10
    no_recon: bool = False
    loss_weights: LossWeights = field(default_factory=LossWeights)
    checkpoint_every: int = 0         # gradient steps; 0 = final only

    def __post_init__(self) -> None:
        if self.driver not in DRIVERS:
            raise ValueError(f"driver must be one of {DRIVERS}, got {self.driver!r}")
        for b in (self.dagger_beta_start, self.dagger_beta_end):
            if not 0.0 <= b <= 1.0:
                raise ValueError(f"dagger beta must lie in [0, 1], got {b}")
        if self.batch_size <= 0 or self.dataset_size <= 0:
            raise ValueError("dataset_size and batch_size must be positive")
        if self.batch_size > self.dataset_size:
            raise ValueError(
                f"batch_size {self.batch_size} exceeds dataset size {self.dataset_size}"
            )
        if self.epochs is None and self.max_steps is None:
            raise ValueError("set an epoch or step budget")
        if (self.epochs is not None and self.epochs < 0) or (
            self.max_steps is not None and self.max_steps < 0
        ):
            raise ValueError("budgets must be >= 0")
        if self.history_len < 1:
            raise ValueError("history_len must be >= 1")


@dataclass
class DistillDataset:
    history: np.ndarray        # (N, T, 2D) noisy sensor tokens
    action_ctx: np.ndarray     # (N, 2D)
    command: np.ndarray        # (N, 6)
    teacher_action: np.ndarray  # (N, D)
    obj_pos: np.ndarray        # (N, 3) noise-free
    joints: np.ndarray         # (N, D) noise-free
    joint_vel: np.ndarray      # (N, D) noise-free
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = self.history.shape[0]
        for name in ("action_ctx", "command", "teacher_action",
                     "obj_pos", "joints", "joint_vel"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} row count differs from history")

    @property
    def n(self) -> int:
        return self.history.shape[0]

    @property
    def history_len(self) -> int:
        return self.history.shape[1]

    @property
    def dof(self) -> int:
        return self.teacher_action.shape[1]

    def take(self, idx: np.ndarray) -> "DistillDataset":
        return DistillDataset(
            self.history[idx], self.action_ctx[idx], self.command[idx],
            self.teacher_action[idx], self.obj_pos[idx], self.joints[idx],
            self.joint_vel[idx], dict(self.meta),
        )


def _record_width(t: int, d: int) -> int:
    return t * 2 * d + 2 * d + 6 + d + 3 + d + d


def dataset_to_records(ds: DistillDataset) -> np.ndarray:
    """Flatten to the fixed-stride (N, record_width) float32 matrix."""
    n = ds.n
    return np.concatenate(
        [
            ds.history.reshape(n, -1),
            ds.action_ctx,
            ds.command,
            ds.teacher_action,
            ds.obj_pos,
            ds.joints,
            ds.joint_vel,
        ],
        axis=1,
    ).astype(np.float32)


def dataset_from_records(records: np.ndarray, t: int, d: int,
                         meta: dict | None = None) -> DistillDataset:
    n = records.shape[0]
    if records.shape[1] != _record_width(t, d):
        raise ValueError(
            f"record width {records.shape[1]} != expected {_record_width(t, d)}"
        )
    parts = np.split(
        records,
        np.cumsum([t * 2 * d, 2 * d, 6, d, 3, d]),
        axis=1,
    )
    return DistillDataset(
        parts[0].reshape(n, t, 2 * d), parts[1], parts[2], parts[3],
        parts[4], parts[5], parts[6], meta or {},
    )


def save_dataset(path: str | Path, ds: DistillDataset) -> None:
    records = dataset_to_records(ds)
    head = DATASET_MAGIC + struct.pack(
        "<IIIQ", DATASET_VERSION, ds.history_len, ds.dof, ds.n
    )
    body = head + records.tobytes()
    blob = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    io_utils.atomic_write_bytes(path, blob)


def load_dataset(path: str | Path) -> DistillDataset:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 28 or blob[:4] != DATASET_MAGIC:
        raise io_utils.CorruptCheckpointError(f"{path}: not a dataset file")
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != struct.unpack("<I", blob[-4:])[0]:
        raise io_utils.CorruptCheckpointError(f"{path}: CRC mismatch")
    version, t, d, n = struct.unpack("<IIIQ", blob[4:24])
    if version != DATASET_VERSION:
        raise io_utils.IncompatibleCheckpointError(
            f"{path}: dataset version {version}, this build reads {DATASET_VERSION}"
        )
    width = _record_width(t, d)
    payload = blob[24:-4]
    if len(payload) != 4 * n * width:
        raise io_utils.CorruptCheckpointError(f"{path}: payload size mismatch")
    records = np.frombuffer(payload, dtype="<f4").reshape(n, width).copy()
    return dataset_from_records(records, t, d, {"path": str(path)})


# ----------------------------------------------------------------------
# collection
def collect(
    policy,
    env,
    cfg: DistillConfig,
    seed: int = 0,
    student=None,
) -> DistillDataset:
    """Roll out and record exactly ``cfg.dataset_size`` aligned samples.

    ``driver="teacher"`` applies the teacher's deterministic action;
    ``driver="dagger"`` mixes in the current student's action with
    probability 1 - beta, beta sliding linearly between the configured
    endpoints (default 1 -> 0) over the collection.
    On simulation divergence the just-recorded step is dropped, the batch
    is reset, and the discard is counted in the dataset metadata.
    """
    if cfg.driver == "dagger" and student is None:
        raise ValueError("dagger driver needs the student being trained")
    if cfg.history_len > env.history_len:
        raise ValueError(
            f"cfg.history_len {cfg.history_len} exceeds env buffer {env.history_len}"
        )
    mix_rng, shuffle_rng = (
        np.random.default_rng(c) for c in np.random.SeedSequence(seed).spawn(2)
    )
    target = cfg.dataset_size
    chunks: list[np.ndarray] = []
    collected = 0
    discarded = 0
    env.reset()
    while collected < target:
        obs = env.teacher_obs()
        teacher_action, _, _ = policy.sample(obs, deterministic=True)
        labels = env.privileged_labels()
        sample = DistillDataset(
            env.student_history(cfg.history_len).copy(),
            env.action_context(),
            env.commands(),
            teacher_action.astype(np.float32),
            labels["obj_pos"],
            labels["q"],
            labels["qd"],
        )
        applied = teacher_action
        if cfg.driver == "dagger":
            frac = collected / target
            beta = cfg.dagger_beta_start * (1.0 - frac) + cfg.dagger_beta_end * frac
            use_student = mix_rng.random(env.n_envs) >= beta
            if np.any(use_student):
                out = student(
                    sample.history, sample.action_ctx, sample.command
                )
                applied = teacher_action.copy()
                applied[use_student] = out.action.data[use_student]
        try:
            env.step(applied)
        except SimulationDiverged:
            discarded += env.n_envs
            env.reset()
            continue
        chunks.append(dataset_to_records(sample))
        collected += env.n_envs
    records = np.concatenate(chunks, axis=0)[:target]
    perm = shuffle_rng.permutation(target)
    ds = dataset_from_records(records[perm], cfg.history_len, env.dof)
    ds.meta.update({"driver": cfg.driver, "seed": seed, "discarded": discarded})
    return ds


# ----------------------------------------------------------------------
# training
CURVE_HEADER = [
    "epoch", "step", "loss_bc", "loss_recon_pos", "loss_recon_joint",
    "loss_recon_vel", "loss_total",
]


def _steps_per_epoch(n: int, batch: int) -> int:
    return max(1, n // batch)


def resolve_step_budget(cfg: DistillConfig, n_samples: int) -> int:
    if cfg.max_steps is not None:
        return cfg.max_steps
    return cfg.epochs * _steps_per_epoch(n_samples, cfg.batch_size)


def _minibatch_indices(seed: int, step: int, n: int, batch: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence((seed, step)))
    return rng.choice(n, size=batch, replace=False)


def save_student_checkpoint(path, model, optimizer, step: int, extra=None) -> None:
    meta = {"kind": "student", "step": step,
            "opt_t": optimizer.t, "opt_skipped": optimizer.skipped_steps}
    meta.update(model.config())
    if extra:
        meta.update(extra)
    arrays = {n: p.data for n, p in model.named_parameters()}
    for i, (m, v) in enumerate(zip(optimizer.m, optimizer.v)):
        arrays[f"opt.m.{i}"] = m
        arrays[f"opt.v.{i}"] = v
    io_utils.save_checkpoint(path, arrays, meta)


def load_student_checkpoint(path):
    """Rebuild (model, optimizer arrays, meta); optimizer arrays may be absent."""
    meta, arrays = io_utils.load_checkpoint(path)
    model_arrays = {n: a for n, a in arrays.items() if not n.startswith("opt.")}
    # reuse the architecture plumbing in load_student by re-reading metadata
    if meta.get("kind") != "student":
        raise io_utils.IncompatibleCheckpointError(
            f"cannot load kind={meta.get('kind')!r} checkpoint as kind='student'"
        )
    kw = {
        k: meta[k]
        for k in ("history_len", "d_model", "cmd_dim", "n_layers", "n_heads",
                  "ff_dim", "n_queries", "target_params")
        if k in meta
    }
    model = build_student(meta["variant"], meta["dof"], np.random.default_rng(0), **kw)
    try:
        model.load_state_dict(model_arrays)
    except KeyError as e:
        raise io_utils.IncompatibleCheckpointError(str(e)) from e
    opt_state = None
    n_params = len(model.parameters())
    if any(n.startswith("opt.") for n in arrays):
        opt_state = {
            "t": meta["opt_t"],
            "skipped_steps": meta["opt_skipped"],
            "m": [arrays[f"opt.m.{i}"] for i in range(n_params)],
            "v": [arrays[f"opt.v.{i}"] for i in range(n_params)],
        }
    return model, opt_state, meta


def train_student(
    dataset: DistillDataset,
    variant: str,
    cfg: DistillConfig,
    out_dir: str | Path | None = None,
    seed: int = 0,
    resume_from: str | Path | None = None,
    progress: bool = False,
    student_kwargs: dict | None = None,
) -> tuple[object, list[dict[str, float]]]:
    """Supervised distillation; returns (model, per-epoch loss rows).

    ``resume_from`` restores model and optimizer state and continues the
    deterministic minibatch schedule from the stored step, so a resumed run
    reproduces the uninterrupted run bit for bit.
    """
    weights = LossWeights.disabled() if cfg.no_recon else cfg.loss_weights
    start_step = 0
    if resume_from is not None:
        model, opt_state, meta = load_student_checkpoint(resume_from)
        if model.variant != variant:
            raise io_utils.IncompatibleCheckpointError(
                f"checkpoint holds a {model.variant!r} student, expected {variant!r}"
            )
        start_step = int(meta["step"])
    else:
        init_rng = np.random.default_rng(np.random.SeedSequence((seed, _INIT_STREAM)))
        model = build_student(variant, dataset.dof, init_rng,
                              history_len=dataset.history_len,
                              **(student_kwargs or {}))
        opt_state = None
    optimizer = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    if opt_state is not None:
        optimizer.load_state_dict(opt_state)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    total_steps = resolve_step_budget(cfg, dataset.n)
    per_epoch = _steps_per_epoch(dataset.n, cfg.batch_size)

    history: list[dict[str, float]] = []
    epoch_acc: dict[str, float] = {}
    epoch_count = 0

    def flush_epoch(step: int) -> None:
        nonlocal epoch_acc, epoch_count
        if epoch_count == 0:
            return
        row = {"epoch": float(len(history)), "step": float(step)}
        row.update({k: v / epoch_count for k, v in epoch_acc.items()})
        history.append(row)
        epoch_acc, epoch_count = {}, 0

    def write_outputs(name: str, step: int) -> None:
        if out is None:
            return
        rows = [[h[c] for c in CURVE_HEADER] for h in history]
        io_utils.write_csv(out / "distill_curve.csv", CURVE_HEADER, rows)
        save_student_checkpoint(out / name, model, optimizer, step,
                                {"no_recon": cfg.no_recon})

    for step in range(start_step, total_steps):
        idx = _minibatch_indices(seed, step, dataset.n, cfg.batch_size)
        mb = dataset.take(idx)
        outp = model(mb.history, mb.action_ctx, mb.command)
        loss, parts = student_loss(
            outp, mb.teacher_action, mb.obj_pos, mb.joints, mb.joint_vel, weights
        )
        if not np.isfinite(loss.data):
            write_outputs("student_abort.ptck", step)
            raise DistillationDiverged(
                f"non-finite distillation loss at step {step}"
                + ("" if out is None else f"; last good state in {out}")
            )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        for key, val in (("loss_bc", parts["bc"]),
                         ("loss_recon_pos", parts["recon_pos"]),
                         ("loss_recon_joint", parts["recon_joint"]),
                         ("loss_recon_vel", parts["recon_vel"]),
                         ("loss_total", parts["total"])):
            epoch_acc[key] = epoch_acc.get(key, 0.0) + val
        epoch_count += 1
        if (step + 1) % per_epoch == 0:
            flush_epoch(step + 1)
            if progress and len(history) % 50 == 0:
                h = history[-1]
                print(
                    f"epoch {int(h['epoch'])}: bc {h['loss_bc']:.4f} "
                    f"total {h['loss_total']:.4f}",
                    file=sys.stderr, flush=True,
                )
        if cfg.checkpoint_every > 0 and (step + 1) % cfg.checkpoint_every == 0:
            write_outputs(f"student_step{step + 1}.ptck", step + 1)
    flush_epoch(total_steps)
    write_outputs("student_final.ptck", total_steps)
    return model, history
