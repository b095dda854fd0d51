"""Student policies that act from sensor history alone.

Three interchangeable encoders feed one set of output heads:

* ``TransformerStudent``: per-group linear projections tokenize the sensor
  history (T tokens), action context (1), and command (1); two learnable
  query tokens are appended and the action / reconstruction heads read the
  queries' encoder outputs.
* ``MLPStudent`` and ``LSTMStudent``: baselines sized at construction time
  to match the transformer's parameter count within 5%.

All variants return a ``StudentOutput`` with the action squashed to [-1, 1]
plus reconstructions of object position and clean joint state, so the
distillation losses and evaluation code never branch on the encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import io_utils
from .nn import (
    LSTM,
    LayerNorm,
    Linear,
    MLP,
    Module,
    TransformerBlock,
    sinusoidal_positions,
)
from .tensor import DEFAULT_DTYPE, Tensor, add_bcast, concat, matmul

VARIANTS = ("transformer", "mlp", "lstm")


@dataclass(frozen=True)
class LossWeights:
    """Reconstruction term weights; zero disables a term entirely."""

    pos: float = 0.5
    joint: float = 0.3
    vel: float = 0.2

    def __post_init__(self) -> None:
        if min(self.pos, self.joint, self.vel) < 0.0:
            raise ValueError("loss weights must be nonnegative")

    @classmethod
    def disabled(cls) -> "LossWeights":
        return cls(0.0, 0.0, 0.0)


@dataclass
class StudentOutput:
    action: Tensor      # (B, D) in [-1, 1]
    obj_pos: Tensor     # (B, 3)
    joints: Tensor      # (B, D)
    joint_vel: Tensor   # (B, D)


class StudentHeads(Module):
    """Linear output heads shared by every encoder variant."""

    def __init__(self, d_model: int, dof: int, rng: np.random.Generator, dtype):
        self.action = Linear(d_model, dof, rng, dtype=dtype)
        self.obj_pos = Linear(d_model, 3, rng, dtype=dtype)
        self.joints = Linear(d_model, dof, rng, dtype=dtype)
        self.joint_vel = Linear(d_model, dof, rng, dtype=dtype)

    def __call__(
        self, action_feat: Tensor, recon_feats: tuple[Tensor, Tensor, Tensor]
    ) -> StudentOutput:
        return StudentOutput(
            action=self.action(action_feat).tanh(),
            obj_pos=self.obj_pos(recon_feats[0]),
            joints=self.joints(recon_feats[1]),
            joint_vel=self.joint_vel(recon_feats[2]),
        )


def check_student_inputs(
    history, action_ctx, command, history_len: int, dof: int, cmd_dim: int, dtype
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    history = np.asarray(history, dtype=dtype)
    action_ctx = np.asarray(action_ctx, dtype=dtype)
    command = np.asarray(command, dtype=dtype)
    two_d = 2 * dof
    if history.ndim != 3 or history.shape[1:] != (history_len, two_d):
        raise ValueError(
            f"history must be (batch, {history_len}, {two_d}), got {history.shape}"
        )
    b = history.shape[0]
    if action_ctx.shape != (b, two_d):
        raise ValueError(f"action_ctx must be ({b}, {two_d}), got {action_ctx.shape}")
    if command.shape != (b, cmd_dim):
        raise ValueError(f"command must be ({b}, {cmd_dim}), got {command.shape}")
    return history, action_ctx, command


class TokenLayout(Module):
    """Per-group projections into the token space, plus positional offsets."""

    def __init__(
        self,
        history_len: int,
        dof: int,
        rng: np.random.Generator,
        d_model: int = 256,
        cmd_dim: int = 6,
        dtype=DEFAULT_DTYPE,
    ):
        if history_len < 1:
            raise ValueError(f"history_len must be >= 1, got {history_len}")
        self.history_len = history_len
        self.dof = dof
        self.d_model = d_model
        self.cmd_dim = cmd_dim
        self.n_tokens = history_len + 2
        self.np_dtype = np.dtype(dtype)
        self.proj_history = Linear(2 * dof, d_model, rng, dtype=dtype)
        self.proj_action = Linear(2 * dof, d_model, rng, dtype=dtype)
        self.proj_command = Linear(cmd_dim, d_model, rng, dtype=dtype)
        # fixed table; long enough for the query positions as well
        self.positions = sinusoidal_positions(self.n_tokens + 4, d_model, dtype)

    def tokenize(self, history, action_ctx, command) -> Tensor:
        """(B, T, 2D), (B, 2D), (B, 6) -> (B, T+2, d_model) with positions."""
        history, action_ctx, command = check_student_inputs(
            history, action_ctx, command,
            self.history_len, self.dof, self.cmd_dim, self.np_dtype,
        )
        b, t = history.shape[0], self.history_len
        h = self.proj_history(Tensor(history.reshape(b * t, -1)))
        h = h.reshape(b, t, self.d_model)
        a = self.proj_action(Tensor(action_ctx)).reshape(b, 1, self.d_model)
        c = self.proj_command(Tensor(command)).reshape(b, 1, self.d_model)
        toks = concat([h, a, c], axis=1)
        return add_bcast(toks, Tensor(self.positions[: self.n_tokens]))


def tokenize(history, action_ctx, command, layout: TokenLayout) -> Tensor:
    return layout.tokenize(history, action_ctx, command)


class TransformerStudent(Module):
    """Full-attention encoder over history/context/command tokens plus queries.

    Query tokens (with their own positional rows) are appended after the
    content tokens; the action head reads the first query's output and the
    reconstruction heads read the remaining one (or three when configured
    with one query per head).
    """

    variant = "transformer"

    def __init__(
        self,
        dof: int,
        rng: np.random.Generator,
        history_len: int = 10,
        d_model: int = 256,
        n_layers: int = 3,
        n_heads: int = 4,
        ff_dim: int = 1024,
        n_queries: int = 2,
        cmd_dim: int = 6,
        dtype=DEFAULT_DTYPE,
    ):
        if n_queries not in (2, 4):
            raise ValueError(f"n_queries must be 2 or 4, got {n_queries}")
        self.dof = dof
        self.history_len = history_len
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.ff_dim = ff_dim
        self.n_queries = n_queries
        self.cmd_dim = cmd_dim
        self.np_dtype = np.dtype(dtype)
        self.layout = TokenLayout(history_len, dof, rng, d_model, cmd_dim, dtype)
        self.queries = Tensor(
            rng.normal(0.0, 0.02, (n_queries, d_model)), requires_grad=True, dtype=dtype
        )
        self.blocks = [
            TransformerBlock(d_model, n_heads, ff_dim, rng, dtype=dtype)
            for _ in range(n_layers)
        ]
        self.ln_out = LayerNorm(d_model, dtype=dtype)
        self.heads = StudentHeads(d_model, dof, rng, dtype)

    def encode(self, history, action_ctx, command) -> Tensor:
        """Run the encoder; returns all (B, T+2+n_queries, d_model) outputs."""
        toks = self.layout.tokenize(history, action_ctx, command)
        b = toks.shape[0]
        nq, d = self.n_queries, self.d_model
        q = self.queries + Tensor(self.layout.positions[self.layout.n_tokens:
                                                        self.layout.n_tokens + nq])
        # broadcast the query rows across the batch through a rank-1 matmul
        # so the gradient still accumulates into the shared parameters
        ones = Tensor(np.ones((b, 1), dtype=self.np_dtype))
        q_b = matmul(ones, q.reshape(1, nq * d)).reshape(b, nq, d)
        seq = concat([toks, q_b], axis=1)
        for block in self.blocks:
            seq = block(seq)
        return self.ln_out(seq)

    def __call__(self, history, action_ctx, command) -> StudentOutput:
        seq = self.encode(history, action_ctx, command)
        base = self.layout.n_tokens
        action_feat = seq[:, base, :]
        if self.n_queries == 2:
            r = seq[:, base + 1, :]
            recon_feats = (r, r, r)
        else:
            recon_feats = (seq[:, base + 1, :], seq[:, base + 2, :], seq[:, base + 3, :])
        return self.heads(action_feat, recon_feats)

    def config(self) -> dict:
        return {
            "variant": self.variant,
            "dof": self.dof,
            "history_len": self.history_len,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "ff_dim": self.ff_dim,
            "n_queries": self.n_queries,
            "cmd_dim": self.cmd_dim,
        }


def _head_param_count(d_model: int, dof: int) -> int:
    return 3 * (d_model * dof + dof) + d_model * 3 + 3


def transformer_param_count(
    dof: int,
    history_len: int = 10,
    d_model: int = 256,
    n_layers: int = 3,
    ff_dim: int = 1024,
    n_queries: int = 2,
    cmd_dim: int = 6,
) -> int:
    """Closed-form parameter count of TransformerStudent (positions excluded)."""
    proj = 2 * (2 * dof * d_model + d_model) + cmd_dim * d_model + d_model
    block = (
        4 * (d_model * d_model + d_model)      # q, k, v, o
        + d_model * ff_dim + ff_dim            # ff in
        + ff_dim * d_model + d_model           # ff out
        + 4 * d_model                          # two layer norms
    )
    return (
        proj
        + n_queries * d_model
        + n_layers * block
        + 2 * d_model                          # output norm
        + _head_param_count(d_model, dof)
    )


def _mlp_trunk_params(in_dim: int, w: int, d_model: int) -> int:
    w2 = max(w // 2, d_model)
    return (
        in_dim * w + w
        + w * w + w
        + w * w2 + w2
        + w2 * d_model + d_model
    )


def _solve_width(count_fn, target: int, lo: int = 8, hi: int = 8192) -> int:
    """Smallest width whose count reaches target (count_fn monotone)."""
    while lo < hi:
        mid = (lo + hi) // 2
        if count_fn(mid) < target:
            lo = mid + 1
        else:
            hi = mid
    below = max(lo - 1, 1)
    if abs(count_fn(below) - target) < abs(count_fn(lo) - target):
        return below
    return lo


class MLPStudent(Module):
    """Flattened-input baseline; trunk width solved for parameter parity."""

    variant = "mlp"

    def __init__(
        self,
        dof: int,
        rng: np.random.Generator,
        history_len: int = 10,
        d_model: int = 256,
        cmd_dim: int = 6,
        target_params: int | None = None,
        dtype=DEFAULT_DTYPE,
    ):
        self.dof = dof
        self.history_len = history_len
        self.d_model = d_model
        self.cmd_dim = cmd_dim
        self.np_dtype = np.dtype(dtype)
        in_dim = history_len * 2 * dof + 2 * dof + cmd_dim
        if target_params is None:
            target_params = transformer_param_count(
                dof, history_len, d_model, cmd_dim=cmd_dim
            )
        self.target_params = target_params
        trunk_target = target_params - _head_param_count(d_model, dof)
        w = _solve_width(lambda k: _mlp_trunk_params(in_dim, k, d_model), trunk_target)
        self.trunk = MLP(
            [in_dim, w, w, max(w // 2, d_model), d_model], rng,
            activation="elu", dtype=dtype,
        )
        self.heads = StudentHeads(d_model, dof, rng, dtype)

    def __call__(self, history, action_ctx, command) -> StudentOutput:
        history, action_ctx, command = check_student_inputs(
            history, action_ctx, command,
            self.history_len, self.dof, self.cmd_dim, self.np_dtype,
        )
        b = history.shape[0]
        flat = np.concatenate([history.reshape(b, -1), action_ctx, command], axis=1)
        feat = self.trunk(Tensor(flat))
        return self.heads(feat, (feat, feat, feat))

    def config(self) -> dict:
        return {
            "variant": self.variant,
            "dof": self.dof,
            "history_len": self.history_len,
            "d_model": self.d_model,
            "cmd_dim": self.cmd_dim,
            "target_params": self.target_params,
        }


def _lstm_params(in_dim: int, h: int, d_model: int) -> int:
    return in_dim * 4 * h + h * 4 * h + 4 * h + h * d_model + d_model


class LSTMStudent(Module):
    """Recurrent baseline over the history; hidden size solved for parity.

    Each timestep consumes [history_t, action_ctx, command]; the final hidden
    state is projected to the shared feature width and feeds the same heads.
    """

    variant = "lstm"

    def __init__(
        self,
        dof: int,
        rng: np.random.Generator,
        history_len: int = 10,
        d_model: int = 256,
        cmd_dim: int = 6,
        target_params: int | None = None,
        dtype=DEFAULT_DTYPE,
    ):
        self.dof = dof
        self.history_len = history_len
        self.d_model = d_model
        self.cmd_dim = cmd_dim
        self.np_dtype = np.dtype(dtype)
        in_dim = 2 * dof + 2 * dof + cmd_dim
        if target_params is None:
            target_params = transformer_param_count(
                dof, history_len, d_model, cmd_dim=cmd_dim
            )
        self.target_params = target_params
        trunk_target = target_params - _head_param_count(d_model, dof)
        h = _solve_width(lambda k: _lstm_params(in_dim, k, d_model), trunk_target)
        self.lstm = LSTM(in_dim, h, rng, dtype=dtype)
        self.proj = Linear(h, d_model, rng, dtype=dtype)
        self.heads = StudentHeads(d_model, dof, rng, dtype)

    def __call__(self, history, action_ctx, command) -> StudentOutput:
        history, action_ctx, command = check_student_inputs(
            history, action_ctx, command,
            self.history_len, self.dof, self.cmd_dim, self.np_dtype,
        )
        b, t = history.shape[0], self.history_len
        rep_a = np.repeat(action_ctx[:, None, :], t, axis=1)
        rep_c = np.repeat(command[:, None, :], t, axis=1)
        x = np.concatenate([history, rep_a, rep_c], axis=2)
        feat = self.proj(self.lstm(Tensor(x)))
        return self.heads(feat, (feat, feat, feat))

    def config(self) -> dict:
        return {
            "variant": self.variant,
            "dof": self.dof,
            "history_len": self.history_len,
            "d_model": self.d_model,
            "cmd_dim": self.cmd_dim,
            "target_params": self.target_params,
        }


def build_student(variant: str, dof: int, rng: np.random.Generator, **kw):
    if variant == "transformer":
        return TransformerStudent(dof, rng, **kw)
    if variant == "mlp":
        return MLPStudent(dof, rng, **kw)
    if variant == "lstm":
        return LSTMStudent(dof, rng, **kw)
    raise ValueError(f"unknown student variant {variant!r}; choose from {VARIANTS}")


# ----------------------------------------------------------------------
# losses
def bc_loss(pred_action: Tensor, teacher_action: np.ndarray) -> Tensor:
    """Mean over batch and action dims of the squared imitation error."""
    target = Tensor(np.asarray(teacher_action, dtype=pred_action.dtype))
    return (pred_action - target).square().mean()


def recon_loss(
    out: StudentOutput,
    obj_pos: np.ndarray,
    joints: np.ndarray,
    joint_vel: np.ndarray,
    weights: LossWeights,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted mean-square reconstruction terms.

    Returns (total, parts); parts hold the weighted per-term values, so a
    zero weight logs exactly 0.0 and skips the term's graph entirely.
    """
    dtype = out.obj_pos.dtype
    total = Tensor(np.zeros((), dtype=dtype))
    parts = {"recon_pos": 0.0, "recon_joint": 0.0, "recon_vel": 0.0}
    pairs = (
        ("recon_pos", weights.pos, out.obj_pos, obj_pos),
        ("recon_joint", weights.joint, out.joints, joints),
        ("recon_vel", weights.vel, out.joint_vel, joint_vel),
    )
    for name, w, pred, target in pairs:
        if w == 0.0:
            continue
        term = (pred - Tensor(np.asarray(target, dtype=dtype))).square().mean() * w
        parts[name] = float(term.data)
        total = total + term
    return total, parts


def student_loss(
    out: StudentOutput,
    teacher_action: np.ndarray,
    obj_pos: np.ndarray,
    joints: np.ndarray,
    joint_vel: np.ndarray,
    weights: LossWeights,
) -> tuple[Tensor, dict[str, float]]:
    """Imitation plus reconstruction; parts include every logged term."""
    bc = bc_loss(out.action, teacher_action)
    rec, parts = recon_loss(out, obj_pos, joints, joint_vel, weights)
    total = bc + rec
    parts["bc"] = float(bc.data)
    parts["total"] = float(total.data)
    return total, parts


# ----------------------------------------------------------------------
# checkpointing
def save_student(path, student, extra: dict | None = None) -> None:
    meta = {"kind": "student"}
    meta.update(student.config())
    if extra:
        meta.update(extra)
    arrays = {n: p.data for n, p in student.named_parameters()}
    io_utils.save_checkpoint(path, arrays, meta)


def load_student(path, expect_variant: str | None = None):
    meta, arrays = io_utils.load_checkpoint(path)
    if meta.get("kind") != "student":
        raise io_utils.IncompatibleCheckpointError(
            f"cannot load kind={meta.get('kind')!r} checkpoint as kind='student'"
        )
    variant = meta.get("variant")
    if expect_variant is not None and variant != expect_variant:
        raise io_utils.IncompatibleCheckpointError(
            f"checkpoint holds a {variant!r} student, expected {expect_variant!r}"
        )
    kw = {
        k: meta[k]
        for k in ("history_len", "d_model", "cmd_dim", "n_layers", "n_heads",
                  "ff_dim", "n_queries", "target_params")
        if k in meta
    }
    student = build_student(variant, meta["dof"], np.random.default_rng(0), **kw)
    try:
        student.load_state_dict(arrays)
    except KeyError as e:
        raise io_utils.IncompatibleCheckpointError(str(e)) from e
    return student, meta
