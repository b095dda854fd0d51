"""Collection and distillation-training behavior.

Covers the dataset container, exact-count collection, zero-noise label
alignment, the teacher/dagger driver equivalence at beta = 1, divergence
handling, deterministic shuffling, budget semantics, loss logging, the
NaN abort path, and bit-identical checkpoint resume.
"""

import numpy as np
import pytest

import proprospin.distill as distill_mod
from proprospin.distill import (
    DistillationDiverged,
    DistillConfig,
    DistillDataset,
    collect,
    dataset_from_records,
    dataset_to_records,
    load_dataset,
    load_student_checkpoint,
    resolve_step_budget,
    save_dataset,
    train_student,
)
from proprospin.env.config import EnvConfig, SensorConfig
from proprospin.env.hand_env import HandEnv, SimulationDiverged
from proprospin.io_utils import CorruptCheckpointError, IncompatibleCheckpointError
from proprospin.student import build_student
from proprospin.teacher import GaussianPolicy
from proprospin.tensor import Tensor


def make_env(seed=0, n_envs=4, **cfg_kw):
    return HandEnv(EnvConfig(**cfg_kw), n_envs=n_envs, seed=seed, history_len=8)


def make_policy(env, seed=0):
    rng = np.random.default_rng(seed)
    return GaussianPolicy(env.obs_dim, env.dof, rng, hidden=(16,))


def small_cfg(**kw):
    base = dict(dataset_size=16, batch_size=16, epochs=None, max_steps=2,
                history_len=5)
    base.update(kw)
    return DistillConfig(**base)


@pytest.fixture(scope="module")
def small_dataset():
    env = make_env()
    return collect(make_policy(env), env, small_cfg(), seed=7)


class TestConfig:
    def test_defaults_step_budget_authoritative(self):
        cfg = DistillConfig()
        assert cfg.epochs == 1200 and cfg.max_steps == 6000
        assert resolve_step_budget(cfg, 50_000) == 6000

    def test_epoch_budget_when_steps_unset(self):
        cfg = DistillConfig(dataset_size=1024, batch_size=256,
                            epochs=3, max_steps=None)
        assert resolve_step_budget(cfg, 1024) == 3 * 4

    @pytest.mark.parametrize("kw", [
        dict(batch_size=64, dataset_size=32),
        dict(driver="expert"),
        dict(epochs=None, max_steps=None),
        dict(max_steps=-1),
        dict(dagger_beta_start=1.5),
        dict(history_len=0),
    ])
    def test_rejects_bad_values(self, kw):
        with pytest.raises(ValueError):
            small_cfg(**kw)


class TestDatasetContainer:
    def test_records_roundtrip(self, small_dataset):
        ds = small_dataset
        records = dataset_to_records(ds)
        back = dataset_from_records(records, ds.history_len, ds.dof)
        for name in ("history", "action_ctx", "command", "teacher_action",
                     "obj_pos", "joints", "joint_vel"):
            assert np.array_equal(getattr(ds, name), getattr(back, name))

    def test_file_roundtrip_bit_identical(self, small_dataset, tmp_path):
        p = tmp_path / "d.ptds"
        save_dataset(p, small_dataset)
        back = load_dataset(p)
        assert np.array_equal(dataset_to_records(back),
                              dataset_to_records(small_dataset))

    def test_truncated_file_rejected(self, small_dataset, tmp_path):
        p = tmp_path / "d.ptds"
        save_dataset(p, small_dataset)
        blob = p.read_bytes()
        p.write_bytes(blob[:len(blob) // 2])
        with pytest.raises(CorruptCheckpointError):
            load_dataset(p)

    def test_bitflip_rejected(self, small_dataset, tmp_path):
        p = tmp_path / "d.ptds"
        save_dataset(p, small_dataset)
        blob = bytearray(p.read_bytes())
        blob[40] ^= 0x10
        p.write_bytes(bytes(blob))
        with pytest.raises(CorruptCheckpointError):
            load_dataset(p)

    def test_wrong_version_incompatible(self, small_dataset, tmp_path):
        import struct
        import zlib
        p = tmp_path / "d.ptds"
        save_dataset(p, small_dataset)
        blob = bytearray(p.read_bytes())[:-4]
        blob[4:8] = struct.pack("<I", 99)
        blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
        p.write_bytes(bytes(blob))
        with pytest.raises(IncompatibleCheckpointError):
            load_dataset(p)

    def test_not_a_dataset(self, tmp_path):
        p = tmp_path / "junk.ptds"
        p.write_bytes(b"hello world, definitely not records")
        with pytest.raises(CorruptCheckpointError):
            load_dataset(p)


class TestCollect:
    def test_exactly_n_samples(self):
        # 10 is not a multiple of n_envs=4, so the tail must be trimmed
        env = make_env()
        cfg = small_cfg(dataset_size=10, batch_size=5)
        ds = collect(make_policy(env), env, cfg, seed=0)
        assert ds.n == 10
        assert ds.history.shape == (10, 5, 2 * env.dof)
        assert ds.meta["discarded"] == 0

    def test_zero_noise_readings_match_clean_labels(self):
        sensor = SensorConfig(bias_std=0.0, noise_std=0.0, velocity_noise_std=0.0)
        env = make_env(sensor=sensor)
        ds = collect(make_policy(env), env, small_cfg(), seed=3)
        d = env.dof
        # velocity channel of the newest reading is the raw joint rate
        assert np.array_equal(ds.history[:, -1, d:], ds.joint_vel)
        # position channel is the normalized clean angle (float32 rounding)
        expected = env._norm_q(ds.joints.astype(np.float64))
        np.testing.assert_allclose(ds.history[:, -1, :d], expected, atol=1e-6)

    def test_noisy_readings_differ_from_labels(self):
        env = make_env()
        ds = collect(make_policy(env), env, small_cfg(), seed=3)
        d = env.dof
        assert not np.allclose(ds.history[:, -1, d:], ds.joint_vel, atol=1e-4)

    def test_dagger_beta_one_matches_teacher_driver(self, tmp_path):
        cfgs = [
            small_cfg(driver="teacher"),
            small_cfg(driver="dagger", dagger_beta_start=1.0, dagger_beta_end=1.0),
        ]
        student = build_student("mlp", make_env().dof, np.random.default_rng(9),
                                history_len=5, target_params=1500)
        blobs = []
        for i, cfg in enumerate(cfgs):
            env = make_env(seed=11)
            ds = collect(make_policy(env, seed=2), env, cfg, seed=5,
                         student=student if cfg.driver == "dagger" else None)
            p = tmp_path / f"d{i}.ptds"
            save_dataset(p, ds)
            blobs.append(p.read_bytes())
        assert blobs[0] == blobs[1]

    def test_dagger_full_student_changes_data(self):
        student = build_student("mlp", make_env().dof, np.random.default_rng(9),
                                history_len=5, target_params=1500)
        out = []
        for cfg in (small_cfg(driver="teacher"),
                    small_cfg(driver="dagger", dagger_beta_start=0.0,
                              dagger_beta_end=0.0)):
            env = make_env(seed=11)
            ds = collect(make_policy(env, seed=2), env, cfg, seed=5, student=student)
            out.append(dataset_to_records(ds))
        assert not np.array_equal(out[0], out[1])

    def test_dagger_requires_student(self):
        env = make_env()
        with pytest.raises(ValueError, match="student"):
            collect(make_policy(env), env, small_cfg(driver="dagger"), seed=0)

    def test_window_longer_than_env_buffer(self):
        env = make_env()  # history_len=8
        with pytest.raises(ValueError, match="history"):
            collect(make_policy(env), env, small_cfg(history_len=9), seed=0)

    def test_shuffle_is_permutation_of_trajectory(self):
        # identical env/policy seeds, different shuffle seeds: the two
        # datasets must hold the same multiset of rows in different order
        records = []
        for shuffle_seed in (1, 2):
            env = make_env(seed=4)
            ds = collect(make_policy(env, seed=2), env, small_cfg(),
                         seed=shuffle_seed)
            records.append(dataset_to_records(ds))
        assert not np.array_equal(records[0], records[1])
        canon = [r[np.lexsort(r.T[::-1])] for r in records]
        assert np.array_equal(canon[0], canon[1])

    def test_divergence_discards_and_restarts(self, monkeypatch):
        env = make_env()
        real_step = env.step
        calls = {"n": 0}

        def flaky_step(actions):
            calls["n"] += 1
            if calls["n"] == 2:
                raise SimulationDiverged("blew up", {})
            return real_step(actions)

        monkeypatch.setattr(env, "step", flaky_step)
        ds = collect(make_policy(env), env, small_cfg(), seed=0)
        assert ds.n == 16
        assert ds.meta["discarded"] == env.n_envs
        assert np.all(np.isfinite(dataset_to_records(ds)))


class TestTrainStudent:
    def test_budget_zero_checkpoint_equals_init(self, small_dataset, tmp_path):
        cfg = small_cfg(epochs=0, max_steps=None)
        model, history = train_student(
            small_dataset, "mlp", cfg, out_dir=tmp_path, seed=5,
            student_kwargs={"target_params": 1500})
        assert history == []
        loaded, opt_state, meta = load_student_checkpoint(tmp_path / "student_final.ptck")
        assert meta["step"] == 0 and opt_state["t"] == 0
        for (_, a), (_, b) in zip(model.named_parameters(),
                                  loaded.named_parameters()):
            assert np.array_equal(a.data, b.data)
        fresh = build_student(
            "mlp", small_dataset.dof,
            np.random.default_rng(np.random.SeedSequence((5, distill_mod._INIT_STREAM))),
            history_len=small_dataset.history_len, target_params=1500)
        for (_, a), (_, b) in zip(model.named_parameters(),
                                  fresh.named_parameters()):
            assert np.array_equal(a.data, b.data)

    def test_loss_decreases_and_logs_all_terms(self, small_dataset, tmp_path):
        cfg = small_cfg(max_steps=40, lr=3e-3)
        _, history = train_student(small_dataset, "mlp", cfg, out_dir=tmp_path,
                                   seed=1, student_kwargs={"target_params": 1500})
        assert len(history) == 40  # batch == dataset, so one step per epoch
        assert history[-1]["loss_bc"] < history[0]["loss_bc"]
        for row in history:
            assert set(row) == set(distill_mod.CURVE_HEADER)
            assert row["loss_total"] == pytest.approx(
                row["loss_bc"] + row["loss_recon_pos"]
                + row["loss_recon_joint"] + row["loss_recon_vel"], rel=1e-6)
        header, rows = __import__("proprospin.io_utils", fromlist=["read_csv"]).read_csv(
            tmp_path / "distill_curve.csv")
        assert header == distill_mod.CURVE_HEADER
        assert len(rows) == 40

    def test_no_recon_logs_exact_zero(self, small_dataset):
        cfg = small_cfg(max_steps=3, no_recon=True)
        _, history = train_student(small_dataset, "mlp", cfg, seed=1,
                                   student_kwargs={"target_params": 1500})
        for row in history:
            assert row["loss_recon_pos"] == 0.0
            assert row["loss_recon_joint"] == 0.0
            assert row["loss_recon_vel"] == 0.0
            assert row["loss_total"] == row["loss_bc"]

    def test_nan_loss_aborts_with_last_good_checkpoint(self, small_dataset,
                                                       tmp_path, monkeypatch):
        clean_dir = tmp_path / "clean"
        cfg_clean = small_cfg(max_steps=2)
        train_student(small_dataset, "mlp", cfg_clean, out_dir=clean_dir, seed=3,
                      student_kwargs={"target_params": 1500})

        real_loss = distill_mod.student_loss
        calls = {"n": 0}

        def poisoned(*args, **kw):
            calls["n"] += 1
            if calls["n"] > 2:
                return Tensor(np.full(1, np.nan)).sum(), {
                    "bc": np.nan, "recon_pos": np.nan, "recon_joint": np.nan,
                    "recon_vel": np.nan, "total": np.nan}
            return real_loss(*args, **kw)

        monkeypatch.setattr(distill_mod, "student_loss", poisoned)
        bad_dir = tmp_path / "bad"
        with pytest.raises(DistillationDiverged, match="step 2"):
            train_student(small_dataset, "mlp", small_cfg(max_steps=10),
                          out_dir=bad_dir, seed=3,
                          student_kwargs={"target_params": 1500})
        aborted, opt_state, meta = load_student_checkpoint(bad_dir / "student_abort.ptck")
        good, good_opt, good_meta = load_student_checkpoint(clean_dir / "student_final.ptck")
        assert meta["step"] == 2 == good_meta["step"]
        assert opt_state["t"] == good_opt["t"] == 2
        for (_, a), (_, b) in zip(aborted.named_parameters(),
                                  good.named_parameters()):
            assert np.array_equal(a.data, b.data)

    def test_resume_reproduces_next_step_loss_bit_identically(
            self, small_dataset, tmp_path):
        full_dir = tmp_path / "full"
        _, full_hist = train_student(small_dataset, "mlp", small_cfg(max_steps=4),
                                     out_dir=full_dir, seed=9,
                                     student_kwargs={"target_params": 1500})
        half_dir = tmp_path / "half"
        train_student(small_dataset, "mlp", small_cfg(max_steps=2),
                      out_dir=half_dir, seed=9,
                      student_kwargs={"target_params": 1500})
        resumed_dir = tmp_path / "resumed"
        model, resumed_hist = train_student(
            small_dataset, "mlp", small_cfg(max_steps=4), out_dir=resumed_dir,
            seed=9, resume_from=half_dir / "student_final.ptck")
        assert [h["step"] for h in resumed_hist] == [3.0, 4.0]
        for got, want in zip(resumed_hist, full_hist[2:]):
            for key in ("loss_bc", "loss_recon_pos", "loss_recon_joint",
                        "loss_recon_vel", "loss_total"):
                assert got[key] == want[key], key
        final_full, _, _ = load_student_checkpoint(full_dir / "student_final.ptck")
        for (_, a), (_, b) in zip(model.named_parameters(),
                                  final_full.named_parameters()):
            assert np.array_equal(a.data, b.data)

    def test_resume_rejects_other_variant(self, small_dataset, tmp_path):
        train_student(small_dataset, "mlp", small_cfg(max_steps=1),
                      out_dir=tmp_path, seed=0,
                      student_kwargs={"target_params": 1500})
        with pytest.raises(IncompatibleCheckpointError, match="mlp"):
            train_student(small_dataset, "lstm", small_cfg(max_steps=2),
                          resume_from=tmp_path / "student_final.ptck")

    def test_periodic_checkpoints_written(self, small_dataset, tmp_path):
        cfg = small_cfg(max_steps=4, checkpoint_every=2)
        train_student(small_dataset, "mlp", cfg, out_dir=tmp_path, seed=0,
                      student_kwargs={"target_params": 1500})
        names = {p.name for p in tmp_path.iterdir()}
        assert {"student_step2.ptck", "student_step4.ptck",
                "student_final.ptck"} <= names
