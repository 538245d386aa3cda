import json
import math

import numpy as np
import pytest

from engagerank import featurepipe as fp
from engagerank import harness, model


def tiny_train_config(**overrides):
    kw = dict(batch_size=8, pool_size=16, epochs=6, n_channels=2, global_dim=5,
              width=4, n_chunks=4, dropout=0.0, speech_dim=6, min_frames=8,
              lr_start=3e-3, lr_end=3e-5)
    kw.update(overrides)
    return harness.TrainConfig(**kw)


def tiny_data(n=48, seed=0, speech_fraction=0.0, proportions=(1, 1, 1, 1)):
    return fp.synth_dataset(n, n_channels=2, global_dim=5, n_frames=12,
                            proportions=proportions, noise=0.4, seed=seed,
                            speech_fraction=speech_fraction, speech_dim=6)


def scalar_params(value=1.0):
    cfg = model.ModelConfig(n_channels=2, n_chunks=4, width=4, global_dim=5,
                            speech_dim=6, min_frames=8)
    return model.ModelParams(cfg, {"w": np.array([value])})


class TestTrainConfig:
    def test_loss_validation(self):
        with pytest.raises(ValueError, match="loss"):
            tiny_train_config(loss="hinge")

    def test_ablation_validation(self):
        with pytest.raises(ValueError, match="ablation"):
            tiny_train_config(ablation="everything")

    def test_sampler_validation(self):
        with pytest.raises(ValueError, match="sampler"):
            tiny_train_config(sampler="random")

    def test_lr_ordering(self):
        with pytest.raises(ValueError, match="lr_start"):
            tiny_train_config(lr_start=1e-5, lr_end=1e-3)
        with pytest.raises(ValueError, match="lr_start"):
            tiny_train_config(lr_end=0.0)

    def test_batch_pool_relation(self):
        with pytest.raises(ValueError, match="pool_size"):
            tiny_train_config(batch_size=32, pool_size=16)

    def test_epoch_and_momentum_bounds(self):
        with pytest.raises(ValueError, match="epochs"):
            tiny_train_config(epochs=0)
        for bad in (0.0, 1.0):
            with pytest.raises(ValueError, match="momentum"):
                tiny_train_config(momentum=bad)

    def test_audio_needs_scalar_loss(self):
        with pytest.raises(ValueError, match="scalar"):
            tiny_train_config(loss="ce", use_audio=True)

    def test_head_follows_loss(self):
        assert tiny_train_config(loss="mocorank").head == "scalar"
        assert tiny_train_config(loss="mse").head == "scalar"
        assert tiny_train_config(loss="ce").head == "categorical"
        assert tiny_train_config(loss="cb_focal").head == "categorical"

    def test_sampler_defaults(self):
        """Categorical losses balance classes; scalar losses shuffle as-is."""
        assert tiny_train_config(loss="ce").resolved_sampler == "class_balanced"
        assert tiny_train_config(loss="ce+center").resolved_sampler == "class_balanced"
        assert tiny_train_config(loss="mse").resolved_sampler == "sequential"
        assert tiny_train_config(loss="mocorank").resolved_sampler == "sequential"
        assert tiny_train_config(
            loss="mse", sampler="class_balanced").resolved_sampler == "class_balanced"

    def test_state_flags(self):
        assert tiny_train_config(loss="mocorank").needs_pool
        assert tiny_train_config(loss="mocorank+center").needs_pool
        assert not tiny_train_config(loss="mse").needs_pool
        assert tiny_train_config(loss="ce+center").needs_centers
        assert not tiny_train_config(loss="ce").needs_centers


class TestCosineSchedule:
    def test_endpoints(self):
        assert harness.cosine_lr(0, 100, 5e-4, 5e-7) == pytest.approx(5e-4)
        assert harness.cosine_lr(100, 100, 5e-4, 5e-7) == pytest.approx(5e-7)

    def test_midpoint(self):
        assert harness.cosine_lr(50, 100, 5e-4, 5e-7) == pytest.approx(
            2.5025e-4, rel=1e-12)

    def test_non_increasing(self):
        lrs = [harness.cosine_lr(t, 200, 1e-3, 1e-6) for t in range(201)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


class TestAdamW:
    def test_single_step_hand_trace(self):
        """w=1, g=2, lr=0.1, decay 0.01: decay first, then a unit-ish step."""
        params = scalar_params(1.0)
        opt = harness.init_opt_state(params)
        harness.adamw_step(params, np.array([2.0]), opt, lr=0.1,
                           weight_decay=0.01)
        m, v = 0.1 * 2.0, 0.001 * 4.0
        update = (m / 0.1) / (math.sqrt(v / 0.001) + 1e-8)
        expect = 1.0 * (1.0 - 0.1 * 0.01) - 0.1 * update
        assert params["w"][0] == pytest.approx(expect, rel=1e-15)
        assert opt["step"] == 1

    def test_decay_is_decoupled(self):
        """Zero gradient still shrinks the weight by exactly (1 - lr*wd)^k."""
        params = scalar_params(1.0)
        opt = harness.init_opt_state(params)
        for _ in range(5):
            harness.adamw_step(params, np.zeros(1), opt, lr=0.2, weight_decay=0.1)
        assert params["w"][0] == pytest.approx((1.0 - 0.02) ** 5, rel=1e-12)

    def test_frozen_blocks_untouched(self):
        cfg = model.ModelConfig(n_channels=2, n_chunks=4, width=4, global_dim=5,
                                speech_dim=6, min_frames=8)
        params = model.ModelParams(cfg, {"a": np.array([1.0, 2.0]),
                                         "b": np.array([3.0])})
        opt = harness.init_opt_state(params)
        harness.adamw_step(params, np.array([1.0, 1.0, 1.0]), opt, lr=0.1,
                           weight_decay=0.5, frozen_keys=("a",))
        np.testing.assert_array_equal(params["a"], [1.0, 2.0])
        np.testing.assert_array_equal(opt["m"][params.slices["a"]], 0.0)
        assert params["b"][0] != 3.0

    def test_nonfinite_gradient_names_the_parameter(self):
        params = scalar_params()
        opt = harness.init_opt_state(params)
        with pytest.raises(ValueError, match="parameter 'w'"):
            harness.adamw_step(params, np.array([np.nan]), opt, lr=0.1)

    def test_frozen_nonfinite_is_ignored(self):
        cfg = model.ModelConfig(n_channels=2, n_chunks=4, width=4, global_dim=5,
                                speech_dim=6, min_frames=8)
        params = model.ModelParams(cfg, {"a": np.array([1.0]), "b": np.array([1.0])})
        opt = harness.init_opt_state(params)
        harness.adamw_step(params, np.array([np.inf, 0.5]), opt, lr=0.1,
                           frozen_keys=("a",))

    def test_gradient_length_checked(self):
        params = scalar_params()
        with pytest.raises(ValueError, match="length"):
            harness.adamw_step(params, np.zeros(7), harness.init_opt_state(params),
                               lr=0.1)


class TestStepsPerEpoch:
    def test_ceiling(self):
        assert harness.steps_per_epoch(23, 5) == 5
        assert harness.steps_per_epoch(20, 5) == 4
        assert harness.steps_per_epoch(1, 5) == 1


class TestInitTrainState:
    def test_mocorank_gets_pool_and_encoder(self):
        cfg = tiny_train_config(loss="mocorank")
        state = harness.init_train_state(cfg, tiny_data())
        assert state.pool is not None and state.pool.full
        assert len(state.pool) == 16
        assert state.enc is not None
        assert state.centers is None
        assert state.pool.embeddings.shape[1] == 8   # fused embedding width

    def test_scalar_baselines_run_lean(self):
        state = harness.init_train_state(tiny_train_config(loss="mse"), tiny_data())
        assert state.pool is None and state.enc is None and state.centers is None

    def test_center_variant_gets_centers(self):
        cfg = tiny_train_config(loss="mocorank+center")
        state = harness.init_train_state(cfg, tiny_data())
        assert state.centers is not None
        np.testing.assert_array_equal(state.centers.values, np.zeros((4, 8)))


class TestTraining:
    def test_loss_decreases_on_easy_data(self):
        data = tiny_data(n=48)
        cfg = tiny_train_config(loss="mocorank", epochs=10)
        state, history = harness.train(cfg, data)
        assert len(history) == 10
        first = np.mean([row["train_loss"] for row in history[:3]])
        last = np.mean([row["train_loss"] for row in history[-3:]])
        assert last < first

    def test_history_rows_are_complete(self):
        data = tiny_data(n=32)
        val = tiny_data(n=16, seed=9)
        cfg = tiny_train_config(loss="mse", epochs=3)
        _, history = harness.train(cfg, data, val)
        for row in history:
            assert set(row) == {"epoch", "train_loss", "lr", "val_acc",
                                "val_avg_acc"}
        lrs = [row["lr"] for row in history]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))
        assert [row["epoch"] for row in history] == [1, 2, 3]

    @pytest.mark.parametrize("loss", harness.LOSSES)
    def test_every_loss_trains(self, loss):
        data = tiny_data(n=32)
        cfg = tiny_train_config(loss=loss, epochs=2)
        state, history = harness.train(cfg, data)
        assert len(history) == 2
        assert all(np.isfinite(row["train_loss"]) for row in history)

    def test_determinism(self):
        """Same config and seed: identical logs and identical weights."""
        data = tiny_data(n=32)
        cfg = tiny_train_config(loss="mocorank", epochs=4, dropout=0.1, seed=3)
        state_a, hist_a = harness.train(cfg, data)
        state_b, hist_b = harness.train(cfg, data)
        assert hist_a == hist_b
        np.testing.assert_array_equal(state_a.params.flat(), state_b.params.flat())
        np.testing.assert_array_equal(state_a.pool.scores, state_b.pool.scores)

    def test_seed_changes_the_run(self):
        data = tiny_data(n=32)
        a = harness.train(tiny_train_config(epochs=2, seed=0), data)[0]
        b = harness.train(tiny_train_config(epochs=2, seed=1), data)[0]
        assert np.any(a.params.flat() != b.params.flat())

    def test_pool_holds_exactly_the_last_batches(self):
        """Pool age spread: after an epoch it is the last ceil(P/B) batches."""
        data = tiny_data(n=48)
        cfg = tiny_train_config(loss="mocorank", epochs=2, batch_size=4,
                                pool_size=16, dropout=0.0, seed=5)
        state, _ = harness.train(cfg, data)
        # replay the generator: pool seed first, then one shuffle per epoch
        rng = np.random.default_rng(cfg.seed)
        rng.integers(2 ** 31)
        batches = []
        for _ in range(cfg.epochs):
            batches = fp.sequential_batches(48, 4, rng)
        expect = np.concatenate([data.labels()[idx] for idx in batches[-4:]])
        got = np.array([e.label for e in state.pool.entries()])
        np.testing.assert_array_equal(got, expect)

    def test_frozen_keys_stay_bitwise_identical(self):
        data = tiny_data(n=32)
        cfg = tiny_train_config(loss="mse", epochs=3)
        state = harness.init_train_state(cfg, data)
        frozen = ("tcn.0.conv1.w", "mlp2.fc1.w")
        state.frozen_keys = frozen
        before = {k: state.params[k].copy()
                  for k in frozen + ("tcn.1.conv1.w",)}
        harness.train_epochs(state, data)
        for k in frozen:
            np.testing.assert_array_equal(state.params[k], before[k])
        assert np.any(state.params["tcn.1.conv1.w"] != before["tcn.1.conv1.w"])

    def test_resume_matches_straight_run(self):
        data = tiny_data(n=32)
        cfg = tiny_train_config(loss="mocorank", epochs=6)
        straight, _ = harness.train(cfg, data)
        state = harness.init_train_state(cfg, data)
        harness.train_epochs(state, data, n_epochs=2)
        harness.train_epochs(state, data, n_epochs=4)
        np.testing.assert_array_equal(straight.params.flat(), state.params.flat())


class TestEvaluate:
    def test_reports_on_held_out_data(self):
        data = tiny_data(n=48)
        test = tiny_data(n=24, seed=4)
        state, _ = harness.train(tiny_train_config(epochs=2), data)
        report = harness.evaluate(state, test)
        assert report.n_samples == 24
        assert 0.0 <= report.acc <= 1.0

    def test_subset_validation(self):
        data = tiny_data(n=16)
        state = harness.init_train_state(tiny_train_config(loss="mse"), data)
        with pytest.raises(ValueError, match="subset"):
            harness.evaluate(state, data, subset="train_only")

    def test_empty_subset_rejected(self):
        data = tiny_data(n=16)   # no speech records
        state = harness.init_train_state(tiny_train_config(loss="mse"), data)
        with pytest.raises(ValueError, match="selected no records"):
            harness.evaluate(state, data, subset="speech_only")

    def test_params_source(self):
        data = tiny_data(n=16)
        params = model.init_params(tiny_train_config().model_config())
        report = harness.evaluate(params, data)
        assert report.n_samples == 16


class TestCheckpointing:
    def test_round_trip_resumes_bitwise(self, tmp_path):
        """Save at epoch 2, keep training; the reload must follow identically."""
        data = tiny_data(n=32)
        cfg = tiny_train_config(loss="mocorank+center", epochs=5, dropout=0.1)
        state = harness.init_train_state(cfg, data)
        harness.train_epochs(state, data, n_epochs=2)
        path = tmp_path / "ckpt.npz"
        harness.save_checkpoint(state, str(path))

        harness.train_epochs(state, data, n_epochs=3)
        resumed = harness.load_checkpoint(str(path))
        harness.train_epochs(resumed, data, n_epochs=3)

        np.testing.assert_array_equal(state.params.flat(), resumed.params.flat())
        np.testing.assert_array_equal(state.opt["m"], resumed.opt["m"])
        np.testing.assert_array_equal(state.opt["v"], resumed.opt["v"])
        np.testing.assert_array_equal(state.pool.scores, resumed.pool.scores)
        np.testing.assert_array_equal(state.pool.embeddings,
                                      resumed.pool.embeddings)
        np.testing.assert_array_equal(state.centers.values, resumed.centers.values)
        np.testing.assert_array_equal(state.enc.params.flat(),
                                      resumed.enc.params.flat())

    def test_restores_exact_fields(self, tmp_path):
        data = tiny_data(n=32)
        cfg = tiny_train_config(loss="mocorank", epochs=3)
        state = harness.init_train_state(cfg, data)
        harness.train_epochs(state, data, n_epochs=1)
        path = tmp_path / "ckpt.npz"
        harness.save_checkpoint(state, str(path))
        loaded = harness.load_checkpoint(str(path))
        assert loaded.config == cfg
        assert loaded.epoch == 1
        assert loaded.opt["step"] == state.opt["step"]
        assert loaded.rng.bit_generator.state == state.rng.bit_generator.state

    def test_future_version_refused(self, tmp_path):
        path = tmp_path / "future.npz"
        with open(path, "wb") as fh:
            np.savez(fh, meta=json.dumps({"version": "2"}))
        with pytest.raises(ValueError, match="unsupported checkpoint version"):
            harness.load_checkpoint(str(path))

    def test_corrupt_file_reports_path_and_size(self, tmp_path):
        path = tmp_path / "broken.npz"
        path.write_bytes(b"this is not a checkpoint")
        with pytest.raises(ValueError, match="corrupt checkpoint") as err:
            harness.load_checkpoint(str(path))
        assert "broken.npz" in str(err.value)
        assert "24-byte" in str(err.value)

    def test_init_from_transplants_weights(self, tmp_path):
        data = tiny_data(n=32)
        cfg = tiny_train_config(loss="mse", epochs=2)
        state, _ = harness.train(cfg, data)
        path = tmp_path / "donor.npz"
        harness.save_checkpoint(state, str(path))
        fresh = harness.init_train_state(replace_cfg(cfg, init_from=str(path)), data)
        np.testing.assert_array_equal(fresh.params.flat(), state.params.flat())

    def test_init_from_shape_mismatch(self, tmp_path):
        data = tiny_data(n=32)
        state, _ = harness.train(tiny_train_config(loss="mse", epochs=1), data)
        path = tmp_path / "donor.npz"
        harness.save_checkpoint(state, str(path))
        bad = tiny_train_config(loss="mse", width=8, init_from=str(path))
        with pytest.raises(ValueError, match="does not match"):
            harness.init_train_state(bad, data)


def replace_cfg(cfg, **kw):
    from dataclasses import replace
    return replace(cfg, **kw)


class TestTwoStage:
    def test_stages_tag_history_and_freeze_visuals(self):
        data = tiny_data(n=40, speech_fraction=0.5)
        cfg = tiny_train_config(loss="mocorank", epochs=3, stage2_epochs=2)
        state, history = harness.train_two_stage(cfg, data)
        stages = [row["stage"] for row in history]
        assert stages == [1, 1, 1, 2, 2]
        assert set(state.frozen_keys) == set(state.params.visual_keys())
        assert state.config.use_audio
        # pool rebuilt at the multimodal embedding width
        assert state.pool.embeddings.shape[1] == 8 + 6 + 7

    def test_requires_speech_records(self):
        with pytest.raises(ValueError, match="no speech records"):
            harness.train_two_stage(tiny_train_config(), tiny_data(n=16))

    def test_audio_params_actually_move(self):
        data = tiny_data(n=40, speech_fraction=0.5)
        cfg = tiny_train_config(loss="mocorank", epochs=2, stage2_epochs=2)
        state, _ = harness.train_two_stage(cfg, data)
        init = model.init_params(cfg.model_config(with_audio=True), seed=cfg.seed)
        moved = [k for k in state.params.audio_keys()
                 if np.any(state.params[k] != init[k])]
        assert "audio.fc.w" in moved and "audio.head.w" in moved


class TestBenchLosses:
    def test_rows_and_summary(self):
        data = tiny_data(n=32)
        test = tiny_data(n=16, seed=2)
        base = tiny_train_config(epochs=2)
        out = harness.bench_losses(base, {"rank": {"loss": "mocorank"},
                                          "plain": {"loss": "mse"}},
                                   seeds=[0, 1], train_set=data, val_set=None,
                                   test_set=test)
        assert len(out["rows"]) == 4
        assert set(out["summary"]) == {"rank", "plain"}
        for agg in out["summary"].values():
            assert agg["n_seeds"] == 2
            assert 0.0 <= agg["mean_avg_acc"] <= 1.0
