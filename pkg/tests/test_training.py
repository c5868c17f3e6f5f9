import math

import numpy as np
import pytest

import services_training
from models_checkpoint import encode_checkpoint, load_checkpoint
from models_networks import AdamState, ModelParams, build_models, forward_discriminator, forward_generator
from models_schemas import Direction, EpochRecord, GeneratorConfig, LossHistory, SplitSpec, Task, TrainConfig
from services_autodiff import DTYPE, ShapeMismatchError, Tensor, backward, bce_with_logits
from services_data import split, synth_shapes, to_unpaired
from services_metrics import cycle_reconstruction_error, evaluate
from services_training import (
    Adam,
    CganLosses,
    NonFiniteLossError,
    adam_step,
    cgan_step,
    cyclegan_step,
    loss_stability,
    train,
    write_loss_csv,
)


def single_param(values):
    cfg = GeneratorConfig(in_channels=1, out_channels=1, base_channels=2, depth=1, image_size=8)
    return ModelParams("generator", cfg, [("w", Tensor(np.asarray(values, dtype=DTYPE), requires_grad=True))])


def clone(models):
    return {role: ModelParams.from_arrays(p.kind, p.config, p.snapshot()) for role, p in models.items()}


def changed(before, params):
    return any(not np.array_equal(before[name], t.data) for name, t in params.items())


class SpyAdam(Adam):
    """Adam that records the state of other networks whenever it steps."""

    def __init__(self, params, cfg, watch):
        super().__init__(params, cfg)
        self.watch = watch
        self.seen = []

    def step(self):
        self.seen.append({
            role: (p.snapshot(), {n: None if t.grad is None else t.grad.copy() for n, t in p.items()})
            for role, p in self.watch.items()
        })
        super().step()


class TestAdam:
    def test_first_step_moves_by_learning_rate(self):
        params = single_param([0.0])
        params["w"].grad = np.ones(1, dtype=DTYPE)
        state = adam_step(params, None, AdamState.zeros(params), TrainConfig(task=Task.CGAN, learning_rate=0.1))
        assert params["w"].data[0] == pytest.approx(-0.1, abs=1e-6)
        assert state.t == 1

    def test_zero_gradient_is_a_fixed_point(self):
        params = single_param([0.3, -1.2])
        adam_step(params, {"w": np.zeros(2, dtype=DTYPE)}, AdamState.zeros(params), TrainConfig(task=Task.CGAN))
        np.testing.assert_array_equal(params["w"].data, np.array([0.3, -1.2], dtype=DTYPE))

    @pytest.mark.parametrize("c", [0.1, 1.0, 10.0])
    def test_first_update_is_learning_rate_times_sign(self, c):
        params = single_param([0.0, 0.0, 0.0])
        grads = {"w": (c * np.array([1.0, -2.0, 0.5])).astype(DTYPE)}
        adam_step(params, grads, AdamState.zeros(params), TrainConfig(task=Task.CGAN, learning_rate=0.01))
        np.testing.assert_allclose(params["w"].data, [-0.01, 0.01, -0.01], atol=1e-6)

    def test_second_moment_non_negative_and_counter_shared(self):
        params = single_param([1.0, 2.0])
        optimizer = Adam(params, TrainConfig(task=Task.CGAN))
        for g in ([1.0, -3.0], [-0.5, 0.25]):
            params["w"].grad = np.asarray(g, dtype=DTYPE)
            optimizer.step()
        assert optimizer.state.t == 2
        assert np.all(optimizer.state.v["w"] >= 0)

    def test_missing_or_mismatched_gradient(self):
        params = single_param([1.0, 2.0])
        cfg = TrainConfig(task=Task.CGAN)
        with pytest.raises(ShapeMismatchError):
            adam_step(params, None, AdamState.zeros(params), cfg)
        with pytest.raises(ShapeMismatchError):
            adam_step(params, {"w": np.zeros(3, dtype=DTYPE)}, AdamState.zeros(params), cfg)


class TestCganStep:
    def setup_step(self, tiny_cfg):
        cfg = tiny_cfg(Task.CGAN)
        models = build_models(cfg, np.random.default_rng(0))
        sample = synth_shapes(1, 16, 0)[0]
        return cfg, models, sample

    def test_updates_both_networks(self, tiny_cfg):
        cfg, models, sample = self.setup_step(tiny_cfg)
        gen, disc = models["generator"], models["discriminator"]
        before_g, before_d = gen.snapshot(), disc.snapshot()
        optimizers = {role: Adam(p, cfg) for role, p in models.items()}
        losses = cgan_step(gen, disc, sample.image, sample.mask, cfg, optimizers, np.random.default_rng(1))
        assert changed(before_g, gen) and changed(before_d, disc)
        assert all(math.isfinite(v) for v in losses)

    def test_sub_steps_are_isolated(self, tiny_cfg):
        cfg, models, sample = self.setup_step(tiny_cfg)
        gen, disc = models["generator"], models["discriminator"]
        initial_gen = gen.snapshot()
        d_opt = SpyAdam(disc, cfg, {"generator": gen, "discriminator": disc})
        g_opt = SpyAdam(gen, cfg, {"discriminator": disc})
        cgan_step(gen, disc, sample.image, sample.mask, cfg, {"generator": g_opt, "discriminator": d_opt},
                  np.random.default_rng(1))

        # Discriminator sub-step: generator untouched and no gradient reached it
        gen_values, gen_grads = d_opt.seen[0]["generator"]
        assert all(np.array_equal(gen_values[n], initial_gen[n]) for n in initial_gen)
        assert all(g is None for g in gen_grads.values())

        # Generator sub-step: discriminator holds its post-update values and gains no gradient
        _, d_step_grads = d_opt.seen[0]["discriminator"]
        disc_values, disc_grads = g_opt.seen[0]["discriminator"]
        assert all(np.array_equal(disc_values[n], disc[n].data) for n in disc_values)
        for name in disc.names():
            np.testing.assert_array_equal(disc_grads[name], d_step_grads[name])

    def test_zero_logit_discriminator_gives_ln2(self, tiny_cfg):
        cfg, models, sample = self.setup_step(tiny_cfg)
        disc = models["discriminator"]
        for name in disc.names()[-2:]:
            disc[name].data[...] = 0.0
        optimizers = {role: Adam(p, cfg) for role, p in models.items()}
        losses = cgan_step(models["generator"], disc, sample.image, sample.mask, cfg, optimizers, np.random.default_rng(1))
        assert losses.d_loss == pytest.approx(math.log(2.0), abs=1e-6)
        assert losses.g_loss == pytest.approx(losses.g_adv + cfg.lambda_l1 * losses.g_l1, rel=1e-5)

    def test_without_generator_dropout_is_seeded_from_config(self, tiny_cfg):
        cfg, models, sample = self.setup_step(tiny_cfg)
        results = []
        for _ in range(2):
            copies = clone(models)
            optimizers = {role: Adam(p, cfg) for role, p in copies.items()}
            results.append(cgan_step(copies["generator"], copies["discriminator"], sample.image, sample.mask, cfg, optimizers))
        assert all(math.isfinite(v) for v in results[0])
        assert results[0] == results[1]


class TestCycleGanStep:
    def run_step(self, cfg, models, seed=0):
        a = synth_shapes(1, 16, 1)[0].image
        b = synth_shapes(1, 16, 2)[0].mask
        optimizers = {role: Adam(p, cfg) for role, p in models.items()}
        losses = cyclegan_step(models["gen_ab"], models["gen_ba"], models["disc_a"], models["disc_b"],
                               a, b, cfg, optimizers, np.random.default_rng(seed))
        return a, b, losses

    def adversarial_grads(self, models, a):
        gen_ab, disc_b = models["gen_ab"], models["disc_b"]
        gen_ab.zero_grad()
        with disc_b.frozen():
            fake = forward_generator(gen_ab, a, training=True, rng=np.random.default_rng(0))
            logits = forward_discriminator(disc_b, fake)
            backward(bce_with_logits(logits, np.ones(logits.shape, dtype=DTYPE)), gen_ab)
        return {n: t.grad.copy() for n, t in gen_ab.items()}

    def test_record_is_complete_and_finite(self, tiny_cfg):
        cfg = tiny_cfg(Task.CYCLEGAN)
        models = build_models(cfg, np.random.default_rng(0))
        before = {role: p.snapshot() for role, p in models.items()}
        _, _, losses = self.run_step(cfg, models)
        assert all(math.isfinite(v) for v in losses)
        assert losses.d_loss == pytest.approx(
            0.5 * (losses.d_a_real + losses.d_a_fake) + 0.5 * (losses.d_b_real + losses.d_b_fake), rel=1e-5)
        assert losses.g_cycle == pytest.approx(losses.cycle_a + losses.cycle_b, rel=1e-6)
        assert all(changed(before[role], p) for role, p in models.items())

    def test_without_generator_dropout_is_seeded_from_config(self, tiny_cfg):
        cfg = tiny_cfg(Task.CYCLEGAN)
        models = build_models(cfg, np.random.default_rng(0))
        a = synth_shapes(1, 16, 1)[0].image
        b = synth_shapes(1, 16, 2)[0].mask
        results = []
        for _ in range(2):
            copies = clone(models)
            optimizers = {role: Adam(p, cfg) for role, p in copies.items()}
            results.append(cyclegan_step(copies["gen_ab"], copies["gen_ba"], copies["disc_a"], copies["disc_b"],
                                         a, b, cfg, optimizers))
        assert all(math.isfinite(v) for v in results[0])
        assert results[0] == results[1]

    def test_without_cycle_weight_generators_see_only_adversarial_gradients(self, tiny_cfg):
        # depth 1 has no dropout, so the reference forward pass matches exactly
        cfg = tiny_cfg(Task.CYCLEGAN, generator_depth=1, lambda_cycle=0.0)
        models = build_models(cfg, np.random.default_rng(0))
        reference = clone(models)
        a, _, losses = self.run_step(cfg, models)
        expected = self.adversarial_grads(reference, a)
        for name, t in models["gen_ab"].items():
            np.testing.assert_allclose(t.grad, expected[name], rtol=1e-5, atol=1e-8)
        assert losses.g_cycle > 0

    def test_cycle_weight_changes_generator_gradients(self, tiny_cfg):
        cfg = tiny_cfg(Task.CYCLEGAN, generator_depth=1, lambda_cycle=10.0)
        models = build_models(cfg, np.random.default_rng(0))
        reference = clone(models)
        a, _, _ = self.run_step(cfg, models)
        expected = self.adversarial_grads(reference, a)
        assert any(not np.allclose(t.grad, expected[n], rtol=1e-5, atol=1e-8) for n, t in models["gen_ab"].items())

    def test_reverse_generator_outputs_images(self, tiny_cfg):
        cfg = tiny_cfg(Task.CYCLEGAN, image_channels=3)
        models = build_models(cfg, np.random.default_rng(0))
        mask = synth_shapes(1, 16, 0)[0].mask
        out = forward_generator(models["gen_ba"], mask)
        assert out.shape == (1, 3, 16, 16)
        assert out.data.min() >= -1.0 and out.data.max() <= 1.0


class TestTrain:
    def test_history_and_artifacts(self, tiny_cfg, tmp_path):
        cfg = tiny_cfg(Task.CGAN)
        ckpt = train(cfg, synth_shapes(6, 16, 0), tmp_path)
        assert len(ckpt.history) == cfg.epochs
        assert ckpt.history.records[-1].g_cycle is None
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["checkpoint.mgan", "checkpoint_epoch001.mgan", "checkpoint_epoch002.mgan", "losses.csv"]
        assert load_checkpoint(tmp_path / "checkpoint_epoch001.mgan").epochs_trained == 1

        lines = (tmp_path / "losses.csv").read_text().splitlines()
        assert lines[0] == "epoch,g_loss,d_loss,g_adv,g_l1,g_cycle"
        assert len(lines) == 3
        assert lines[1].startswith("1,") and lines[1].endswith(",")

    def test_same_seed_gives_identical_checkpoints(self, tiny_cfg):
        cfg = tiny_cfg(Task.CGAN)
        ds = synth_shapes(4, 16, 0)
        assert encode_checkpoint(train(cfg, ds)) == encode_checkpoint(train(cfg, ds))

    def test_different_seed_gives_different_weights(self, tiny_cfg):
        ds = synth_shapes(4, 16, 0)
        first = train(tiny_cfg(Task.CGAN, seed=1), ds).generator()
        second = train(tiny_cfg(Task.CGAN, seed=2), ds).generator()
        assert not np.array_equal(first["block0.conv.weight"].data, second["block0.conv.weight"].data)

    def test_cyclegan_unpairs_paired_input(self, tiny_cfg):
        cfg = tiny_cfg(Task.CYCLEGAN, epochs=1)
        ckpt = train(cfg, synth_shapes(4, 16, 0))
        record = ckpt.history.records[0]
        assert record.g_l1 is None and record.g_cycle is not None
        assert set(ckpt.models) == {"gen_ab", "gen_ba", "disc_a", "disc_b"}
        assert ckpt.optimizers["gen_ab"].t == 4

    def test_cyclegan_cycles_the_smaller_pool(self, tiny_cfg):
        ds = to_unpaired(synth_shapes(5, 16, 0), seed=0)
        ds.domain_b = ds.domain_b[:2]
        ckpt = train(tiny_cfg(Task.CYCLEGAN, epochs=1), ds)
        assert ckpt.optimizers["disc_b"].t == 5

    def test_each_sample_visited_once_per_epoch(self, tiny_cfg, monkeypatch):
        ds = synth_shapes(6, 16, 0)
        index_of = {id(s.image): i for i, s in enumerate(ds)}
        visits = []

        def record(gen, disc, image, mask, cfg, optimizers, rng=None):
            visits.append(index_of[id(image)])
            return CganLosses(1.0, 1.0, 1.0, 1.0, 1.0, 1.0)

        monkeypatch.setattr(services_training, "cgan_step", record)
        train(tiny_cfg(Task.CGAN, epochs=3), ds)
        assert len(visits) == 18
        for epoch in range(3):
            assert sorted(visits[epoch * 6:(epoch + 1) * 6]) == list(range(6))
        assert visits[:6] != list(range(6)) or visits[6:12] != list(range(6))

    def test_non_finite_loss_aborts_naming_epoch_and_term(self, tiny_cfg, monkeypatch):
        nan = float("nan")
        monkeypatch.setattr(services_training, "cgan_step",
                            lambda *args, **kwargs: CganLosses(nan, 1.0, 1.0, 1.0, 1.0, 1.0))
        with pytest.raises(NonFiniteLossError) as excinfo:
            train(tiny_cfg(Task.CGAN), synth_shapes(2, 16, 0))
        assert excinfo.value.epoch == 1
        assert excinfo.value.term == "d_loss"


class TestLossHistory:
    def history(self, values):
        return LossHistory(records=[
            EpochRecord(epoch=i + 1, g_loss=v, d_loss=1.0, g_adv=v, g_l1=None, g_cycle=2.0 * v)
            for i, v in enumerate(values)
        ])

    def test_stability_uses_the_last_window(self):
        stability = loss_stability(self.history([100.0, 1.0, 3.0]), window=2)
        assert stability["g_loss"] == pytest.approx(1.0)
        assert stability["d_loss"] == 0.0
        assert stability["g_cycle"] == pytest.approx(2.0)
        assert "g_l1" not in stability

    def test_csv_leaves_inapplicable_terms_empty(self, tmp_path):
        path = write_loss_csv(self.history([0.5]), tmp_path / "losses.csv")
        assert path.read_text().splitlines()[1] == "1,0.5,1.0,0.5,,1.0"

    def test_records_must_be_finite(self):
        with pytest.raises(ValueError):
            EpochRecord(epoch=1, g_loss=float("inf"), d_loss=0.0, g_adv=0.0)


@pytest.fixture(scope="module")
def desk_runs():
    """Default-config CGAN and CycleGAN runs on the synthetic desk dataset."""
    spec = SplitSpec(n_train=56, n_test=8, seed=1)
    train_ds, test_ds = split(synth_shapes(64, 32, seed=1), spec)
    cgan = train(TrainConfig(task=Task.CGAN, seed=1, split=spec), train_ds)
    cyclegan = train(TrainConfig(task=Task.CYCLEGAN, seed=1, split=spec), to_unpaired(train_ds, 1))
    return cgan, cyclegan, test_ds


@pytest.mark.slow
class TestDeskRuns:
    def test_cgan_segments_and_l1_falls(self, desk_runs):
        cgan, _, test_ds = desk_runs
        assert evaluate(cgan.generator(), test_ds).mean_iou >= 0.80
        l1 = cgan.history.series("g_l1")
        assert np.mean(l1[-10:]) < np.mean(l1[:10])

    def test_cyclegan_segments_but_trails_cgan(self, desk_runs):
        cgan, cyclegan, test_ds = desk_runs
        cyclegan_iou = evaluate(cyclegan.generator(), test_ds).mean_iou
        assert cyclegan_iou >= 0.50
        assert evaluate(cgan.generator(), test_ds).mean_iou > cyclegan_iou
        assert all(math.isfinite(v) for r in cyclegan.history.records for v in (r.g_loss, r.d_loss, r.g_cycle))

    def test_reverse_direction_beats_untrained_model(self, desk_runs):
        _, cyclegan, test_ds = desk_runs
        generated = forward_generator(cyclegan.generator(Direction.B2A), test_ds[0].mask)
        assert generated.shape == test_ds[0].image.shape
        assert generated.data.min() >= -1.0 and generated.data.max() <= 1.0

        images = [s.image for s in test_ds]
        untrained = build_models(cyclegan.config, np.random.default_rng(99))
        trained_error = cycle_reconstruction_error(cyclegan.generator(Direction.A2B), cyclegan.generator(Direction.B2A), images)
        untrained_error = cycle_reconstruction_error(untrained["gen_ab"], untrained["gen_ba"], images)
        assert trained_error < untrained_error
