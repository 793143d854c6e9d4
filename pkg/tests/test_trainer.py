import hashlib
import math

import numpy as np
import pytest
import torch

from difl import (LossWeights, NetworkConfig, TrainConfig, ToySceneSpec,
                  generate_toy_dataset, lambda2_schedule, lr_schedule,
                  preprocess, sample_domain_pair)
from difl.errors import (CheckpointError, ConfigError, ScheduleRangeError,
                         TrainingDivergedError)
from difl.trainer import (ImagePool, Trainer, effective_lambda2, fit,
                          load_checkpoint, save_checkpoint)

TOY_NET = NetworkConfig(input_size=(32, 32), base_channels=4,
                        downsample_stages=2, encoder_res_blocks=1,
                        decoder_res_blocks=1, discriminator_layers=1)


def toy_setup(tmp_path, n_places=4, n_domains=3, seed=0):
    spec = ToySceneSpec(n_places=n_places, n_domains=n_domains,
                        image_size=32, seed=seed)
    manifest = generate_toy_dataset(spec, tmp_path / "toy")
    cfg = TrainConfig(n_domains=n_domains, epochs_constant=2, epochs_decay=0,
                      batch_size=2, crop_size=32, scale_size=32, seed=seed,
                      pool_size=8, network=TOY_NET,
                      weights=LossWeights(10.0, 0.0))
    return manifest, cfg


def module_checksum(module):
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


def domain_checksums(trainer):
    out = {}
    for name in trainer.gen_bank.encoders:
        out[name] = (module_checksum(trainer.gen_bank.encoders[name]),
                     module_checksum(trainer.gen_bank.decoders[name]),
                     module_checksum(trainer.disc_bank.discriminators[name]))
    return out


class TestPairSampling:
    def test_two_domains_both_orders(self):
        rng = np.random.default_rng(0)
        seen = {sample_domain_pair(2, rng) for _ in range(100)}
        assert seen == {(1, 2), (2, 1)}

    def test_never_same_domain(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            a, b = sample_domain_pair(12, rng)
            assert a != b
            assert 1 <= a <= 12 and 1 <= b <= 12

    def test_uniform_over_ordered_pairs(self):
        # 12 domains -> 132 ordered pairs; 12k draws, 4-sigma band
        rng = np.random.default_rng(2)
        counts = {}
        n = 12000
        for _ in range(n):
            pair = sample_domain_pair(12, rng)
            counts[pair] = counts.get(pair, 0) + 1
        p = 1.0 / 132.0
        sigma = math.sqrt(n * p * (1 - p))
        for pair, count in counts.items():
            assert abs(count - n * p) <= 4 * sigma, (pair, count)
        assert len(counts) == 132

    def test_fewer_than_two_rejected(self):
        with pytest.raises(ConfigError):
            sample_domain_pair(1, np.random.default_rng(0))


class TestSchedules:
    CFG = TrainConfig(n_domains=2, epochs_constant=300, epochs_decay=300,
                      base_lr=2e-4, fcl_start_epoch=300,
                      lambda2_start=0.05, lambda2_end=0.1,
                      crop_size=256, scale_size=286, network=NetworkConfig())

    def test_constant_phase(self):
        assert lr_schedule(0, self.CFG) == 2e-4
        assert lr_schedule(299, self.CFG) == 2e-4

    def test_decay_midpoint(self):
        want = 2e-4 * (1 - 151 / 300)
        assert math.isclose(lr_schedule(450, self.CFG), want, rel_tol=1e-12)

    def test_decay_reaches_zero_at_final_epoch(self):
        # last nonzero step is base_lr/300 at epoch 598; epoch 599 lands on 0
        assert math.isclose(lr_schedule(598, self.CFG), 2e-4 / 300,
                            rel_tol=1e-9)
        assert lr_schedule(599, self.CFG) == 0.0

    def test_out_of_range(self):
        with pytest.raises(ScheduleRangeError):
            lr_schedule(600, self.CFG)
        with pytest.raises(ScheduleRangeError):
            lr_schedule(-1, self.CFG)

    def test_lr_non_increasing(self):
        values = [lr_schedule(e, self.CFG) for e in range(600)]
        assert all(a >= b for a, b in zip(values, values[1:]))
        assert all(v >= 0 for v in values)

    def test_lambda2_before_start(self):
        assert lambda2_schedule(0, self.CFG) == 0.0
        assert lambda2_schedule(299, self.CFG) == 0.0

    def test_lambda2_ramp_values(self):
        assert lambda2_schedule(300, self.CFG) == 0.05
        assert math.isclose(lambda2_schedule(450, self.CFG), 0.075,
                            rel_tol=1e-12)

    def test_lambda2_monotone_within_bounds(self):
        values = [lambda2_schedule(e, self.CFG) for e in range(300, 600)]
        assert all(a <= b for a, b in zip(values, values[1:]))
        assert all(0.05 <= v <= 0.1 for v in values)

    def test_effective_lambda2_without_ramp(self):
        cfg = TrainConfig(n_domains=2, epochs_constant=10, epochs_decay=0,
                          weights=LossWeights(10.0, 0.3), fcl_start_epoch=None,
                          crop_size=32, scale_size=32, network=TOY_NET)
        assert effective_lambda2(5, cfg) == 0.3


class TestPreprocess:
    CFG = TrainConfig(n_domains=2, epochs_constant=1, epochs_decay=0,
                      crop_size=256, scale_size=286, network=NetworkConfig())

    def test_training_resize_and_crop(self):
        rng = np.random.default_rng(0)
        image = rng.integers(0, 255, (768, 1024, 3), dtype=np.uint8)
        out = preprocess(image, self.CFG, rng, training=True)
        assert tuple(out.shape) == (3, 256, 256)
        assert out.dtype == torch.float32
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_exact_crop_is_identity_placement(self):
        rng = np.random.default_rng(1)
        cfg = TrainConfig(n_domains=2, epochs_constant=1, epochs_decay=0,
                          crop_size=32, scale_size=32, network=TOY_NET)
        image = rng.integers(0, 255, (32, 32, 3), dtype=np.uint8)
        out = preprocess(image, cfg, rng, training=True)
        want = torch.from_numpy(
            (image.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1))
        assert torch.equal(out, want)

    def test_seeded_crop_determinism(self):
        image = np.random.default_rng(2).integers(
            0, 255, (300, 300, 3), dtype=np.uint8)
        out1 = preprocess(image, self.CFG, np.random.default_rng(9), True)
        out2 = preprocess(image, self.CFG, np.random.default_rng(9), True)
        assert torch.equal(out1, out2)

    def test_inference_resize_no_crop(self):
        image = np.zeros((100, 50, 3), dtype=np.uint8)
        out = preprocess(image, training=False, eval_size=(64, 96))
        assert tuple(out.shape) == (3, 64, 96)


class TestImagePool:
    def test_zero_size_pass_through(self):
        pool = ImagePool(0, np.random.default_rng(0))
        batch = torch.rand(3, 3, 4, 4)
        assert torch.equal(pool.query(batch), batch)

    def test_fills_then_mixes(self):
        rng = np.random.default_rng(1)
        pool = ImagePool(4, rng)
        first = torch.rand(4, 3, 2, 2)
        assert torch.equal(pool.query(first), first)
        assert len(pool.images) == 4
        later = pool.query(torch.rand(8, 3, 2, 2))
        assert later.shape == (8, 3, 2, 2)
        assert len(pool.images) == 4


class TestTrainStep:
    def test_parameter_isolation(self, tmp_path):
        manifest, cfg = toy_setup(tmp_path, n_domains=3)
        trainer = Trainer(cfg, manifest)
        before = domain_checksums(trainer)
        a_dom, b_dom = trainer.domains[0], trainer.domains[1]
        batch_a = trainer._batch(trainer._cyclers[a_dom.name].take(2))
        batch_b = trainer._batch(trainer._cyclers[b_dom.name].take(2))
        trainer.train_step((a_dom, b_dom), batch_a, batch_b)
        after = domain_checksums(trainer)
        # third domain untouched, trained pair changed
        assert after[trainer.domains[2].name] == before[trainer.domains[2].name]
        assert after[a_dom.name] != before[a_dom.name]
        assert after[b_dom.name] != before[b_dom.name]

    def test_step_reduces_generator_gan_loss(self, tmp_path):
        from difl.losses import gan_loss_generator

        manifest, cfg = toy_setup(tmp_path, n_domains=2)
        cfg = TrainConfig(n_domains=2, epochs_constant=1, epochs_decay=0,
                          base_lr=1e-4, batch_size=2, crop_size=32,
                          scale_size=32, seed=3, pool_size=0,
                          network=TOY_NET, weights=LossWeights(0.0, 0.0))
        trainer = Trainer(cfg, manifest)
        # freeze the discriminators so the target stays fixed
        for opt in trainer.disc_optimizers.values():
            for group in opt.param_groups:
                group["lr"] = 0.0
        a_dom, b_dom = trainer.domains
        batch_a = trainer._batch(trainer._cyclers[a_dom.name].take(2))
        batch_b = trainer._batch(trainer._cyclers[b_dom.name].take(2))

        def gan_terms():
            with torch.no_grad():
                fake_b = trainer.gen_bank.decoders[b_dom.name](
                    trainer.gen_bank.encoders[a_dom.name](batch_a))
                fake_a = trainer.gen_bank.decoders[a_dom.name](
                    trainer.gen_bank.encoders[b_dom.name](batch_b))
                d_b = trainer.disc_bank.discriminators[b_dom.name](fake_b)
                d_a = trainer.disc_bank.discriminators[a_dom.name](fake_a)
            return float(gan_loss_generator(d_b) + gan_loss_generator(d_a))

        before = gan_terms()
        trainer.train_step((a_dom, b_dom), batch_a, batch_b)
        after = gan_terms()
        assert after < before

    def test_history_grows_per_step(self, tmp_path):
        manifest, cfg = toy_setup(tmp_path, n_domains=2)
        trainer = Trainer(cfg, manifest)
        a_dom, b_dom = trainer.domains[0], trainer.domains[1]
        for i in range(3):
            batch_a = trainer._batch(trainer._cyclers[a_dom.name].take(1))
            batch_b = trainer._batch(trainer._cyclers[b_dom.name].take(1))
            trainer.train_step((a_dom, b_dom), batch_a, batch_b)
            assert len(trainer.state.loss_history) == i + 1

    def test_same_domain_pair_rejected(self, tmp_path):
        manifest, cfg = toy_setup(tmp_path, n_domains=2)
        trainer = Trainer(cfg, manifest)
        d = trainer.domains[0]
        batch = trainer._batch(trainer._cyclers[d.name].take(1))
        with pytest.raises(ConfigError):
            trainer.train_step((d, d), batch, batch)

    def test_divergence_aborts_with_diagnostic(self, tmp_path):
        manifest, cfg = toy_setup(tmp_path, n_domains=2)
        trainer = Trainer(cfg, manifest)
        a_dom, b_dom = trainer.domains[0], trainer.domains[1]
        with torch.no_grad():
            for p in trainer.gen_bank.encoders[a_dom.name].parameters():
                p.fill_(float("nan"))
        batch_a = trainer._batch(trainer._cyclers[a_dom.name].take(1))
        batch_b = trainer._batch(trainer._cyclers[b_dom.name].take(1))
        with pytest.raises(TrainingDivergedError):
            trainer.train_step((a_dom, b_dom), batch_a, batch_b)


class TestFit:
    def test_bookkeeping_and_log(self, tmp_path):
        manifest, cfg = toy_setup(tmp_path)
        log_path = tmp_path / "train_log.csv"
        trainer = Trainer(cfg, manifest, log_path=log_path)
        iters = trainer._iters_per_epoch()
        state = trainer.fit()
        assert state.epoch == cfg.total_epochs
        assert len(state.loss_history) == cfg.total_epochs * iters
        lines = log_path.read_text().strip().splitlines()
        assert lines[0].startswith("epoch,iter,pair")
        assert len(lines) == 1 + cfg.total_epochs * iters

    def test_seeded_reproducibility(self, tmp_path):
        manifest, cfg = toy_setup(tmp_path)
        h1 = Trainer(cfg, manifest).fit().loss_history
        h2 = Trainer(cfg, manifest).fit().loss_history
        assert [(e, vars(b)) for e, b in h1] == [(e, vars(b)) for e, b in h2]

    def test_checkpoint_resume_matches_config(self, tmp_path):
        manifest, cfg = toy_setup(tmp_path)
        out = tmp_path / "ckpts"
        trainer = fit(manifest, cfg, out_dir=out, checkpoint_every=1)
        ckpt1 = out / "epoch_0001.ckpt"
        assert ckpt1.exists()
        payload = load_checkpoint(ckpt1)
        assert payload["epoch"] == 1
        # resume from epoch 1 and land on the same final state
        resumed = fit(manifest, cfg, resume_from=ckpt1)
        assert (domain_checksums(resumed) == domain_checksums(trainer))

    def test_resume_rejects_structural_mismatch(self, tmp_path):
        from dataclasses import replace

        manifest, cfg = toy_setup(tmp_path)
        out = tmp_path / "ckpts"
        fit(manifest, cfg, out_dir=out)
        ckpt = out / f"epoch_{cfg.total_epochs:04d}.ckpt"
        bad_net = NetworkConfig(input_size=(32, 32), base_channels=8,
                                downsample_stages=2, encoder_res_blocks=1,
                                decoder_res_blocks=1, discriminator_layers=1)
        with pytest.raises(CheckpointError):
            fit(manifest, replace(cfg, network=bad_net), resume_from=ckpt)

    def test_two_phase_fcl_fine_tune(self, tmp_path):
        from dataclasses import replace

        manifest, cfg = toy_setup(tmp_path)
        out = tmp_path / "ckpts"
        fit(manifest, cfg, out_dir=out)
        phase1 = out / f"epoch_{cfg.total_epochs:04d}.ckpt"

        cfg2 = replace(cfg, epochs_constant=cfg.total_epochs + 2,
                       fcl_start_epoch=cfg.total_epochs,
                       lambda2_start=0.05, lambda2_end=0.1)
        trainer2 = fit(manifest, cfg2, resume_from=phase1)
        assert trainer2.state.epoch == cfg.total_epochs + 2
        # feature term is weighted only in phase 2
        assert trainer2.state.current_lambda2 >= 0.05

    def test_atomic_checkpoint_no_tmp_left(self, tmp_path):
        manifest, cfg = toy_setup(tmp_path)
        out = tmp_path / "ckpts"
        fit(manifest, cfg, out_dir=out)
        assert not list(out.glob("*.tmp"))

    def test_domain_count_mismatch_rejected(self, tmp_path):
        manifest, cfg = toy_setup(tmp_path, n_domains=3)
        from dataclasses import replace
        with pytest.raises(ConfigError):
            Trainer(replace(cfg, n_domains=2), manifest)
