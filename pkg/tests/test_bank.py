import hashlib

import pytest
import torch

from difl import DomainId, NetworkConfig, init_bank
from difl.errors import ConfigError, DomainNotFoundError, ShapeError

from conftest import DOM_A, DOM_B, DOM_C, MICRO_CONFIG


def checksum(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.numpy().tobytes())
    return h.hexdigest()


class TestLatentShapes:
    def test_micro_bank_shape(self, micro_banks, rand_image):
        gen, _ = micro_banks
        feat = gen.encode(DOM_A, rand_image)
        # C=8 with 2 downsamples -> 32 channels at 1/4 resolution
        assert tuple(feat.values.shape) == (32, 4, 4)

    def test_full_scale_latent_shape(self):
        # 288x384 input at 64 base channels and 2 downsampling stages gives
        # the 256x72x96 feature map used for full-size retrieval descriptors.
        cfg = NetworkConfig(input_size=(288, 384), base_channels=64,
                            downsample_stages=2, encoder_res_blocks=4,
                            decoder_res_blocks=4, discriminator_layers=3)
        assert cfg.latent_shape() == (256, 72, 96)
        gen, _ = init_bank(cfg, [DOM_A, DOM_B], seed=0)
        image = torch.zeros(3, 288, 384)
        feat = gen.encode(DOM_A, image)
        assert tuple(feat.values.shape) == (256, 72, 96)

    def test_shared_latent_shape_across_domains(self, micro_banks):
        gen, _ = micro_banks
        g = torch.Generator().manual_seed(0)
        x = torch.rand((3, 16, 16), generator=g) * 2 - 1
        y = torch.rand((3, 16, 16), generator=g) * 2 - 1
        assert (gen.encode(DOM_A, x).values.shape
                == gen.encode(DOM_B, y).values.shape)

    def test_fully_convolutional_accepts_other_sizes(self, micro_banks):
        gen, _ = micro_banks
        feat = gen.encode(DOM_A, torch.zeros(3, 32, 64))
        assert tuple(feat.values.shape) == (32, 8, 16)

    def test_indivisible_size_rejected(self, micro_banks):
        gen, _ = micro_banks
        with pytest.raises(ShapeError):
            gen.encode(DOM_A, torch.zeros(3, 17, 16))

    def test_wrong_channel_count_rejected(self, micro_banks):
        gen, _ = micro_banks
        with pytest.raises(ShapeError):
            gen.encode(DOM_A, torch.zeros(1, 16, 16))


class TestEncodeDecode:
    def test_encode_deterministic(self, micro_banks, rand_image):
        gen, _ = micro_banks
        f1 = gen.encode(DOM_A, rand_image)
        f2 = gen.encode(DOM_A, rand_image)
        assert torch.equal(f1.values, f2.values)

    def test_decode_output_bounded_and_finite(self, micro_banks, rand_image):
        gen, _ = micro_banks
        out = gen.decode(DOM_A, gen.encode(DOM_A, rand_image))
        assert out.shape == rand_image.shape
        assert torch.isfinite(out).all()
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_decode_distinct_features_distinct_outputs(self, micro_banks, rand_image):
        gen, _ = micro_banks
        f1 = gen.encode(DOM_A, rand_image)
        f2 = gen.encode(DOM_A, -rand_image)
        assert not torch.equal(f1.values, f2.values)
        out1 = gen.decode(DOM_A, f1)
        out2 = gen.decode(DOM_A, f2)
        assert not torch.equal(out1, out2)

    def test_decode_rejects_wrong_latent(self, micro_banks):
        gen, _ = micro_banks
        from difl import LatentFeature
        with pytest.raises(ShapeError):
            gen.decode(DOM_A, LatentFeature(torch.zeros(5, 4, 4), DOM_A))

    def test_translate_is_decode_of_encode(self, micro_banks, rand_image):
        gen, _ = micro_banks
        direct = gen.translate(DOM_A, DOM_B, rand_image)
        composed = gen.decode(DOM_B, gen.encode(DOM_A, rand_image))
        assert torch.equal(direct, composed)

    def test_self_translation_is_own_generator(self, micro_banks, rand_image):
        gen, _ = micro_banks
        same = gen.translate(DOM_A, DOM_A, rand_image)
        composed = gen.decode(DOM_A, gen.encode(DOM_A, rand_image))
        assert torch.equal(same, composed)
        assert same.shape == rand_image.shape

    def test_unknown_domain(self, micro_banks, rand_image):
        gen, disc = micro_banks
        with pytest.raises(DomainNotFoundError):
            gen.encode(DomainId(9, "nope"), rand_image)
        with pytest.raises(DomainNotFoundError):
            disc.discriminate(DomainId(9, "nope"), rand_image)


class TestDiscriminator:
    def test_patch_scores_shape_and_finiteness(self, micro_banks, rand_image):
        _, disc = micro_banks
        scores = disc.discriminate(DOM_A, rand_image)
        # one stride-2 layer plus the 4x4 output conv on 16x16 input
        assert tuple(scores.shape) == (1, 7, 7)
        assert torch.isfinite(scores).all()

    def test_different_images_different_scores(self, micro_banks, rand_image):
        _, disc = micro_banks
        s1 = disc.discriminate(DOM_A, rand_image)
        s2 = disc.discriminate(DOM_A, -rand_image)
        assert not torch.equal(s1, s2)


class TestInitBank:
    def test_seeded_determinism(self):
        gen1, disc1 = init_bank(MICRO_CONFIG, [DOM_A, DOM_B, DOM_C], seed=7)
        gen2, disc2 = init_bank(MICRO_CONFIG, [DOM_A, DOM_B, DOM_C], seed=7)
        for name in ("a", "b", "c"):
            assert checksum(gen1.encoders[name]) == checksum(gen2.encoders[name])
            assert checksum(gen1.decoders[name]) == checksum(gen2.decoders[name])
            assert (checksum(disc1.discriminators[name])
                    == checksum(disc2.discriminators[name]))

    def test_different_seed_different_parameters(self):
        gen1, _ = init_bank(MICRO_CONFIG, [DOM_A, DOM_B], seed=7)
        gen2, _ = init_bank(MICRO_CONFIG, [DOM_A, DOM_B], seed=8)
        assert checksum(gen1.encoders["a"]) != checksum(gen2.encoders["a"])

    def test_twelve_domains(self):
        domains = [DomainId(i + 1, f"cond{i:02d}") for i in range(12)]
        gen, disc = init_bank(MICRO_CONFIG, domains, seed=1)
        assert len(gen.encoders) == 12
        assert len(gen.decoders) == 12
        assert len(disc.discriminators) == 12

    def test_single_domain_rejected(self):
        with pytest.raises(ConfigError):
            init_bank(MICRO_CONFIG, [DOM_A], seed=0)

    def test_duplicate_domains_rejected(self):
        with pytest.raises(ConfigError):
            init_bank(MICRO_CONFIG, [DOM_A, DomainId(2, "a")], seed=0)
        with pytest.raises(ConfigError):
            init_bank(MICRO_CONFIG, [DOM_A, DomainId(1, "b")], seed=0)

    def test_parameter_isolation_across_domains(self):
        gen, disc = init_bank(MICRO_CONFIG, [DOM_A, DOM_B, DOM_C], seed=3)
        seen = set()
        for module in (*gen.encoders.values(), *gen.decoders.values(),
                       *disc.discriminators.values()):
            for p in module.parameters():
                assert id(p) not in seen
                seen.add(id(p))


class TestNetworkConfig:
    def test_indivisible_input_size_rejected(self):
        with pytest.raises(ConfigError):
            NetworkConfig(input_size=(30, 32), downsample_stages=2)

    def test_nonpositive_counts_rejected(self):
        with pytest.raises(ConfigError):
            NetworkConfig(base_channels=0)
