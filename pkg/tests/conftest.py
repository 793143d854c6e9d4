import pytest
import torch

from difl import DomainId, NetworkConfig, init_bank

MICRO_CONFIG = NetworkConfig(input_size=(16, 16), base_channels=8,
                             downsample_stages=2, encoder_res_blocks=1,
                             decoder_res_blocks=1, discriminator_layers=1)

DOM_A = DomainId(1, "a")
DOM_B = DomainId(2, "b")
DOM_C = DomainId(3, "c")


@pytest.fixture(scope="session")
def micro_banks():
    """Small fixed-seed 2-domain bank for shape and determinism checks."""
    return init_bank(MICRO_CONFIG, [DOM_A, DOM_B], seed=11)


@pytest.fixture
def rand_image():
    g = torch.Generator().manual_seed(3)
    return torch.rand((3, 16, 16), generator=g) * 2 - 1
