"""Multi-domain encoder/decoder generator bank and per-domain patch discriminators.

Every domain owns one encoder, one decoder and one discriminator; no parameters
are shared across domains. All encoders map into one latent space of identical
shape, which is what makes cross-domain feature comparison meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import ConfigError, DomainNotFoundError, ShapeError

IMAGE_CHANNELS = 3


@dataclass(frozen=True)
class DomainId:
    """One environmental condition class, e.g. ``sunny_no_foliage``."""

    index: int
    name: str

    def __post_init__(self):
        if self.index < 1:
            raise ConfigError(f"domain index must be >= 1, got {self.index}")
        if not self.name:
            raise ConfigError("domain name must be non-empty")


@dataclass(frozen=True)
class NetworkConfig:
    """Shapes and depths of the per-domain networks.

    ``input_size`` is the default inference resolution; the networks are fully
    convolutional, so any resolution divisible by ``2**downsample_stages`` is
    accepted at run time.
    """

    input_size: tuple[int, int] = (288, 384)
    base_channels: int = 64
    downsample_stages: int = 2
    encoder_res_blocks: int = 4
    decoder_res_blocks: int = 4
    discriminator_layers: int = 3

    def __post_init__(self):
        h, w = self.input_size
        factor = 2 ** self.downsample_stages
        if h % factor or w % factor:
            raise ConfigError(
                f"input size {self.input_size} not divisible by {factor}"
            )
        for name in ("base_channels", "downsample_stages", "encoder_res_blocks",
                     "decoder_res_blocks", "discriminator_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def latent_channels(self) -> int:
        return self.base_channels * 2 ** self.downsample_stages

    def latent_shape(self, image_hw: tuple[int, int] | None = None) -> tuple[int, int, int]:
        h, w = image_hw if image_hw is not None else self.input_size
        factor = 2 ** self.downsample_stages
        return (self.latent_channels, h // factor, w // factor)


@dataclass
class LatentFeature:
    """Encoded spatial feature map of shape (C, h, w).

    Flattening is C-contiguous: channel-major, row-major within each channel.
    That order is the persistence contract for retrieval descriptors.
    """

    values: torch.Tensor
    source_domain: DomainId

    def flatten(self) -> torch.Tensor:
        return self.values.reshape(-1)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.body(x)


class Encoder(nn.Module):
    """7x7 stem, then stride-2 downsampling convs, then residual blocks."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        layers: list[nn.Module] = [
            nn.Conv2d(IMAGE_CHANNELS, cfg.base_channels, 7, padding=3,
                      padding_mode="reflect"),
            nn.InstanceNorm2d(cfg.base_channels),
            nn.ReLU(inplace=True),
        ]
        ch = cfg.base_channels
        for _ in range(cfg.downsample_stages):
            layers += [
                nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1),
                nn.InstanceNorm2d(ch * 2),
                nn.ReLU(inplace=True),
            ]
            ch *= 2
        layers += [ResidualBlock(ch) for _ in range(cfg.encoder_res_blocks)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    """Residual blocks, stride-2 transposed upsampling, bounded 7x7 output conv."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        ch = cfg.latent_channels
        layers: list[nn.Module] = [ResidualBlock(ch) for _ in range(cfg.decoder_res_blocks)]
        for _ in range(cfg.downsample_stages):
            layers += [
                nn.ConvTranspose2d(ch, ch // 2, 3, stride=2, padding=1,
                                   output_padding=1),
                nn.InstanceNorm2d(ch // 2),
                nn.ReLU(inplace=True),
            ]
            ch //= 2
        layers += [
            nn.Conv2d(ch, IMAGE_CHANNELS, 7, padding=3, padding_mode="reflect"),
            nn.Tanh(),
        ]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class PatchDiscriminator(nn.Module):
    """Stride-2 conv stack emitting a spatial map of raw (unsquashed) scores.

    Least-squares adversarial training operates on raw scores, so there is no
    terminal sigmoid and no normalization on the output layer.
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        ch = cfg.base_channels
        layers: list[nn.Module] = [
            nn.Conv2d(IMAGE_CHANNELS, ch, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        for _ in range(cfg.discriminator_layers - 1):
            layers += [
                nn.Conv2d(ch, ch * 2, 4, stride=2, padding=1),
                nn.InstanceNorm2d(ch * 2),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            ch *= 2
        layers.append(nn.Conv2d(ch, 1, 4, stride=1, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


def _init_parameters(module: nn.Module, generator: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            with torch.no_grad():
                m.weight.copy_(torch.empty_like(m.weight).normal_(
                    0.0, 0.02, generator=generator))
                if m.bias is not None:
                    m.bias.zero_()


def _check_image(x: torch.Tensor, downsample_stages: int) -> None:
    if x.dim() not in (3, 4) or x.shape[-3] != IMAGE_CHANNELS:
        raise ShapeError(
            f"expected (B,){IMAGE_CHANNELS}xHxW image tensor, got {tuple(x.shape)}"
        )
    factor = 2 ** downsample_stages
    if x.shape[-2] % factor or x.shape[-1] % factor:
        raise ShapeError(
            f"image size {tuple(x.shape[-2:])} not divisible by {factor}"
        )


class GeneratorBank:
    """Per-domain encoders and decoders over one shared latent space."""

    def __init__(self, config: NetworkConfig, domains: list[DomainId],
                 dtype: torch.dtype = torch.float32):
        self.config = config
        self.domains = list(domains)
        self.encoders = nn.ModuleDict(
            {d.name: Encoder(config).to(dtype) for d in domains})
        self.decoders = nn.ModuleDict(
            {d.name: Decoder(config).to(dtype) for d in domains})

    def domain(self, name: str) -> DomainId:
        for d in self.domains:
            if d.name == name:
                return d
        raise DomainNotFoundError(name)

    def _module(self, table: nn.ModuleDict, domain: DomainId) -> nn.Module:
        if domain.name not in table:
            raise DomainNotFoundError(domain.name)
        return table[domain.name]

    def encoder(self, domain: DomainId) -> nn.Module:
        return self._module(self.encoders, domain)

    def decoder(self, domain: DomainId) -> nn.Module:
        return self._module(self.decoders, domain)

    def encode(self, domain: DomainId, image: torch.Tensor) -> LatentFeature:
        """Encode a (3,H,W) image into its domain-invariant feature map."""
        _check_image(image, self.config.downsample_stages)
        enc = self.encoder(domain)
        with torch.no_grad():
            values = enc(image.unsqueeze(0)).squeeze(0)
        return LatentFeature(values=values, source_domain=domain)

    def decode(self, domain: DomainId, feature: LatentFeature) -> torch.Tensor:
        """Decode a latent feature back into a (3,H,W) image in [-1, 1]."""
        values = feature.values
        if values.dim() != 3 or values.shape[0] != self.config.latent_channels:
            raise ShapeError(
                f"expected latent of {self.config.latent_channels} channels, "
                f"got {tuple(values.shape)}"
            )
        dec = self.decoder(domain)
        with torch.no_grad():
            image = dec(values.unsqueeze(0)).squeeze(0)
        return image

    def translate(self, src: DomainId, dst: DomainId,
                  image: torch.Tensor) -> torch.Tensor:
        """Map an image from ``src`` into ``dst``; src == dst reconstructs."""
        return self.decode(dst, self.encode(src, image))

    def state_arrays(self) -> dict:
        return {
            **{f"enc/{d.name}": self.encoders[d.name].state_dict() for d in self.domains},
            **{f"dec/{d.name}": self.decoders[d.name].state_dict() for d in self.domains},
        }

    def load_state_arrays(self, arrays: dict) -> None:
        for d in self.domains:
            self.encoders[d.name].load_state_dict(arrays[f"enc/{d.name}"])
            self.decoders[d.name].load_state_dict(arrays[f"dec/{d.name}"])


class DiscriminatorBank:
    """Per-domain patch discriminators; same key set as the generator bank."""

    def __init__(self, config: NetworkConfig, domains: list[DomainId],
                 dtype: torch.dtype = torch.float32):
        self.config = config
        self.domains = list(domains)
        self.discriminators = nn.ModuleDict(
            {d.name: PatchDiscriminator(config).to(dtype) for d in domains})

    def discriminator(self, domain: DomainId) -> nn.Module:
        if domain.name not in self.discriminators:
            raise DomainNotFoundError(domain.name)
        return self.discriminators[domain.name]

    def discriminate(self, domain: DomainId, image: torch.Tensor) -> torch.Tensor:
        """Patch-level realness scores for ``image`` under ``domain``'s critic."""
        _check_image(image, self.config.downsample_stages)
        disc = self.discriminator(domain)
        with torch.no_grad():
            scores = disc(image.unsqueeze(0)).squeeze(0)
        return scores

    def state_arrays(self) -> dict:
        return {f"dis/{d.name}": self.discriminators[d.name].state_dict()
                for d in self.domains}

    def load_state_arrays(self, arrays: dict) -> None:
        for d in self.domains:
            self.discriminators[d.name].load_state_dict(arrays[f"dis/{d.name}"])


def init_bank(config: NetworkConfig, domains: list[DomainId], seed: int,
              dtype: torch.dtype = torch.float32
              ) -> tuple[GeneratorBank, DiscriminatorBank]:
    """Build seeded generator and discriminator banks; same seed, same bits."""
    if len(domains) < 2:
        raise ConfigError("translation needs at least 2 domains")
    if len({d.name for d in domains}) != len(domains):
        raise ConfigError("duplicate domain names")
    if len({d.index for d in domains}) != len(domains):
        raise ConfigError("duplicate domain indices")

    gen = GeneratorBank(config, domains, dtype)
    disc = DiscriminatorBank(config, domains, dtype)
    g = torch.Generator().manual_seed(seed)
    # Fixed iteration order over sorted domain names keeps init reproducible
    # regardless of the caller's list order.
    for name in sorted(d.name for d in domains):
        _init_parameters(gen.encoders[name], g)
        _init_parameters(gen.decoders[name], g)
        _init_parameters(disc.discriminators[name], g)
    for module in (*gen.encoders.values(), *gen.decoders.values(),
                   *disc.discriminators.values()):
        module.eval()
    return gen, disc
