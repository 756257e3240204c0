"""Appearance/structure scene synthesis.

Two encoders factor a person crop into an appearance code (what the person
looks like) and a structure code (how they are posed); a decoder modulated by
adaptive instance normalization recombines codes across persons, and a patch
discriminator scores realism. Code-reconstruction and adversarial losses live
here too.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT_VERSION = 1
_PROB_EPS = 1e-7


class ProfileError(ValueError):
    """Invalid or inconsistent scale profile."""


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint archive."""


@dataclass(frozen=True)
class GanProfile:
    """Scale bundle tying crop geometry to encoder/decoder widths.

    The structure code keeps one quarter of the crop resolution, so the crop
    extent must be divisible by four.
    """

    name: str
    crop_h: int
    crop_w: int
    app_channels: int
    str_channels: int
    disc_width: int
    use_resnet_appearance: bool = False

    APP_POOL_H = 4
    APP_POOL_W = 1

    def __post_init__(self) -> None:
        if self.crop_h % 4 or self.crop_w % 4:
            raise ProfileError(
                f"crop {self.crop_h}x{self.crop_w} not divisible by 4"
            )
        if min(self.crop_h, self.crop_w) < 16:
            raise ProfileError("crop too small for four downsampling stages")
        for field in ("app_channels", "str_channels", "disc_width"):
            if getattr(self, field) < 1:
                raise ProfileError(f"{field} must be >= 1")

    @property
    def app_dim(self) -> int:
        """Flattened appearance-code length."""
        return self.app_channels * self.APP_POOL_H * self.APP_POOL_W

    @property
    def str_h(self) -> int:
        return self.crop_h // 4

    @property
    def str_w(self) -> int:
        return self.crop_w // 4

    @classmethod
    def full(cls) -> "GanProfile":
        return cls(
            name="full",
            crop_h=256,
            crop_w=128,
            app_channels=2048,
            str_channels=128,
            disc_width=64,
            use_resnet_appearance=True,
        )

    @classmethod
    def toy(cls) -> "GanProfile":
        return cls(
            name="toy",
            crop_h=64,
            crop_w=32,
            app_channels=256,
            str_channels=32,
            disc_width=16,
        )

    @classmethod
    def named(cls, name: str) -> "GanProfile":
        try:
            return {"full": cls.full, "toy": cls.toy}[name]()
        except KeyError:
            raise ProfileError(f"unknown profile {name!r}; expected 'full' or 'toy'")


class ConvBlock(nn.Module):
    """Conv + optional instance norm + ReLU."""

    def __init__(self, c_in: int, c_out: int, stride: int = 1, norm: bool = True):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
        self.norm = nn.InstanceNorm2d(c_out, affine=True) if norm else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.norm(self.conv(x)))


class ResidualBlock(nn.Module):
    """Two instance-normalized convs with an identity skip."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = nn.InstanceNorm2d(channels, affine=True)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.InstanceNorm2d(channels, affine=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.relu(x + h)


def adaptive_instance_norm(
    x: torch.Tensor, scale: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5
) -> torch.Tensor:
    """Replace per-channel statistics of x with externally supplied ones.

    x is (N, C, H, W); scale and bias are (N, C).
    """
    mean = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), unbiased=False, keepdim=True)
    normed = (x - mean) / torch.sqrt(var + eps)
    return scale[:, :, None, None] * normed + bias[:, :, None, None]


class AdainResidualBlock(nn.Module):
    """Residual block whose normalization parameters come from the appearance
    code via a per-block linear head. Scales are parameterized as 1 + delta so
    a zero-initialized head starts at identity scaling."""

    def __init__(self, channels: int, app_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.head = nn.Linear(app_dim, 4 * channels)
        self.channels = channels

    def forward(self, x: torch.Tensor, app_code: torch.Tensor) -> torch.Tensor:
        params = self.head(app_code.flatten(1))
        ds1, b1, ds2, b2 = params.chunk(4, dim=1)
        h = F.relu(adaptive_instance_norm(self.conv1(x), 1.0 + ds1, b1))
        h = adaptive_instance_norm(self.conv2(h), 1.0 + ds2, b2)
        return F.relu(x + h)


class ToyAppearanceTrunk(nn.Module):
    """Four strided convs for small crops; stands in for the deep trunk."""

    def __init__(self, out_channels: int):
        super().__init__()
        w = max(out_channels // 8, 8)
        self.net = nn.Sequential(
            ConvBlock(3, w, stride=2),
            ConvBlock(w, w * 2, stride=2),
            ConvBlock(w * 2, w * 4, stride=2),
            ConvBlock(w * 4, out_channels, stride=2),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def _resnet50_trunk() -> nn.Module:
    from torchvision.models import resnet50

    net = resnet50(weights=None)
    return nn.Sequential(
        net.conv1, net.bn1, net.relu, net.maxpool,
        net.layer1, net.layer2, net.layer3, net.layer4,
    )


class AppearanceEncoder(nn.Module):
    """Maps a crop to a (C, 4, 1) appearance code.

    The trunk is a residual backbone at full scale or a four-conv stack at toy
    scale; either way a (4, 1) adaptive max pool produces the code grid.
    """

    def __init__(self, profile: GanProfile):
        super().__init__()
        if profile.use_resnet_appearance:
            self.trunk = _resnet50_trunk()
        else:
            self.trunk = ToyAppearanceTrunk(profile.app_channels)
        self.pool = nn.AdaptiveMaxPool2d((profile.APP_POOL_H, profile.APP_POOL_W))
        self.profile = profile

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pool(self.trunk(x))


class StructureEncoder(nn.Module):
    """Maps a crop to a (C_str, H/4, W/4) structure code: four convs (two
    strided) followed by four residual blocks."""

    def __init__(self, profile: GanProfile):
        super().__init__()
        c = profile.str_channels
        self.convs = nn.Sequential(
            ConvBlock(3, c // 2 or 1, stride=1),
            ConvBlock(c // 2 or 1, c, stride=2),
            ConvBlock(c, c, stride=2),
            ConvBlock(c, c, stride=1),
        )
        self.blocks = nn.Sequential(*[ResidualBlock(c) for _ in range(4)])
        self.profile = profile

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(self.convs(x))


class Decoder(nn.Module):
    """Renders an image from a structure code modulated by an appearance code:
    four adaptive-norm residual blocks, then four convs with two 2x upsamples,
    ending in a sigmoid so outputs live in [0, 1]."""

    def __init__(self, profile: GanProfile):
        super().__init__()
        c = profile.str_channels
        self.blocks = nn.ModuleList(
            [AdainResidualBlock(c, profile.app_dim) for _ in range(4)]
        )
        mid = max(c // 2, 8)
        self.up1 = ConvBlock(c, mid, stride=1)
        self.up2 = ConvBlock(mid, mid, stride=1)
        self.refine = ConvBlock(mid, mid, stride=1)
        self.to_rgb = nn.Conv2d(mid, 3, 3, padding=1)
        self.profile = profile

    def forward(self, app_code: torch.Tensor, str_code: torch.Tensor) -> torch.Tensor:
        h = str_code
        for block in self.blocks:
            h = block(h, app_code)
        h = self.up1(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.up2(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.refine(h)
        return torch.sigmoid(self.to_rgb(h))


class PatchDiscriminator(nn.Module):
    """Four strided convs then a 1-channel projection and sigmoid, yielding a
    grid of per-patch real probabilities."""

    def __init__(self, profile: GanProfile):
        super().__init__()
        w = profile.disc_width
        self.net = nn.Sequential(
            nn.Conv2d(3, w, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w, w * 2, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w * 2, w * 4, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w * 4, w * 8, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w * 8, 1, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(x))


class SceneSynthesisModel(nn.Module):
    """Bundles the two encoders and the decoder."""

    def __init__(self, profile: GanProfile):
        super().__init__()
        self.profile = profile
        self.app_encoder = AppearanceEncoder(profile)
        self.str_encoder = StructureEncoder(profile)
        self.decoder = Decoder(profile)

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.app_encoder(x), self.str_encoder(x)

    def decode(self, app_code: torch.Tensor, str_code: torch.Tensor) -> torch.Tensor:
        return self.decoder(app_code, str_code)

    def synthesize(self, app_from: torch.Tensor, str_from: torch.Tensor) -> torch.Tensor:
        """Image with the appearance of `app_from` and the pose of `str_from`."""
        return self.decode(self.app_encoder(app_from), self.str_encoder(str_from))


def l1_code_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between two code tensors."""
    if a.shape != b.shape:
        raise ValueError(f"code shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def discriminator_objective(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """E[log F(real) + log(1 - F(fake))], the quantity the discriminator
    maximizes. Probabilities are clamped away from {0, 1} for finiteness."""
    real = torch.clamp(d_real, _PROB_EPS, 1.0 - _PROB_EPS)
    fake = torch.clamp(d_fake, _PROB_EPS, 1.0 - _PROB_EPS)
    return torch.log(real).mean() + torch.log1p(-fake).mean()


def generator_adversarial_loss(d_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator objective E[-log F(fake)]."""
    fake = torch.clamp(d_fake, _PROB_EPS, 1.0 - _PROB_EPS)
    return -torch.log(fake).mean()


def adversarial_losses(
    d_real: torch.Tensor, d_fake: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """(discriminator loss, generator loss): the discriminator loss is the
    negated objective so both halves are minimized."""
    return -discriminator_objective(d_real, d_fake), generator_adversarial_loss(d_fake)


def save_checkpoint(
    path: str | Path,
    profile: GanProfile,
    sections: dict[str, dict],
    metadata: Optional[dict] = None,
) -> None:
    """Write a training checkpoint: named state-dict sections plus profile
    identity and a format version for forward compatibility."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "profile": profile.name,
        "sections": sections,
        "metadata": metadata or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path, expect_profile: Optional[str] = None) -> dict:
    """Read a checkpoint archive, validating version and profile."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}")
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a recognized checkpoint archive")
    if payload["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format {payload['format_version']} unsupported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    if expect_profile is not None and payload["profile"] != expect_profile:
        raise CheckpointError(
            f"checkpoint was trained at profile {payload['profile']!r}, "
            f"not {expect_profile!r}"
        )
    return payload
