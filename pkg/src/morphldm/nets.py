"""Trainable networks.

Every network is dimension-agnostic (2D or 3D convolutions picked from
``NetConfig.ndim``) and uses group normalization only, so outputs never
depend on batch composition.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .fields import apply_deformation

LOGVAR_RANGE = (-30.0, 20.0)
AGE_SCALE = 100.0


@dataclass
class NetConfig:
    image_size: tuple[int, ...] = (64, 64)
    in_channels: int = 1
    latent_channels: int = 8
    encoder_levels: int = 3
    base_width: int = 16
    channel_mult: tuple[int, ...] = (1, 2, 4)
    unet_channels: tuple[int, ...] = (64, 96, 96)
    cross_attention_levels: tuple[int, ...] = (1, 2)
    condition_embed_dim: int = 64
    num_conditions: int = 2
    attention_heads: int = 4
    disc_width: int = 32
    predictor_channels: tuple[int, ...] = (16, 32, 64, 96)

    def __post_init__(self):
        self.image_size = tuple(int(s) for s in self.image_size)
        self.channel_mult = tuple(int(m) for m in self.channel_mult)
        self.unet_channels = tuple(int(c) for c in self.unet_channels)
        self.cross_attention_levels = tuple(int(c) for c in self.cross_attention_levels)
        self.predictor_channels = tuple(int(c) for c in self.predictor_channels)
        if self.encoder_levels < 1:
            raise ValueError("encoder_levels must be >= 1")
        if len(self.unet_channels) < 2:
            raise ValueError("unet_channels needs at least two levels")
        if len(self.channel_mult) != self.encoder_levels:
            raise ValueError("channel_mult needs one entry per encoder level")
        if self.ndim not in (2, 3):
            raise ValueError(f"image_size must be 2D or 3D, got {self.image_size}")
        factor = 2**self.encoder_levels
        if any(s % factor for s in self.image_size):
            raise ValueError(f"image size {self.image_size} not divisible by 2**{self.encoder_levels}")
        lat = self.latent_size
        if any(s % 2 ** (len(self.unet_channels) - 1) for s in lat):
            raise ValueError(f"latent size {lat} too small for {len(self.unet_channels)} UNet levels")

    @property
    def ndim(self) -> int:
        return len(self.image_size)

    @property
    def latent_size(self) -> tuple[int, ...]:
        return tuple(s // 2**self.encoder_levels for s in self.image_size)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def conv_nd(ndim: int, *args, **kwargs) -> nn.Module:
    return (nn.Conv2d if ndim == 2 else nn.Conv3d)(*args, **kwargs)


def group_norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, ch), ch)


def encode_condition(age, sex, dtype=torch.float32) -> torch.Tensor:
    """``(B, 2)`` tensor of ``[age / 100, sex]``."""
    age = torch.as_tensor(age, dtype=dtype).reshape(-1)
    sex = torch.as_tensor(sex, dtype=dtype).reshape(-1)
    return torch.stack([age / AGE_SCALE, sex], dim=1)


def condition_channels(c: torch.Tensor, spatial: tuple[int, ...]) -> torch.Tensor:
    """Repeat each condition scalar across the spatial grid: ``(B, n_cond, *spatial)``."""
    return c.view(*c.shape, *([1] * len(spatial))).expand(*c.shape, *spatial)


def with_condition(x: torch.Tensor, c: torch.Tensor | None) -> torch.Tensor:
    if c is None:
        return x
    return torch.cat([x, condition_channels(c.to(x.dtype), tuple(x.shape[2:]))], dim=1)


class ResBlock(nn.Module):
    def __init__(self, ndim: int, in_ch: int, out_ch: int, temb_dim: int | None = None):
        super().__init__()
        self.norm1 = group_norm(in_ch)
        self.conv1 = conv_nd(ndim, in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch) if temb_dim else None
        self.norm2 = group_norm(out_ch)
        self.conv2 = conv_nd(ndim, out_ch, out_ch, 3, padding=1)
        self.skip = conv_nd(ndim, in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        self.ndim = ndim

    def forward(self, x, temb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.temb is not None:
            h = h + self.temb(F.silu(temb)).view(*h.shape[:2], *([1] * self.ndim))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Downsample(nn.Module):
    def __init__(self, ndim, ch_in, ch_out):
        super().__init__()
        self.conv = conv_nd(ndim, ch_in, ch_out, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ndim, ch_in, ch_out):
        super().__init__()
        self.conv = conv_nd(ndim, ch_in, ch_out, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class Encoder(nn.Module):
    """Image (+template, +condition channels) to latent ``(mu, logvar)``."""

    def __init__(self, cfg: NetConfig, in_ch: int):
        super().__init__()
        widths = [cfg.base_width * m for m in cfg.channel_mult]
        self.conv_in = conv_nd(cfg.ndim, in_ch, widths[0], 3, padding=1)
        blocks = []
        prev = widths[0]
        for w in widths:
            blocks += [ResBlock(cfg.ndim, prev, w), Downsample(cfg.ndim, w, w)]
            prev = w
        self.blocks = nn.Sequential(*blocks)
        self.mid = ResBlock(cfg.ndim, prev, prev)
        self.norm_out = group_norm(prev)
        self.conv_out = conv_nd(cfg.ndim, prev, 2 * cfg.latent_channels, 3, padding=1)
        self.image_size = cfg.image_size

    def forward(self, x):
        if tuple(x.shape[2:]) != self.image_size:
            raise ValueError(f"expected spatial size {self.image_size}, got {tuple(x.shape[2:])}")
        h = self.mid(self.blocks(self.conv_in(x)))
        mu, logvar = self.conv_out(F.silu(self.norm_out(h))).chunk(2, dim=1)
        return mu, logvar.clamp(*LOGVAR_RANGE)


class Decoder(nn.Module):
    """Latent-resolution features to full resolution; used for images,
    deformation fields and templates."""

    def __init__(self, cfg: NetConfig, in_ch: int, out_ch: int):
        super().__init__()
        widths = [cfg.base_width * m for m in cfg.channel_mult][::-1]
        self.conv_in = conv_nd(cfg.ndim, in_ch, widths[0], 3, padding=1)
        blocks = [ResBlock(cfg.ndim, widths[0], widths[0])]
        prev = widths[0]
        for w in widths:
            blocks += [Upsample(cfg.ndim, prev, w), ResBlock(cfg.ndim, w, w)]
            prev = w
        self.blocks = nn.Sequential(*blocks)
        self.norm_out = group_norm(prev)
        self.conv_out = conv_nd(cfg.ndim, prev, out_ch, 3, padding=1)

    def forward(self, z):
        h = self.blocks(self.conv_in(z))
        return self.conv_out(F.silu(self.norm_out(h)))


class DeformationDecoder(Decoder):
    """Outputs a voxel-unit displacement with one channel per spatial dim.

    The last convolution starts near zero so training begins at the identity
    warp while gradients still reach every layer.
    """

    def __init__(self, cfg: NetConfig, in_ch: int):
        super().__init__(cfg, in_ch, cfg.ndim)
        nn.init.normal_(self.conv_out.weight, std=1e-5)
        nn.init.zeros_(self.conv_out.bias)


class TemplateDecoder(nn.Module):
    """Condition vector (or a learned vector) to a template in ``[0, 1]``."""

    def __init__(self, cfg: NetConfig, conditional: bool, init_mean: float = 0.5):
        super().__init__()
        self.conditional = conditional
        self.num_conditions = cfg.num_conditions
        if not conditional:
            # nonzero start so the first layer receives gradient from step one
            self.latent_vector = nn.Parameter(torch.full((cfg.num_conditions,), 0.5))
        width = cfg.base_width * cfg.channel_mult[-1]
        self.lat_shape = (width,) + cfg.latent_size
        self.fc = nn.Linear(cfg.num_conditions, math.prod(self.lat_shape))
        self.decoder = Decoder(cfg, width, cfg.in_channels)
        p = min(max(init_mean, 1e-3), 1 - 1e-3)
        nn.init.constant_(self.decoder.conv_out.bias, math.log(p / (1 - p)))

    def forward(self, c: torch.Tensor | None = None, batch: int | None = None):
        if self.conditional:
            if c is None:
                raise ValueError("conditional template decoder requires a condition")
            vec = c.to(self.fc.weight.dtype)
        else:
            n = batch if batch is not None else (c.shape[0] if c is not None else 1)
            vec = self.latent_vector.unsqueeze(0).expand(n, -1)
        h = F.silu(self.fc(vec)).view(vec.shape[0], *self.lat_shape)
        return torch.sigmoid(self.decoder(h))


def reparameterize(mu: torch.Tensor, logvar: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    if noise.shape != mu.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != latent shape {tuple(mu.shape)}")
    return mu + torch.exp(0.5 * logvar) * noise


class MorphAutoencoder(nn.Module):
    """Template-conditioned encoder, deformation decoder and template decoder.

    With ``conditional=True`` the condition is fed to the template decoder and
    concatenated as constant channels to the encoder input and the latent.
    """

    morph = True

    def __init__(self, cfg: NetConfig, conditional: bool, init_mean: float = 0.5):
        super().__init__()
        self.cfg = cfg
        self.conditional = conditional
        extra = cfg.num_conditions if conditional else 0
        self.encoder = Encoder(cfg, 2 * cfg.in_channels + extra)
        self.decoder = DeformationDecoder(cfg, cfg.latent_channels + extra)
        self.template = TemplateDecoder(cfg, conditional, init_mean)

    def _cond(self, c):
        if self.conditional and c is None:
            raise ValueError("conditional autoencoder requires a condition")
        return c if self.conditional else None

    def make_template(self, c: torch.Tensor | None, batch: int) -> torch.Tensor:
        return self.template(c if self.conditional else None, batch=batch)

    def encode(self, x, c=None, template=None):
        if template is None:
            template = self.make_template(c, x.shape[0])
        if template.shape != x.shape:
            raise ValueError(f"template shape {tuple(template.shape)} != image shape {tuple(x.shape)}")
        return self.encoder(with_condition(torch.cat([x, template], dim=1), self._cond(c)))

    def decode_field(self, z, c=None):
        return self.decoder(with_condition(z, self._cond(c)))

    def decode(self, z, c=None):
        """Latent to ``(image, field, template)``."""
        field = self.decode_field(z, c)
        template = self.make_template(c, z.shape[0])
        return apply_deformation(template, field), field, template

    def forward(self, x, c=None, noise=None):
        template = self.make_template(c, x.shape[0])
        mu, logvar = self.encode(x, c, template)
        z = mu if noise is None else reparameterize(mu, logvar, noise)
        field = self.decode_field(z, c)
        recon = apply_deformation(template, field)
        return {"mu": mu, "logvar": logvar, "z": z, "field": field, "template": template, "recon": recon}


class ImageAutoencoder(nn.Module):
    """Plain KL autoencoder of the LDM baseline; shares Encoder/Decoder."""

    morph = False

    def __init__(self, cfg: NetConfig, conditional: bool, init_mean: float = 0.5):
        super().__init__()
        self.cfg = cfg
        self.conditional = conditional
        extra = cfg.num_conditions if conditional else 0
        self.encoder = Encoder(cfg, cfg.in_channels + extra)
        self.decoder = Decoder(cfg, cfg.latent_channels + extra, cfg.in_channels)
        nn.init.constant_(self.decoder.conv_out.bias, init_mean)

    def _cond(self, c):
        if self.conditional and c is None:
            raise ValueError("conditional autoencoder requires a condition")
        return c if self.conditional else None

    def encode(self, x, c=None, template=None):
        return self.encoder(with_condition(x, self._cond(c)))

    def decode(self, z, c=None):
        return self.decoder(with_condition(z, self._cond(c))), None, None

    def forward(self, x, c=None, noise=None):
        mu, logvar = self.encode(x, c)
        z = mu if noise is None else reparameterize(mu, logvar, noise)
        recon = self.decode(z, c)[0]
        return {"mu": mu, "logvar": logvar, "z": z, "field": None, "template": None, "recon": recon}


class PatchDiscriminator(nn.Module):
    """Three stride-2 convolutions followed by a per-patch score head."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        w = cfg.disc_width
        nd = cfg.ndim
        self.net = nn.Sequential(
            conv_nd(nd, cfg.in_channels, w, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            conv_nd(nd, w, 2 * w, 4, stride=2, padding=1),
            group_norm(2 * w),
            nn.LeakyReLU(0.2),
            conv_nd(nd, 2 * w, 4 * w, 4, stride=2, padding=1),
            group_norm(4 * w),
            nn.LeakyReLU(0.2),
            conv_nd(nd, 4 * w, 1, 3, padding=1),
        )

    def forward(self, x):
        return self.net(x)


# --------------------------------------------------------------------------
# diffusion UNet


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ConditionEmbedder(nn.Module):
    """Maps each condition scalar to its own context token."""

    def __init__(self, num_conditions: int, dim: int):
        super().__init__()
        self.proj = nn.ModuleList(
            nn.Sequential(nn.Linear(1, dim), nn.SiLU(), nn.Linear(dim, dim)) for _ in range(num_conditions)
        )

    def forward(self, c):
        return torch.stack([p(c[:, i : i + 1]) for i, p in enumerate(self.proj)], dim=1)


class CrossAttention(nn.Module):
    def __init__(self, ch: int, context_dim: int, heads: int):
        super().__init__()
        self.norm = group_norm(ch)
        self.attn = nn.MultiheadAttention(ch, heads, kdim=context_dim, vdim=context_dim, batch_first=True)

    def forward(self, x, context):
        b, c = x.shape[:2]
        h = self.norm(x).flatten(2).transpose(1, 2)
        h, _ = self.attn(h, context, context, need_weights=False)
        return x + h.transpose(1, 2).reshape(x.shape)


class UNetLevel(nn.Module):
    def __init__(self, ndim, in_ch, out_ch, temb_dim, context_dim, heads, attend):
        super().__init__()
        self.res = ResBlock(ndim, in_ch, out_ch, temb_dim)
        self.attn = CrossAttention(out_ch, context_dim, heads) if attend else None

    def forward(self, x, temb, context):
        x = self.res(x, temb)
        if self.attn is not None:
            x = self.attn(x, context)
        return x


class DiffusionUNet(nn.Module):
    """Time-conditional epsilon predictor with cross-attention on the condition.

    ``extra_in`` constant condition channels are concatenated to the input for
    the condition-in-autoencoder variants.
    """

    def __init__(self, cfg: NetConfig, T: int, extra_in: int = 0):
        super().__init__()
        nd = cfg.ndim
        chs = cfg.unet_channels
        temb_dim = 4 * chs[0]
        ctx = cfg.condition_embed_dim
        heads = cfg.attention_heads
        self.T = T
        self.extra_in = extra_in
        self.latent_channels = cfg.latent_channels
        self.time_dim = chs[0]
        self.time_mlp = nn.Sequential(nn.Linear(chs[0], temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.cond = ConditionEmbedder(cfg.num_conditions, ctx)
        self.conv_in = conv_nd(nd, cfg.latent_channels + extra_in, chs[0], 3, padding=1)
        attend = set(cfg.cross_attention_levels)

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = chs[0]
        for i, ch in enumerate(chs):
            self.down.append(UNetLevel(nd, prev, ch, temb_dim, ctx, heads, i in attend))
            prev = ch
            if i < len(chs) - 1:
                self.downsample.append(Downsample(nd, ch, ch))
        self.mid1 = UNetLevel(nd, prev, prev, temb_dim, ctx, heads, True)
        self.mid2 = ResBlock(nd, prev, prev, temb_dim)

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(len(chs))):
            self.up.append(UNetLevel(nd, prev + chs[i], chs[i], temb_dim, ctx, heads, i in attend))
            prev = chs[i]
            if i > 0:
                self.upsample.append(Upsample(nd, prev, chs[i - 1]))
                prev = chs[i - 1]
        self.norm_out = group_norm(prev)
        self.conv_out = conv_nd(nd, prev, cfg.latent_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(z_t.shape[0])
        if bool((t < 0).any()) or bool((t >= self.T).any()):
            raise ValueError(f"timestep out of range [0, {self.T})")
        if self.extra_in:
            z_t = with_condition(z_t, c)
        temb = self.time_mlp(timestep_embedding(t, self.time_dim).to(z_t.dtype))
        context = self.cond(c.to(z_t.dtype))
        h = self.conv_in(z_t)
        skips = []
        for i, level in enumerate(self.down):
            h = level(h, temb, context)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        h = self.mid2(self.mid1(h, temb, context), temb)
        for j, level in enumerate(self.up):
            h = level(torch.cat([h, skips.pop()], dim=1), temb, context)
            if j < len(self.upsample):
                h = self.upsample[j](h)
        return self.conv_out(F.silu(self.norm_out(h)))


# --------------------------------------------------------------------------
# attribute predictor


class AttributePredictor(nn.Module):
    """CNN with 4 downsampling levels of two (conv, norm, ReLU) blocks each,
    global average pooling, and linear heads for age (years) and sex (logit)."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        nd = cfg.ndim
        layers = []
        prev = cfg.in_channels
        for ch in cfg.predictor_channels:
            for _ in range(2):
                layers += [conv_nd(nd, prev, ch, 3, padding=1), group_norm(ch), nn.ReLU()]
                prev = ch
            layers.append((nn.MaxPool2d if nd == 2 else nn.MaxPool3d)(2))
        self.trunk = nn.Sequential(*layers)
        self.feature_dim = prev
        self.age_head = nn.Linear(prev, 1)
        self.sex_head = nn.Linear(prev, 1)
        nn.init.constant_(self.age_head.bias, 0.3)

    def features(self, x):
        return self.trunk(x).flatten(2).mean(-1)

    def forward(self, x):
        f = self.features(x)
        return self.age_head(f).squeeze(-1) * AGE_SCALE, self.sex_head(f).squeeze(-1), f
