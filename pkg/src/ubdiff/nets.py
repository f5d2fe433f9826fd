"""The 1-in-2-out network and its reconstruction losses.

One encoder maps the majority modality to a co-latent vector ``z``; two
affine projections move ``z`` into modality-specific latents which a CNN
decoder (velocity) and a transformer decoder (seismic) expand back to data
space. Parameters are grouped into five components so training code can
freeze the majority path as a unit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

COMPONENTS = ("encoder", "proj_v", "dec_v", "proj_s", "dec_s")


@dataclass(frozen=True)
class NetConfig:
    latent_dim: int = 128
    vel_shape: tuple = (32, 32)
    seis_shape: tuple = (3, 256, 32)
    majority: str = "velocity"
    enc_widths: tuple = (16, 32, 64, 128)
    dec_widths: tuple = (64, 32, 16)
    n_tokens_t: int = 4
    n_tokens_r: int = 16
    token_dim: int = 128
    n_blocks: int = 4
    n_heads: int = 4
    ff_dim: int = 256

    def __post_init__(self):
        if self.majority not in ("velocity", "seismic"):
            raise ValueError(f"unknown majority modality {self.majority!r}")
        s, t, r = self.seis_shape
        if t % self.n_tokens_t or r % self.n_tokens_r:
            raise ValueError("seismic shape must tile evenly into the token grid")

    @property
    def minority(self) -> str:
        return "seismic" if self.majority == "velocity" else "velocity"

    def majority_components(self) -> tuple:
        return ("encoder", "proj_v", "dec_v") if self.majority == "velocity" else ("encoder", "proj_s", "dec_s")

    def minority_components(self) -> tuple:
        return ("proj_s", "dec_s") if self.majority == "velocity" else ("proj_v", "dec_v")


@dataclass(frozen=True)
class LossWeights:
    gamma1: float = 1.0
    gamma2: float = 1.0
    gamma3: float = 1.0
    gamma4: float = 1.0
    freeze: int = 0

    def __post_init__(self):
        if self.freeze not in (0, 1):
            raise ValueError(f"freeze flag must be 0 or 1, got {self.freeze!r}")
        if min(self.gamma1, self.gamma2, self.gamma3, self.gamma4) < 0:
            raise ValueError("loss weights must be non-negative")


def _check_shapes(pred, target, what):
    if tuple(pred.shape) != tuple(target.shape):
        raise ValueError(f"{what}: prediction shape {tuple(pred.shape)} != target {tuple(target.shape)}")


def loss_majority(pred, target, w: LossWeights):
    """gamma1 * mean |pred - target| + gamma2 * mean (pred - target)^2."""
    _check_shapes(pred, target, "majority loss")
    d = pred - target
    return w.gamma1 * d.abs().mean() + w.gamma2 * (d * d).mean()


def loss_minority(pred_ma, target_ma, pred_mi, target_mi, w: LossWeights):
    """(1 - F) * majority loss + gamma3 * L1 + gamma4 * L2 on the minority pair.

    With ``F == 1`` the majority arguments are never touched (they may be None).
    """
    _check_shapes(pred_mi, target_mi, "minority loss")
    d = pred_mi - target_mi
    out = w.gamma3 * d.abs().mean() + w.gamma4 * (d * d).mean()
    if w.freeze == 0:
        out = out + loss_majority(pred_ma, target_ma, w)
    return out


def _group_norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch // 2) or 1, ch)


class _DownStage(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
        self.norm = _group_norm(cout)

    def forward(self, x):
        return F.silu(self.norm(self.conv(x)))


class VelocityEncoder(nn.Module):
    """Stride-2 stages 32 -> 16 -> 8 -> 4 -> 2 -> 1, then a linear 1x1 conv to ``c``."""

    def __init__(self, in_ch: int, size: int, widths: tuple, latent_dim: int):
        super().__init__()
        n_stages = int(np.log2(size))
        if 2 ** n_stages != size:
            raise ValueError("encoder input size must be a power of two")
        chans = list(widths) + [widths[-1]] * (n_stages - len(widths))
        stages, cin = [], in_ch
        for cout in chans[:n_stages]:
            stages.append(_DownStage(cin, cout))
            cin = cout
        self.stages = nn.Sequential(*stages)
        self.out = nn.Conv2d(cin, latent_dim, 1)

    def forward(self, x):
        return self.out(self.stages(x)).flatten(1)


class SeismicEncoder(nn.Module):
    """Compress time to the receiver count, then reuse the spatial encoder."""

    def __init__(self, seis_shape: tuple, widths: tuple, latent_dim: int):
        super().__init__()
        s, t, r = seis_shape
        layers, ch = [], s
        while t > r:
            layers += [nn.Conv2d(ch, 16, (7, 1), stride=(2, 1), padding=(3, 0)), _group_norm(16), nn.SiLU()]
            ch, t = 16, t // 2
        self.temporal = nn.Sequential(*layers)
        self.spatial = VelocityEncoder(ch, r, widths, latent_dim)

    def forward(self, x):
        return self.spatial(self.temporal(x))


class VelocityDecoder(nn.Module):
    """Latent -> 4x4 seed grid, then nearest-neighbour upsampling + conv to full size."""

    def __init__(self, latent_dim: int, size: int, widths: tuple):
        super().__init__()
        self.seed_ch = widths[0]
        self.seed = nn.Linear(latent_dim, widths[0] * 16)
        n_up = int(np.log2(size // 4))
        chans = list(widths) + [widths[-1]] * (n_up + 1 - len(widths))
        blocks = []
        for i in range(n_up):
            blocks.append(nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(chans[i], chans[i + 1], 3, padding=1), _group_norm(chans[i + 1]), nn.SiLU(),
            ))
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Conv2d(chans[n_up], 1, 3, padding=1)
        self.offset = nn.Parameter(torch.zeros(size, size))

    def forward(self, z):
        x = F.silu(self.seed(z)).view(-1, self.seed_ch, 4, 4)
        return torch.tanh(self.head(self.blocks(x)).squeeze(1) + self.offset)


class SeismicDecoder(nn.Module):
    """Transformer over a (time x receiver) token grid; each token emits one patch."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        s, t, r = cfg.seis_shape
        self.cfg = cfg
        n_tok = cfg.n_tokens_t * cfg.n_tokens_r
        self.pt, self.pr = t // cfg.n_tokens_t, r // cfg.n_tokens_r
        self.pos = nn.Parameter(torch.zeros(1, n_tok, cfg.token_dim))
        nn.init.normal_(self.pos, std=0.02)
        layer = nn.TransformerEncoderLayer(cfg.token_dim, cfg.n_heads, cfg.ff_dim, dropout=0.0,
                                           activation="gelu", batch_first=True, norm_first=True)
        self.blocks = nn.TransformerEncoder(layer, cfg.n_blocks, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(cfg.token_dim)
        self.head = nn.Linear(cfg.token_dim, s * self.pt * self.pr)
        # gathers are mostly near zero after normalization; start from the zero gather
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.offset = nn.Parameter(torch.zeros(s, t, r))

    def forward(self, tokens):
        cfg = self.cfg
        s, t, r = cfg.seis_shape
        b = tokens.shape[0]
        x = self.blocks(tokens + self.pos)
        x = self.head(self.norm(x))
        x = x.view(b, cfg.n_tokens_t, cfg.n_tokens_r, s, self.pt, self.pr)
        x = x.permute(0, 3, 1, 4, 2, 5).reshape(b, s, t, r)
        return torch.tanh(x + self.offset)


class TwoHeadNet(nn.Module):
    """Encoder E, projections W_v / W_s, decoders D_v / D_s.

    ``decode_velocity`` and ``decode_seismic`` take the co-latent ``z`` and
    apply the matching projection before the decoder.
    """

    def __init__(self, cfg: NetConfig = NetConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            c = cfg.latent_dim
            if cfg.majority == "velocity":
                self.encoder = VelocityEncoder(1, cfg.vel_shape[0], cfg.enc_widths, c)
            else:
                self.encoder = SeismicEncoder(cfg.seis_shape, cfg.enc_widths, c)
            self.proj_v = nn.Linear(c, c)
            self.dec_v = VelocityDecoder(c, cfg.vel_shape[0], cfg.dec_widths)
            self.proj_s = nn.Linear(c, cfg.n_tokens_t * cfg.n_tokens_r * cfg.token_dim)
            self.dec_s = SeismicDecoder(cfg)

    def _as_input(self, ma):
        ma = torch.as_tensor(ma, dtype=torch.float32)
        want = self.cfg.vel_shape if self.cfg.majority == "velocity" else self.cfg.seis_shape
        single = tuple(ma.shape) == tuple(want)
        if single:
            ma = ma.unsqueeze(0)
        if tuple(ma.shape[1:]) != tuple(want):
            raise ValueError(f"majority input shape {tuple(ma.shape)} does not match {want}")
        if self.cfg.majority == "velocity":
            ma = ma.unsqueeze(1)
        return ma, single

    def encode(self, ma):
        """Co-latent ``z`` of shape (B, c); a single unbatched input gives (c,)."""
        x, single = self._as_input(ma)
        z = self.encoder(x)
        return z[0] if single else z

    def _latent(self, z):
        z = torch.as_tensor(z, dtype=torch.float32)
        if z.shape[-1] != self.cfg.latent_dim:
            raise ValueError(f"latent length {z.shape[-1]} != {self.cfg.latent_dim}")
        return (z.unsqueeze(0), True) if z.dim() == 1 else (z, False)

    def decode_velocity(self, z):
        z, single = self._latent(z)
        out = self.dec_v(self.proj_v(z))
        return out[0] if single else out

    def decode_seismic(self, z):
        z, single = self._latent(z)
        b = z.shape[0]
        tokens = self.proj_s(z).view(b, -1, self.cfg.token_dim)
        out = self.dec_s(tokens)
        return out[0] if single else out

    def decode(self, z, modality: str):
        return self.decode_velocity(z) if modality == "velocity" else self.decode_seismic(z)

    def forward_pair(self, ma):
        """One encoder pass, both heads: returns (velocity, seismic)."""
        z = self.encode(ma)
        return self.decode_velocity(z), self.decode_seismic(z)

    def forward(self, ma):
        return self.forward_pair(ma)

    @torch.no_grad()
    def init_output_offset(self, modality: str, arrays) -> None:
        """Set a decoder's pre-tanh offset so an all-zero head reproduces the data mean."""
        mean = torch.as_tensor(np.asarray(arrays, dtype=np.float32).mean(axis=0))
        dec = self.dec_v if modality == "velocity" else self.dec_s
        dec.offset.copy_(torch.atanh(mean.clamp(-0.999, 0.999)))

    def component_parameters(self, names) -> list:
        return [p for n in names for p in getattr(self, n).parameters()]

    def named_component_tensors(self) -> dict:
        """Flat ``{component.param: tensor}`` view used for checkpoints and diffs."""
        return {k: v for k, v in self.state_dict().items()}
