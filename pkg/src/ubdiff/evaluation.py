"""Macro, pairwise and physics evaluation of generated (velocity, seismic) pairs.

* Macro: Frechet distance between Gaussian fits of features from a frozen
  extractor (a seed-fixed random conv stack by default).
* Pairwise: a small seismic-to-velocity network is trained on generated
  pairs and scored on real pairs with MAE, MSE and SSIM.
* Physics: forward-model each generated velocity map and compare with its
  generated gather.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import SeismicGather, VelocityMap
from .errors import CFLError, NumericalError
from .forward import simulate
from .trainer import derive_seed


# ---------------------------------------------------------------- features

@dataclass(frozen=True)
class FeatureExtractorSpec:
    modality: str
    kind: str = "fixed_random_conv"
    feature_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.modality not in ("velocity", "seismic"):
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.kind not in ("fixed_random_conv", "trained_encoder"):
            raise ValueError(f"unknown extractor kind {self.kind!r}")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")


class RandomConvExtractor(nn.Module):
    """Three stride-2 conv stages with seed-fixed weights, then global average pooling."""

    def __init__(self, in_ch: int, feature_dim: int, seed: int):
        super().__init__()
        widths = (16, 32, feature_dim)
        g = torch.Generator().manual_seed(seed)
        layers, cin = [], in_ch
        for cout in widths:
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * np.sqrt(2.0 / (cin * 9)))
                conv.bias.zero_()
            layers += [conv, nn.LeakyReLU(0.2)]
            cin = cout
        self.net = nn.Sequential(*layers)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        return self.net(x).mean(dim=(-2, -1))


_EXPECTED_NDIM = {"velocity": 3, "seismic": 4}


def extract_features(data, spec: FeatureExtractorSpec, encoder=None, batch_size: int = 256) -> np.ndarray:
    """Feature matrix (N, feature_dim), float64.

    Seismic inputs use the source axis as conv channels. ``trained_encoder``
    needs ``encoder`` (a network with ``encode``) and yields its latent size.
    """
    x = np.asarray(data, dtype=np.float32)
    if len(x) == 0:
        raise ValueError("no samples to featurize")
    if x.ndim != _EXPECTED_NDIM[spec.modality]:
        raise ValueError(f"{spec.modality} data must be {_EXPECTED_NDIM[spec.modality]}-D (batch first), "
                         f"got shape {x.shape}")
    if spec.kind == "trained_encoder":
        if encoder is None:
            raise ValueError("trained_encoder features need an encoder")
        fn = encoder.encode
    else:
        in_ch = 1 if spec.modality == "velocity" else x.shape[1]
        fn = RandomConvExtractor(in_ch, spec.feature_dim, spec.seed)
    out = []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            b = torch.from_numpy(x[i:i + batch_size])
            if spec.kind == "fixed_random_conv" and spec.modality == "velocity":
                b = b.unsqueeze(1)
            out.append(fn(b).double().numpy())
    return np.concatenate(out)


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = len(self.mean)
        if self.cov.shape != (d, d):
            raise ValueError(f"covariance shape {self.cov.shape} does not match mean length {d}")
        if not np.allclose(self.cov, self.cov.T, atol=1e-8, rtol=0):
            raise ValueError("covariance is not symmetric")

    @classmethod
    def from_features(cls, feats, ridge: float = 1e-6) -> "GaussianStats":
        f = np.asarray(feats, dtype=np.float64)
        if f.ndim != 2 or len(f) < 2:
            raise ValueError("need an (N >= 2, d) feature matrix")
        cov = np.cov(f, rowvar=False).reshape(f.shape[1], f.shape[1])
        cov = 0.5 * (cov + cov.T) + ridge * np.eye(f.shape[1])
        return cls(f.mean(axis=0), cov)


def _psd_sqrt(m: np.ndarray, what: str) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    if w.min() < -1e-6:
        raise NumericalError(f"{what} is not positive semi-definite (eigenvalue {w.min():.3g})")
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def fid(a: GaussianStats, b: GaussianStats) -> float:
    """Frechet distance ``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the cross term uses the symmetric product
    ``S_a^(1/2) S_b S_a^(1/2)``, which has the same eigenvalues as ``S_a S_b``.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"feature dimensions differ: {a.mean.shape[0]} vs {b.mean.shape[0]}")
    ra = _psd_sqrt(a.cov, "first covariance")
    _psd_sqrt(b.cov, "second covariance")
    w = np.linalg.eigvalsh(0.5 * (ra @ b.cov @ ra + (ra @ b.cov @ ra).T))
    if w.min() < -1e-6:
        raise NumericalError(f"covariance product has eigenvalue {w.min():.3g}")
    cross = np.sqrt(np.clip(w, 0, None)).sum()
    d = a.mean - b.mean
    val = float(d @ d + np.trace(a.cov) + np.trace(b.cov) - 2.0 * cross)
    return max(val, 0.0)


def eval_fid(real, generated, spec: FeatureExtractorSpec, encoder=None) -> float:
    fr = extract_features(real, spec, encoder)
    fg = extract_features(generated, spec, encoder)
    return fid(GaussianStats.from_features(fr), GaussianStats.from_features(fg))


# -------------------------------------------------------------------- SSIM

def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, data_range: float, win_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over the valid (fully covered) window positions of two 2-D arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"ssim needs two equal-shape 2-D arrays, got {a.shape} and {b.shape}")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    if min(a.shape) < win_size:
        raise ValueError(f"arrays smaller than the {win_size}x{win_size} window")
    w = _gaussian_window(win_size, sigma)

    def filt(x):
        return np.einsum("ijkl,kl->ij", np.lib.stride_tricks.sliding_window_view(x, w.shape), w)

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a ** 2
    sbb = filt(b * b) - mu_b ** 2
    sab = filt(a * b) - mu_a * mu_b
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


# ----------------------------------------------------------- inversion-lite

class InversionLite(nn.Module):
    """Seismic (S, Tt, R) -> velocity (H, W), roughly 200k parameters.

    Pooling and strided temporal convs fold time down to the receiver count, two spatial
    stride-2 stages reach 1/4 resolution where most of the capacity sits, and
    a thin upsampling path returns to map size.
    """

    def __init__(self, seis_shape=(3, 256, 32), size: int = 32):
        super().__init__()
        s, t, r = seis_shape
        # the 15 Hz records are heavily oversampled in time; pool before convolving
        pool = max(1, min(4, t // r))
        layers, ch, t = [nn.AvgPool2d((pool, 1))], s, t // pool
        while t > r:
            layers += [nn.Conv2d(ch, 32, (5, 1), stride=(2, 1), padding=(2, 0)), nn.BatchNorm2d(32), nn.SiLU()]
            ch, t = 32, t // 2
        if r != size:
            layers.append(nn.Upsample(size=(size, size), mode="nearest"))
        self.temporal = nn.Sequential(*layers)

        def block(cin, cout, stride=1, k=3):
            return nn.Sequential(nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2),
                                 nn.BatchNorm2d(cout), nn.SiLU())

        self.down = nn.Sequential(block(ch, 64, 2), block(64, 128, 2), block(128, 128))
        self.up = nn.Sequential(block(128, 32, k=1), nn.Upsample(scale_factor=2), block(32, 32),
                                nn.Upsample(scale_factor=2), block(32, 16))
        self.head = nn.Conv2d(16, 1, 3, padding=1)
        self.offset = nn.Parameter(torch.zeros(size, size))

    def forward(self, x):
        y = self.head(self.up(self.down(self.temporal(x)))).squeeze(1)
        return torch.tanh(y + self.offset)


@dataclass
class InversionConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    lr_decay: float = 1.0  # per-epoch multiplicative factor


@dataclass
class PairwiseReport:
    mae: float
    mse: float
    ssim: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mae < 0 or self.mse < 0:
            raise ValueError("MAE and MSE must be non-negative")
        if not -1.0 <= self.ssim <= 1.0:
            raise ValueError("SSIM must lie in [-1, 1]")


def train_inversion_lite(seis, vel, cfg: InversionConfig = InversionConfig()):
    """Fit InversionLite with L1 + L2 on (seismic, velocity) pairs; returns (model, per-epoch losses)."""
    x = torch.as_tensor(np.asarray(seis, dtype=np.float32))
    y = torch.as_tensor(np.asarray(vel, dtype=np.float32))
    if len(x) != len(y) or len(x) == 0:
        raise ValueError(f"need matching non-empty pairs, got {len(x)} gathers and {len(y)} maps")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed("inversion-init", cfg.seed))
        model = InversionLite(tuple(x.shape[1:]), y.shape[-1])
    with torch.no_grad():
        model.offset.copy_(torch.atanh(y.mean(0).clamp(-0.999, 0.999)))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, cfg.lr_decay)
    losses = []
    model.train()
    for epoch in range(cfg.epochs):
        g = torch.Generator().manual_seed(derive_seed("inversion-shuffle", cfg.seed, epoch))
        perm = torch.randperm(len(x), generator=g)
        total = 0.0
        for i in range(0, len(x), cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            if len(idx) < 2:
                continue  # batch norm needs two samples
            d = model(x[idx]) - y[idx]
            loss = d.abs().mean() + (d * d).mean()
            if not torch.isfinite(loss):
                raise NumericalError(f"inversion-lite: non-finite loss at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / len(x))
        sched.step()
    _recalibrate_batchnorm(model, x, cfg.batch_size)
    model.eval()
    return model, losses


@torch.no_grad()
def _recalibrate_batchnorm(model: nn.Module, x: torch.Tensor, batch_size: int) -> None:
    """Replace the running batch-norm statistics by exact averages over the final weights.

    The momentum averages lag behind the weights they were collected under,
    which shows up as a train/eval gap on small training sets.
    """
    bns = [m for m in model.modules() if isinstance(m, nn.BatchNorm2d)]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None  # cumulative average
    model.train()
    for i in range(0, len(x), batch_size):
        if len(x[i:i + batch_size]) >= 2:
            model(x[i:i + batch_size])
    for m in bns:
        m.momentum = 0.1


@torch.no_grad()
def predict_velocity(model: nn.Module, seis, batch_size: int = 256) -> np.ndarray:
    model.eval()
    x = np.asarray(seis, dtype=np.float32)
    return np.concatenate([model(torch.from_numpy(x[i:i + batch_size])).numpy()
                           for i in range(0, len(x), batch_size)])


def pairwise_eval(model, real_seis, real_vel, data_range: float = 2.0) -> PairwiseReport:
    """Score a seismic-to-velocity predictor on real pairs (normalized units).

    ``model`` is an ``nn.Module`` or any callable mapping a batch of gathers
    to a batch of maps.
    """
    real_seis = np.asarray(real_seis, dtype=np.float32)
    real_vel = np.asarray(real_vel, dtype=np.float32)
    if len(real_seis) != len(real_vel):
        raise ValueError("test set is not fully paired")
    pred = predict_velocity(model, real_seis) if isinstance(model, nn.Module) else np.asarray(model(real_seis))
    d = pred.astype(np.float64) - real_vel
    s = float(np.mean([ssim(p, t, data_range) for p, t in zip(pred, real_vel)]))
    return PairwiseReport(float(np.abs(d).mean()), float((d * d).mean()), float(np.clip(s, -1, 1)),
                          {"n_test": len(real_vel)})


# ------------------------------------------------------------------ physics

def physics_residual(vel_gen, seis_gen, geom, wav, cfg) -> float:
    """``|simulate(vel) - seis| / |simulate(vel)|`` in physical units.

    Raises :class:`CFLError` when the map cannot be modeled at ``cfg.dt``.
    """
    vel = vel_gen if isinstance(vel_gen, VelocityMap) else VelocityMap(np.asarray(vel_gen, dtype=np.float64))
    seis = seis_gen.traces if isinstance(seis_gen, SeismicGather) else np.asarray(seis_gen)
    sim = simulate(vel, geom, wav, cfg).traces.astype(np.float64)
    if sim.shape != seis.shape:
        raise ValueError(f"gather shape {seis.shape} does not match the forward model {sim.shape}")
    ref = np.linalg.norm(sim)
    if ref == 0:
        raise ValueError("forward-modeled gather is identically zero")
    return float(np.linalg.norm(sim - seis) / ref)


def physics_aggregate(vels, seis, geom, wav, cfg, spacing: float = 10.0) -> dict:
    """Residual per pair with degenerate maps skipped; returns mean, median and skip count."""
    res, skipped = [], []
    for i, (v, s) in enumerate(zip(vels, seis)):
        try:
            res.append(physics_residual(VelocityMap(np.asarray(v, dtype=np.float64), spacing), s, geom, wav, cfg))
        except (CFLError, ValueError) as exc:
            skipped.append({"index": i, "reason": str(exc)})
    return {
        "mean": float(np.mean(res)) if res else None,
        "median": float(np.median(res)) if res else None,
        "n": len(res),
        "skipped": len(skipped),
        "skip_reasons": skipped[:20],
        "residuals": res,
    }


def write_report(path, report: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(report, indent=2, default=_json_default), encoding="utf-8")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
