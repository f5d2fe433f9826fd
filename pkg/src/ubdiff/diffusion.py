"""Variance-preserving latent diffusion over the co-latent space.

The denoiser predicts ``u = alpha_t * eps - sigma_t * z0`` (v-parameterization)
from the corrupted latent ``z_t = alpha_t * z0 + sigma_t * eps``. Latents are
centred and scaled to unit variance before diffusion; the statistics travel
with the denoiser state so sampling needs nothing else.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import load_tensors, save_tensors
from .errors import MissingArtifactError, NumericalError
from .trainer import derive_seed


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha: np.ndarray
    sigma: np.ndarray
    kind: str = "cosine"

    def to_dict(self) -> dict:
        return {"T": self.T, "kind": self.kind, "alpha": self.alpha.tolist(), "sigma": self.sigma.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(int(d["T"]), np.asarray(d["alpha"], dtype=np.float64),
                   np.asarray(d["sigma"], dtype=np.float64), d.get("kind", "cosine"))


def make_schedule(T: int = 256, kind: str = "cosine", alpha_min: float = 1e-4) -> NoiseSchedule:
    """Tables of length ``T + 1`` with ``alpha**2 + sigma**2 == 1``.

    ``cosine``: alpha = cos(t/T * pi/2), floored at ``alpha_min``.
    ``linear``: the usual linear-beta chain, betas rescaled so that a
    1000-step chain and a T-step chain cover the same noise range.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    t = np.arange(T + 1, dtype=np.float64)
    if kind == "cosine":
        alpha = np.maximum(np.cos(t / T * math.pi / 2), alpha_min)
    elif kind == "linear":
        scale = 1000.0 / T
        betas = np.linspace(scale * 1e-4, min(scale * 0.02, 0.999), T)
        alpha = np.sqrt(np.concatenate([[1.0], np.cumprod(1.0 - betas)]))
        alpha = np.maximum(alpha, alpha_min)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    sigma = np.sqrt(1.0 - alpha ** 2)
    return NoiseSchedule(T, alpha, sigma, kind)


def _coef(table: np.ndarray, t, like):
    """Look up schedule values for scalar or per-sample ``t`` and shape them to broadcast."""
    if isinstance(like, torch.Tensor):
        t = torch.as_tensor(t)
        c = torch.as_tensor(table, dtype=like.dtype)[t.long()]
        return c.view(-1, *([1] * (like.dim() - 1))) if c.dim() and like.dim() > 1 else c
    t = np.asarray(t)
    c = table[t]
    return c.reshape(-1, *([1] * (np.ndim(like) - 1))) if c.ndim and np.ndim(like) > 1 else c


def _check(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"length mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def q_sample(z0, t, eps, sched: NoiseSchedule):
    _check(z0, eps)
    return _coef(sched.alpha, t, z0) * z0 + _coef(sched.sigma, t, z0) * eps


def v_target(z0, eps, t, sched: NoiseSchedule):
    _check(z0, eps)
    return _coef(sched.alpha, t, z0) * eps - _coef(sched.sigma, t, z0) * z0


def recover_z0(z_t, u, t, sched: NoiseSchedule):
    _check(z_t, u)
    return _coef(sched.alpha, t, z_t) * z_t - _coef(sched.sigma, t, z_t) * u


def recover_eps(z_t, u, t, sched: NoiseSchedule):
    _check(z_t, u)
    return _coef(sched.sigma, t, z_t) * z_t + _coef(sched.alpha, t, z_t) * u


def timestep_embedding(t, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.float32).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    ang = t[:, None] * freqs[None]
    return torch.cat([torch.cos(ang), torch.sin(ang)], dim=1)


@dataclass(frozen=True)
class DenoiserConfig:
    latent_dim: int = 128
    width: int = 512
    n_blocks: int = 4


class _ResBlock(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.temb = nn.Linear(width, width)
        self.fc1 = nn.Linear(width, width)
        self.fc2 = nn.Linear(width, width)

    def forward(self, h, emb):
        x = self.norm(h) + self.temb(emb)
        return h + self.fc2(nn.functional.silu(self.fc1(nn.functional.silu(x))))


class Denoiser(nn.Module):
    """Residual MLP ``u_phi(z_t, t)``; the time embedding enters every block.

    The output layer starts at zero, so an untrained model predicts ``u = 0``.
    """

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig(), T: int = 256):
        super().__init__()
        self.cfg = cfg
        # per-step input gain; see set_preconditioning
        self.register_buffer("c_in", torch.ones(T + 1))
        w = cfg.width
        self.inp = nn.Linear(cfg.latent_dim, w)
        self.time = nn.Sequential(nn.Linear(w, w), nn.SiLU(), nn.Linear(w, w))
        self.blocks = nn.ModuleList([_ResBlock(w) for _ in range(cfg.n_blocks)])
        self.norm = nn.LayerNorm(w)
        self.out = nn.Linear(w, cfg.latent_dim)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def set_preconditioning(self, sched: "NoiseSchedule", data_std: float) -> None:
        """Scale inputs by ``1 / sqrt(alpha^2 s^2 + sigma^2)`` so ``z_t`` enters with unit variance.

        ``s`` is the data standard deviation in diffusion units: 1 for a
        normalized corpus (the gain is then 1 everywhere) and 0 for a single
        memorized latent, where the gain undoes the vanishing noise scale.
        """
        var = sched.alpha ** 2 * data_std ** 2 + sched.sigma ** 2
        self.c_in = torch.as_tensor(1.0 / np.sqrt(np.maximum(var, 1e-12)), dtype=torch.float32)

    def forward(self, z_t, t):
        t = torch.as_tensor(t).reshape(-1)
        emb = nn.functional.silu(self.time(timestep_embedding(t, self.cfg.width)))
        h = self.inp(z_t * self.c_in[t.long()][:, None])
        for blk in self.blocks:
            h = blk(h, emb)
        return self.out(self.norm(h))


@dataclass
class DiffusionTrainConfig:
    steps: int = 20000
    learning_rate: float = 8e-5
    grad_accum: int = 2
    ema_decay: float = 0.995
    batch_size: int = 64
    seed: int = 0
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)

    def __post_init__(self):
        if isinstance(self.denoiser, dict):
            self.denoiser = DenoiserConfig(**self.denoiser)
        if self.steps < 1 or self.grad_accum < 1 or self.batch_size < 1:
            raise ValueError("steps, grad_accum and batch_size must be positive")
        if not 0 < self.ema_decay < 1:
            raise ValueError("ema_decay must lie strictly between 0 and 1")


@dataclass
class DenoiserState:
    model: Denoiser
    ema: Denoiser
    schedule: NoiseSchedule
    latent_shift: np.ndarray
    latent_scale: float
    step: int = 0
    optimizer: dict | None = None
    losses: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        live = dict(self.model.named_parameters())
        shadow = dict(self.ema.named_parameters())
        if live.keys() != shadow.keys() or any(live[k].shape != shadow[k].shape for k in live):
            raise ValueError("EMA and live parameters are not shape-congruent")

    def to_unit(self, z):
        return (np.asarray(z, dtype=np.float32) - self.latent_shift) * self.latent_scale

    def from_unit(self, z):
        return np.asarray(z, dtype=np.float32) / self.latent_scale + self.latent_shift


def latent_statistics(latents: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-dimension mean and one global scale that brings centred latents to unit variance."""
    shift = latents.mean(axis=0).astype(np.float32)
    std = float(np.sqrt(np.mean((latents - shift) ** 2)))
    return shift, (1.0 / std if std > 1e-8 else 1.0)


@torch.no_grad()
def encode_corpus(net, corpus, batch_size: int = 256) -> np.ndarray:
    net.eval()
    x = np.asarray(corpus, dtype=np.float32)
    return np.concatenate([net.encode(torch.from_numpy(x[i:i + batch_size])).numpy()
                           for i in range(0, len(x), batch_size)])


def init_state(latents: np.ndarray, cfg: DiffusionTrainConfig, sched: NoiseSchedule) -> DenoiserState:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed("denoiser-init", cfg.seed))
        model = Denoiser(cfg.denoiser, sched.T)
    shift, scale = latent_statistics(latents)
    data_std = float(np.sqrt(np.mean(((latents - shift) * scale) ** 2)))
    model.set_preconditioning(sched, data_std)
    return DenoiserState(model, copy.deepcopy(model), sched, shift, scale, config=asdict(cfg))


@torch.no_grad()
def ema_update(shadow: nn.Module, live: nn.Module, decay: float) -> None:
    for s, p in zip(shadow.parameters(), live.parameters()):
        s.mul_(decay).add_(p.detach(), alpha=1.0 - decay)


def v_loss(model: nn.Module, z0, t, eps, sched: NoiseSchedule):
    """Mean squared error between ``model(z_t, t)`` and the v-target."""
    z_t = q_sample(z0, t, eps, sched)
    u = v_target(z0, eps, t, sched)
    return ((model(z_t, t) - u) ** 2).mean()


def train_denoiser(latents, cfg: DiffusionTrainConfig, sched: NoiseSchedule,
                   state: DenoiserState | None = None, until: int | None = None) -> DenoiserState:
    """Optimize on pre-encoded latents; resumes from ``state.step`` when a state is given.

    Every random draw of optimizer step ``k`` comes from a generator seeded by
    ``(seed, k)``, so stopping at ``until`` and resuming reproduces an
    uninterrupted run exactly.
    """
    latents = np.asarray(latents, dtype=np.float32)
    if latents.ndim != 2 or len(latents) == 0:
        raise ValueError("need a non-empty (m, c) latent corpus")
    state = state or init_state(latents, cfg, sched)
    data = torch.from_numpy(state.to_unit(latents))
    model, ema = state.model, state.ema
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    if state.optimizer:
        opt.load_state_dict(state.optimizer)
    stop = cfg.steps if until is None else min(until, cfg.steps)
    model.train()
    m, c, T = len(data), data.shape[1], sched.T
    while state.step < stop:
        g = torch.Generator().manual_seed(derive_seed("diffusion-step", cfg.seed, state.step))
        opt.zero_grad(set_to_none=True)
        total = 0.0
        for _ in range(cfg.grad_accum):
            idx = torch.randint(0, m, (cfg.batch_size,), generator=g)
            t = torch.randint(1, T + 1, (cfg.batch_size,), generator=g)
            eps = torch.randn(cfg.batch_size, c, generator=g)
            loss = v_loss(model, data[idx], t, eps, sched)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite diffusion loss at step {state.step}")
            (loss / cfg.grad_accum).backward()
            total += loss.item() / cfg.grad_accum
        opt.step()
        ema_update(ema, model, cfg.ema_decay)
        state.step += 1
        state.losses.append(total)
    model.eval()
    state.optimizer = opt.state_dict()
    return state


def train_diffusion(encoder, corpus, cfg: DiffusionTrainConfig, sched: NoiseSchedule,
                    state: DenoiserState | None = None, until: int | None = None) -> DenoiserState:
    """Encode the majority corpus with the frozen network and fit the denoiser."""
    if len(corpus) == 0:
        raise ValueError("empty majority corpus")
    return train_denoiser(encode_corpus(encoder, corpus), cfg, sched, state, until)


@torch.no_grad()
def eval_loss(model: nn.Module, latents_unit, sched: NoiseSchedule, n: int = 4096, seed: int = 0) -> float:
    """Monte-Carlo v-loss over uniform t in {1..T} on fresh noise."""
    g = torch.Generator().manual_seed(seed)
    data = torch.as_tensor(np.asarray(latents_unit, dtype=np.float32))
    idx = torch.randint(0, len(data), (n,), generator=g)
    t = torch.randint(1, sched.T + 1, (n,), generator=g)
    eps = torch.randn(n, data.shape[1], generator=g)
    return float(v_loss(model, data[idx], t, eps, sched))


def sample_timesteps(T: int, steps: int) -> np.ndarray:
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    return np.round(np.linspace(T, 0, steps + 1)).astype(int)


CHUNK = 64


def run_fixed_chunks(fn, *arrays, chunk: int = CHUNK):
    """Apply ``fn`` to zero-padded chunks of exactly ``chunk`` rows.

    Matrix kernels pick different code paths for different batch sizes, so a
    row computed alone can differ in the last bits from the same row inside a
    batch. Fixing the batch size makes every output row independent of its
    neighbours.
    """
    n = len(arrays[0])
    out = []
    for i in range(0, n, chunk):
        parts = [a[i:i + chunk] for a in arrays]
        k = len(parts[0])
        if k < chunk:
            parts = [torch.cat([p, torch.zeros((chunk - k,) + tuple(p.shape[1:]), dtype=p.dtype)])
                     for p in parts]
        out.append(fn(*parts)[:k])
    return torch.cat(out)


def _sample_noise(seed: int, index: int, steps: int, c: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(derive_seed("sample", seed, index))
    return torch.randn(steps + 1, c, generator=g)


@torch.no_grad()
def sample_latent(state: DenoiserState, sched: NoiseSchedule | None = None, steps: int = 64,
                  seed: int = 0, sampler: str = "deterministic", count: int = 1,
                  indices=None) -> np.ndarray:
    """Draw latents with the EMA denoiser, returned in encoder units, shape (count, c).

    Sample ``i`` uses noise from a generator keyed by ``(seed, i)`` and
    nothing else, so any subset of indices can be regenerated alone.
    """
    if state.step == 0:
        raise ValueError("denoiser state is untrained")
    if sampler not in ("deterministic", "ancestral"):
        raise ValueError(f"unknown sampler {sampler!r}")
    sched = sched or state.schedule
    indices = list(range(count)) if indices is None else list(indices)
    c = state.ema.cfg.latent_dim
    noise = torch.stack([_sample_noise(seed, i, steps, c) for i in indices])
    model = state.ema.eval()
    alpha = torch.as_tensor(sched.alpha, dtype=torch.float64)
    sigma = torch.as_tensor(sched.sigma, dtype=torch.float64)
    ts = sample_timesteps(sched.T, steps)
    z = noise[:, 0].double()
    for k in range(steps):
        t, s = int(ts[k]), int(ts[k + 1])
        t_vec = torch.full((len(z),), t)
        u = run_fixed_chunks(model, z.float(), t_vec).double()
        z0 = alpha[t] * z - sigma[t] * u
        eps = sigma[t] * z + alpha[t] * u
        if sampler == "deterministic" or s == 0:
            z = alpha[s] * z0 + sigma[s] * eps
        else:
            a_ts = alpha[t] / alpha[s]
            var_ts = sigma[t] ** 2 - a_ts ** 2 * sigma[s] ** 2
            mean = (a_ts * sigma[s] ** 2 / sigma[t] ** 2) * z + (alpha[s] * var_ts / sigma[t] ** 2) * z0
            std = torch.sqrt(var_ts * sigma[s] ** 2 / sigma[t] ** 2)
            z = mean + std * noise[:, k + 1].double()
    return state.from_unit(z.float().numpy())


@torch.no_grad()
def generate_pairs(state: DenoiserState, net, count: int, seed: int = 0, steps: int = 64,
                   sampler: str = "deterministic", indices=None, batch_size: int = 256):
    """Sample latents and decode both modalities from each; returns (velocity, seismic) arrays."""
    indices = list(range(count)) if indices is None else list(indices)
    net.eval()
    vel, seis = [], []
    for i in range(0, len(indices), batch_size):
        z = torch.from_numpy(sample_latent(state, steps=steps, seed=seed, sampler=sampler,
                                           indices=indices[i:i + batch_size]))
        vel.append(run_fixed_chunks(net.decode_velocity, z).numpy())
        seis.append(run_fixed_chunks(net.decode_seismic, z).numpy())
    return np.concatenate(vel), np.concatenate(seis)


def _optimizer_tensors(opt_state: dict | None) -> tuple[dict, dict]:
    tensors, meta = {}, {}
    if not opt_state:
        return tensors, meta
    for pid, st in opt_state["state"].items():
        for k, v in st.items():
            tensors[f"adam.{pid}.{k}"] = v.reshape(-1) if v.dim() == 0 else v
            meta.setdefault(str(pid), {})[k] = list(v.shape)
    return tensors, {"shapes": meta, "param_groups": opt_state["param_groups"]}


def save_state(state: DenoiserState, path) -> None:
    """Checkpoint live + EMA weights, Adam moments, latent statistics and the schedule."""
    tensors = {f"live.{k}": v for k, v in state.model.state_dict().items()}
    tensors.update({f"ema.{k}": v for k, v in state.ema.state_dict().items()})
    tensors["latent_shift"] = torch.from_numpy(np.asarray(state.latent_shift))
    opt_t, opt_meta = _optimizer_tensors(state.optimizer)
    tensors.update(opt_t)
    meta = {
        "kind": "denoiser",
        "step": state.step,
        "latent_scale": state.latent_scale,
        "schedule": state.schedule.to_dict(),
        "denoiser": asdict(state.model.cfg),
        "optimizer": opt_meta,
        "losses": state.losses,
        "config": state.config,
    }
    save_tensors(path, tensors, meta)


def load_state(path) -> DenoiserState:
    if not Path(path).exists():
        raise MissingArtifactError(f"denoiser checkpoint not found: {path}")
    tensors, meta = load_tensors(path)
    cfg = DenoiserConfig(**meta["denoiser"])
    T = int(meta["schedule"]["T"])
    model, ema = Denoiser(cfg, T), Denoiser(cfg, T)
    model.load_state_dict({k[5:]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("live.")})
    ema.load_state_dict({k[4:]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("ema.")})
    opt = None
    if meta["optimizer"]:
        st = {}
        for pid, shapes in meta["optimizer"]["shapes"].items():
            st[int(pid)] = {k: torch.from_numpy(tensors[f"adam.{pid}.{k}"]).reshape(shape)
                            for k, shape in shapes.items()}
        opt = {"state": st, "param_groups": meta["optimizer"]["param_groups"]}
    return DenoiserState(model, ema, NoiseSchedule.from_dict(meta["schedule"]),
                         np.asarray(tensors["latent_shift"]), float(meta["latent_scale"]),
                         step=int(meta["step"]), optimizer=opt, losses=list(meta["losses"]),
                         config=meta.get("config", {}))
