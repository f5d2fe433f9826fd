"""Two-step optimization of the 1-in-2-out network.

Step 1 fits the majority path (encoder, majority projection, majority
decoder) on every majority sample. Step 2 fine-tunes on the paired subset,
either with the majority path frozen (F=1: only the minority projection and
decoder train) or with everything trainable and the majority term kept in
the loss (F=0). The one-step ablation trains the whole network on the pairs
alone.
"""

from __future__ import annotations

import copy
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .errors import NumericalError
from .nets import LossWeights, TwoHeadNet, loss_majority, loss_minority

# per-epoch learning-rate decay by dataset family
LR_DECAY = {"flatvel": 0.9, "flatfault": 0.98, "curvevel": 0.995, "curvefault": 0.995}


def lr_decay_for(family: str) -> float:
    return LR_DECAY.get(family, 0.995)


def derive_seed(*parts) -> int:
    """Stable 31-bit seed from any mix of stage names and integers."""
    h = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:4], "little") & 0x7FFFFFFF


@dataclass
class TrainConfig:
    epochs_step1: int = 50
    epochs_step2: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-4
    lr_decay: float = 0.995
    freeze: int = 1
    seed: int = 0
    majority_modality: str = "velocity"
    weights: LossWeights = field(default_factory=LossWeights)
    val_fraction: float = 0.1
    # start each decoder's output offset at the mean of its training targets
    data_init: bool = True

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.epochs_step1 < 1 or self.epochs_step2 < 1:
            raise ValueError("epoch counts must be >= 1")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.freeze not in (0, 1):
            raise ValueError("freeze must be 0 or 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainReport:
    stage: str
    losses: dict = field(default_factory=dict)
    freeze: int | None = None
    wall_clock: float = 0.0
    val_mae: float | None = None
    checkpoint: str | None = None
    state: dict | None = field(default=None, repr=False)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("state")
        return d


def _to_tensor(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float32))


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    g = torch.Generator().manual_seed(derive_seed("shuffle", seed, epoch))
    perm = torch.randperm(n, generator=g)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _snapshot(net: TwoHeadNet) -> dict:
    return {k: v.detach().clone() for k, v in net.state_dict().items()}


class _MetricsLog:
    def __init__(self, path):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, **row):
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(row) + "\n")


def _run_epochs(stage, params, n, epochs, cfg, batch_loss, log_path=None):
    """Shared mini-batch loop with per-epoch exponential LR decay.

    ``batch_loss(idx)`` returns ``(total, components_dict)`` for a batch.
    """
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=cfg.lr_decay)
    log = _MetricsLog(log_path)
    history: dict = {}
    for epoch in range(epochs):
        sums: dict = {}
        lr = opt.param_groups[0]["lr"]
        for idx in _batches(n, cfg.batch_size, derive_seed(stage, cfg.seed), epoch):
            total, parts = batch_loss(idx)
            if not torch.isfinite(total):
                raise NumericalError(f"{stage}: non-finite loss at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + float(v) * len(idx)
        sched.step()
        row = {k: v / n for k, v in sums.items()}
        for k, v in row.items():
            history.setdefault(k, []).append(v)
        log.write(epoch=epoch, lr=lr, **row)
    return history


def train_step1(net: TwoHeadNet, majority, cfg: TrainConfig, log_path=None) -> TrainReport:
    """Self-supervised reconstruction of the majority modality.

    Only the encoder, the majority projection and the majority decoder are
    optimized; the minority head is left untouched.
    """
    ma = _to_tensor(majority)
    if len(ma) == 0:
        raise ValueError("step 1 needs a non-empty majority dataset")
    mod = net.cfg.majority
    if cfg.data_init:
        net.init_output_offset(mod, majority)
    params = net.component_parameters(net.cfg.majority_components())
    w = cfg.weights
    t0 = time.perf_counter()
    net.train()

    def batch_loss(idx):
        x = ma[idx]
        pred = net.decode(net.encode(x), mod)
        loss = loss_majority(pred, x, w)
        return loss, {mod: loss.detach()}

    losses = _run_epochs("step1", params, len(ma), cfg.epochs_step1, cfg, batch_loss, log_path)
    net.eval()
    return TrainReport("step1", losses, wall_clock=time.perf_counter() - t0, state=_snapshot(net))


def _pair_tensors(pairs_ma, pairs_mi):
    ma, mi = _to_tensor(pairs_ma), _to_tensor(pairs_mi)
    if len(ma) == 0:
        raise ValueError("training on pairs needs at least one pair")
    if len(ma) != len(mi):
        raise ValueError(f"unpaired samples: {len(ma)} majority vs {len(mi)} minority arrays")
    return ma, mi


def _pair_loss_fn(net, ma, mi, w: LossWeights):
    maj, mnr = net.cfg.majority, net.cfg.minority

    def batch_loss(idx):
        x, y = ma[idx], mi[idx]
        z = net.encode(x)
        if w.freeze:
            # frozen encoder: no gradient may reach it
            z = z.detach()
        pred_mi = net.decode(z, mnr)
        pred_ma = net.decode(z, maj) if w.freeze == 0 else None
        loss = loss_minority(pred_ma, x, pred_mi, y, w)
        parts = {"total": loss.detach()}
        with torch.no_grad():
            d = pred_mi - y
            parts[mnr] = w.gamma3 * d.abs().mean() + w.gamma4 * (d * d).mean()
            if pred_ma is not None:
                parts[maj] = loss_majority(pred_ma, x, w)
        return loss, parts

    return batch_loss


def train_step2(net: TwoHeadNet, pairs_ma, pairs_mi, cfg: TrainConfig, log_path=None) -> TrainReport:
    """Fine-tune on paired data starting from the step-1 weights already in ``net``.

    With ``cfg.freeze == 1`` the majority path is excluded from the
    optimizer, so its parameters are bit-identical afterwards.
    """
    ma, mi = _pair_tensors(pairs_ma, pairs_mi)
    w = replace(cfg.weights, freeze=cfg.freeze)
    if cfg.data_init:
        net.init_output_offset(net.cfg.minority, pairs_mi)
    if cfg.freeze:
        params = net.component_parameters(net.cfg.minority_components())
    else:
        params = list(net.parameters())
    t0 = time.perf_counter()
    net.train()
    losses = _run_epochs(f"step2-F{cfg.freeze}", params, len(ma), cfg.epochs_step2, cfg,
                         _pair_loss_fn(net, ma, mi, w), log_path)
    net.eval()
    return TrainReport("step2", losses, freeze=cfg.freeze, wall_clock=time.perf_counter() - t0,
                       state=_snapshot(net))


def train_onestep_ablation(net: TwoHeadNet, pairs_ma, pairs_mi, cfg: TrainConfig,
                           log_path=None) -> TrainReport:
    """Joint training of every component on the pairs only.

    Gets ``epochs_step1 + epochs_step2`` epochs so the budget matches the
    two-step schedule.
    """
    ma, mi = _pair_tensors(pairs_ma, pairs_mi)
    w = replace(cfg.weights, freeze=0)
    if cfg.data_init:
        net.init_output_offset(net.cfg.majority, pairs_ma)
        net.init_output_offset(net.cfg.minority, pairs_mi)
    epochs = cfg.epochs_step1 + cfg.epochs_step2
    t0 = time.perf_counter()
    net.train()
    losses = _run_epochs("ablation", list(net.parameters()), len(ma), epochs, cfg,
                         _pair_loss_fn(net, ma, mi, w), log_path)
    net.eval()
    return TrainReport("ablation", losses, freeze=0, wall_clock=time.perf_counter() - t0,
                       state=_snapshot(net))


@torch.no_grad()
def reconstruct(net: TwoHeadNet, majority, batch_size: int = 256):
    """Encode majority arrays and decode both modalities (numpy in, numpy out)."""
    net.eval()
    ma = _to_tensor(majority)
    vel, seis = [], []
    for i in range(0, len(ma), batch_size):
        v, s = net.forward_pair(ma[i:i + batch_size])
        vel.append(v.numpy())
        seis.append(s.numpy())
    return np.concatenate(vel), np.concatenate(seis)


def minority_mae(net: TwoHeadNet, pairs_ma, pairs_mi) -> float:
    vel, seis = reconstruct(net, pairs_ma)
    pred = seis if net.cfg.minority == "seismic" else vel
    return float(np.mean(np.abs(pred - np.asarray(pairs_mi, dtype=np.float32))))


def select_freeze(reports) -> int:
    """Pick F from a pair of step-2 reports by validation minority MAE; ties go to F=1."""
    by_f = {r.freeze: r for r in reports}
    if set(by_f) != {0, 1}:
        raise ValueError("select_freeze needs one report with F=0 and one with F=1")
    for r in by_f.values():
        if r.val_mae is None:
            raise ValueError(f"report for F={r.freeze} has no validation metric")
    return 0 if by_f[0].val_mae < by_f[1].val_mae else 1


def split_validation(n: int, fraction: float, seed: int):
    """Index arrays (train, val) holding out ``round(fraction * n)`` pairs (at least one when n > 1)."""
    rng = np.random.default_rng(derive_seed("val-split", seed))
    perm = rng.permutation(n)
    k = int(round(fraction * n))
    k = min(max(k, 1 if n > 1 else 0), n - 1) if n > 1 else 0
    return np.sort(perm[k:]), np.sort(perm[:k])


def train_step2_auto(net: TwoHeadNet, pairs_ma, pairs_mi, cfg: TrainConfig,
                     log_dir=None) -> tuple[TwoHeadNet, list[TrainReport], int]:
    """Run step 2 with F=0 and F=1 from the same step-1 weights and keep the better one.

    A validation fraction of the pairs is held out before either run. Returns
    the chosen network, both reports and the chosen flag.
    """
    pairs_ma = np.asarray(pairs_ma, dtype=np.float32)
    pairs_mi = np.asarray(pairs_mi, dtype=np.float32)
    tr, va = split_validation(len(pairs_ma), cfg.val_fraction, cfg.seed)
    if len(va) == 0:
        raise ValueError("need at least two pairs to select the freeze flag")
    nets, reports = {}, []
    for f in (0, 1):
        cand = copy.deepcopy(net)
        log = Path(log_dir) / f"step2_F{f}.jsonl" if log_dir else None
        rep = train_step2(cand, pairs_ma[tr], pairs_mi[tr], replace(cfg, freeze=f), log)
        rep.val_mae = minority_mae(cand, pairs_ma[va], pairs_mi[va])
        nets[f] = cand
        reports.append(rep)
    best = select_freeze(reports)
    return nets[best], reports, best


def max_abs_delta(before: dict, after: dict, prefixes) -> float:
    """Largest absolute change over state-dict entries under the given component prefixes."""
    worst = 0.0
    for k, v in before.items():
        if k.split(".")[0] in prefixes:
            worst = max(worst, float((after[k] - v).abs().max()))
    return worst
