import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from ubdiff.data import NormalizationSpec, normalize
from ubdiff.errors import NumericalError
from ubdiff.forward import AcquisitionGeometry, SolverConfig, forward_corpus, ricker
from ubdiff.nets import NetConfig, TwoHeadNet
from ubdiff.trainer import (TrainConfig, TrainReport, derive_seed, lr_decay_for, max_abs_delta, minority_mae,
                            reconstruct, select_freeze, split_validation, train_onestep_ablation,
                            train_step1, train_step2, train_step2_auto)
from ubdiff.velocity import gen_corpus

CFG = NetConfig()
FROZEN = CFG.majority_components()


@pytest.fixture(scope="module")
def pairs():
    vels = gen_corpus("flatvel", 12, seed=40)
    seis = np.stack([g.traces for g in forward_corpus(vels, AcquisitionGeometry.surface(32),
                                                      ricker(15, 1e-3, 256), SolverConfig())])
    v = normalize(np.stack([m.grid for m in vels]), NormalizationSpec.from_range(1000, 6000))
    s = normalize(seis, NormalizationSpec.fit([seis], symmetric=True))
    return v.astype(np.float32), s.astype(np.float32)


def small_cfg(**kw):
    base = TrainConfig(epochs_step1=2, epochs_step2=2, batch_size=4, learning_rate=1e-3, seed=3)
    return replace(base, **kw)


def test_freeze_one_leaves_majority_path_bit_identical(pairs):
    v, s = pairs
    net = TwoHeadNet(CFG, seed=1)
    train_step1(net, v, small_cfg())
    before = {k: t.clone() for k, t in net.state_dict().items()}
    rep = train_step2(net, v, s, small_cfg(freeze=1))
    after = net.state_dict()
    assert max_abs_delta(before, after, FROZEN) == 0.0
    for k in before:
        if k.split(".")[0] in FROZEN:
            assert torch.equal(before[k], after[k])
    assert max_abs_delta(before, after, ("dec_s",)) > 0
    assert rep.freeze == 1 and len(rep.losses["seismic"]) == 2


def test_freeze_zero_updates_encoder(pairs):
    v, s = pairs
    net = TwoHeadNet(CFG, seed=1)
    before = {k: t.clone() for k, t in net.state_dict().items()}
    train_step2(net, v, s, small_cfg(freeze=0))
    assert max_abs_delta(before, net.state_dict(), ("encoder",)) > 0


def test_step1_touches_only_majority_path(pairs):
    v, _ = pairs
    net = TwoHeadNet(CFG, seed=1)
    before = {k: t.clone() for k, t in net.state_dict().items()}
    train_step1(net, v, small_cfg())
    assert max_abs_delta(before, net.state_dict(), ("proj_s", "dec_s")) == 0.0
    assert max_abs_delta(before, net.state_dict(), ("encoder",)) > 0


def test_step1_memorizes_constant_map():
    x = np.full((1, 32, 32), 0.3, np.float32)
    net = TwoHeadNet(CFG, seed=0)
    train_step1(net, x, TrainConfig(epochs_step1=200, data_init=False))
    v, _ = reconstruct(net, x)
    assert float(((v - x) ** 2).mean()) < 1e-3


def test_step2_memorizes_single_pair(pairs):
    v, s = pairs
    net = TwoHeadNet(CFG, seed=0)
    train_step2(net, v[:1], s[:1], TrainConfig(epochs_step2=200, freeze=1, data_init=False))
    _, sh = reconstruct(net, v[:1])
    assert float(((sh - s[:1]) ** 2).mean()) < 1e-2


def test_deterministic_runs_are_bit_identical(pairs):
    v, s = pairs
    torch.use_deterministic_algorithms(True)
    try:
        states = []
        for _ in range(2):
            net = TwoHeadNet(CFG, seed=5)
            r1 = train_step1(net, v, small_cfg())
            r2 = train_onestep_ablation(net, v, s, small_cfg())
            states.append((r1.losses, r2.losses, net.state_dict()))
    finally:
        torch.use_deterministic_algorithms(False)
    (l1a, l2a, sa), (l1b, l2b, sb) = states
    assert l1a == l1b and l2a == l2b
    assert all(torch.equal(sa[k], sb[k]) for k in sa)


def test_ablation_budget_and_report(pairs, tmp_path):
    v, s = pairs
    net = TwoHeadNet(CFG, seed=1)
    log = tmp_path / "m.jsonl"
    rep = train_onestep_ablation(net, v, s, small_cfg(epochs_step1=2, epochs_step2=3, lr_decay=0.5), log)
    assert len(rep.losses["total"]) == 5 and rep.freeze == 0
    rows = [json.loads(line) for line in log.read_text().splitlines()]
    assert [r["epoch"] for r in rows] == list(range(5))
    np.testing.assert_allclose([r["lr"] for r in rows], [1e-3 * 0.5 ** k for k in range(5)])
    assert {"velocity", "seismic", "total"} <= set(rows[0])
    assert "state" not in rep.summary()


def test_nan_aborts_with_epoch(pairs):
    v, s = pairs
    bad = s.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericalError, match="epoch 0"):
        train_step2(TwoHeadNet(CFG, seed=1), v, bad, small_cfg(freeze=1))


def test_input_errors(pairs):
    v, s = pairs
    with pytest.raises(ValueError):
        train_step1(TwoHeadNet(CFG), v[:0], small_cfg())
    with pytest.raises(ValueError, match="unpaired"):
        train_step2(TwoHeadNet(CFG), v, s[:3], small_cfg())
    with pytest.raises(ValueError):
        TrainConfig(lr_decay=0.0)
    with pytest.raises(ValueError):
        TrainConfig(freeze=3)


def test_select_freeze_examples():
    def reps(v1, v0):
        return [TrainReport("step2", freeze=1, val_mae=v1), TrainReport("step2", freeze=0, val_mae=v0)]

    assert select_freeze(reps(0.10, 0.12)) == 1
    assert select_freeze(reps(0.10, 0.10)) == 1
    assert select_freeze(reps(0.12, 0.10)) == 0
    with pytest.raises(ValueError):
        select_freeze(reps(None, 0.1))
    with pytest.raises(ValueError):
        select_freeze(reps(0.1, 0.1)[:1])


def test_validation_split():
    tr, va = split_validation(100, 0.1, seed=2)
    assert len(va) == 10 and len(tr) == 90 and not set(tr) & set(va)
    assert np.array_equal(va, split_validation(100, 0.1, seed=2)[1])
    assert len(split_validation(5, 0.1, seed=2)[1]) == 1


def test_step2_auto_selects_lower_validation_mae(pairs):
    v, s = pairs
    net = TwoHeadNet(CFG, seed=1)
    train_step1(net, v, small_cfg())
    before = {k: t.clone() for k, t in net.state_dict().items()}
    best, reports, f = train_step2_auto(net, v, s, small_cfg())
    assert {r.freeze for r in reports} == {0, 1}
    assert f == select_freeze(reports)
    assert all(torch.equal(before[k], net.state_dict()[k]) for k in before)  # input net untouched
    _, va = split_validation(len(v), 0.1, small_cfg().seed)
    assert minority_mae(best, v[va], s[va]) == pytest.approx([r.val_mae for r in reports if r.freeze == f][0])


def test_step1_training_curve_smooth():
    maps = gen_corpus("flatvel", 300, seed=77)
    x = normalize(np.stack([m.grid for m in maps]), NormalizationSpec.from_range(1000, 6000)).astype(np.float32)
    rep = train_step1(TwoHeadNet(CFG, seed=0), x, TrainConfig(epochs_step1=30, lr_decay=0.9))
    curve = np.array(rep.losses["velocity"])
    assert np.all(np.isfinite(curve))
    ma = np.convolve(curve, np.ones(10) / 10, mode="valid")
    assert np.all(np.diff(ma) <= 0)


def test_balanced_control(pairs):
    v, s = pairs
    cfg = TrainConfig(epochs_step1=15, epochs_step2=15, batch_size=4, learning_rate=1e-3, seed=0)
    two = TwoHeadNet(CFG, seed=0)
    train_step1(two, v, cfg)
    train_step2(two, v, s, replace(cfg, freeze=0))
    abl = TwoHeadNet(CFG, seed=0)
    train_onestep_ablation(abl, v, s, cfg)
    errs = []
    for net in (two, abl):
        vh, sh = reconstruct(net, v)
        errs.append(0.5 * (np.abs(vh - v).mean() + np.abs(sh - s).mean()))
    assert max(errs) <= 2 * min(errs)


def test_seed_helpers():
    assert derive_seed("split", 0) == derive_seed("split", 0)
    assert derive_seed("split", 0) != derive_seed("split", 1)
    assert 0 <= derive_seed("x", 9) < 2 ** 31
    assert lr_decay_for("flatvel") == 0.9 and lr_decay_for("flatfault") == 0.98
    assert lr_decay_for("curvevel") == 0.995
