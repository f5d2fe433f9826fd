"""Stage implementations behind the command line: synthesis, training, generation, evaluation.

Every artifact lives under ``<output_dir>/<kind>/v<k>/`` and is never
overwritten; a re-run writes the next version and consumers read the latest.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import diffusion as D
from . import evaluation as E
from .config import RunConfig
from .data import (DatasetManifest, NormalizationSpec, PairedSample, denormalize, load_dataset,
                   load_tensors, modality_arrays, normalize, save_dataset, save_tensors, split_unbalanced)
from .errors import MissingArtifactError
from .forward import forward_corpus
from .nets import COMPONENTS, NetConfig, TwoHeadNet
from .trainer import (TrainReport, train_onestep_ablation, train_step1, train_step2, train_step2_auto)
from .velocity import gen_corpus

_VERSION = re.compile(r"^v(\d+)$")


# ---------------------------------------------------------------- versioning

def versions(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        return []
    found = [(int(m.group(1)), p) for p in root.iterdir() if (m := _VERSION.match(p.name)) and p.is_dir()]
    return [p for _, p in sorted(found)]


def latest(root, what: str) -> Path:
    vs = versions(root)
    if not vs:
        raise MissingArtifactError(f"missing artifact: no {what} under {root}")
    return vs[-1]


def next_version(root) -> Path:
    vs = versions(root)
    k = int(vs[-1].name[1:]) + 1 if vs else 1
    return Path(root) / f"v{k}"


def workers() -> int:
    try:
        return max(1, int(os.environ.get("UBDIFF_WORKERS", "1")))
    except ValueError:
        return 1


def set_deterministic(flag: bool) -> None:
    if flag:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


# ----------------------------------------------------------------- synthesis

def _raw_corpus(cfg: RunConfig, count: int, seed: int, model_all: bool, paired_idx=()):
    """Velocity maps (m/s) and the gathers of the requested indices (all when ``model_all``)."""
    params = cfg.layer_params()
    vels = gen_corpus(cfg.data.family, count, params, seed)
    grids = np.stack([v.grid for v in vels]).astype(np.float32)
    todo = list(range(count)) if model_all else sorted(paired_idx)
    geom = cfg.forward.geometry(params.size)
    gathers = forward_corpus([vels[i] for i in todo], geom, cfg.forward.wavelet(), cfg.forward.solver(),
                             workers=workers())
    seis = {i: g.traces for i, g in zip(todo, gathers)}
    return grids, seis


def _samples(grids, seis, ids, paired, majority):
    out = []
    for i, sid in enumerate(ids):
        v, s = grids[i], seis.get(i)
        if majority == "velocity":
            out.append(PairedSample(sid, v, s if sid in paired else None))
        else:
            out.append(PairedSample(sid, s, v if sid in paired else None))
    return out


def synthesize(cfg: RunConfig):
    """Build the unbalanced training set and the fully paired test set (in memory).

    Returns ``{"train": (samples, manifest), "test": (samples, manifest)}``.
    """
    d = cfg.data
    ids = list(range(d.count))
    man = split_unbalanced(ids, d.n_paired, cfg.stage_seed("split"), d.majority)
    paired = set(man.paired_ids)
    pidx = [i for i in ids if i in paired]
    seed_train = cfg.stage_seed("synth-train")
    grids, seis = _raw_corpus(cfg, d.count, seed_train, d.majority == "seismic", pidx)
    norm = {"velocity": NormalizationSpec.fit([grids])}
    seis_fit = [seis[i] for i in pidx] or list(seis.values())
    if seis_fit:
        norm["seismic"] = NormalizationSpec.fit(seis_fit, symmetric=True)
    man.normalization = norm
    man.extra = {"family": d.family, "split": "train", "corpus_seed": seed_train}
    out = {"train": (_samples(grids, seis, ids, paired, d.majority), man)}
    if d.n_test:
        seed_test = cfg.stage_seed("synth-test")
        tg, ts = _raw_corpus(cfg, d.n_test, seed_test, True)
        tids = list(range(d.n_test))
        tman = DatasetManifest(d.majority, tids, tids, seed=seed_test, normalization=dict(norm),
                               extra={"family": d.family, "split": "test", "corpus_seed": seed_test})
        out["test"] = (_samples(tg, ts, tids, set(tids), d.majority), tman)
    return out


def _manifest_doc(path: Path) -> dict | None:
    p = path / "manifest.json"
    return json.loads(p.read_text(encoding="utf-8")) if p.exists() else None


def cmd_synth(cfg: RunConfig) -> tuple[Path, bool]:
    """Write datasets; returns (directory, created). Identical existing output is left alone."""
    root = Path(cfg.output_dir) / "data"
    built = synthesize(cfg)
    docs = {}
    for split, (samples, man) in built.items():
        # run shape bookkeeping before comparing with what is on disk
        man.shapes = {man.majority_modality: tuple(np.shape(samples[0].ma))}
        first_paired = next((s for s in samples if s.paired), None)
        if first_paired is not None:
            man.shapes[man.minority_modality] = tuple(np.shape(first_paired.mi))
        docs[split] = man.to_json()
    vs = versions(root)
    if vs and all(_manifest_doc(vs[-1] / split) == doc for split, doc in docs.items()):
        return vs[-1], False
    target = next_version(root)
    for split, (samples, man) in built.items():
        save_dataset(samples, man, target / split)
    (target / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1), encoding="utf-8")
    return target, True


def data_dir(cfg: RunConfig) -> Path:
    return latest(Path(cfg.output_dir) / "data", "dataset (run synth first)")


def normalized_arrays(path, modality: str, paired_only: bool = False):
    """Load ``modality`` arrays from a dataset directory in normalized units."""
    samples, man = load_dataset(path)
    arr = modality_arrays(samples, man, modality, paired_only)
    return normalize(arr, man.normalization[modality]).astype(np.float32), man


def training_arrays(path):
    """(majority corpus, paired majority, paired minority, manifest), normalized."""
    samples, man = load_dataset(path)
    ma_mod, mi_mod = man.majority_modality, man.minority_modality
    nm = man.normalization
    maj = normalize(modality_arrays(samples, man, ma_mod), nm[ma_mod]).astype(np.float32)
    pma = normalize(modality_arrays(samples, man, ma_mod, paired_only=True), nm[ma_mod]).astype(np.float32)
    pmi = modality_arrays(samples, man, mi_mod)
    pmi = normalize(pmi, nm[mi_mod]).astype(np.float32) if len(pmi) else pmi
    return maj, pma, pmi, man


# --------------------------------------------------------------- checkpoints

def save_net(net: TwoHeadNet, path, meta: dict) -> None:
    state = net.state_dict()
    parts = {c: [k for k in state if k.split(".")[0] == c] for c in COMPONENTS}
    doc = {"kind": "twohead", "net": asdict(net.cfg), "components": parts, **meta}
    save_tensors(path, {k: v.detach() for k, v in state.items()}, doc)


def load_net(path) -> tuple[TwoHeadNet, dict]:
    if not (Path(path) / "meta.json").exists():
        raise MissingArtifactError(f"missing artifact: network checkpoint {path}")
    tensors, meta = load_tensors(path)
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in meta["net"].items()}
    net = TwoHeadNet(NetConfig(**kw))
    net.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    net.eval()
    return net, meta


def encdec_root(cfg: RunConfig, step: str) -> Path:
    return Path(cfg.output_dir) / "encdec" / step


def _report_meta(rep: TrainReport, cfg_obj) -> dict:
    return {"report": rep.summary(), "train_config": asdict(cfg_obj)}


def cmd_train_encdec(cfg: RunConfig, step: str, freeze: str = "auto", log=print) -> Path:
    set_deterministic(cfg.deterministic)
    maj, pma, pmi, man = training_arrays(data_dir(cfg) / "train")
    ncfg = cfg.net_config()
    if step == "1":
        tc = cfg.train_config("step1")
        net = TwoHeadNet(ncfg, seed=cfg.stage_seed("net-init"))
        out = next_version(encdec_root(cfg, "step1"))
        rep = train_step1(net, maj, tc, out / "metrics.jsonl")
        save_net(net, out, {"step": "1", "freeze_history": [], **_report_meta(rep, tc)})
        log(f"step 1: final loss {rep.losses[ncfg.majority][-1]:.5f}")
        return out
    if step == "ablation":
        if len(pma) == 0:
            raise ValueError("the ablation needs paired samples (data.n_paired >= 1)")
        tc = cfg.train_config("ablation")
        net = TwoHeadNet(ncfg, seed=cfg.stage_seed("net-init"))
        out = next_version(encdec_root(cfg, "ablation"))
        rep = train_onestep_ablation(net, pma, pmi, tc, out / "metrics.jsonl")
        save_net(net, out, {"step": "ablation", "freeze_history": [0], **_report_meta(rep, tc)})
        log(f"ablation: final loss {rep.losses['total'][-1]:.5f}")
        return out
    if step != "2":
        raise ValueError(f"unknown step {step!r}")
    if len(pma) == 0:
        raise ValueError("step 2 needs paired samples (data.n_paired >= 1)")
    src = latest(encdec_root(cfg, "step1"), "step-1 checkpoint (run train-encdec --step 1 first)")
    net, meta1 = load_net(src)
    out = next_version(encdec_root(cfg, "step2"))
    if freeze == "auto":
        tc = cfg.train_config("step2")
        best, reports, f = train_step2_auto(net, pma, pmi, tc, out)
        selection = {"chosen": f, "val_mae": {str(r.freeze): r.val_mae for r in reports}}
        rep = reports[[r.freeze for r in reports].index(f)]
        save_net(best, out, {"step": "2", "source": str(src), "freeze_history": [f], "selection": selection,
                             **_report_meta(rep, tc)})
        log(f"step 2: selected F={f} (validation MAE {selection['val_mae']})")
        return out
    f = int(freeze)
    tc = cfg.train_config("step2", freeze=f)
    rep = train_step2(net, pma, pmi, tc, out / "metrics.jsonl")
    save_net(net, out, {"step": "2", "source": str(src), "freeze_history": [f], **_report_meta(rep, tc)})
    log(f"step 2 (F={f}): final loss {rep.losses['total'][-1]:.5f}")
    return out


def net_for_generation(cfg: RunConfig, source: str = "step2") -> tuple[TwoHeadNet, Path]:
    path = latest(encdec_root(cfg, source), f"{source} checkpoint")
    return load_net(path)[0], path


# ----------------------------------------------------------------- diffusion

def diffusion_root(cfg: RunConfig, source: str) -> Path:
    return Path(cfg.output_dir) / "diffusion" / source


def cmd_train_diff(cfg: RunConfig, source: str = "step2", resume: str | None = None,
                   until: int | None = None, log=print) -> Path:
    """Train the denoiser on latents of the full majority corpus.

    Snapshots are written every ``diffusion.checkpoint_every`` steps under
    ``snapshots/``; ``resume`` continues from any snapshot or final state.
    """
    set_deterministic(cfg.deterministic)
    state = D.load_state(resume) if resume else None
    if state is not None and "net_checkpoint" in state.config:
        # a resumed run keeps the latents it started from
        net_path = Path(state.config["net_checkpoint"])
        net = load_net(net_path)[0]
    else:
        net, net_path = net_for_generation(cfg, source)
    maj, _, _, _ = training_arrays(data_dir(cfg) / "train")
    dcfg = cfg.diffusion_config()
    sched = D.make_schedule(cfg.diffusion.T, cfg.diffusion.schedule)
    latents = D.encode_corpus(net, maj)
    out = next_version(diffusion_root(cfg, source))
    every = max(1, cfg.diffusion.checkpoint_every)
    stop = dcfg.steps if until is None else min(until, dcfg.steps)
    while True:
        target = min(stop, ((state.step if state else 0) // every + 1) * every)
        state = D.train_denoiser(latents, dcfg, sched, state, until=target)
        state.config = {**state.config, "net_checkpoint": str(net_path)}
        if state.step >= stop:
            break
        D.save_state(state, out / "snapshots" / f"step_{state.step:07d}")
    D.save_state(state, out)
    first = np.mean(state.losses[:50]) if state.losses else float("nan")
    last = np.mean(state.losses[-50:]) if state.losses else float("nan")
    log(f"diffusion: {state.step} steps, loss {first:.4f} -> {last:.4f}")
    return out


# ---------------------------------------------------------------- generation

def generate_dataset(state, net: TwoHeadNet, count: int, seed: int, normalization: dict,
                     steps: int = 64, sampler: str = "deterministic"):
    """Generated pairs as a fully paired dataset in physical units plus manifest."""
    vel, seis = D.generate_pairs(state, net, count, seed, steps, sampler)
    vn, sn = normalization["velocity"], normalization["seismic"]
    vel_raw = denormalize(vel, vn).astype(np.float32)
    seis_raw = denormalize(seis, sn).astype(np.float32)
    ids = list(range(count))
    maj = net.cfg.majority
    samples = [PairedSample(i, vel_raw[i], seis_raw[i]) if maj == "velocity"
               else PairedSample(i, seis_raw[i], vel_raw[i]) for i in ids]
    man = DatasetManifest(maj, ids, ids, seed=seed, normalization=dict(normalization), generated=True,
                          extra={"sampler": sampler, "sample_steps": steps})
    return samples, man


def cmd_generate(cfg: RunConfig, count: int, seed: int, source: str = "step2", out=None) -> Path:
    set_deterministic(cfg.deterministic)
    if count < 1:
        raise ValueError("--count must be >= 1")
    dpath = latest(diffusion_root(cfg, source), "denoiser checkpoint (run train-diff first)")
    state = D.load_state(dpath)
    # decode with the network whose latents the denoiser was trained on
    if "net_checkpoint" in state.config:
        net = load_net(state.config["net_checkpoint"])[0]
    else:
        net, _ = net_for_generation(cfg, source)
    man_train = load_dataset(data_dir(cfg) / "train")[1]
    samples, man = generate_dataset(state, net, count, seed, man_train.normalization,
                                    cfg.diffusion.sample_steps, cfg.diffusion.sampler)
    man.extra.update({"denoiser": str(dpath)})
    target = Path(out) if out else next_version(Path(cfg.output_dir) / "generated")
    if target.exists() and any(target.iterdir()):
        raise FileExistsError(f"refusing to overwrite existing artifact {target}")
    save_dataset(samples, man, target)
    return target


# ---------------------------------------------------------------- evaluation

def _pairs(path):
    """Normalized (velocity, seismic) arrays of every paired sample plus the manifest."""
    samples, man = load_dataset(path)
    if "velocity" not in man.normalization or "seismic" not in man.normalization:
        raise ValueError(f"{path}: manifest lacks normalization for both modalities")
    vel = modality_arrays(samples, man, "velocity", paired_only=True)
    seis = modality_arrays(samples, man, "seismic", paired_only=True)
    return vel, seis, man


def cmd_eval(cfg: RunConfig, real, generated, axes=("fid", "pairwise", "physics")) -> Path:
    set_deterministic(cfg.deterministic)
    for p in (real, generated):
        if not (Path(p) / "manifest.json").exists():
            raise MissingArtifactError(f"missing artifact: dataset {p}")
    rv, rs, rman = _pairs(real)
    gv, gs, gman = _pairs(generated)
    nm = rman.normalization
    to_n = lambda a, mod: normalize(a, nm[mod]).astype(np.float32)  # noqa: E731
    ev = cfg.evaluation
    report = {"config": cfg.to_dict(), "real": str(real), "generated": str(generated), "axes": list(axes)}
    if "fid" in axes:
        report["fid"] = {mod: E.eval_fid(to_n(r, mod), to_n(g, mod),
                                         E.FeatureExtractorSpec(mod, feature_dim=ev.feature_dim,
                                                                seed=ev.extractor_seed))
                         for mod, r, g in (("velocity", rv, gv), ("seismic", rs, gs))}
    if "pairwise" in axes:
        icfg = E.InversionConfig(ev.inversion_epochs, ev.inversion_batch_size, ev.inversion_lr,
                                 cfg.stage_seed("inversion"))
        model, losses = E.train_inversion_lite(to_n(gs, "seismic"), to_n(gv, "velocity"), icfg)
        rep = E.pairwise_eval(model, to_n(rs, "seismic"), to_n(rv, "velocity"))
        rep.meta.update({"n_train": len(gv), "epochs": icfg.epochs, "final_train_loss": losses[-1]})
        report["pairwise"] = asdict(rep)
    if "physics" in axes:
        k = min(ev.physics_count, len(gv))
        size = cfg.layer_params().size
        agg = E.physics_aggregate(gv[:k], gs[:k], cfg.forward.geometry(size), cfg.forward.wavelet(),
                                  cfg.forward.solver(), spacing=cfg.layer_params().spacing)
        report["physics"] = agg
    out = next_version(Path(cfg.output_dir) / "reports")
    E.write_report(out / "report.json", report)
    return out / "report.json"
