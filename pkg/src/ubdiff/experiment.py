"""Two-step vs one-step comparison on a small unbalanced corpus.

For one seed: synthesize the corpus, train the two-step network (majority
autoencoder, then paired fine-tuning with automatic freeze selection) and
the one-step ablation (paired data only, same total epochs), then score both

* directly, by reconstructing held-out real pairs from their velocity map;
* downstream, by training a small inversion network on pairs generated by
  each arm's latent diffusion model and testing it on real pairs.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffusion as D
from . import evaluation as E
from .config import RunConfig, TrainerSection
from .data import modality_arrays, normalize
from .nets import TwoHeadNet
from .pipeline import set_deterministic, synthesize
from .trainer import reconstruct, train_onestep_ablation, train_step1, train_step2_auto


@dataclass
class ExperimentSettings:
    """Budget knobs; the defaults fit three seeds in well under an hour on one core."""

    family: str = "flatvel"
    count: int = 2000
    n_paired: int = 100
    n_test: int = 200
    trainer: TrainerSection = field(default_factory=lambda: TrainerSection(
        epochs_step1=10, epochs_step2=300, batch_size=16, learning_rate=5e-4, lr_decay=0.995))
    diffusion_steps: int = 1500
    diffusion_lr: float = 8e-5
    sample_steps: int = 64
    n_generated: int = 2000
    inversion_epochs: int = 12

    def run_config(self, seed: int) -> RunConfig:
        cfg = RunConfig(seed=seed, trainer=self.trainer)
        cfg.data.family, cfg.data.count = self.family, self.count
        cfg.data.n_paired, cfg.data.n_test = self.n_paired, self.n_test
        cfg.diffusion.steps, cfg.diffusion.learning_rate = self.diffusion_steps, self.diffusion_lr
        cfg.diffusion.sample_steps = self.sample_steps
        cfg.evaluation.inversion_epochs = self.inversion_epochs
        return cfg.validate()


def _normalized(samples, man, mod, paired_only=False):
    return normalize(modality_arrays(samples, man, mod, paired_only), man.normalization[mod]).astype(np.float32)


def pair_mae(net: TwoHeadNet, vel, seis) -> dict:
    """Reconstruct both modalities from the velocity map; MAE per modality and their mean."""
    v_hat, s_hat = reconstruct(net, vel)
    mv = float(np.abs(v_hat - vel).mean())
    ms = float(np.abs(s_hat - seis).mean())
    return {"velocity": mv, "seismic": ms, "pair": 0.5 * (mv + ms)}


def downstream_mae(net: TwoHeadNet, corpus, test_vel, test_seis, cfg: RunConfig, tag: str,
                   n_generated: int = 2000) -> dict:
    """Diffusion on the net's latents, generate pairs, train inversion on them, score on real pairs."""
    dcfg = cfg.diffusion_config()
    dcfg.seed = cfg.stage_seed(f"diffusion-{tag}")
    sched = D.make_schedule(cfg.diffusion.T, cfg.diffusion.schedule)
    t0 = time.perf_counter()
    state = D.train_diffusion(net, corpus, dcfg, sched)
    t1 = time.perf_counter()
    gv, gs = D.generate_pairs(state, net, n_generated, cfg.stage_seed(f"generate-{tag}"),
                              cfg.diffusion.sample_steps, cfg.diffusion.sampler)
    t2 = time.perf_counter()
    ev = cfg.evaluation
    icfg = E.InversionConfig(ev.inversion_epochs, ev.inversion_batch_size, ev.inversion_lr,
                             cfg.stage_seed("inversion"))
    model, _ = E.train_inversion_lite(gs, gv, icfg)
    rep = E.pairwise_eval(model, test_seis, test_vel)
    t3 = time.perf_counter()
    return {"mae": rep.mae, "mse": rep.mse, "ssim": rep.ssim,
            "diffusion_loss": float(np.mean(state.losses[-100:])),
            "fid_velocity": E.eval_fid(corpus, gv, E.FeatureExtractorSpec("velocity", feature_dim=ev.feature_dim,
                                                                          seed=ev.extractor_seed)),
            "seconds": {"diffusion": t1 - t0, "generate": t2 - t1, "inversion": t3 - t2}}


def run_seed(seed: int, settings: ExperimentSettings = ExperimentSettings(), downstream: bool = True,
             log=print) -> dict:
    """Full comparison for one seed. Returns a JSON-ready dict of both arms' metrics."""
    set_deterministic(True)
    cfg = settings.run_config(seed)
    t0 = time.perf_counter()
    built = synthesize(cfg)
    train, man = built["train"]
    test, tman = built["test"]
    corpus = _normalized(train, man, "velocity")
    pv = _normalized(train, man, "velocity", paired_only=True)
    ps = _normalized(train, man, "seismic", paired_only=True)
    tv = _normalized(test, tman, "velocity")
    ts = _normalized(test, tman, "seismic")
    log(f"seed {seed}: synthesized in {time.perf_counter() - t0:.0f}s")

    ncfg = cfg.net_config()
    two = TwoHeadNet(ncfg, seed=cfg.stage_seed("net-init"))
    train_step1(two, corpus, cfg.train_config("step1"))
    two, reports, freeze = train_step2_auto(two, pv, ps, cfg.train_config("step2"))
    abl = TwoHeadNet(ncfg, seed=cfg.stage_seed("net-init"))
    train_onestep_ablation(abl, pv, ps, cfg.train_config("ablation"))
    res = {"seed": seed, "freeze": freeze, "val_mae": {r.freeze: r.val_mae for r in reports},
           "settings": asdict(settings),
           "two_step": {"reconstruction": pair_mae(two, tv, ts)},
           "ablation": {"reconstruction": pair_mae(abl, tv, ts)}}
    log(f"seed {seed}: reconstruction two-step {res['two_step']['reconstruction']['pair']:.4f} "
        f"ablation {res['ablation']['reconstruction']['pair']:.4f} (F={freeze})")
    if downstream:
        for tag, net in (("two_step", two), ("ablation", abl)):
            res[tag]["downstream"] = downstream_mae(net, corpus, tv, ts, cfg, tag, settings.n_generated)
            log(f"seed {seed}: {tag} downstream inversion MAE {res[tag]['downstream']['mae']:.4f}")
    res["seconds"] = time.perf_counter() - t0
    return res


def tally(results: list[dict]) -> dict:
    """Number of seeds in which the two-step arm has the lower MAE, per comparison."""
    wins = {"reconstruction": 0, "downstream": 0}
    for r in results:
        if r["two_step"]["reconstruction"]["pair"] < r["ablation"]["reconstruction"]["pair"]:
            wins["reconstruction"] += 1
        if "downstream" in r["two_step"] and r["two_step"]["downstream"]["mae"] < r["ablation"]["downstream"]["mae"]:
            wins["downstream"] += 1
    return wins
