"""The experiment harness: trains (or loads) a model per task, evaluates it
on held-out scenes, and emits metric reports mirroring the ablation axes
(image-condition module, view shuffling, split attention, ray encoding)."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset
from .metrics import MetricReport, VariantMetrics, config_fingerprint, \
    exact_match, psnr, ssim
from .model import ModelConfig, init_model
from .sampler import DecodeConfig, GenerationConditions, generate
from .scenegen import make_scene, pose_ring, render, sample_points, \
    caption, caption_text, write_ppm
from .sequence import ConditionSet
from .tokenizer import DEFAULT_PATCH, palette_codebook, tokenize_image
from .trainer import ConditionPolicy, TrainConfig, make_sample, train_model

TASKS = ("t2mv", "i2mv", "shape2mv", "x2mv")
EXPERIMENTS = ("t2mv", "i2mv", "shape2mv",
               "ablate-ssa", "ablate-spe", "ablate-shufv", "ablate-iwc")


def worker_count():
    """Parallelism cap from MVAR_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("MVAR_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    train_seeds: list = field(default_factory=lambda: list(range(16)))
    eval_seeds: list = field(default_factory=lambda: list(range(1000, 1016)))
    task: str = "t2mv"
    patch: int = DEFAULT_PATCH
    k_points: int = 256
    init_seed: int = 0

    def fingerprint(self):
        return config_fingerprint(self.model.to_dict(),
                                  vars(self.train),
                                  {"train_seeds": list(self.train_seeds),
                                   "eval_seeds": list(self.eval_seeds),
                                   "task": self.task,
                                   "init_seed": self.init_seed})


def task_policy(task, train_cfg):
    if task == "t2mv":
        return ConditionPolicy(fixed=ConditionSet(text=True))
    if task == "i2mv":
        return ConditionPolicy(fixed=ConditionSet(text=False, image_ref=True))
    if task == "shape2mv":
        return ConditionPolicy(fixed=ConditionSet(text=False, shape=True))
    if task == "x2mv":
        return ConditionPolicy(ramp_iters=train_cfg.ramp_iters)
    raise ValueError(f"unknown task {task}")


def unique_caption_seeds(count, start=0):
    """First `count` seeds whose templated captions are pairwise distinct."""
    seen = set()
    seeds = []
    seed = start
    while len(seeds) < count:
        text = caption_text(make_scene(seed))
        if text not in seen:
            seen.add(text)
            seeds.append(seed)
        seed += 1
    return seeds


def build_samples(seeds, model_cfg, codebook, poses=None, patch=DEFAULT_PATCH,
                  k_points=256, dataset: Dataset | None = None):
    if dataset is not None:
        by_seed = {r.seed: r for r in dataset.records}
        poses = dataset.poses()
        return [make_sample(make_scene(s), poses, codebook, model_cfg.h,
                            model_cfg.w, patch, k_points,
                            images=by_seed[s].images)
                for s in seeds]
    if poses is None:
        poses = pose_ring(model_cfg.n_views)
    return [make_sample(make_scene(s), poses, codebook, model_cfg.h,
                        model_cfg.w, patch, k_points) for s in seeds]


def train_task(cfg: ExperimentConfig, codebook, dataset=None, log_file=None):
    samples = build_samples(cfg.train_seeds, cfg.model, codebook,
                            patch=cfg.patch, k_points=cfg.k_points,
                            dataset=dataset)
    state = init_model(cfg.model, seed=cfg.init_seed)
    policy = task_policy(cfg.task, cfg.train)
    state, opt, history = train_model(samples, state, cfg.train, policy,
                                      log_file=log_file)
    return state, opt, history


def _evaluate_scene(state, codebook, seed, poses, task, patch, k_points,
                    decode_cfg):
    scene = make_scene(seed)
    res = state.config.h * patch
    gt_images = [render(scene, p, res) for p in poses]
    gt_grids = [tokenize_image(img, codebook, patch) for img in gt_images]
    conditions = GenerationConditions()
    if task in ("t2mv", "x2mv"):
        conditions.caption_ids = caption(scene)
    if task == "i2mv":
        conditions.ref_image = gt_images[0]
        conditions.ref_pose = poses[0]
    if task == "shape2mv":
        conditions.point_cloud = sample_points(scene, k_points, seed=seed)
    result = generate(state, codebook, conditions, poses, decode_cfg, patch)
    first = 1 if task == "i2mv" else 0   # skip the prefilled reference view
    view_psnr = [psnr(result.images[v], gt_images[v])
                 for v in range(first, len(poses))]
    view_ssim = [ssim(result.images[v], gt_images[v])
                 for v in range(first, len(poses))]
    em = exact_match(result.token_grids[first:], gt_grids[first:])
    return view_psnr, view_ssim, em, result


def evaluate(state, codebook, eval_seeds, poses, task, patch=DEFAULT_PATCH,
             k_points=256, decode_cfg=DecodeConfig(mode="greedy"),
             sample_dir=None):
    """Greedy decode every eval scene; returns mean VariantMetrics.

    Scenes may be evaluated in parallel (MVAR_THREADS); results merge in
    seed order so reports are deterministic.
    """
    def run(seed):
        return _evaluate_scene(state, codebook, seed, poses, task, patch,
                               k_points, decode_cfg)

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, eval_seeds))
    else:
        results = [run(s) for s in eval_seeds]
    psnrs = np.array([r[0] for r in results])
    ssims = np.array([r[1] for r in results])
    ems = np.array([r[2] for r in results])
    if sample_dir is not None:
        os.makedirs(sample_dir, exist_ok=True)
        for seed, (_, _, _, result) in list(zip(eval_seeds, results))[:4]:
            for v, img in enumerate(result.images):
                write_ppm(os.path.join(sample_dir,
                                       f"gen{seed:08d}_view{v}.ppm"), img)
    return VariantMetrics(
        psnr_per_view=list(psnrs.mean(axis=0)),
        ssim_per_view=list(ssims.mean(axis=0)),
        psnr=float(psnrs.mean()),
        ssim=float(ssims.mean()),
        exact_match=float(ems.mean()),
    )


def _train_and_eval(cfg, codebook, dataset=None, log_file=None,
                    sample_dir=None):
    state, _, _ = train_task(cfg, codebook, dataset, log_file)
    poses = pose_ring(cfg.model.n_views) if dataset is None else dataset.poses()
    metrics = evaluate(state, codebook, cfg.eval_seeds, poses, cfg.task,
                       cfg.patch, cfg.k_points, sample_dir=sample_dir)
    return state, metrics


def run_experiment(name, cfg: ExperimentConfig, out_dir=None, dataset=None,
                   log_file=None):
    """Train/evaluate per experiment name; paired variants for ablations."""
    if name not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {name!r}; choose from {EXPERIMENTS}")
    codebook = palette_codebook()
    report = MetricReport(name, cfg.fingerprint())
    sample_dir = os.path.join(out_dir, "samples") if out_dir else None

    def variant(tag, vcfg):
        vdir = os.path.join(sample_dir, tag) if sample_dir else None
        _, metrics = _train_and_eval(vcfg, codebook, dataset, log_file, vdir)
        report.variants[tag] = metrics

    if name in ("t2mv", "i2mv", "shape2mv"):
        variant(name, replace(cfg, task=name))
    elif name == "ablate-iwc":
        base = replace(cfg, task="i2mv")
        variant("iwc", replace(base, model=replace(cfg.model, iwc_enabled=True)))
        variant("in_context",
                replace(base, model=replace(cfg.model, iwc_enabled=False)))
    elif name == "ablate-shufv":
        base = replace(cfg, task="i2mv")
        variant("shufv", replace(base, train=replace(cfg.train,
                                                     order_mode="full")))
        variant("no_shufv", replace(base, train=replace(cfg.train,
                                                        order_mode="identity")))
    elif name == "ablate-ssa":
        base = replace(cfg, task="t2mv")
        variant("ssa", replace(base, model=replace(cfg.model, ssa_enabled=True)))
        variant("no_ssa",
                replace(base, model=replace(cfg.model, ssa_enabled=False)))
    elif name == "ablate-spe":
        base = replace(cfg, task="t2mv")
        variant("spe", replace(base, model=replace(cfg.model, spe_enabled=True)))
        variant("no_spe",
                replace(base, model=replace(cfg.model, spe_enabled=False)))

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, f"report_{name}.txt"), "w") as f:
            f.write(report.to_text())
    return report
