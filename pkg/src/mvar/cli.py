"""Command-line surface: dataset generation, training, sampling, evaluation,
experiments, and checkpoint inspection.

Exit codes: 0 ok, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import os
import sys

import numpy as np

from .data import DataError, load_dataset, write_dataset
from .experiments import (EXPERIMENTS, ExperimentConfig, evaluate,
                          run_experiment, task_policy, build_samples)
from .metrics import MetricReport
from .model import ModelConfig, build_attention_mask, init_model
from .numcore import NumericsError
from .sampler import DecodeConfig, GenerationConditions, MissingConditionError, generate
from .scenegen import (WORD_TO_ID, make_pose, make_scene, pose_ring,
                       sample_points, write_ppm, read_ppm)
from .sequence import pack_context
from .tokenizer import palette_codebook
from .trainer import (CheckpointError, TrainConfig, load_checkpoint,
                      save_checkpoint, train_model)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def _parse_seed_list(text):
    """'A..B' (half-open range) or comma-separated integers."""
    if ".." in text:
        a, b = text.split("..")
        return list(range(int(a), int(b)))
    return [int(x) for x in text.split(",") if x]


def _coerce(value, target_type):
    if target_type is bool:
        return value.strip().lower() in ("1", "true", "yes", "on")
    return target_type(value)


def _section_into(cls_defaults, section):
    """Overlay a configparser section onto a dataclass instance."""
    fields = {f.name: f.type for f in dataclasses.fields(cls_defaults)}
    typemap = {f.name: type(getattr(cls_defaults, f.name))
               for f in dataclasses.fields(cls_defaults)}
    updates = {}
    for key, value in section.items():
        if key not in fields:
            raise DataError(f"unknown config key '{key}'")
        updates[key] = _coerce(value, typemap[key])
    return dataclasses.replace(cls_defaults, **updates)


def read_config(path):
    """key=value config with [model], [train], [experiment] sections."""
    if not os.path.exists(path):
        raise DataError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    parser.read(path)
    model = ModelConfig()
    train = TrainConfig()
    exp = ExperimentConfig()
    if parser.has_section("model"):
        model = _section_into(model, parser["model"])
    if parser.has_section("train"):
        train = _section_into(train, parser["train"])
    extras = {}
    if parser.has_section("experiment"):
        sec = dict(parser["experiment"])
        if "train_seeds" in sec:
            extras["train_seeds"] = _parse_seed_list(sec.pop("train_seeds"))
        if "eval_seeds" in sec:
            extras["eval_seeds"] = _parse_seed_list(sec.pop("eval_seeds"))
        for key in ("task",):
            if key in sec:
                extras[key] = sec.pop(key)
        for key in ("patch", "k_points", "init_seed"):
            if key in sec:
                extras[key] = int(sec.pop(key))
        if sec:
            raise DataError(f"unknown experiment keys: {sorted(sec)}")
    return dataclasses.replace(exp, model=model, train=train, **extras)


def _cmd_gen_data(args):
    seeds = _parse_seed_list(args.seeds)
    write_dataset(args.out, seeds, n_views=args.views, res=args.res)
    print(f"wrote {len(seeds)} scenes x {args.views} views to {args.out}")
    return EXIT_OK


def _cmd_train(args):
    cfg = read_config(args.config)
    codebook = palette_codebook()
    dataset = load_dataset(args.data) if args.data else None
    seeds = cfg.train_seeds
    if dataset is not None:
        seeds = [r.seed for r in dataset.records]
    samples = build_samples(seeds, cfg.model, codebook, patch=cfg.patch,
                            k_points=cfg.k_points, dataset=dataset)
    state = init_model(cfg.model, seed=cfg.init_seed)
    policy = task_policy(cfg.task, cfg.train)
    state, opt, _ = train_model(samples, state, cfg.train, policy,
                                log_file=sys.stdout)
    save_checkpoint(args.out, state, codebook, opt,
                    extra={"task": cfg.task, "iters": cfg.train.total_iters})
    print(f"saved checkpoint to {args.out}")
    return EXIT_OK


def _cmd_sample(args):
    state, codebook, _, _ = load_checkpoint(args.ckpt)
    n_views = args.views or state.config.n_views
    poses = pose_ring(n_views)
    conditions = GenerationConditions()
    if args.mode == "t2mv":
        if not args.caption:
            raise DataError("t2mv needs --caption")
        words = args.caption.lower().split()
        unknown = [w for w in words if w not in WORD_TO_ID]
        if unknown:
            raise DataError(f"words outside the caption vocabulary: {unknown}")
        conditions.caption_ids = [WORD_TO_ID[w] for w in words]
    elif args.mode == "i2mv":
        if not args.ref or not args.ref_pose:
            raise DataError("i2mv needs --ref and --ref-pose")
        conditions.ref_image = read_ppm(args.ref)
        az, el = (float(x) for x in args.ref_pose.split(","))
        conditions.ref_pose = make_pose(az, el)
    elif args.mode == "shape2mv":
        if args.shape_seed is None:
            raise DataError("shape2mv needs --shape-seed")
        scene = make_scene(args.shape_seed)
        conditions.point_cloud = sample_points(scene, 256, seed=args.shape_seed)
    decode_cfg = DecodeConfig(temperature=args.temperature, top_k=args.top_k,
                              seed=args.seed,
                              mode="sampled" if args.sampled else "greedy")
    result = generate(state, codebook, conditions, poses, decode_cfg)
    os.makedirs(args.out, exist_ok=True)
    for v, img in enumerate(result.images):
        write_ppm(os.path.join(args.out, f"view{v}.ppm"), img)
    with open(os.path.join(args.out, "manifest.txt"), "w") as f:
        f.write(f"order {','.join(str(s) for s in result.order)}\n")
        for p in poses:
            f.write(f"pose azimuth {p.azimuth:.6g} elevation {p.elevation:.6g}\n")
        f.write(f"generated_tokens {len(result.log_probs)}\n")
        f.write(f"prefilled_tokens {result.n_prefilled}\n")
        f.write(f"mean_log_prob {float(np.mean(result.log_probs)):.6f}\n")
    print(f"wrote {len(result.images)} views to {args.out}")
    return EXIT_OK


def _cmd_eval(args):
    state, codebook, _, extra = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    task = args.mode or extra.get("task", "t2mv")
    if task == "x2mv":
        task = "t2mv"
    poses = dataset.poses()
    seeds = [r.seed for r in dataset.records]
    metrics = evaluate(state, codebook, seeds, poses, task)
    report = MetricReport(f"eval-{task}", "dataset")
    report.variants[task] = metrics
    with open(args.report, "w") as f:
        f.write(report.to_text())
    print(report.to_text(), end="")
    return EXIT_OK


def _cmd_experiment(args):
    cfg = read_config(args.config)
    report = run_experiment(args.name, cfg, out_dir=args.out,
                            log_file=sys.stdout)
    print(report.to_text(), end="")
    return EXIT_OK


def _cmd_inspect(args):
    state, codebook, _, _ = load_checkpoint(args.ckpt)
    cfg = state.config
    os.makedirs(args.out, exist_ok=True)
    padded, layout = pack_context([WORD_TO_ID["a"]], has_shape=cfg.m_shape > 0,
                                  l_text=cfg.l_text, m_shape=cfg.m_shape)
    n_ctx = layout.context_length
    mask = build_attention_mask(n_ctx, cfg.gen_length)
    img = np.where(mask == 0.0, 1.0, 0.0)[:, :, None] * np.ones(3)
    write_ppm(os.path.join(args.out, "attention_mask.ppm"), img)
    # layout strip: text gray, shape green, start white, one hue per view
    t = n_ctx + 1 + cfg.gen_length - 1
    strip = np.zeros((16, n_ctx + cfg.gen_length, 3))
    strip[:, :cfg.l_text] = (0.5, 0.5, 0.5)
    if layout.m_shape:
        strip[:, cfg.l_text:n_ctx] = (0.0, 0.8, 0.0)
    strip[:, n_ctx:n_ctx + 1] = (1.0, 1.0, 1.0)
    hues = [(0.9, 0.2, 0.2), (0.9, 0.9, 0.2), (0.2, 0.4, 0.9), (0.8, 0.3, 0.8),
            (0.3, 0.8, 0.8), (0.9, 0.6, 0.2)]
    hw = cfg.tokens_per_view
    for v in range(cfg.n_views):
        lo = n_ctx + 1 + v * hw
        strip[:, lo:lo + hw - (1 if v == cfg.n_views - 1 else 0)] = \
            hues[v % len(hues)]
    write_ppm(os.path.join(args.out, "sequence_layout.ppm"), strip)
    print(f"wrote diagrams to {args.out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mvar",
        description="Multi-view autoregressive image generation at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a procedural dataset directory")
    p.add_argument("--seeds", required=True, help="A..B range or comma list")
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--res", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--data", default=None, help="dataset dir (else renders inline)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sample", help="generate multi-view images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", choices=("t2mv", "i2mv", "shape2mv"),
                   required=True)
    p.add_argument("--caption")
    p.add_argument("--ref", help="reference image (PPM)")
    p.add_argument("--ref-pose", help="AZ,EL in degrees")
    p.add_argument("--shape-seed", type=int)
    p.add_argument("--views", type=int, default=None)
    p.add_argument("--sampled", action="store_true",
                   help="top-k/temperature sampling instead of greedy")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-k", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--mode", choices=("t2mv", "i2mv", "shape2mv"))
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("experiment", help="run a named experiment")
    p.add_argument("--name", choices=EXPERIMENTS, required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_experiment)

    p = sub.add_parser("inspect", help="attention-mask and layout diagrams")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_inspect)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except (DataError, CheckpointError, MissingConditionError,
            FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericsError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
