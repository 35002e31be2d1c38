"""Training: teacher-forced cross-entropy, Shuffle-Views augmentation, the
progressive condition drop/combine policy, and versioned checkpoints."""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numcore import AdamW, Tensor
from .camera import ray_grid
from .model import ModelConfig, ModelState, forward, init_model
from .scenegen import WORD_TO_ID, render, sample_points
from .sequence import ConditionSet, build_sequence, sample_order
from .tokenizer import Codebook, DEFAULT_PATCH, tokenize_image

K_POINTS = 256


@dataclass
class TrainConfig:
    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    batch_size: int = 16
    total_iters: int = 3000
    ramp_iters: int = 1000
    seed: int = 0
    grad_clip: float = 1.0
    order_mode: str = "full"   # full | pairswap | identity (ShufV off)
    log_every: int = 50

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.ramp_iters > self.total_iters:
            raise ValueError("ramp cannot exceed total iterations")


# Paper-scale settings, kept as a documented preset only.
PAPER_PRESET = TrainConfig(batch_size=1024, total_iters=30000, ramp_iters=10000)


# -- loss ----------------------------------------------------------------------


def ar_loss(logits: Tensor, targets, pad_mask=None) -> Tensor:
    """Mean negative log-likelihood over non-pad positions.

    logits: (..., T, V); targets: int array (..., T); pad_mask: same shape as
    targets, 1 where the position counts.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ValueError("targets do not align with logits")
    if targets.min() < 0 or targets.max() >= logits.shape[-1]:
        raise ValueError("target id outside vocabulary")
    shift = logits.data.max(axis=-1, keepdims=True)  # constant: softmax shift
    z = logits - Tensor(shift)
    log_norm = z.exp().sum(axis=-1, keepdims=True).log()
    logp = z - log_norm
    gather = tuple(np.indices(targets.shape)) + (targets,)
    nll = -logp[gather]
    if pad_mask is None:
        return nll.mean()
    mask = np.asarray(pad_mask, dtype=np.float64)
    return (nll * Tensor(mask)).sum() / float(mask.sum())


# -- condition policy ------------------------------------------------------------


def drop_prob(iteration, ramp_iters, max_p=0.5):
    """Linear ramp 0 -> max_p over ramp_iters, flat afterwards."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    if ramp_iters <= 0:
        return max_p
    return min(max_p, max_p * iteration / ramp_iters)


def replacement_caption(image_ref, shape):
    """Instruction caption used when the text condition is dropped."""
    words = ["generate", "multi-view", "images"]
    if image_ref or shape:
        words += ["of", "the", "following"]
        if image_ref:
            words.append("<img>")
        if image_ref and shape:
            words.append("and")
        if shape:
            words.append("<shape>")
    return [WORD_TO_ID[w] for w in words]


@dataclass
class ConditionPolicy:
    ramp_iters: int = 1000
    max_p: float = 0.5
    allow_image: bool = True
    allow_shape: bool = True
    fixed: Optional[ConditionSet] = None  # overrides sampling entirely

    def sample(self, iteration, rng):
        if self.fixed is not None:
            return self.fixed
        p = drop_prob(iteration, self.ramp_iters, self.max_p)
        keep_text = rng.random() >= p
        image = shape = False
        if keep_text:
            if rng.random() < p:
                options = ([True] if self.allow_image else []) + \
                          ([False] if self.allow_shape else [])
                if options:
                    pick_image = options[int(rng.integers(0, len(options)))]
                    image, shape = pick_image, not pick_image
        else:
            image = self.allow_image and rng.random() < p
            shape = self.allow_shape and rng.random() < p
        return ConditionSet(text=keep_text, image_ref=image, shape=shape)


# -- samples -> sequences ---------------------------------------------------------


@dataclass
class SceneSample:
    """One scene with everything any condition combination might need."""
    scene: object
    caption_ids: list
    token_grids: list     # N TokenGrids in natural ring order
    view_rays: list       # N (h*w, 6) arrays
    point_cloud: object
    poses: list


def make_sample(scene, poses, codebook, h, w, patch=DEFAULT_PATCH,
                k_points=K_POINTS, images=None):
    """Render (or accept) N views and precompute tokens, rays and points."""
    from .scenegen import caption

    res = h * patch
    if images is None:
        images = [render(scene, pose, res) for pose in poses]
    grids = [tokenize_image(img, codebook, patch) for img in images]
    rays = [ray_grid(pose, h, w) for pose in poses]
    pc = sample_points(scene, k_points, seed=scene.seed)
    return SceneSample(scene, caption(scene), grids, rays, pc, list(poses))


def apply_condition_policy(sample, iteration, rng, policy, order_mode="full",
                           l_text=None, m_shape=None):
    """Draw a condition set and a view order, then build the sequence."""
    from .sequence import L_TEXT, M_SHAPE

    cond = policy.sample(iteration, rng)
    n = len(sample.token_grids)
    order = sample_order(n, rng, order_mode)
    text_ids = sample.caption_ids if cond.text else \
        replacement_caption(cond.image_ref, cond.shape)
    return build_sequence(sample.token_grids, sample.view_rays, order,
                          text_ids, cond, point_cloud=sample.point_cloud,
                          l_text=l_text if l_text is not None else L_TEXT,
                          m_shape=m_shape if m_shape is not None else M_SHAPE)


# -- optimization ------------------------------------------------------------------


def make_optimizer(state: ModelState, cfg: TrainConfig) -> AdamW:
    return AdamW(state.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                 weight_decay=cfg.weight_decay)


def train_step(batch, state, opt, grad_clip=1.0):
    """One forward/backward/AdamW update over a batch of sequences.

    Sequences are grouped by context layout (shape segment present or not)
    so each group runs as one batched forward.
    """
    groups = {}
    for seq in batch:
        groups.setdefault(seq.layout.m_shape, []).append(seq)
    total_tokens = sum(s.image_codes.size for s in batch)
    loss = None
    for seqs in groups.values():
        logits = forward(state, seqs)
        targets = np.stack([s.image_codes for s in seqs])
        part = ar_loss(logits, targets)
        weight = targets.size / total_tokens
        loss = part * weight if loss is None else loss + part * weight
    opt.zero_grad()
    loss.backward()
    opt.clip_grad_norm(grad_clip)
    opt.step()
    return loss.item()


def train_model(samples, state, cfg: TrainConfig, policy: ConditionPolicy,
                log_file=None, start_iter=0, opt=None):
    """Run the full training loop; returns (state, optimizer, loss history)."""
    if opt is None:
        opt = make_optimizer(state, cfg)
    history = []
    t0 = time.time()
    for it in range(start_iter, cfg.total_iters):
        # per-iteration stream so a resumed run replays the same batches
        rng = np.random.default_rng([cfg.seed, it])
        idx = rng.integers(0, len(samples), size=cfg.batch_size)
        mcfg = state.config
        batch = [apply_condition_policy(samples[i], it, rng, policy,
                                        cfg.order_mode, mcfg.l_text,
                                        mcfg.m_shape) for i in idx]
        loss = train_step(batch, state, opt, cfg.grad_clip)
        history.append(loss)
        if log_file is not None and (it % cfg.log_every == 0
                                     or it == cfg.total_iters - 1):
            p = policy.max_p if policy.fixed is not None else \
                drop_prob(it, policy.ramp_iters, policy.max_p)
            log_file.write(f"iter {it} loss {loss:.6f} p_drop {p:.4f} "
                           f"wall {time.time() - t0:.1f}\n")
            log_file.flush()
    return state, opt, history


# -- checkpoints --------------------------------------------------------------------

MAGIC = b"MVAR"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated, or incompatible checkpoint file."""


def _write_array(f, arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    f.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<I", d))
    f.write(arr.tobytes())


def _read_exact(f, n):
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint file")
    return buf


def _read_array(f):
    ndim = struct.unpack("<B", _read_exact(f, 1))[0]
    shape = tuple(struct.unpack("<I", _read_exact(f, 4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(f, count * 8), dtype="<f8").copy()
    return data.reshape(shape)


def save_checkpoint(path, state: ModelState, codebook: Codebook, opt=None,
                    extra=None):
    """Versioned binary container: config, codebook, named parameter blobs,
    and (optionally) the AdamW state. load(save(x)) is bit-identical."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        blob = json.dumps({"model": state.config.to_dict(),
                           "extra": extra or {}},
                          sort_keys=True).encode()
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<II", codebook.size, codebook.dim))
        f.write(np.ascontiguousarray(codebook.entries, dtype="<f8").tobytes())
        names = sorted(state.params)
        f.write(struct.pack("<I", len(names)))
        for name in names:
            raw = name.encode()
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            _write_array(f, state.params[name].data)
        f.write(struct.pack("<B", 1 if opt is not None else 0))
        if opt is not None:
            f.write(struct.pack("<Q", opt.t))
            f.write(struct.pack("<5d", opt.lr, opt.beta1, opt.beta2, opt.eps,
                                opt.weight_decay))
            for name in names:
                _write_array(f, opt.m[name])
                _write_array(f, opt.v[name])


def load_checkpoint(path):
    """Returns (ModelState, Codebook, opt_state dict or None, extra dict)."""
    with open(path, "rb") as f:
        if _read_exact(f, 4) != MAGIC:
            raise CheckpointError("bad magic bytes: not an MVAR checkpoint")
        version = struct.unpack("<I", _read_exact(f, 4))[0]
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        blob_len = struct.unpack("<I", _read_exact(f, 4))[0]
        meta = json.loads(_read_exact(f, blob_len))
        config = ModelConfig.from_dict(meta["model"])
        v, c = struct.unpack("<II", _read_exact(f, 8))
        entries = np.frombuffer(_read_exact(f, v * c * 8), dtype="<f8").copy()
        codebook = Codebook(entries.reshape(v, c))
        n = struct.unpack("<I", _read_exact(f, 4))[0]
        params = {}
        for _ in range(n):
            ln = struct.unpack("<H", _read_exact(f, 2))[0]
            name = _read_exact(f, ln).decode()
            params[name] = Tensor(_read_array(f), requires_grad=True)
        reference = init_model(config, seed=0).params
        if set(params) != set(reference):
            missing = set(reference) ^ set(params)
            raise CheckpointError(f"parameter set mismatch: {sorted(missing)}")
        for name, ref in reference.items():
            if params[name].data.shape != ref.data.shape:
                raise CheckpointError(
                    f"shape mismatch for parameter '{name}': checkpoint "
                    f"{params[name].data.shape} vs config {ref.data.shape}")
        opt_state = None
        if struct.unpack("<B", _read_exact(f, 1))[0]:
            t = struct.unpack("<Q", _read_exact(f, 8))[0]
            lr, b1, b2, eps, wd = struct.unpack("<5d", _read_exact(f, 40))
            m, vmom = {}, {}
            for name in sorted(params):
                m[name] = _read_array(f)
                vmom[name] = _read_array(f)
            opt_state = {"t": t, "lr": lr, "beta1": b1, "beta2": b2,
                         "eps": eps, "weight_decay": wd, "m": m, "v": vmom}
    return ModelState(config, params), codebook, opt_state, meta["extra"]


def restore_optimizer(state: ModelState, opt_state) -> AdamW:
    opt = AdamW(state.params, lr=opt_state["lr"], beta1=opt_state["beta1"],
                beta2=opt_state["beta2"], eps=opt_state["eps"],
                weight_decay=opt_state["weight_decay"])
    opt.t = opt_state["t"]
    for name in opt.m:
        opt.m[name] = opt_state["m"][name].copy()
        opt.v[name] = opt_state["v"][name].copy()
    return opt
