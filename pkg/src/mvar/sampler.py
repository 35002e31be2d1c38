"""Autoregressive generation under any condition combination (t2mv, i2mv,
shape2mv and mixtures), with an incremental decode cache."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numcore as nc
from .numcore import Tensor, no_grad
from .camera import ray_grid
from .model import (decode_prefill, decode_step, iwc,
                    spe_embed, _adaln_driver, _context_embedding,
                    _ssa_zero_count)
from .scenegen import PointCloud
from .sequence import ConditionSet, pack_context
from .tokenizer import decode as decode_tokens
from .tokenizer import DEFAULT_PATCH, TokenGrid, tokenize_image
from .trainer import replacement_caption


class MissingConditionError(ValueError):
    """A required condition for the requested mode is absent."""


@dataclass(frozen=True)
class DecodeConfig:
    temperature: float = 1.0
    top_k: int = 64
    seed: int = 0
    mode: str = "greedy"   # greedy | sampled

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


@dataclass
class GenerationConditions:
    caption_ids: Optional[list] = None
    ref_image: Optional[np.ndarray] = None
    ref_pose: Optional[object] = None
    point_cloud: Optional[PointCloud] = None


@dataclass
class GenerationResult:
    token_grids: list          # n TokenGrids in natural (requested) view order
    images: list               # decoded images, same order
    order: tuple               # slot order used (identity at inference)
    log_probs: np.ndarray      # one entry per *generated* token
    n_prefilled: int           # leading tokens that were prefilled, not sampled


def prefill_reference(ref_image, codebook, patch=DEFAULT_PATCH):
    """Tokenize the reference image; its codes occupy view slot 1."""
    return tokenize_image(ref_image, codebook, patch)


def _pick_token(logits, cfg, rng, n_codes):
    """Greedy or top-k/temperature pick over the code vocabulary only."""
    logits = logits[:n_codes].copy()
    shifted = logits - logits.max()
    log_probs = shifted - math.log(np.exp(shifted).sum())
    if cfg.mode == "greedy" or cfg.temperature == 0.0:
        tok = int(np.argmax(logits))
        return tok, float(log_probs[tok])
    scaled = logits / cfg.temperature
    k = min(cfg.top_k, n_codes)
    keep = np.argsort(scaled)[-k:]
    probs = np.exp(scaled[keep] - scaled[keep].max())
    probs /= probs.sum()
    tok = int(keep[rng.choice(k, p=probs)])
    return tok, float(log_probs[tok])


def generate(state, codebook, conditions, poses, cfg=DecodeConfig(),
             patch=DEFAULT_PATCH):
    """Decode n views left-to-right in identity ring order.

    i2mv prefills the reference view into slot 1 (its pose must be the first
    pose) and, when the controller is enabled, injects warp residuals for all
    generated views. Returns all n*h*w tokens plus decoded images.
    """
    mcfg = state.config
    n = len(poses)
    hw = mcfg.tokens_per_view
    has_text = conditions.caption_ids is not None
    has_image = conditions.ref_image is not None
    has_shape = conditions.point_cloud is not None
    if has_image and conditions.ref_pose is None:
        raise MissingConditionError("i2mv needs the reference view's pose")
    if not (has_text or has_image or has_shape):
        # unconditional decode still works: instruction caption only
        pass

    poses = list(poses)
    if has_image:
        poses[0] = conditions.ref_pose
    rays = [ray_grid(p, mcfg.h, mcfg.w) for p in poses]
    ray_seq = np.concatenate([np.zeros((1, 6))] + rays)   # start + tokens

    cond = ConditionSet(text=has_text, image_ref=has_image, shape=has_shape)
    text_ids = conditions.caption_ids if has_text else \
        replacement_caption(has_image, has_shape)
    padded, layout = pack_context(text_ids, has_shape,
                                  mcfg.l_text, mcfg.m_shape)

    ref_grid = None
    if has_image:
        ref_grid = prefill_reference(conditions.ref_image, codebook, patch)
        if ref_grid.h != mcfg.h or ref_grid.w != mcfg.w:
            raise MissingConditionError("reference resolution mismatch")

    rng = np.random.default_rng(cfg.seed)
    n_total = n * hw
    codes = np.zeros(n_total, dtype=np.int64)
    n_prefilled = 0
    if has_image:
        codes[:hw] = ref_grid.codes
        n_prefilled = hw

    with no_grad():
        seq_proxy = _SequenceProxy(padded, conditions.point_cloud, cond,
                                   layout, n, mcfg.h, mcfg.w)
        x_ctx = _context_embedding(state, [seq_proxy])
        cond_vec = _adaln_driver(state, x_ctx, [seq_proxy], layout.context_length)

        iwc_res = None
        if has_image and mcfg.iwc_enabled:
            tgt_rays = np.concatenate(rays[1:])[None]     # slots 2..n
            iwc_res = iwc(state, ref_grid.codes[None], tgt_rays).data[0]

        def token_embedding(pos):
            """Embedding of the input token at generated position `pos`
            (0 = start token, 1 + t = image code t)."""
            tok = mcfg.start_id if pos == 0 else int(codes[pos - 1])
            emb = nc.embedding(state.params["tok_emb"],
                               np.array([[tok]]))
            if mcfg.spe_enabled:
                emb = emb + spe_embed(state, ray_seq[None, pos:pos + 1])
            if iwc_res is not None and pos >= 1 + hw:
                emb = emb + Tensor(iwc_res[None, None, pos - 1 - hw])
            return emb

        n_prefix_gen = 1 + n_prefilled
        prefix = nc.concat([x_ctx] + [token_embedding(p)
                                      for p in range(n_prefix_gen)], axis=1)
        session, logits = decode_prefill(
            state, prefix, cond_vec, layout.context_length,
            _ssa_zero_count(mcfg, layout))
        log_probs = []
        for t in range(n_prefilled, n_total):
            tok, lp = _pick_token(logits.data[0, -1], cfg, rng,
                                  mcfg.codebook_size)
            codes[t] = tok
            log_probs.append(lp)
            if t + 1 < n_total:
                logits = decode_step(state, session, token_embedding(t + 1))

    grids = [TokenGrid(mcfg.h, mcfg.w, codes[v * hw:(v + 1) * hw].copy())
             for v in range(n)]
    images = [decode_tokens(g, codebook, patch) for g in grids]
    return GenerationResult(grids, images, tuple(range(1, n + 1)),
                            np.array(log_probs), n_prefilled)


@dataclass
class _SequenceProxy:
    """Just enough of a TrainingSequence for context embedding and AdaLN."""
    text_ids: np.ndarray
    point_cloud: Optional[PointCloud]
    cond: ConditionSet
    layout: object
    n_views: int
    h: int
    w: int
