"""The multi-view autoregressive decoder.

Llama-style blocks (RMSNorm pre-normalization, SwiGLU, AdaLN modulation),
causal attention with a decode cache, split self-attention that freezes the
context segment, per-token Plucker-ray shift position encoding, the image
warp controller, and a point-cloud shape encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import numcore as nc
from .numcore import Tensor
from .scenegen import CAPTION_VOCAB
from .sequence import L_TEXT, M_SHAPE, LayoutError

NEG_INF = -1e9  # additive mask value; large enough for any desk-scale logit
RMS_EPS = 1e-6
SHAPE_HIDDEN = 64
SHAPE_PE_FREQS = 4


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    codebook_size: int = 512
    n_views: int = 4
    h: int = 8
    w: int = 8
    l_text: int = L_TEXT
    m_shape: int = M_SHAPE
    text_vocab: int = len(CAPTION_VOCAB)
    spe_enabled: bool = True
    ssa_enabled: bool = True
    iwc_enabled: bool = True
    ssa_scope: str = "context"      # zero SA output on "context" or just "text"
    ssa_every_block: bool = True    # False: first block only (ablation)

    @property
    def vocab(self):
        # image codes + start + pad
        return self.codebook_size + 2

    @property
    def start_id(self):
        return self.codebook_size

    @property
    def pad_id(self):
        return self.codebook_size + 1

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    @property
    def ffn_hidden(self):
        base = (8 * self.d_model) // 3
        return ((base + 4) // 8) * 8

    @property
    def tokens_per_view(self):
        return self.h * self.w

    @property
    def gen_length(self):
        return self.n_views * self.tokens_per_view

    def validate(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        return ModelConfig(**d)


@dataclass
class ModelState:
    config: ModelConfig
    params: dict  # name -> Tensor, all requiring grad

    def named_parameters(self):
        return self.params


def _shape_input_dim():
    return 6 + 3 * 2 * SHAPE_PE_FREQS


def init_model(config: ModelConfig, seed=0) -> ModelState:
    """Fresh parameters: N(0, 0.02) for tables/projections, ones for gains,
    zeros for AdaLN, SPE and IWC output projections (identity at init)."""
    config.validate()
    rng = np.random.default_rng(seed)
    D = config.d_model
    F = config.ffn_hidden
    p = {}

    def normal(*shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    p["tok_emb"] = normal(config.vocab, D)
    p["text_emb"] = normal(config.text_vocab, D)
    p["pos_ctx"] = normal(config.l_text + config.m_shape, D)
    p["spe_w"] = zeros(6, D)
    p["null_cond"] = normal(D)
    # shape encoder: per-point MLP then max-pool and project to m slots
    sin = _shape_input_dim()
    p["shp_w1"] = normal(sin, SHAPE_HIDDEN)
    p["shp_b1"] = zeros(SHAPE_HIDDEN)
    p["shp_w2"] = normal(SHAPE_HIDDEN, SHAPE_HIDDEN)
    p["shp_b2"] = zeros(SHAPE_HIDDEN)
    p["shp_pool"] = normal(SHAPE_HIDDEN, config.m_shape * D)
    for l in range(config.n_layers):
        p[f"l{l}.wq"] = normal(D, D)
        p[f"l{l}.wk"] = normal(D, D)
        p[f"l{l}.wv"] = normal(D, D)
        p[f"l{l}.wo"] = normal(D, D)
        p[f"l{l}.g_attn"] = ones(D)
        p[f"l{l}.g_ffn"] = ones(D)
        p[f"l{l}.ffn_w1"] = normal(D, F)
        p[f"l{l}.ffn_w3"] = normal(D, F)
        p[f"l{l}.ffn_w2"] = normal(F, D)
        p[f"l{l}.ada_w"] = zeros(D, 6 * D)
        p[f"l{l}.ada_b"] = zeros(6 * D)
    # image warp controller
    for name in ("sa_wq", "sa_wk", "sa_wv", "sa_wo",
                 "ca_wk", "ca_wv", "ca_wo"):
        p[f"iwc.{name}"] = normal(D, D)
    p["iwc.ray_w"] = normal(6, D)
    p["iwc.ffn_w1"] = normal(D, F)
    p["iwc.ffn_w2"] = normal(F, D)
    # pre-normalization gains, matching the Llama-style main blocks; without
    # them the 0.02-scale init shrinks the chain's activations to nothing
    p["iwc.g_sa"] = ones(D)
    p["iwc.g_ca"] = ones(D)
    p["iwc.g_ffn"] = ones(D)
    p["iwc.g_out"] = ones(D)
    p["iwc.out"] = zeros(D, D)
    p["g_final"] = ones(D)
    p["head"] = normal(D, config.vocab)
    return ModelState(config, p)


# -- building blocks ----------------------------------------------------------


def rmsnorm(x: Tensor, gain: Tensor, eps=RMS_EPS) -> Tensor:
    ms = (x * x).mean(axis=-1, keepdims=True)
    return x * (ms + eps) ** -0.5 * gain


def swiglu_ffn(x: Tensor, w1: Tensor, w3: Tensor, w2: Tensor) -> Tensor:
    return ((x @ w1).silu() * (x @ w3)) @ w2


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).swapaxes(1, 2)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return x.swapaxes(1, 2).reshape(b, t, h * dh)


def attention(x, wq, wk, wv, wo, n_heads, mask=None, cache=None):
    """Multi-head scaled dot-product attention.

    `mask` is an additive (T, S) array (0 allowed, NEG_INF blocked). With a
    cache, keys/values of earlier positions are reused and extended in place.
    """
    q = _split_heads(x @ wq, n_heads)
    k = _split_heads(x @ wk, n_heads)
    v = _split_heads(x @ wv, n_heads)
    if cache is not None:
        if cache.get("k") is not None:
            k = nc.concat([cache["k"], k], axis=2)
            v = nc.concat([cache["v"], v], axis=2)
        cache["k"] = k.detach() if k.requires_grad else k
        cache["v"] = v.detach() if v.requires_grad else v
    # scaling q (not the T x S score matrix) avoids two large array passes
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = (q * scale) @ k.swapaxes(-1, -2)
    if mask is not None:
        scores = scores + Tensor(mask)
    weights = scores.softmax(axis=-1)
    return _merge_heads(weights @ v) @ wo


def ssa_merge(x: Tensor, sa_out: Tensor, n_zero: int) -> Tensor:
    """Split self-attention residual: X + concat(0 * O_ctx, O_rest).

    The first `n_zero` positions pass through bit-exactly.
    """
    t = x.shape[1]
    if n_zero > t:
        raise LayoutError("SSA split exceeds sequence length")
    keep = np.ones((1, t, 1))
    keep[:, :n_zero, :] = 0.0
    return x + sa_out * Tensor(keep)


def build_attention_mask(n_ctx, n_gen):
    """Context rows see only the context (mutually visible); generated rows
    see the whole context plus earlier generated rows (causal)."""
    t = n_ctx + n_gen
    mask = np.full((t, t), NEG_INF)
    mask[:n_ctx, :n_ctx] = 0.0
    gen = np.arange(n_ctx, t)
    mask[n_ctx:, :n_ctx] = 0.0
    tri = np.tril(np.ones((n_gen, n_gen), dtype=bool))
    mask[np.ix_(gen, gen)] = np.where(tri, 0.0, NEG_INF)
    return mask


def _ssa_zero_count(config, layout):
    if config.ssa_scope == "text":
        return layout.l_text
    return layout.context_length


def block(state, layer, x, cond_vec, n_ssa_zero, mask=None, cache=None,
          apply_ssa=True):
    """One decoder block: AdaLN-modulated attention + SwiGLU FFN."""
    p = state.params
    D = state.config.d_model
    ada = cond_vec @ p[f"l{layer}.ada_w"] + p[f"l{layer}.ada_b"]  # (B, 6D)
    b = ada.shape[0]
    ada = ada.reshape(b, 1, 6 * D)
    g1, b1, a1 = ada[:, :, 0:D], ada[:, :, D:2 * D], ada[:, :, 2 * D:3 * D]
    g2, b2, a2 = ada[:, :, 3 * D:4 * D], ada[:, :, 4 * D:5 * D], ada[:, :, 5 * D:6 * D]

    h = rmsnorm(x, p[f"l{layer}.g_attn"]) * (g1 + 1.0) + b1
    sa = attention(h, p[f"l{layer}.wq"], p[f"l{layer}.wk"], p[f"l{layer}.wv"],
                   p[f"l{layer}.wo"], state.config.n_heads, mask, cache)
    sa = sa * (a1 + 1.0)
    if apply_ssa and state.config.ssa_enabled and n_ssa_zero > 0:
        x = ssa_merge(x, sa, n_ssa_zero)
    else:
        x = x + sa
    h = rmsnorm(x, p[f"l{layer}.g_ffn"]) * (g2 + 1.0) + b2
    ff = swiglu_ffn(h, p[f"l{layer}.ffn_w1"], p[f"l{layer}.ffn_w3"],
                    p[f"l{layer}.ffn_w2"])
    return x + ff * (a2 + 1.0)


def run_blocks(state, x, cond_vec, n_ssa_zero, mask=None, caches=None):
    for l in range(state.config.n_layers):
        apply_ssa = state.config.ssa_every_block or l == 0
        cache = caches[l] if caches is not None else None
        x = block(state, l, x, cond_vec, n_ssa_zero, mask, cache, apply_ssa)
    return x


# -- condition encoders --------------------------------------------------------


def point_features(points, normals):
    """(k, 6 + sinusoidal positional features) input rows for the shape MLP."""
    feats = [points, normals]
    for f in range(SHAPE_PE_FREQS):
        feats.append(np.sin((2.0 ** f) * math.pi * points))
        feats.append(np.cos((2.0 ** f) * math.pi * points))
    return np.concatenate(feats, axis=-1)


def encode_shape(state, point_clouds):
    """Batch of point clouds -> (B, m, D) shape tokens.

    Per-point MLP, max-pool over points (permutation invariant), then a
    projection into the m fixed slots.
    """
    cfg = state.config
    p = state.params
    if any(pc.points.shape[0] == 0 for pc in point_clouds):
        raise ValueError("empty point cloud")
    raw = np.stack([point_features(pc.points, pc.normals) for pc in point_clouds])
    x = Tensor(raw)
    h = (x @ p["shp_w1"] + p["shp_b1"]).silu()
    h = (h @ p["shp_w2"] + p["shp_b2"]).silu()
    pooled = h.max(axis=1)                      # (B, hidden)
    tokens = pooled @ p["shp_pool"]             # (B, m*D)
    return tokens.reshape(len(point_clouds), cfg.m_shape, cfg.d_model)


def spe_embed(state, rays):
    """Project per-token Plucker rays (B, T, 6) to width-D additive encodings."""
    return Tensor(np.asarray(rays)) @ state.params["spe_w"]


def iwc(state, ref_codes, target_rays):
    """Image warp controller: FFN(CA(SA(X_ref), rays)) with a zero-init
    output projection, one residual vector per target image token.

    ref_codes: (B, h*w) int codes of the reference view (low-level features
    come from the code embedding table). target_rays: (B, T_tgt, 6).
    """
    cfg = state.config
    p = state.params
    x_ref = nc.embedding(p["tok_emb"], np.asarray(ref_codes))
    sa = attention(rmsnorm(x_ref, p["iwc.g_sa"]), p["iwc.sa_wq"],
                   p["iwc.sa_wk"], p["iwc.sa_wv"], p["iwc.sa_wo"],
                   cfg.n_heads)                       # bidirectional
    sa = sa + x_ref
    kv_in = rmsnorm(sa, p["iwc.g_ca"])
    q = _split_heads(Tensor(np.asarray(target_rays)) @ p["iwc.ray_w"], cfg.n_heads)
    k = _split_heads(kv_in @ p["iwc.ca_wk"], cfg.n_heads)
    v = _split_heads(kv_in @ p["iwc.ca_wv"], cfg.n_heads)
    scale = 1.0 / math.sqrt(cfg.head_dim)
    weights = ((q * scale) @ k.swapaxes(-1, -2)).softmax(axis=-1)
    ca = _merge_heads(weights @ v) @ p["iwc.ca_wo"]
    ff_in = rmsnorm(ca, p["iwc.g_ffn"])
    ff = ca + ((ff_in @ p["iwc.ffn_w1"]).silu() @ p["iwc.ffn_w2"])
    return rmsnorm(ff, p["iwc.g_out"]) @ p["iwc.out"]


# -- full forward ---------------------------------------------------------------


def _context_embedding(state, seqs):
    """Embed the [text | shape?] prefix; returns (B, n_ctx, D)."""
    cfg = state.config
    p = state.params
    layout = seqs[0].layout
    text_ids = np.stack([s.text_ids for s in seqs])
    x_text = nc.embedding(p["text_emb"], text_ids)
    x_text = x_text + p["pos_ctx"][0:layout.l_text]
    if layout.m_shape:
        shape_tokens = encode_shape(state, [s.point_cloud for s in seqs])
        shape_tokens = shape_tokens + p["pos_ctx"][cfg.l_text:cfg.l_text + layout.m_shape]
        return nc.concat([x_text, shape_tokens], axis=1)
    return x_text


def _iwc_residual(state, seqs):
    """(B, NT, D) residual aligned with the image-code stream; zero rows for
    the reference view (slot 1) and for samples without an image condition."""
    cfg = state.config
    hw = cfg.tokens_per_view
    ref_codes = np.stack([s.image_codes[:hw] for s in seqs])
    tgt_rays = np.stack([s.rays[1 + hw:] for s in seqs])   # slots 2..N
    res = iwc(state, ref_codes, tgt_rays)                  # (B, (N-1)hw, D)
    active = np.array([[[1.0]] if s.cond.image_ref else [[0.0]] for s in seqs])
    res = res * Tensor(active)
    zero_ref = Tensor(np.zeros((len(seqs), hw, cfg.d_model)))
    return nc.concat([zero_ref, res], axis=1)


def forward(state, seqs):
    """Teacher-forced forward pass over a batch of same-layout sequences.

    Returns logits (B, N*h*w, vocab): one row per generated position, from
    the start token through the next-to-last image token.
    """
    cfg = state.config
    if not seqs:
        raise LayoutError("empty batch")
    layout = seqs[0].layout
    for s in seqs:
        if (s.layout.m_shape != layout.m_shape or s.n_views != cfg.n_views
                or s.h != cfg.h or s.w != cfg.w):
            raise LayoutError("batch mixes sequence layouts")
    b = len(seqs)
    nt = cfg.gen_length
    n_ctx = layout.context_length

    # generated-segment inputs: [start, c_0 .. c_{NT-2}]
    gen_ids = np.empty((b, nt), dtype=np.int64)
    gen_ids[:, 0] = cfg.start_id
    for i, s in enumerate(seqs):
        gen_ids[i, 1:] = s.image_codes[:-1]
    x_gen = nc.embedding(state.params["tok_emb"], gen_ids)
    if cfg.spe_enabled:
        rays_in = np.stack([s.rays[:nt] for s in seqs])    # aligned with inputs
        x_gen = x_gen + spe_embed(state, rays_in)
    if cfg.iwc_enabled and any(s.cond.image_ref for s in seqs):
        # residual row t belongs to code t, fed at generated position 1 + t
        res = _iwc_residual(state, seqs)
        zero_row = Tensor(np.zeros((b, 1, cfg.d_model)))
        x_gen = x_gen + nc.concat([zero_row, res[:, : nt - 1]], axis=1)
    x_ctx = _context_embedding(state, seqs)
    x = nc.concat([x_ctx, x_gen], axis=1)

    cond_vec = _adaln_driver(state, x_ctx, seqs, n_ctx)
    mask = build_attention_mask(n_ctx, nt)
    x = run_blocks(state, x, cond_vec, _ssa_zero_count(cfg, layout), mask)
    x = rmsnorm(x, state.params["g_final"])
    return x[:, n_ctx:, :] @ state.params["head"]


# -- incremental decoding --------------------------------------------------------


@dataclass
class DecodeSession:
    caches: list           # per-layer {"k": Tensor|None, "v": Tensor|None}
    cond_vec: Tensor       # (1, D) AdaLN driver, fixed for the whole decode
    n_positions: int       # tokens consumed so far


def _head_logits(state, x):
    return rmsnorm(x, state.params["g_final"]) @ state.params["head"]


def decode_prefill(state, x_prefix, cond_vec, n_ctx, n_ssa_zero):
    """Run the full prefix once, fill the caches, and return the logits at
    the final prefix position (which predict the first generated token)."""
    caches = [{"k": None, "v": None} for _ in range(state.config.n_layers)]
    n_gen = x_prefix.shape[1] - n_ctx
    mask = build_attention_mask(n_ctx, n_gen)
    x = run_blocks(state, x_prefix, cond_vec, n_ssa_zero, mask, caches)
    session = DecodeSession(caches, cond_vec, x_prefix.shape[1])
    return session, _head_logits(state, x[:, -1:, :])


def decode_step(state, session, x_token):
    """Feed one generated-token embedding (1, 1, D); returns next logits."""
    x = run_blocks(state, x_token, session.cond_vec, 0, None, session.caches)
    session.n_positions += 1
    return _head_logits(state, x)


def _adaln_driver(state, x_ctx, seqs, n_ctx):
    """Mean-pooled context embedding per sample; a learned null vector when
    the sample carries no conditions at all."""
    pooled = x_ctx.mean(axis=1)                            # (B, D)
    has_cond = np.array([
        [1.0] if (s.cond.text or s.cond.shape or s.cond.image_ref) else [0.0]
        for s in seqs
    ])
    null = state.params["null_cond"].reshape(1, state.config.d_model)
    return pooled * Tensor(has_cond) + null * Tensor(1.0 - has_cond)
