"""Training/inference sequence assembly.

Layout is always [text | shape? | start | image tokens]. Image tokens of the
N views are chained view-by-view; Shuffle-Views places view n at slot S_n and
reorders the per-token rays by the same permutation so every token keeps the
ray of the view it came from.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .scenegen import PAD_ID, PointCloud

L_TEXT = 16       # fixed text-segment budget (pad id fills the tail)
M_SHAPE = 8       # shape tokens when the shape condition is active


class LayoutError(ValueError):
    """Sequence segments violate the configured layout."""


def chain_index(n, i, j, h, w):
    """Flattened 1-based position of view n's cell (i, j): (n-1)hw+(i-1)w+j."""
    if not (1 <= i <= h and 1 <= j <= w) or n < 1:
        raise ValueError(f"chain_index out of range: n={n} i={i} j={j}")
    return (n - 1) * h * w + (i - 1) * w + j


def sample_order(n_views, rng, mode="full"):
    """A view order S (1-based): S[n-1] is the slot view n occupies.

    mode: 'full' draws from all n! permutations, 'pairswap' from the identity
    plus a single random transposition (the n(n-1)/2-sized family), 'identity'
    returns the natural order.
    """
    if n_views < 1:
        raise ValueError("need at least one view")
    if mode == "identity" or n_views == 1:
        return tuple(range(1, n_views + 1))
    if mode == "full":
        return tuple(int(x) + 1 for x in rng.permutation(n_views))
    if mode == "pairswap":
        i = int(rng.integers(0, n_views))
        j = int(rng.integers(0, n_views - 1))
        j += j >= i
        order = list(range(1, n_views + 1))
        order[i], order[j] = order[j], order[i]
        return tuple(order)
    raise ValueError(f"unknown order mode: {mode}")


@dataclass(frozen=True)
class ConditionSet:
    text: bool = True
    image_ref: bool = False
    shape: bool = False
    ref_slot: int = 1  # 1-based slot of the reference view when image_ref


@dataclass
class ContextLayout:
    """Index bookkeeping for the [text | shape? | start] prefix."""
    l_text: int
    m_shape: int       # 0 when the shape condition is absent

    @property
    def start_index(self):
        return self.l_text + self.m_shape

    @property
    def context_length(self):
        return self.l_text + self.m_shape


def pack_context(text_ids, has_shape, l_text=L_TEXT, m_shape=M_SHAPE):
    """Pad text ids to the fixed budget and return (padded ids, layout)."""
    ids = list(text_ids)
    if len(ids) > l_text:
        raise LayoutError(f"caption of {len(ids)} words exceeds budget {l_text}")
    padded = np.full(l_text, PAD_ID, dtype=np.int64)
    padded[: len(ids)] = ids
    return padded, ContextLayout(l_text, m_shape if has_shape else 0)


@dataclass
class TrainingSequence:
    text_ids: np.ndarray                  # (l_text,), padded
    point_cloud: Optional[PointCloud]     # present iff cond.shape
    image_codes: np.ndarray               # (N*h*w,), slot order
    rays: np.ndarray                      # (1 + N*h*w, 6); row 0 = start token
    view_order: tuple                     # S
    cond: ConditionSet
    layout: ContextLayout
    n_views: int
    h: int
    w: int

    @property
    def tokens_per_view(self):
        return self.h * self.w

    def slot_codes(self, slot):
        """Codes occupying 1-based sequence slot `slot`."""
        hw = self.tokens_per_view
        return self.image_codes[(slot - 1) * hw : slot * hw]

    def slot_rays(self, slot):
        hw = self.tokens_per_view
        return self.rays[1 + (slot - 1) * hw : 1 + slot * hw]

    def views_in_natural_order(self):
        """Undo Shuffle-Views: view n's codes, for n = 1..N."""
        return [self.slot_codes(self.view_order[n - 1]) for n in range(1, self.n_views + 1)]


def build_sequence(views, rays, order, text_ids, cond, point_cloud=None,
                   l_text=L_TEXT, m_shape=M_SHAPE):
    """Assemble a TrainingSequence from per-view token grids and ray grids.

    `views` and `rays` are in natural view order; `order` is the ShufV
    permutation S. Slot S_n receives view n's codes and rays.
    """
    n = len(views)
    if len(rays) != n or len(order) != n or sorted(order) != list(range(1, n + 1)):
        raise LayoutError("views, rays and order must describe the same N views")
    h, w = views[0].h, views[0].w
    hw = h * w
    codes = np.empty(n * hw, dtype=np.int64)
    ray_seq = np.zeros((1 + n * hw, 6))
    for view_idx, slot in enumerate(order):
        grid = views[view_idx]
        r = np.asarray(rays[view_idx])
        if grid.h != h or grid.w != w or r.shape != (hw, 6):
            raise LayoutError("all views must share the same grid extents")
        codes[(slot - 1) * hw : slot * hw] = grid.codes
        ray_seq[1 + (slot - 1) * hw : 1 + slot * hw] = r
    if cond.shape and point_cloud is None:
        raise LayoutError("shape condition requires a point cloud")
    padded, layout = pack_context(text_ids, cond.shape, l_text, m_shape)
    return TrainingSequence(
        text_ids=padded,
        point_cloud=point_cloud if cond.shape else None,
        image_codes=codes,
        rays=ray_seq,
        view_order=tuple(order),
        cond=cond,
        layout=layout,
        n_views=n,
        h=h,
        w=w,
    )
