"""Plucker-ray camera conditioning: per-token ray grids and their 6-vector
(moment, direction) form. The learned ray-to-width projection lives in the
model; this module is pure geometry."""

from __future__ import annotations

import numpy as np


def plucker(o, d):
    """(o x d, d / ||d||) for a ray with origin o and direction d."""
    o = np.asarray(o, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    norm = np.linalg.norm(d)
    if norm == 0.0:
        raise ValueError("ray direction must be nonzero")
    d = d / norm
    return np.concatenate([np.cross(o, d), d])


def ray_grid(pose, h, w):
    """One Plucker ray per token cell, at the cell's patch center.

    Orthographic camera: all directions equal the viewing direction and
    origins sweep the image plane. Returns (h*w, 6), row-major over cells.
    """
    right, up, forward = pose.axes()
    s = pose.scale
    us = (np.arange(w) + 0.5) / w * 2 * s - s
    vs = -((np.arange(h) + 0.5) / h * 2 * s - s)
    origins = (np.array(pose.origin)[None, None, :]
               + us[None, :, None] * right[None, None, :]
               + vs[:, None, None] * up[None, None, :])
    origins = origins.reshape(-1, 3)
    d = forward / np.linalg.norm(forward)
    moments = np.cross(origins, d[None, :])
    return np.concatenate([moments, np.broadcast_to(d, origins.shape)], axis=1)
