"""Procedural scenes: seeded primitive layouts, orthographic ray-cast renders,
templated captions, and surface point-cloud sampling.

Everything here is a pure function of its arguments, so datasets regenerate
bit-identically from a seed list.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

# 8 palette colors, all on the 1/7 RGB lattice so the palette tokenizer is
# exact on flat regions. Background is lattice gray.
PALETTE = {
    "red": (7, 0, 0),
    "green": (0, 7, 0),
    "blue": (0, 0, 7),
    "yellow": (7, 7, 0),
    "cyan": (0, 7, 7),
    "magenta": (7, 0, 7),
    "white": (7, 7, 7),
    "orange": (7, 4, 0),
}
COLOR_NAMES = list(PALETTE)
KINDS = ["cube", "sphere", "cylinder"]
BACKGROUND = np.array([4 / 7, 4 / 7, 4 / 7])

# Caption vocabulary, shared with the text-condition embedding table.
CAPTION_VOCAB = (
    ["<pad>", "a", "and", "generate", "multi-view", "images", "of", "the",
     "following", "<img>", "<shape>"]
    + COLOR_NAMES
    + KINDS
)
WORD_TO_ID = {w: i for i, w in enumerate(CAPTION_VOCAB)}
PAD_ID = WORD_TO_ID["<pad>"]

DEFAULT_RADIUS = 3.0
DEFAULT_ORTHO_SCALE = 1.25
DEFAULT_ELEVATION = 30.0


@dataclass(frozen=True)
class Primitive:
    kind: str            # cube | sphere | cylinder
    center: tuple        # 3-vector inside [-1, 1]^3
    half_size: float     # in [0.1, 0.3]
    color: str           # palette name

    def rgb(self):
        return np.array(PALETTE[self.color], dtype=np.float64) / 7.0


@dataclass(frozen=True)
class Scene:
    primitives: tuple
    seed: int

    def to_dict(self):
        return {
            "seed": self.seed,
            "primitives": [
                {"kind": p.kind, "center": list(p.center),
                 "half_size": p.half_size, "color": p.color}
                for p in self.primitives
            ],
        }

    @staticmethod
    def from_dict(d):
        prims = tuple(
            Primitive(p["kind"], tuple(p["center"]), p["half_size"], p["color"])
            for p in d["primitives"]
        )
        return Scene(prims, d["seed"])


@dataclass(frozen=True)
class CameraPose:
    azimuth: float
    elevation: float
    origin: tuple          # camera position
    rotation: tuple        # 3x3 row-major (right, up, forward) rows
    scale: float           # orthographic half-width

    def axes(self):
        r = np.array(self.rotation).reshape(3, 3)
        return r[0], r[1], r[2]

    def to_dict(self):
        return {
            "azimuth": self.azimuth, "elevation": self.elevation,
            "origin": list(self.origin), "rotation": list(self.rotation),
            "scale": self.scale,
        }

    @staticmethod
    def from_dict(d):
        return CameraPose(d["azimuth"], d["elevation"], tuple(d["origin"]),
                          tuple(d["rotation"]), d["scale"])


def make_pose(azimuth, elevation=DEFAULT_ELEVATION, radius=DEFAULT_RADIUS,
              scale=DEFAULT_ORTHO_SCALE):
    """Camera on a sphere around the origin, looking at the origin (y-up)."""
    az = math.radians(azimuth)
    el = math.radians(elevation)
    origin = radius * np.array(
        [math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)]
    )
    forward = -origin / np.linalg.norm(origin)
    right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    rot = np.stack([right, up, forward])
    return CameraPose(azimuth, elevation, tuple(origin), tuple(rot.reshape(-1)), scale)


def pose_ring(n_views, elevation=DEFAULT_ELEVATION, radius=DEFAULT_RADIUS,
              scale=DEFAULT_ORTHO_SCALE):
    """n_views cameras with equally spaced azimuths at fixed elevation."""
    if n_views < 2:
        raise ValueError("pose_ring needs at least 2 views")
    return [make_pose(360.0 * i / n_views, elevation, radius, scale)
            for i in range(n_views)]


def make_scene(seed):
    """1-3 non-interpenetrating primitives, a pure function of the seed."""
    rng = np.random.default_rng(seed)
    count = int(rng.integers(1, 4))
    colors = rng.choice(len(COLOR_NAMES), size=count, replace=False)
    prims = []
    for i in range(count):
        for _ in range(1000):
            center = rng.uniform(-0.5, 0.5, size=3)
            half = float(rng.uniform(0.1, 0.3))
            ok = all(
                np.linalg.norm(center - np.array(p.center)) >= half + p.half_size
                for p in prims
            )
            if ok:
                break
        else:  # pragma: no cover - rejection always succeeds for <=3 prims
            raise RuntimeError("could not place primitive")
        kind = KINDS[int(rng.integers(0, len(KINDS)))]
        prims.append(Primitive(kind, tuple(center), half, COLOR_NAMES[int(colors[i])]))
    return Scene(tuple(prims), int(seed))


def caption(scene):
    """Templated caption word ids, e.g. 'a red cube and a blue sphere'."""
    words = []
    for i, p in enumerate(scene.primitives):
        if i:
            words.append("and")
        words += ["a", p.color, p.kind]
    return [WORD_TO_ID[w] for w in words]


def caption_text(scene):
    ids = caption(scene)
    return " ".join(CAPTION_VOCAB[i] for i in ids)


# -- ray casting -------------------------------------------------------------

def _hit_sphere(origins, d, center, r):
    oc = origins - center
    b = oc @ d
    c = np.sum(oc * oc, axis=1) - r * r
    disc = b * b - c
    hit = disc >= 0
    t = np.where(hit, -b - np.sqrt(np.maximum(disc, 0.0)), np.inf)
    return np.where(hit & (t > 0), t, np.inf)


def _hit_box(origins, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    # axes where the ray is parallel: inside the slab or never
    parallel = d == 0
    inside = (origins >= lo) & (origins <= hi)
    t1 = np.where(parallel, np.where(inside, -np.inf, np.inf), t1)
    t2 = np.where(parallel, np.where(inside, np.inf, -np.inf), t2)
    tmin = np.minimum(t1, t2).max(axis=1)
    tmax = np.maximum(t1, t2).min(axis=1)
    hit = (tmax >= tmin) & (tmax > 0)
    return np.where(hit, np.where(tmin > 0, tmin, tmax), np.inf)


def _hit_cylinder(origins, d, center, r, hh):
    # vertical axis (world y); side surface then the two caps
    ox = origins[:, 0] - center[0]
    oz = origins[:, 2] - center[2]
    a = d[0] * d[0] + d[2] * d[2]
    best = np.full(len(origins), np.inf)
    if a > 1e-12:
        b = ox * d[0] + oz * d[2]
        c = ox * ox + oz * oz - r * r
        disc = b * b - a * c
        ok = disc >= 0
        t = np.where(ok, (-b - np.sqrt(np.maximum(disc, 0.0))) / a, np.inf)
        y = origins[:, 1] + t * d[1] - center[1]
        side = ok & (t > 0) & (np.abs(y) <= hh)
        best = np.where(side, t, best)
    if abs(d[1]) > 1e-12:
        for sign in (-1.0, 1.0):
            t = (center[1] + sign * hh - origins[:, 1]) / d[1]
            px = origins[:, 0] + t * d[0] - center[0]
            pz = origins[:, 2] + t * d[2] - center[2]
            cap = (t > 0) & (px * px + pz * pz <= r * r)
            best = np.where(cap & (t < best), t, best)
    return best


def _primitive_hits(prim, origins, d):
    c = np.array(prim.center)
    h = prim.half_size
    if prim.kind == "sphere":
        return _hit_sphere(origins, d, c, h)
    if prim.kind == "cube":
        return _hit_box(origins, d, c - h, c + h)
    return _hit_cylinder(origins, d, c, h, h)


def render(scene, pose, res):
    """Orthographic ray-cast render; nearest primitive wins per pixel."""
    right, up, forward = pose.axes()
    s = pose.scale
    # image rows go top to bottom: v decreases with the row index
    coords = (np.arange(res) + 0.5) / res * 2 * s - s
    u = np.broadcast_to(coords[None, :], (res, res))
    v = np.broadcast_to(-coords[:, None], (res, res))
    origins = (np.array(pose.origin)[None, :]
               + u.reshape(-1, 1) * right[None, :]
               + v.reshape(-1, 1) * up[None, :])
    best_t = np.full(res * res, np.inf)
    color = np.broadcast_to(BACKGROUND, (res * res, 3)).copy()
    for prim in scene.primitives:
        t = _primitive_hits(prim, origins, forward)
        closer = t < best_t
        color[closer] = prim.rgb()
        best_t = np.minimum(best_t, t)
    return color.reshape(res, res, 3)


# -- surface point sampling ---------------------------------------------------

def _surface_area(prim):
    h = prim.half_size
    if prim.kind == "sphere":
        return 4 * math.pi * h * h
    if prim.kind == "cube":
        return 24 * h * h
    return 2 * math.pi * h * (2 * h) + 2 * math.pi * h * h  # side + caps


def _sample_on_primitive(prim, n, rng):
    c = np.array(prim.center)
    h = prim.half_size
    if prim.kind == "sphere":
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return c + h * v, v
    if prim.kind == "cube":
        face = rng.integers(0, 6, size=n)
        uv = rng.uniform(-h, h, size=(n, 2))
        pts = np.zeros((n, 3))
        nrm = np.zeros((n, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, -1.0, 1.0)
        for i in range(n):
            a = axis[i]
            others = [j for j in range(3) if j != a]
            pts[i, a] = sign[i] * h
            pts[i, others[0]] = uv[i, 0]
            pts[i, others[1]] = uv[i, 1]
            nrm[i, a] = sign[i]
        return c + pts, nrm
    # cylinder: choose side vs caps by area
    side_area = 2 * math.pi * h * (2 * h)
    cap_area = math.pi * h * h
    total = side_area + 2 * cap_area
    which = rng.uniform(0, total, size=n)
    pts = np.zeros((n, 3))
    nrm = np.zeros((n, 3))
    for i in range(n):
        if which[i] < side_area:
            ang = rng.uniform(0, 2 * math.pi)
            y = rng.uniform(-h, h)
            pts[i] = [h * math.cos(ang), y, h * math.sin(ang)]
            nrm[i] = [math.cos(ang), 0.0, math.sin(ang)]
        else:
            sign = -1.0 if which[i] < side_area + cap_area else 1.0
            r = h * math.sqrt(rng.uniform())
            ang = rng.uniform(0, 2 * math.pi)
            pts[i] = [r * math.cos(ang), sign * h, r * math.sin(ang)]
            nrm[i] = [0.0, sign, 0.0]
    return c + pts, nrm


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray    # (k, 3)
    normals: np.ndarray   # (k, 3) unit vectors


def sample_points(scene, k, seed=0):
    """k surface points, area-weighted across primitives, with unit normals."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    areas = np.array([_surface_area(p) for p in scene.primitives])
    counts = rng.multinomial(k, areas / areas.sum())
    pts, nrms = [], []
    for prim, n in zip(scene.primitives, counts):
        if n:
            p, m = _sample_on_primitive(prim, int(n), rng)
            pts.append(p)
            nrms.append(m)
    points = np.concatenate(pts)
    normals = np.concatenate(nrms)
    return PointCloud(points, normals)


def surface_distance(scene, points):
    """Distance of each point to the nearest primitive surface (test oracle)."""
    points = np.atleast_2d(points)
    dists = np.full(len(points), np.inf)
    for prim in scene.primitives:
        c = np.array(prim.center)
        h = prim.half_size
        rel = points - c
        if prim.kind == "sphere":
            d = np.abs(np.linalg.norm(rel, axis=1) - h)
        elif prim.kind == "cube":
            q = np.abs(rel) - h
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            inside = np.minimum(q.max(axis=1), 0.0)
            d = np.abs(outside + inside)
        else:
            rxz = np.sqrt(rel[:, 0] ** 2 + rel[:, 2] ** 2)
            qr = rxz - h
            qy = np.abs(rel[:, 1]) - h
            outside = np.sqrt(np.maximum(qr, 0) ** 2 + np.maximum(qy, 0) ** 2)
            inside = np.minimum(np.maximum(qr, qy), 0.0)
            d = np.abs(outside + inside)
        dists = np.minimum(dists, d)
    return dists


# -- PPM I/O and dataset layout ----------------------------------------------

def write_ppm(path, image):
    """Binary P6 PPM, 8-bit, from a float image in [0, 1]."""
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(arr.tobytes())


def read_ppm(path):
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P6":
            raise ValueError(f"not a binary PPM: {path}")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(f.readline())
        data = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float64) / maxval


def scene_json(scene):
    return json.dumps(scene.to_dict(), sort_keys=True)
