"""Dataset directory layout: a plain-text manifest plus binary P6 PPM views.

manifest.txt:
    mvar-dataset 1
    views N
    res R
    elevation E
    radius RAD
    scale S
    scene SEED id,id,...      (caption word ids)
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from .scenegen import caption, make_scene, pose_ring, read_ppm, render, write_ppm


class DataError(ValueError):
    """Missing or malformed dataset files."""


@dataclass
class DatasetRecord:
    seed: int
    caption_ids: list
    images: list   # N float images in ring order


@dataclass
class Dataset:
    records: list
    n_views: int
    res: int
    elevation: float
    radius: float
    scale: float

    def poses(self):
        return pose_ring(self.n_views, self.elevation, self.radius, self.scale)


def _view_filename(seed, view):
    return f"scene{seed:08d}_view{view}.ppm"


def write_dataset(out_dir, seeds, n_views=4, res=32, elevation=30.0,
                  radius=3.0, scale=1.25):
    os.makedirs(out_dir, exist_ok=True)
    poses = pose_ring(n_views, elevation, radius, scale)
    lines = ["mvar-dataset 1", f"views {n_views}", f"res {res}",
             f"elevation {elevation:.17g}", f"radius {radius:.17g}",
             f"scale {scale:.17g}"]
    for seed in seeds:
        scene = make_scene(seed)
        ids = ",".join(str(i) for i in caption(scene))
        lines.append(f"scene {seed} {ids}")
        for v, pose in enumerate(poses):
            write_ppm(os.path.join(out_dir, _view_filename(seed, v)),
                      render(scene, pose, res))
    with open(os.path.join(out_dir, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")


def load_dataset(path):
    manifest = os.path.join(path, "manifest.txt")
    if not os.path.exists(manifest):
        raise DataError(f"no manifest.txt in {path}")
    with open(manifest) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or not lines[0].startswith("mvar-dataset"):
        raise DataError("unrecognized manifest header")
    meta = {}
    records = []
    for ln in lines[1:]:
        key, rest = ln.split(" ", 1)
        if key == "scene":
            seed_str, ids = rest.split(" ", 1)
            records.append((int(seed_str),
                            [int(x) for x in ids.split(",")]))
        else:
            meta[key] = rest
    try:
        n_views = int(meta["views"])
        res = int(meta["res"])
    except KeyError as e:
        raise DataError(f"manifest missing field {e}") from None
    out = []
    for seed, ids in records:
        images = []
        for v in range(n_views):
            img_path = os.path.join(path, _view_filename(seed, v))
            if not os.path.exists(img_path):
                raise DataError(f"missing view image {img_path}")
            images.append(read_ppm(img_path))
        out.append(DatasetRecord(seed, ids, images))
    return Dataset(out, n_views, res, float(meta.get("elevation", 30.0)),
                   float(meta.get("radius", 3.0)),
                   float(meta.get("scale", 1.25)))
