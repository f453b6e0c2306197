"""Procedural audio-visual scenes on a patch grid.

A scene is a 64x64 image of colored glyphs, one glyph set per object, each
object occupying whole patches of a 4x4 grid. Per-object masks are exact
(uniform over occupied patches), the caption lists the classes present, and
the reference audio is the gain-weighted texture mixture.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .config import DataConfig
from .textures import BASE_RMS, class_names, mix_textures, render_texture

BACKGROUND = 0.12

_GLYPH_COLORS = np.array([
    [0.20, 0.85, 0.95],   # chime: cyan circle
    [0.95, 0.55, 0.15],   # hum: orange square
    [0.90, 0.25, 0.80],   # hiss: magenta triangle
    [0.65, 0.90, 0.20],   # tick: green cross
])


class PlacementInfeasibleError(ValueError):
    """Requested objects cannot fit on the patch grid."""


@dataclass
class ObjectSpec:
    class_id: int
    class_name: str
    patches: list[int]           # flat patch indices, row-major
    gain: float

    @property
    def extent(self) -> int:
        return len(self.patches)

    @property
    def position(self) -> tuple[int, int]:
        # anchor = first occupied patch, (row, col)
        return divmod(self.patches[0], 4)


@dataclass
class Scene:
    scene_id: str
    image: np.ndarray            # H x W x 3 in [0, 1]
    objects: list[ObjectSpec]
    masks: np.ndarray            # n_objects x P, each row on the simplex
    caption: list[str]           # canonical (sorted) class names
    audio_ref: np.ndarray        # float waveform, clip_samples long
    grid: int = 4

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    def class_indicator(self, num_classes: int) -> np.ndarray:
        ind = np.zeros(num_classes)
        for obj in self.objects:
            ind[obj.class_id] = 1.0
        return ind


@dataclass
class DatasetManifest:
    seed: int
    split: str
    scene_ids: list[str]
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "split": self.split,
                "scene_ids": self.scene_ids, "config": self.config}


def gain_for_extent(extent: int, n_patches: int) -> float:
    # bigger objects are louder, deterministically
    return 0.4 + 0.6 * extent / n_patches


def generate_scene(rng_seed: int, config: DataConfig, scene_id: str | None = None) -> Scene:
    """Deterministic scene from (rng_seed, config)."""
    if config.num_classes < 2:
        raise ValueError("config must name at least 2 classes")
    P = config.n_patches
    if not (1 <= config.min_objects <= config.max_objects <= P):
        raise PlacementInfeasibleError(
            f"objects-per-scene range [{config.min_objects}, {config.max_objects}] "
            f"outside [1, {P}]")
    if config.max_objects * config.min_extent > P:
        raise PlacementInfeasibleError(
            f"{config.max_objects} objects of extent >= {config.min_extent} "
            f"cannot fit in {P} patches")
    if config.max_objects > config.num_classes:
        raise PlacementInfeasibleError(
            f"{config.max_objects} objects need {config.max_objects} distinct classes, "
            f"inventory has {config.num_classes}")

    rng = np.random.default_rng(rng_seed)
    n_objects = int(rng.integers(config.min_objects, config.max_objects + 1))
    classes = rng.choice(config.num_classes, size=n_objects, replace=False)
    names = class_names(config.num_classes)

    free = set(range(P))
    objects: list[ObjectSpec] = []
    for cid in classes:
        max_ext = min(config.max_extent, len(free) - (n_objects - len(objects) - 1)
                      * config.min_extent)
        if max_ext < config.min_extent:
            raise PlacementInfeasibleError("placement infeasible: ran out of patches")
        extent = int(rng.integers(config.min_extent, max_ext + 1))
        patches = _grow_blob(rng, free, extent, config.grid)
        free -= set(patches)
        objects.append(ObjectSpec(int(cid), names[int(cid)], patches,
                                  gain_for_extent(extent, P)))

    masks = np.zeros((n_objects, P))
    for i, obj in enumerate(objects):
        masks[i, obj.patches] = 1.0 / obj.extent

    image = _render_image(objects, config)
    parts = [render_texture(o.class_id, o.gain, config.clip_seconds,
                            seed=rng_seed, num_classes=config.num_classes)
             for o in objects]
    audio = mix_textures(parts)
    caption = sorted(o.class_name for o in objects)
    sid = scene_id if scene_id is not None else f"scene-{rng_seed:010d}"
    return Scene(sid, image, objects, masks, caption, audio, grid=config.grid)


def _grow_blob(rng: np.random.Generator, free: set[int], extent: int, grid: int) -> list[int]:
    """Grow a connected patch blob inside `free`; falls back to any free patch
    when no free neighbor exists."""
    start = int(rng.choice(sorted(free)))
    blob = [start]
    while len(blob) < extent:
        neighbors = []
        for p in blob:
            r, c = divmod(p, grid)
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                q = (r + dr) * grid + (c + dc)
                if 0 <= r + dr < grid and 0 <= c + dc < grid and q in free and q not in blob:
                    neighbors.append(q)
        pool = sorted(set(neighbors)) or sorted(free - set(blob))
        blob.append(int(rng.choice(pool)))
    return sorted(blob)


def _render_image(objects: list[ObjectSpec], config: DataConfig) -> np.ndarray:
    side = config.image_size
    pp = config.patch_pixels
    img = np.full((side, side, 3), BACKGROUND, dtype=np.float32)
    for obj in objects:
        tile = _glyph_tile(obj.class_id, pp)
        for p in obj.patches:
            r, c = divmod(p, config.grid)
            img[r * pp:(r + 1) * pp, c * pp:(c + 1) * pp] = tile
    return img


def _glyph_tile(class_id: int, pp: int) -> np.ndarray:
    color = _GLYPH_COLORS[class_id % len(_GLYPH_COLORS)]
    tile = np.full((pp, pp, 3), BACKGROUND, dtype=np.float32)
    yy, xx = np.mgrid[0:pp, 0:pp]
    cy = cx = (pp - 1) / 2
    if class_id == 0:      # circle
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= (0.38 * pp) ** 2
    elif class_id == 1:    # square
        m = round(0.18 * pp)
        mask = (yy >= m) & (yy < pp - m) & (xx >= m) & (xx < pp - m)
    elif class_id == 2:    # triangle
        mask = (yy >= 0.2 * pp) & (np.abs(xx - cx) <= 0.55 * (yy - 0.2 * pp))
    else:                  # cross
        w = round(0.14 * pp)
        mask = (np.abs(yy - cy) <= w) | (np.abs(xx - cx) <= w)
    tile[mask] = color
    return tile


# ---------------------------------------------------------------------------
# persistence

def scene_dir(root: str | Path) -> Path:
    return Path(root) / "scenes"


def save_scene(scene: Scene, root: str | Path, config: DataConfig) -> None:
    from .dsp import write_wav
    d = scene_dir(root)
    d.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.clip(scene.image, 0, 1) * 255).round().astype(np.uint8)).save(
        d / f"{scene.scene_id}.png")
    write_wav(d / f"{scene.scene_id}.wav", scene.audio_ref)
    meta = {
        "scene_id": scene.scene_id,
        "grid": scene.grid,
        "caption": scene.caption,
        "objects": [
            {"class_id": o.class_id, "class_name": o.class_name,
             "patches": o.patches, "extent": o.extent, "gain": o.gain}
            for o in scene.objects
        ],
        "masks": scene.masks.tolist(),
    }
    (d / f"{scene.scene_id}.json").write_text(json.dumps(meta, indent=1))


def load_scene(scene_id: str, root: str | Path) -> Scene:
    from .dsp import read_wav
    d = scene_dir(root)
    meta = json.loads((d / f"{scene_id}.json").read_text())
    image = np.asarray(Image.open(d / f"{scene_id}.png"), dtype=np.float32) / 255.0
    audio = read_wav(d / f"{scene_id}.wav")
    objects = [ObjectSpec(o["class_id"], o["class_name"], o["patches"], o["gain"])
               for o in meta["objects"]]
    return Scene(meta["scene_id"], image, objects, np.asarray(meta["masks"]),
                 meta["caption"], audio, grid=meta["grid"])


def build_dataset(config: DataConfig, n_train: int, n_test: int,
                  out_dir: str | Path, seed: int = 0) -> dict[str, DatasetManifest]:
    """Generate and persist train/test scenes with disjoint id spaces."""
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be >= 1")
    out = Path(out_dir)
    seq = np.random.SeedSequence(seed)
    train_seeds, test_seeds = seq.spawn(2)
    manifests = {}
    for split, n, child in (("train", n_train, train_seeds), ("test", n_test, test_seeds)):
        scene_seeds = child.generate_state(n, dtype=np.uint64)
        ids = []
        for i in range(n):
            sid = f"{split}-{i:05d}"
            scene = generate_scene(int(scene_seeds[i] % (2 ** 62)), config, scene_id=sid)
            try:
                save_scene(scene, out, config)
            except OSError as exc:
                raise OSError(f"failed writing scene {sid} under {out}: {exc}") from exc
            ids.append(sid)
        manifest = DatasetManifest(seed=seed, split=split, scene_ids=ids, config={
            "grid": config.grid, "num_classes": config.num_classes,
            "min_objects": config.min_objects, "max_objects": config.max_objects,
            "min_extent": config.min_extent, "max_extent": config.max_extent,
            "clip_seconds": config.clip_seconds,
        })
        (out / f"manifest-{split}.json").write_text(json.dumps(manifest.to_dict(), indent=1))
        manifests[split] = manifest
    return manifests


def load_manifest(root: str | Path, split: str) -> DatasetManifest:
    raw = json.loads((Path(root) / f"manifest-{split}.json").read_text())
    return DatasetManifest(raw["seed"], raw["split"], raw["scene_ids"], raw["config"])


def load_split(root: str | Path, split: str) -> list[Scene]:
    manifest = load_manifest(root, split)
    return [load_scene(sid, root) for sid in manifest.scene_ids]


def manifest_hash(root: str | Path, split: str) -> str:
    blob = (Path(root) / f"manifest-{split}.json").read_bytes()
    return hashlib.sha256(blob).hexdigest()
