"""Episodes, folds, samplers, synthetic scenes, and dataset ingestion.

The synthetic vocabulary is 16 classes: 8 analytic shapes crossed with 2
texture families. Scenes are rasterized per pixel from closed-form
indicator functions, so ground-truth masks are exact. Objects render in
painter's order with the target last; its mask is therefore never
occluded. Pixel values quantize to multiples of 1/255 at render time so
disk round trips are byte-identical.
"""
from __future__ import annotations

import colorsys
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, IngestionError, SamplingError

SHAPES = ("circle", "square", "triangle", "diamond", "ring", "cross",
          "ellipse", "star")
TEXTURES = ("flat", "striped")


@dataclass(frozen=True)
class SyntheticConfig:
    image_size: int = 64
    shapes: tuple = SHAPES
    textures: tuple = TEXTURES
    clutter: int = 3
    background_id: int = 0
    jitter: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 16:
            raise ConfigError(f"image_size must be >= 16, got {self.image_size}")
        if self.n_classes < 8:
            raise ConfigError(f"need >= 8 classes for 4-fold splits, got {self.n_classes}")
        if self.clutter < 0:
            raise ConfigError("clutter must be >= 0")
        if not 0.0 <= self.jitter <= 0.5:
            raise ConfigError(f"jitter must be in [0, 0.5], got {self.jitter}")
        if self.background_id not in (0, 1):
            raise ConfigError(f"unknown background distribution {self.background_id}")

    @property
    def n_classes(self) -> int:
        return len(self.shapes) * len(self.textures)

    def class_ids(self) -> list[int]:
        return list(range(self.n_classes))


@dataclass
class Episode:
    query_image: np.ndarray
    query_mask: np.ndarray
    support: list[tuple[np.ndarray, np.ndarray]]
    class_id: int
    query_id: str = ""
    support_ids: tuple = ()

    def __post_init__(self):
        if not self.support:
            raise ContractError("episode needs at least one support pair")
        if self.query_id and self.query_id in self.support_ids:
            raise ContractError(f"query image '{self.query_id}' appears in its "
                                f"own support set")
        for _, mask in self.support:
            if not np.any(mask):
                raise ContractError(f"empty support mask for class {self.class_id}")

    @property
    def k(self) -> int:
        return len(self.support)


@dataclass(frozen=True)
class FoldSpec:
    n_folds: int
    fold_classes: tuple

    def test_classes(self, fold: int) -> list[int]:
        return list(self.fold_classes[fold])

    def train_classes(self, fold: int) -> list[int]:
        return [c for i, g in enumerate(self.fold_classes) if i != fold for c in g]


def make_folds(class_ids, n_folds: int) -> FoldSpec:
    """Contiguous even split of the sorted class ids."""
    ids = sorted(class_ids)
    if n_folds < 1 or len(ids) % n_folds:
        raise ConfigError(f"{len(ids)} classes do not split evenly into "
                          f"{n_folds} folds")
    per = len(ids) // n_folds
    groups = tuple(tuple(ids[i * per:(i + 1) * per]) for i in range(n_folds))
    return FoldSpec(n_folds=n_folds, fold_classes=groups)


def episode_rng(seed: int, index: int) -> np.random.Generator:
    """Per-episode generator; parallel evaluation order cannot perturb it."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))


# ---------------------------------------------------------------------------
# scene rasterization
# ---------------------------------------------------------------------------

def _class_color(class_id: int) -> tuple[float, float, float]:
    # golden-ratio hue walk keeps all 16 class colors well separated
    hue = (0.13 + class_id * 0.6180339887498949) % 1.0
    return colorsys.hsv_to_rgb(hue, 0.85, 0.95)


def _shape_indicator(kind: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    if kind == "circle":
        return u * u + v * v <= 1.0
    if kind == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.9
    if kind == "triangle":
        return (v >= -0.75) & (v <= 0.95 - 1.7 * np.abs(u))
    if kind == "diamond":
        return np.abs(u) + np.abs(v) <= 1.1
    if kind == "ring":
        r2 = u * u + v * v
        return (r2 <= 1.0) & (r2 >= 0.4 * 0.4)
    if kind == "cross":
        inside = np.maximum(np.abs(u), np.abs(v)) <= 1.0
        return inside & ((np.abs(u) <= 0.38) | (np.abs(v) <= 0.38))
    if kind == "ellipse":
        return u * u + (v / 0.55) ** 2 <= 1.0
    if kind == "star":
        return np.abs(u) ** 0.6 + np.abs(v) ** 0.6 <= 1.0
    raise ConfigError(f"unknown shape kind '{kind}'")


@dataclass
class _SceneObject:
    class_id: int
    cx: float
    cy: float
    radius: float
    angle: float
    phase: float


def _draw_object(cfg: SyntheticConfig, img: np.ndarray, obj: _SceneObject) -> np.ndarray:
    """Paint one object over img in place; returns its boolean coverage."""
    s = cfg.image_size
    ys, xs = np.mgrid[0:s, 0:s]
    dx = (xs + 0.5 - obj.cx) / obj.radius
    dy = (ys + 0.5 - obj.cy) / obj.radius
    cos_a, sin_a = np.cos(obj.angle), np.sin(obj.angle)
    u = cos_a * dx + sin_a * dy
    v = -sin_a * dx + cos_a * dy
    shape_idx, tex_idx = divmod(obj.class_id, len(cfg.textures))
    cover = _shape_indicator(cfg.shapes[shape_idx], u, v)
    color = np.array(_class_color(obj.class_id))
    fill = np.broadcast_to(color[:, None, None], (3, s, s)).copy()
    if cfg.textures[tex_idx] == "striped":
        stripes = np.sin(6.0 * u + obj.phase) > 0.0
        fill[:, ~stripes] *= 0.45
    img[:, cover] = fill[:, cover]
    return cover


def _background(cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    s = cfg.image_size
    if cfg.background_id == 0:
        # smooth two-color diagonal gradient plus mild grain
        c0 = np.array(colorsys.hsv_to_rgb(rng.uniform(), 0.2, 0.35))
        c1 = np.array(colorsys.hsv_to_rgb(rng.uniform(), 0.2, 0.55))
        ys, xs = np.mgrid[0:s, 0:s]
        t = (xs + ys) / (2.0 * (s - 1))
        img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t
        img += rng.normal(0.0, 0.02, (3, s, s))
    else:
        # coarse mosaic of muted tiles, a visibly different family
        cells = 8
        tiles = np.stack([np.array(colorsys.hsv_to_rgb(rng.uniform(), 0.3, v))
                          for v in rng.uniform(0.25, 0.75, cells * cells)])
        grid = tiles.reshape(cells, cells, 3).transpose(2, 0, 1)
        reps = -(-s // cells)
        img = np.repeat(np.repeat(grid, reps, axis=1), reps, axis=2)[:, :s, :s]
        img = img + rng.normal(0.0, 0.01, (3, s, s))
    return np.clip(img, 0.0, 1.0)


def _random_object(cfg: SyntheticConfig, class_id: int,
                   rng: np.random.Generator) -> _SceneObject:
    s = cfg.image_size
    return _SceneObject(
        class_id=class_id,
        cx=rng.uniform(0.3 * s, 0.7 * s),
        cy=rng.uniform(0.3 * s, 0.7 * s),
        radius=rng.uniform(0.16 * s, 0.26 * s),
        angle=rng.uniform(0.0, 2.0 * np.pi),
        phase=rng.uniform(0.0, 2.0 * np.pi),
    )


@dataclass
class Scene:
    """Object layout plus its rendered (image, target mask).

    bg_seed pins the background draw, so jittered copies of a scene keep
    the exact background of the original (adjacent-frame semantics).
    """
    target: _SceneObject
    clutter: list[_SceneObject]
    bg_seed: int
    image: np.ndarray = field(repr=False, default=None)
    mask: np.ndarray = field(repr=False, default=None)


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _render(cfg: SyntheticConfig, scene: Scene) -> Scene:
    bg_rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([scene.bg_seed, cfg.background_id])))
    img = _background(cfg, bg_rng)
    for obj in scene.clutter:
        _draw_object(cfg, img, obj)
    cover = _draw_object(cfg, img, scene.target)
    scene.image = _quantize(img)
    scene.mask = cover.astype(np.float64)
    return scene


def make_scene(cfg: SyntheticConfig, class_id: int,
               rng: np.random.Generator) -> Scene:
    """A fresh scene containing one target instance over clutter."""
    if class_id not in cfg.class_ids():
        raise ConfigError(f"class {class_id} outside the {cfg.n_classes}-class vocabulary")
    others = [c for c in cfg.class_ids() if c != class_id]
    for _ in range(20):
        bg_seed = int(rng.integers(2**31))
        clutter = [_random_object(cfg, int(rng.choice(others)), rng)
                   for _ in range(cfg.clutter)]
        scene = _render(cfg, Scene(_random_object(cfg, class_id, rng), clutter, bg_seed))
        if scene.mask.sum() >= 8:
            return scene
    raise SamplingError(f"could not draw a non-degenerate scene for class {class_id}")


def _jittered(cfg: SyntheticConfig, scene: Scene, rng: np.random.Generator):
    """Global affine copy of a scene: scale and shift all objects together.

    cfg.jitter sets the motion amplitude; 0 means the supports repeat the
    query scene exactly, which makes mask propagation a perfect strategy.
    """
    s, j = cfg.image_size, cfg.jitter
    factor = rng.uniform(1.0 - 0.8 * j, 1.0 + 0.8 * j)
    tx, ty = rng.uniform(-j * s, j * s, 2)

    def move(o: _SceneObject) -> _SceneObject:
        return _SceneObject(o.class_id,
                            (o.cx - s / 2) * factor + s / 2 + tx,
                            (o.cy - s / 2) * factor + s / 2 + ty,
                            o.radius * factor, o.angle, o.phase)

    moved = Scene(move(scene.target), [move(o) for o in scene.clutter], scene.bg_seed)
    return _render(cfg, moved), (factor, tx, ty)


def warp_back_mask(mask: np.ndarray, factor: float, tx: float, ty: float) -> np.ndarray:
    """Invert a global affine jitter by nearest-neighbor resampling."""
    s = mask.shape[0]
    ys, xs = np.mgrid[0:s, 0:s]
    src_x = np.round((xs + 0.5 - s / 2) * factor + s / 2 + tx - 0.5).astype(int)
    src_y = np.round((ys + 0.5 - s / 2) * factor + s / 2 + ty - 0.5).astype(int)
    valid = (src_x >= 0) & (src_x < s) & (src_y >= 0) & (src_y < s)
    out = np.zeros_like(mask)
    out[valid] = mask[src_y[valid], src_x[valid]]
    return out


def generate_synthetic_episode(cfg: SyntheticConfig, class_id: int, K: int,
                               similarity: str, rng: np.random.Generator) -> Episode:
    """video_like: supports are small global jitters of the query scene.
    independent: supports come from fresh scenes of the same class."""
    if similarity not in ("video_like", "independent"):
        raise ConfigError(f"unknown similarity mode '{similarity}'")
    if K < 1:
        raise ContractError("K must be >= 1")
    query = make_scene(cfg, class_id, rng)
    support = []
    for _ in range(K):
        if similarity == "video_like":
            for _ in range(20):
                shot, _params = _jittered(cfg, query, rng)
                if shot.mask.sum() >= 8:
                    break
            else:
                raise SamplingError(f"jitter kept pushing class {class_id} off-frame")
            support.append((shot.image, shot.mask))
        else:
            shot = make_scene(cfg, class_id, rng)
            support.append((shot.image, shot.mask))
    return Episode(query.image, query.mask, support, class_id)


# ---------------------------------------------------------------------------
# dataset indices and episode samplers
# ---------------------------------------------------------------------------

class TableIndex:
    """In-memory index: class_id -> image ids, with array tables.

    images[image_id] -> (3, S, S); masks[(class_id, image_id)] -> (S, S).
    Array tables may be omitted when only sampling statistics are needed.
    """

    def __init__(self, by_class: dict, images: dict | None = None,
                 masks: dict | None = None):
        self.by_class = {c: sorted(ids) for c, ids in by_class.items()}
        self._images = images or {}
        self._masks = masks or {}

    @property
    def classes(self) -> list[int]:
        return sorted(self.by_class)

    def images_of(self, class_id: int) -> list[str]:
        return self.by_class.get(class_id, [])

    def classes_of(self, image_id: str) -> list[int]:
        return [c for c in self.classes if image_id in self.by_class[c]]

    def load_image(self, image_id: str) -> np.ndarray:
        return self._images[image_id]

    def load_mask(self, class_id: int, image_id: str) -> np.ndarray:
        return self._masks[(class_id, image_id)]


class SyntheticIndex:
    """A virtual finite dataset: scenes rendered lazily and deterministically.

    Image ids are "c<class>_<n>"; scene n of class c depends only on
    (cfg.seed, c, n), so any subset renders identically in any order.
    """

    def __init__(self, cfg: SyntheticConfig, images_per_class: int):
        if images_per_class < 1:
            raise ConfigError("images_per_class must be >= 1")
        self.cfg = cfg
        self.by_class = {c: [f"c{c:02d}_{i:04d}" for i in range(images_per_class)]
                         for c in cfg.class_ids()}
        self._cache: dict[str, Scene] = {}

    @property
    def classes(self) -> list[int]:
        return sorted(self.by_class)

    def images_of(self, class_id: int) -> list[str]:
        return self.by_class.get(class_id, [])

    def classes_of(self, image_id: str) -> list[int]:
        return [int(image_id[1:3])]

    def _scene(self, image_id: str) -> Scene:
        scene = self._cache.get(image_id)
        if scene is None:
            class_id, n = int(image_id[1:3]), int(image_id.split("_")[1])
            rng = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence([self.cfg.seed, class_id, n])))
            scene = make_scene(self.cfg, class_id, rng)
            self._cache[image_id] = scene
        return scene

    def load_image(self, image_id: str) -> np.ndarray:
        return self._scene(image_id).image

    def load_mask(self, class_id: int, image_id: str) -> np.ndarray:
        if class_id != int(image_id[1:3]):
            raise SamplingError(f"image {image_id} has no mask for class {class_id}")
        return self._scene(image_id).mask


def _support_subset(index, class_id: int, query_id: str, K: int,
                    rng: np.random.Generator) -> list[str]:
    pool = [i for i in index.images_of(class_id) if i != query_id]
    if len(pool) < K:
        raise SamplingError(f"class {class_id} has {len(pool) + 1} images; "
                            f"K={K} needs at least {K + 1}")
    picks = rng.choice(len(pool), size=K, replace=False)
    return [pool[i] for i in sorted(picks)]


def _assemble(index, class_id: int, query_id: str, support_ids: list[str]) -> Episode:
    return Episode(
        query_image=index.load_image(query_id),
        query_mask=index.load_mask(class_id, query_id),
        support=[(index.load_image(i), index.load_mask(class_id, i))
                 for i in support_ids],
        class_id=class_id,
        query_id=query_id,
        support_ids=tuple(support_ids),
    )


def sample_episode_query_first(index, eligible_classes, K: int,
                               rng: np.random.Generator) -> Episode:
    """Uniform image among those containing an eligible class, then a
    uniform class within the image, then a K-subset of its other images."""
    eligible = sorted(set(eligible_classes))
    candidates = sorted({i for c in eligible for i in index.images_of(c)})
    if not candidates:
        raise SamplingError(f"no images contain classes {eligible}")
    query_id = candidates[rng.integers(len(candidates))]
    present = [c for c in index.classes_of(query_id) if c in eligible]
    class_id = present[rng.integers(len(present))]
    return _assemble(index, class_id, query_id,
                     _support_subset(index, class_id, query_id, K, rng))


def sample_episode_class_first(index, eligible_classes, K: int,
                               rng: np.random.Generator) -> Episode:
    """Uniform class, then a uniform query image of it, then a K-subset."""
    eligible = sorted(set(eligible_classes))
    if not eligible:
        raise SamplingError("no eligible classes")
    class_id = eligible[rng.integers(len(eligible))]
    images = index.images_of(class_id)
    if not images:
        raise SamplingError(f"class {class_id} has no images")
    query_id = images[rng.integers(len(images))]
    return _assemble(index, class_id, query_id,
                     _support_subset(index, class_id, query_id, K, rng))


SAMPLERS = {
    "query_first": sample_episode_query_first,
    "class_first": sample_episode_class_first,
}


# ---------------------------------------------------------------------------
# on-disk dataset format
# ---------------------------------------------------------------------------

def _write_pnm(path, magic: bytes, dims: tuple, payload: np.ndarray):
    path.parent.mkdir(parents=True, exist_ok=True)
    header = magic + b"\n" + f"{dims[0]} {dims[1]}".encode() + b"\n255\n"
    path.write_bytes(header + payload.astype(np.uint8).tobytes())


def write_ppm(path, image: np.ndarray):
    """(3, H, W) floats in [0, 1] -> binary P6 with 8-bit channels."""
    c, h, w = image.shape
    pixels = np.round(image * 255.0).transpose(1, 2, 0)
    _write_pnm(path, b"P6", (w, h), pixels)


def write_pgm(path, mask: np.ndarray):
    """(H, W) binary mask -> binary P5 with values 0 or 255."""
    h, w = mask.shape
    _write_pnm(path, b"P5", (w, h), np.where(mask > 0, 255, 0))


def _read_pnm(path, magic: bytes):
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise IngestionError(f"cannot read '{path}': {e}") from e
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise IngestionError(f"'{path}': truncated header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    if fields[0] != magic:
        raise IngestionError(f"'{path}': expected {magic.decode()} file, "
                             f"got {fields[0]!r}")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise IngestionError(f"'{path}': unsupported maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    data = np.frombuffer(raw, dtype=np.uint8, offset=pos)
    if data.size != w * h * channels:
        raise IngestionError(f"'{path}': payload is {data.size} bytes, "
                             f"expected {w * h * channels}")
    return data, w, h


def read_ppm(path) -> np.ndarray:
    data, w, h = _read_pnm(path, b"P6")
    return data.reshape(h, w, 3).transpose(2, 0, 1) / 255.0


def read_pgm(path) -> np.ndarray:
    data, w, h = _read_pnm(path, b"P5")
    plane = data.reshape(h, w)
    bad = ~np.isin(plane, (0, 255))
    if np.any(bad):
        raise IngestionError(f"'{path}': mask holds non-binary values "
                             f"{sorted(set(plane[bad].tolist()))[:5]}")
    return (plane == 255).astype(np.float64)


def save_dataset(root, cfg: SyntheticConfig, images_per_class: int):
    """Materialize a synthetic dataset in the documented directory layout."""
    index = SyntheticIndex(cfg, images_per_class)
    root.mkdir(parents=True, exist_ok=True)
    names = [f"{cfg.shapes[s]}_{cfg.textures[t]}"
             for s in range(len(cfg.shapes)) for t in range(len(cfg.textures))]
    lines = [f"{c} {names[c]}" for c in index.classes]
    (root / "classes.txt").write_text("\n".join(lines) + "\n")
    for class_id in index.classes:
        for image_id in index.images_of(class_id):
            write_ppm(root / "images" / f"{image_id}.ppm", index.load_image(image_id))
            write_pgm(root / "masks" / str(class_id) / f"{image_id}.pgm",
                      index.load_mask(class_id, image_id))
    return index


class DiskIndex:
    """Lazy view over the on-disk layout; arrays load and validate on access."""

    def __init__(self, root, by_class: dict, class_names: dict):
        self.root = root
        self.by_class = by_class
        self.class_names = class_names

    @property
    def classes(self) -> list[int]:
        return sorted(self.by_class)

    def images_of(self, class_id: int) -> list[str]:
        return self.by_class.get(class_id, [])

    def classes_of(self, image_id: str) -> list[int]:
        return [c for c in self.classes if image_id in self.by_class[c]]

    def load_image(self, image_id: str) -> np.ndarray:
        return read_ppm(self.root / "images" / f"{image_id}.ppm")

    def load_mask(self, class_id: int, image_id: str) -> np.ndarray:
        return read_pgm(self.root / "masks" / str(class_id) / f"{image_id}.pgm")


def load_dataset(root) -> DiskIndex:
    classes_file = root / "classes.txt"
    if not classes_file.exists():
        return DiskIndex(root, {}, {})
    class_names = {}
    for line in classes_file.read_text().splitlines():
        if line.strip():
            cid, _, name = line.partition(" ")
            class_names[int(cid)] = name
    by_class = {}
    masks_dir = root / "masks"
    for class_id in sorted(class_names):
        class_dir = masks_dir / str(class_id)
        if not class_dir.is_dir():
            continue
        ids = sorted(p.stem for p in class_dir.glob("*.pgm"))
        for image_id in ids:
            image_path = root / "images" / f"{image_id}.ppm"
            if not image_path.exists():
                raise IngestionError(f"mask lists image '{image_id}' but "
                                     f"'{image_path}' is missing")
        if ids:
            by_class[class_id] = ids
    return DiskIndex(root, by_class, class_names)
