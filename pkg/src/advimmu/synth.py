"""Procedural street scenes with per-sequence weather.

A sequence is a static background (sky, road, buildings, trees) plus vehicles
and pedestrians moving at constant integer velocity with horizontal
wrap-around. Weather is sampled once per sequence and applied last to every
frame with identical parameters, in the fixed order fog -> cloud -> rain ->
dark.

On disk a sequence is a directory holding ``manifest.json``, binary PPM frames
and binary PGM label maps (pixel value = class id).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

CLASS_NAMES = ("sky", "road", "building", "tree", "vehicle", "pedestrian")
SKY, ROAD, BUILDING, TREE, VEHICLE, PEDESTRIAN = range(6)
WEATHER_KINDS = ("fog", "cloud", "rain", "dark")

# schedule used when a dataset asks for "mixed" weather; the first 8 entries
# cover every adverse kind
MIXED_SCHEDULE = ("fog", "cloud", "rain", "dark", "fog+rain", "cloud+dark", "clear", "fog+cloud+rain+dark")

PALETTE = np.array(
    [
        [0.40, 0.60, 0.95],  # sky
        [0.33, 0.33, 0.36],  # road
        [0.70, 0.45, 0.30],  # building
        [0.15, 0.60, 0.20],  # tree
        [0.90, 0.15, 0.15],  # vehicle
        [0.95, 0.85, 0.15],  # pedestrian
    ]
)

# Near-orthogonal colours for the inner-product clustering experiments: the
# three classes low in the frame get primaries, the upper three secondaries,
# and tree shares no primary with road.
_A = 0.707
SEPARABLE_PALETTE = 0.015 + 0.97 * np.array(
    [
        [_A, _A, 0.0],  # sky
        [1.0, 0.0, 0.0],  # road
        [_A, 0.0, _A],  # building
        [0.0, _A, _A],  # tree
        [0.0, 1.0, 0.0],  # vehicle
        [0.0, 0.0, 1.0],  # pedestrian
    ]
)
PALETTES = {"street": PALETTE, "separable": SEPARABLE_PALETTE}


class DatasetError(Exception):
    """Malformed or incomplete on-disk data."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    frames: int = 16
    classes: int = 6
    max_depth: int = 4
    vehicles: tuple[int, int] = (1, 3)
    pedestrians: tuple[int, int] = (1, 3)
    trees: tuple[int, int] = (1, 3)
    vehicle_speed: tuple[int, int] = (1, 3)
    pedestrian_speed: tuple[int, int] = (1, 1)
    weather: str = "clear"
    fog_density: tuple[float, float] = (0.3, 0.6)
    rain_streaks: tuple[int, int] = (20, 60)
    dark_gain: tuple[float, float] = (0.35, 0.6)
    dark_gamma: tuple[float, float] = (1.2, 1.8)
    cloud_contrast: tuple[float, float] = (0.2, 0.4)
    color_jitter: float = 0.04
    texture: float = 0.02
    palette: str = "street"

    def validate(self) -> None:
        if self.height < 16 or self.width < 16:
            raise ConfigError(f"frame size must be at least 16x16, got {self.height}x{self.width}")
        if self.frames < self.max_depth + 1:
            raise ConfigError(f"need at least max_depth+1={self.max_depth + 1} frames, got {self.frames}")
        if not 2 <= self.classes <= len(CLASS_NAMES):
            raise ConfigError(f"classes must be in [2, {len(CLASS_NAMES)}], got {self.classes}")
        for name in ("vehicles", "pedestrians", "trees", "vehicle_speed", "pedestrian_speed", "rain_streaks"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ConfigError(f"bad range for {name}: {(lo, hi)}")
        for name in ("fog_density", "dark_gain", "cloud_contrast"):
            lo, hi = getattr(self, name)
            if not 0.0 <= lo <= hi <= 1.0:
                raise ConfigError(f"bad range for {name}: {(lo, hi)}")
        parse_weather(self.weather)
        if self.palette not in PALETTES:
            raise ConfigError(f"palette must be one of {sorted(PALETTES)}, got {self.palette!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        kw = {}
        for k, v in d.items():
            if k not in cls.__dataclass_fields__:
                raise ConfigError(f"unknown scene field {k!r}")
            kw[k] = tuple(v) if isinstance(v, list) else v
        return cls(**kw)


@dataclass(frozen=True)
class WeatherParams:
    kinds: tuple[str, ...] = ()
    fog_density: float = 0.0
    fog_gray: float = 0.75
    cloud_contrast: float = 0.0
    cloud_seed: int = 0
    rain_streaks: int = 0
    rain_seed: int = 0
    rain_alpha: float = 0.5
    rain_level: float = 0.85
    dark_gain: float = 1.0
    dark_gamma: float = 1.0

    @property
    def tag(self) -> str:
        return weather_tag(self.kinds)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kinds"] = list(self.kinds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WeatherParams":
        d = dict(d)
        d["kinds"] = tuple(d.get("kinds", ()))
        return cls(**d)


@dataclass
class FrameSequence:
    frames: np.ndarray  # T x H x W x 3, float64 in [0, 1]
    labels: np.ndarray  # T x H x W, int64 class ids
    weather: WeatherParams
    seed: int
    sequence_id: str
    class_names: tuple[str, ...] = field(default=CLASS_NAMES)

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]


def parse_weather(spec: str) -> tuple[str, ...]:
    """Canonical kind tuple for a tag such as ``"rain+fog"``; ``"mixed"`` means all kinds."""
    spec = spec.strip().lower()
    if spec in ("", "clear"):
        return ()
    if spec == "mixed":
        return WEATHER_KINDS
    parts = set(spec.split("+"))
    bad = parts - set(WEATHER_KINDS)
    if bad:
        raise ConfigError(f"unknown weather kind(s) {sorted(bad)}")
    return tuple(k for k in WEATHER_KINDS if k in parts)


def weather_tag(kinds) -> str:
    return "+".join(kinds) if kinds else "clear"


def sample_weather(cfg: SceneConfig, rng: np.random.Generator) -> WeatherParams:
    kinds = parse_weather(cfg.weather)
    # every field is drawn regardless of kind so that the draw sequence (and
    # hence the scene) does not depend on which kinds are active
    fog = rng.uniform(*cfg.fog_density)
    cloud = rng.uniform(*cfg.cloud_contrast)
    cloud_seed = int(rng.integers(2**31))
    streaks = int(rng.integers(cfg.rain_streaks[0], cfg.rain_streaks[1] + 1))
    rain_seed = int(rng.integers(2**31))
    gain = rng.uniform(*cfg.dark_gain)
    gamma = rng.uniform(*cfg.dark_gamma)
    return WeatherParams(
        kinds=kinds,
        fog_density=fog if "fog" in kinds else 0.0,
        cloud_contrast=cloud if "cloud" in kinds else 0.0,
        cloud_seed=cloud_seed,
        rain_streaks=streaks if "rain" in kinds else 0,
        rain_seed=rain_seed,
        dark_gain=gain if "dark" in kinds else 1.0,
        dark_gamma=gamma if "dark" in kinds else 1.0,
    )


# ---------------------------------------------------------------------------
# weather corruption


def cloud_texture(height: int, width: int, seed: int) -> np.ndarray:
    grid = np.random.default_rng(seed).uniform(-1.0, 1.0, (4, 4))
    return ndimage.zoom(grid, (height / 4, width / 4), order=1, mode="nearest")[:height, :width]


def rain_mask(height: int, width: int, count: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    mask = np.zeros((height, width), dtype=bool)
    for _ in range(count):
        r, c = int(rng.integers(height)), int(rng.integers(width))
        length = int(rng.integers(4, 9))
        rows = r + np.arange(length)
        cols = c + np.arange(length) // 3
        keep = rows < height
        mask[rows[keep], cols[keep] % width] = True
    return mask


def apply_weather(frame: np.ndarray, wp: WeatherParams) -> np.ndarray:
    """Corrupt one clean H x W x 3 frame. Pure in (frame, wp)."""
    x = frame.astype(np.float64, copy=True)
    h, w = x.shape[:2]
    if "fog" in wp.kinds:
        x = (1.0 - wp.fog_density) * x + wp.fog_density * wp.fog_gray
    if "cloud" in wp.kinds:
        tex = cloud_texture(h, w, wp.cloud_seed)
        x = np.clip(x * (1.0 + wp.cloud_contrast * tex[..., None]), 0.0, 1.0)
    if "rain" in wp.kinds:
        m = rain_mask(h, w, wp.rain_streaks, wp.rain_seed)
        x[m] = (1.0 - wp.rain_alpha) * x[m] + wp.rain_alpha * wp.rain_level
    if "dark" in wp.kinds:
        x = wp.dark_gain * np.power(x, wp.dark_gamma)
    return np.clip(x, 0.0, 1.0)


# ---------------------------------------------------------------------------
# scene rendering


@dataclass
class _Mover:
    cls: int
    x: int
    y: int
    w: int
    h: int
    vx: int
    color: np.ndarray


def _render_background(cfg: SceneConfig, rng: np.random.Generator, palette: np.ndarray):
    h, w = cfg.height, cfg.width
    horizon = int(round(0.45 * h))
    labels = np.full((h, w), SKY, dtype=np.int64)
    ys, xs = np.mgrid[0:h, 0:w]

    # road trapezoid below the horizon, facades either side
    half = 0.08 * w + (0.62 * w) * np.clip((ys - horizon) / max(h - horizon, 1), 0, 1)
    below = ys >= horizon
    labels[below] = BUILDING
    labels[below & (np.abs(xs - (w - 1) / 2) <= half)] = ROAD

    for side in (0, 1):
        x = 0 if side == 0 else int(0.62 * w)
        stop = int(0.38 * w) if side == 0 else w
        while x < stop:
            bw_ = int(rng.integers(max(3, w // 12), max(4, w // 5)))
            top = horizon - int(rng.integers(int(0.08 * h), int(0.35 * h)))
            labels[max(top, 0):horizon, x:min(x + bw_, stop)] = BUILDING
            x += bw_

    n_trees = int(rng.integers(cfg.trees[0], cfg.trees[1] + 1))
    for _ in range(n_trees):
        r = int(rng.integers(max(2, h // 20), max(3, h // 10) + 1))
        cx = int(rng.integers(r, w - r))
        cy = int(rng.integers(max(r, horizon - 3 * r), horizon + r))
        labels[(ys - cy) ** 2 + (xs - cx) ** 2 <= r * r] = TREE

    labels = np.where(labels >= cfg.classes, min(BUILDING, cfg.classes - 1), labels)
    image = palette[labels]
    # vertical shading on the sky
    sky = labels == SKY
    shade = 0.85 + 0.3 * ys / max(horizon, 1)
    image[sky] *= shade[sky][:, None]
    image += rng.normal(0.0, cfg.texture, image.shape)
    return np.clip(image, 0.0, 1.0), labels, horizon


def _spawn_movers(cfg: SceneConfig, rng: np.random.Generator, palette: np.ndarray, horizon: int) -> list[_Mover]:
    h, w = cfg.height, cfg.width
    movers = []
    n_veh = int(rng.integers(cfg.vehicles[0], cfg.vehicles[1] + 1))
    for _ in range(n_veh):
        vw = int(rng.integers(max(4, w // 8), max(5, w // 4)))
        vh = int(rng.integers(max(3, h // 12), max(4, h // 7)))
        y = int(rng.integers(horizon + (h - horizon) // 3, max(horizon + (h - horizon) // 3 + 1, h - vh)))
        speed = int(rng.integers(cfg.vehicle_speed[0], cfg.vehicle_speed[1] + 1))
        vx = speed if rng.random() < 0.5 else -speed
        movers.append(_Mover(VEHICLE, int(rng.integers(w)), y, vw, vh, vx, palette[VEHICLE]))
    n_ped = int(rng.integers(cfg.pedestrians[0], cfg.pedestrians[1] + 1))
    for _ in range(n_ped):
        pw = int(rng.integers(2, 4))
        ph = int(rng.integers(max(4, h // 10), max(5, h // 7)))
        y = int(rng.integers(horizon, max(horizon + 1, h - ph)))
        speed = int(rng.integers(cfg.pedestrian_speed[0], cfg.pedestrian_speed[1] + 1))
        vx = speed if rng.random() < 0.5 else -speed
        movers.append(_Mover(PEDESTRIAN, int(rng.integers(w)), y, pw, ph, vx, palette[PEDESTRIAN]))
    return [m for m in movers if m.cls < cfg.classes]


def generate_sequence(cfg: SceneConfig, seed: int, sequence_id: str | None = None) -> FrameSequence:
    """Render one sequence. Identical (cfg, seed) gives byte-identical output.

    The scene stream and the weather stream are independent, so changing only
    ``cfg.weather`` leaves the clean scene untouched.
    """
    cfg.validate()
    scene_rng = np.random.default_rng([seed, 0])
    weather_rng = np.random.default_rng([seed, 1])

    palette = np.clip(PALETTES[cfg.palette] + scene_rng.uniform(-cfg.color_jitter, cfg.color_jitter, PALETTE.shape), 0, 1)
    bg_image, bg_labels, horizon = _render_background(cfg, scene_rng, palette)
    movers = _spawn_movers(cfg, scene_rng, palette, horizon)
    wp = sample_weather(cfg, weather_rng)

    t_count, h, w = cfg.frames, cfg.height, cfg.width
    frames = np.empty((t_count, h, w, 3))
    labels = np.empty((t_count, h, w), dtype=np.int64)
    for t in range(t_count):
        img = bg_image.copy()
        lab = bg_labels.copy()
        for m in movers:
            cols = (m.x + m.vx * t + np.arange(m.w)) % w
            rows = slice(m.y, min(m.y + m.h, h))
            lab[rows, cols] = m.cls
            img[rows, cols] = m.color
        frames[t] = apply_weather(img, wp)
        labels[t] = lab
    return FrameSequence(
        frames=frames,
        labels=labels,
        weather=wp,
        seed=int(seed),
        sequence_id=sequence_id or f"seq_{seed}",
        class_names=CLASS_NAMES[: cfg.classes],
    )


def clean_background(cfg: SceneConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Weather-free background image and labels for (cfg, seed)."""
    scene_rng = np.random.default_rng([seed, 0])
    palette = np.clip(PALETTES[cfg.palette] + scene_rng.uniform(-cfg.color_jitter, cfg.color_jitter, PALETTE.shape), 0, 1)
    image, labels, _ = _render_background(cfg, scene_rng, palette)
    return image, labels


def dataset_weather(mode: str, count: int, seed: int) -> list[str]:
    """Per-sequence weather tags for a dataset of ``count`` sequences."""
    if mode.strip().lower() != "mixed":
        tag = weather_tag(parse_weather(mode))
        return [tag] * count
    order = np.random.default_rng([seed, 7]).permutation(len(MIXED_SCHEDULE))
    return [MIXED_SCHEDULE[order[i % len(order)]] for i in range(count)]


# ---------------------------------------------------------------------------
# category-agnostic masks


def connected_instances(labels: np.ndarray) -> np.ndarray:
    """Each 4-connected component of each class becomes its own id (0-based, scan order)."""
    out = np.zeros(labels.shape, dtype=np.int64)
    next_id = 0
    for c in np.unique(labels):
        comp, n = ndimage.label(labels == c)
        mask = comp > 0
        out[mask] = comp[mask] - 1 + next_id
        next_id += n
    return out


def generate_category_agnostic_masks(seq: FrameSequence, seed: int, jitter: float = 0.15) -> np.ndarray:
    """Instance masks (T x H x W) that carry no class information.

    Ids are shuffled per frame, and each boundary pixel is handed to a random
    4-neighbour's instance with probability ``jitter``. Every pixel keeps
    exactly one id, so the masks always partition the grid.
    """
    rng = np.random.default_rng([seed, 11])
    out = np.empty(seq.labels.shape, dtype=np.int64)
    for t, lab in enumerate(seq.labels):
        inst = connected_instances(lab)
        n = int(inst.max()) + 1
        inst = rng.permutation(n)[inst]
        if jitter > 0:
            inst = _jitter_boundaries(inst, jitter, rng)
        out[t] = inst
    return out


def _jitter_boundaries(inst: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    h, w = inst.shape
    padded = np.pad(inst, 1, mode="edge")
    neighbours = np.stack(
        [padded[:-2, 1:-1], padded[2:, 1:-1], padded[1:-1, :-2], padded[1:-1, 2:]]
    )  # up, down, left, right
    differs = neighbours != inst[None]
    boundary = differs.any(axis=0)
    flip = boundary & (rng.random((h, w)) < p)
    # pick uniformly among differing neighbours
    scores = rng.random((4, h, w)) * differs
    choice = scores.argmax(axis=0)
    picked = np.take_along_axis(neighbours, choice[None], axis=0)[0]
    return np.where(flip, picked, inst)


# ---------------------------------------------------------------------------
# PPM / PGM


def _read_pnm(path: Path, magic: bytes) -> np.ndarray:
    raw = path.read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != magic:
        raise DatasetError(f"{path}: expected {magic.decode()} file, got {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = w * h * channels
    if len(raw) - pos < count * dtype.itemsize:
        raise DatasetError(f"{path}: truncated pixel data")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos).astype(np.int64)
    return data.reshape((h, w, 3) if channels == 3 else (h, w))


def write_ppm(path, image: np.ndarray) -> None:
    h, w = image.shape[:2]
    q = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + q.tobytes())


def read_ppm(path) -> np.ndarray:
    return _read_pnm(Path(path), b"P6").astype(np.float64) / 255.0


def write_pgm(path, ids: np.ndarray) -> None:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() > 65535):
        raise ValueError(f"{path}: ids out of PGM range")
    h, w = ids.shape
    if ids.size == 0 or ids.max() <= 255:
        payload, maxval = ids.astype(np.uint8).tobytes(), 255
    else:
        payload, maxval = ids.astype(">u2").tobytes(), 65535
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode() + payload)


def read_pgm(path) -> np.ndarray:
    return _read_pnm(Path(path), b"P5")


# ---------------------------------------------------------------------------
# sequence directories

MANIFEST = "manifest.json"


def frame_name(t: int) -> str:
    return f"frame_{t:04d}.ppm"


def label_name(t: int) -> str:
    return f"label_{t:04d}.pgm"


def write_sequence(seq: FrameSequence, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for t in range(len(seq)):
        write_ppm(d / frame_name(t), seq.frames[t])
        write_pgm(d / label_name(t), seq.labels[t])
        names.append(frame_name(t))
    manifest = {
        "sequence_id": seq.sequence_id,
        "seed": seq.seed,
        "weather": seq.weather.tag,
        "frame_count": len(seq),
        "width": seq.width,
        "height": seq.height,
        "classes": list(seq.class_names),
        "frames": names,
        "labels": [label_name(t) for t in range(len(seq))],
        "weather_params": seq.weather.to_dict(),
    }
    (d / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.is_file():
        raise DatasetError(f"{directory}: no manifest ({MANIFEST}) found")
    try:
        m = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: malformed manifest: {e}") from None
    required = ("sequence_id", "seed", "weather", "frame_count", "width", "height", "classes")
    missing = [k for k in required if k not in m]
    if missing:
        raise DatasetError(f"{path}: malformed manifest, missing {missing}")
    return m


def read_sequence(directory) -> FrameSequence:
    d = Path(directory)
    m = read_manifest(d)
    t_count, h, w = int(m["frame_count"]), int(m["height"]), int(m["width"])
    frame_files = m.get("frames") or [frame_name(t) for t in range(t_count)]
    label_files = m.get("labels") or [label_name(t) for t in range(t_count)]
    if len(frame_files) != t_count or len(label_files) != t_count:
        raise DatasetError(f"{d}: manifest lists {len(frame_files)} frames but frame_count={t_count}")
    frames = np.empty((t_count, h, w, 3))
    labels = np.empty((t_count, h, w), dtype=np.int64)
    for t in range(t_count):
        fp, lp = d / frame_files[t], d / label_files[t]
        if not fp.is_file():
            raise DatasetError(f"{d}: missing frame {t} ({frame_files[t]})")
        if not lp.is_file():
            raise DatasetError(f"{d}: missing label map for frame {t} ({label_files[t]})")
        img, lab = read_ppm(fp), read_pgm(lp)
        if img.shape[:2] != (h, w) or lab.shape != (h, w):
            raise DatasetError(
                f"{d}: frame {t} dimension mismatch: image {img.shape[:2]}, label {lab.shape}, manifest {(h, w)}"
            )
        frames[t], labels[t] = img, lab
    wp = m.get("weather_params")
    weather = WeatherParams.from_dict(wp) if wp else WeatherParams(kinds=parse_weather(m["weather"]))
    return FrameSequence(
        frames=frames,
        labels=labels,
        weather=weather,
        seed=int(m["seed"]),
        sequence_id=str(m["sequence_id"]),
        class_names=tuple(m["classes"]),
    )


def mask_name(t: int) -> str:
    return f"mask_{t:04d}.pgm"


def write_masks(masks: np.ndarray, directory) -> None:
    d = Path(directory)
    for t, m in enumerate(masks):
        write_pgm(d / mask_name(t), m)


def read_masks(directory, frame_count: int) -> np.ndarray:
    d = Path(directory)
    out = []
    for t in range(frame_count):
        p = d / mask_name(t)
        if not p.is_file():
            raise DatasetError(f"{d}: missing instance mask for frame {t}")
        out.append(read_pgm(p))
    return np.stack(out)


def with_weather(cfg: SceneConfig, tag: str) -> SceneConfig:
    return replace(cfg, weather=tag)
