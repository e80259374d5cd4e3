"""Synthetic night-scene corpus with known decompositions, plus folder I/O.

Every scene carries its ground-truth reflectance, illumination and label
map. Scenes are deterministic functions of a seed, so the corpus doubles
as a regression oracle: the rendered image is exactly reflectance times
illumination (plus optional sensor noise) and every light-emitting class
sits on a genuine illumination peak.

Classes: 0 background, 1 road, 2 sidewalk, 3 car, 4 lamp, 5 lit_window.
Lamp and lit_window are the light-correlated classes; their strips are
kept one pixel thin so each labeled pixel is a strict local peak of the
illumination field.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, DimensionError

CLASS_NAMES = ("background", "road", "sidewalk", "car", "lamp", "lit_window")
K_CLASSES = len(CLASS_NAMES)
IGNORE_INDEX = 255
LIGHT_CLASSES = (4, 5)

# fixed palette for colorized prediction dumps
PALETTE = np.array([
    (70, 70, 70),      # background
    (128, 64, 128),    # road
    (244, 35, 232),    # sidewalk
    (0, 0, 142),       # car
    (250, 170, 30),    # lamp
    (220, 220, 0),     # lit_window
], dtype=np.uint8)

# illumination design constants: non-source pixels are capped at _BG_CAP while
# source pixels sit in [_SRC_LO, _SRC_HI], guaranteeing the 1.5x peak margin
_BG_CAP = 0.60
_SRC_LO = 0.92
_SRC_HI = 0.98
_AMBIENT = (0.05, 0.42)


@dataclass
class SyntheticScene:
    reflectance: np.ndarray   # (3,H,W) float32 in [0.05, 0.95]
    illumination: np.ndarray  # (1,H,W) float32 in [0.02, 1]
    labels: np.ndarray        # (H,W) uint8 class ids
    seed: int


@dataclass
class SampleRecord:
    image_path: Path
    label_path: Path
    split: str = "train"


@dataclass
class AugmentationPolicy:
    crop_hw: tuple[int, int] = (64, 128)
    scale_range: tuple[float, float] = (0.5, 2.0)
    flip_prob: float = 0.5
    image_pad_value: float = 0.0
    label_pad_value: int = IGNORE_INDEX


def _smooth_field(rng: np.random.Generator, hw: tuple[int, int], cell: int,
                  lo: float, hi: float) -> np.ndarray:
    """Low-frequency field: coarse random grid, bilinearly upsampled."""
    h, w = hw
    gh = max(2, h // cell + 1)
    gw = max(2, w // cell + 1)
    coarse = rng.uniform(lo, hi, (gh, gw))
    return _resize_bilinear_2d(coarse, (h, w))


def _bilinear_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    i1 = np.clip(i0 + 1, 0, n_in - 1)
    i0 = np.clip(i0, 0, n_in - 1)
    return i0, i1, frac


def _resize_bilinear_2d(a: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    y0, y1, fy = _bilinear_axis(a.shape[0], hw[0])
    x0, x1, fx = _bilinear_axis(a.shape[1], hw[1])
    top = a[y0][:, x0] * (1 - fx) + a[y0][:, x1] * fx
    bot = a[y1][:, x0] * (1 - fx) + a[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def _resize_nearest_2d(a: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    ys = np.clip(((np.arange(hw[0]) + 0.5) * a.shape[0] / hw[0]).astype(np.int64), 0, a.shape[0] - 1)
    xs = np.clip(((np.arange(hw[1]) + 0.5) * a.shape[1] / hw[1]).astype(np.int64), 0, a.shape[1] - 1)
    return a[ys][:, xs]


def _place_strip(rng: np.random.Generator, occupied: np.ndarray, rows: tuple[int, int],
                 cols: tuple[int, int], length: int,
                 vertical: bool = False) -> tuple[int, int] | None:
    """Find a one-pixel-thin slot whose 1-pixel surroundings are free.

    Strips stay thin so every source pixel keeps a mostly-dark 8-neighborhood,
    which is what makes the illumination-peak invariant provable.
    """
    h, w = occupied.shape
    hh, ww = (length, 1) if vertical else (1, length)
    for _ in range(40):
        y = int(rng.integers(rows[0], max(rows[0] + 1, rows[1] - hh)))
        x = int(rng.integers(cols[0], max(cols[0] + 1, cols[1] - ww)))
        y0, y1 = max(0, y - 1), min(h, y + hh + 1)
        x0, x1 = max(0, x - 1), min(w, x + ww + 1)
        if not occupied[y0:y1, x0:x1].any():
            occupied[y0:y1, x0:x1] = True
            return y, x
    return None


def synth_scene(seed: int, hw: tuple[int, int] = (64, 128), k_lights: int = 5) -> SyntheticScene:
    """Deterministic night scene with ground-truth decomposition."""
    h, w = hw
    if h < 32 or w < 32:
        raise ConfigError(f"scene size must be at least 32x32, got {h}x{w}")
    if k_lights < 0:
        raise ConfigError("k_lights must be >= 0")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xD7]))

    horizon = int(h * rng.uniform(0.42, 0.55))
    road_top = int(h * rng.uniform(0.68, 0.80))
    labels = np.zeros((h, w), dtype=np.uint8)
    labels[horizon:road_top] = 2
    labels[road_top:] = 1

    refl = np.empty((3, h, w), dtype=np.float64)
    sky = rng.uniform(0.06, 0.14, 3)
    refl[:] = sky[:, None, None]

    # buildings fill most of the sky band; windows live on their faces
    building_spans: list[tuple[int, int, int]] = []  # (top, x0, x1)
    n_b = int(rng.integers(2, 5))
    edges = np.sort(rng.choice(np.arange(2, w - 2), size=n_b - 1, replace=False)) if n_b > 1 else np.array([], int)
    xs = [0, *edges.tolist(), w]
    for bi in range(n_b):
        x0, x1 = xs[bi], xs[bi + 1]
        if x1 - x0 < 6:
            continue
        top = int(rng.uniform(0.05, 0.55) * horizon)
        color = rng.uniform(0.25, 0.55) * rng.uniform(0.85, 1.15, 3)
        refl[:, top:horizon, x0:x1] = color[:, None, None]
        building_spans.append((top, x0, x1))

    road_gray = rng.uniform(0.20, 0.30)
    refl[:, road_top:, :] = (road_gray * rng.uniform(0.95, 1.05, 3))[:, None, None]
    side_gray = rng.uniform(0.34, 0.46)
    refl[:, horizon:road_top, :] = (side_gray * rng.uniform(0.95, 1.05, 3))[:, None, None]

    # cars: solid rectangles sitting on the road
    car_palette = np.array([(0.45, 0.12, 0.12), (0.12, 0.15, 0.45), (0.38, 0.38, 0.40),
                            (0.12, 0.35, 0.15), (0.50, 0.42, 0.12)])
    for _ in range(int(rng.integers(1, 5))):
        ch = int(rng.integers(6, 11))
        cw = int(rng.integers(10, 21))
        if h - road_top <= ch + 1 or w <= cw + 2:
            continue
        cy = int(rng.integers(road_top, h - ch))
        cx = int(rng.integers(1, w - cw - 1))
        color = car_palette[rng.integers(0, len(car_palette))] * rng.uniform(0.8, 1.2)
        refl[:, cy:cy + ch, cx:cx + cw] = color[:, None, None]
        labels[cy:cy + ch, cx:cx + cw] = 3

    # light sources: thin strips so each labeled pixel is a strict local peak
    n_lamps = (k_lights + 1) // 2
    n_windows = k_lights // 2
    occupied = np.zeros((h, w), dtype=bool)
    occupied[:3, :] = occupied[-3:, :] = True
    occupied[:, :3] = occupied[:, -3:] = True
    sources: list[tuple[int, int, int, int]] = []  # (y, x, height, width)

    lamp_gray = rng.uniform(0.55, 0.75)
    for _ in range(n_lamps):
        length = int(rng.integers(4, 11))
        slot = _place_strip(rng, occupied, (3, max(4, horizon - 6)), (3, w - 3), length)
        if slot is None:
            continue
        y, x = slot
        labels[y, x:x + length] = 4
        refl[:, y, x:x + length] = lamp_gray * rng.uniform(0.9, 1.1, 3)[:, None]
        sources.append((y, x, 1, length))

    for _ in range(n_windows):
        if not building_spans:
            break
        top, x0, x1 = building_spans[int(rng.integers(0, len(building_spans)))]
        if horizon - top < 7 or x1 - x0 < 8:
            continue
        length = int(rng.integers(3, 7))
        vertical = bool(rng.integers(0, 2)) and horizon - top > length + 4
        slot = _place_strip(rng, occupied, (top + 2, horizon - 2), (x0 + 2, x1 - 2),
                            length, vertical=vertical)
        if slot is None:
            continue
        y, x = slot
        hh, ww = (length, 1) if vertical else (1, length)
        labels[y:y + hh, x:x + ww] = 5
        warm = rng.uniform(0.5, 0.7) * np.array([1.05, 1.0, 0.85])
        refl[:, y:y + hh, x:x + ww] = np.clip(warm, 0.1, 0.9)[:, None, None]
        sources.append((y, x, hh, ww))

    # reflectance texture: smooth multiplicative variation plus fine speckle
    tex = _smooth_field(rng, (h, w), cell=8, lo=0.88, hi=1.12)
    refl *= tex[None]
    refl += rng.uniform(-0.03, 0.03, (3, h, w))
    refl = np.clip(refl, 0.05, 0.95)

    # illumination: ambient plus gentle halos, capped away from source level
    amb = rng.uniform(*_AMBIENT)
    illum = np.full((h, w), amb)
    yy, xx = np.mgrid[0:h, 0:w]
    for (y, x, hh, ww) in sources:
        cy = y + (hh - 1) / 2.0
        cx = x + (ww - 1) / 2.0
        amp = rng.uniform(0.15, 0.35)
        sigma = rng.uniform(6.0, 12.0)
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        illum += amp * np.exp(-d2 / (2.0 * sigma * sigma))
    illum = np.clip(illum, 0.02, _BG_CAP)
    for (y, x, hh, ww) in sources:
        illum[y:y + hh, x:x + ww] = rng.uniform(_SRC_LO, _SRC_HI)

    return SyntheticScene(
        reflectance=refl.astype(np.float32),
        illumination=illum[None].astype(np.float32),
        labels=labels,
        seed=int(seed),
    )


def render(scene: SyntheticScene, sensor_noise_sigma: float = 0.0) -> np.ndarray:
    """Compose the image: reflectance times illumination plus sensor noise."""
    if sensor_noise_sigma < 0:
        raise ConfigError("sensor noise sigma must be >= 0")
    x = scene.reflectance.astype(np.float64) * scene.illumination.astype(np.float64)
    if sensor_noise_sigma:
        rng = np.random.default_rng(np.random.SeedSequence([scene.seed, 0x5E]))
        x = x + rng.normal(0.0, sensor_noise_sigma, x.shape)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


# --------------------------------------------------------------------- PNG I/O

def save_image_png(path: Path, chw: np.ndarray) -> None:
    """Float (C,H,W) in [0,1] -> 8-bit PNG (RGB for 3 channels, L for 1)."""
    arr = np.round(np.clip(chw, 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path)
    else:
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def load_image_png(path: Path) -> np.ndarray:
    """8-bit PNG -> float32 (C,H,W) in [0,1]."""
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        return arr[None]
    return np.ascontiguousarray(arr.transpose(2, 0, 1)[:3])


def save_label_png(path: Path, labels: np.ndarray) -> None:
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path)


def load_label_png(path: Path) -> np.ndarray:
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise DataError(f"cannot read label map {path}: {exc}") from exc
    if img.mode != "L":
        img = img.convert("L")
    return np.asarray(img, dtype=np.int64)


def save_prediction_png(path: Path, pred: np.ndarray) -> None:
    """Colorize a (H,W) prediction with the fixed class palette."""
    rgb = PALETTE[np.clip(pred, 0, K_CLASSES - 1)]
    Image.fromarray(rgb, mode="RGB").save(path)


# ------------------------------------------------------------------- loaders

def load_labeled_folder(image_dir: Path, label_dir: Path) -> list[SampleRecord]:
    """Pair <images>/<stem>.png with <labels>/<stem>.png, validating sizes."""
    image_dir, label_dir = Path(image_dir), Path(label_dir)
    if not image_dir.is_dir():
        raise DataError(f"image directory does not exist: {image_dir}")
    if not label_dir.is_dir():
        raise DataError(f"label directory does not exist: {label_dir}")
    images = {p.stem: p for p in sorted(image_dir.glob("*.png"))}
    labels = {p.stem: p for p in sorted(label_dir.glob("*.png"))}
    unmatched = sorted(set(images) ^ set(labels))
    records = []
    for stem in sorted(set(images) & set(labels)):
        with Image.open(images[stem]) as im, Image.open(labels[stem]) as lb:
            if im.size != lb.size:
                raise DataError(f"size mismatch: {images[stem]} is {im.size} "
                                f"but {labels[stem]} is {lb.size}")
        records.append(SampleRecord(images[stem], labels[stem]))
    if unmatched:
        import sys
        print(f"warning: {len(unmatched)} unmatched stems: {', '.join(unmatched[:5])}"
              + ("..." if len(unmatched) > 5 else ""), file=sys.stderr)
    return records


@dataclass
class CorpusSample:
    sample_id: str
    split: str
    seed: int
    root: Path

    def _dir(self) -> Path:
        return self.root / self.split / self.sample_id

    def image(self) -> np.ndarray:
        return load_image_png(self._dir() / "image.png")

    def label(self) -> np.ndarray:
        return load_label_png(self._dir() / "label.png")

    def reflectance(self) -> np.ndarray:
        return load_image_png(self._dir() / "reflectance.png")

    def illumination(self) -> np.ndarray:
        return load_image_png(self._dir() / "illumination.png")


def write_corpus(out_dir: Path, n_train: int = 200, n_val: int = 50,
                 base_seed: int = 0, hw: tuple[int, int] = (64, 128),
                 sensor_noise_sigma: float = 0.01) -> list[CorpusSample]:
    """Generate and persist a corpus; fully deterministic in base_seed."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"output directory not writable: {out_dir}: {exc}") from exc

    samples = []
    manifest_lines = ["id\tsplit\tseed"]
    for split, count, tag in (("train", n_train, 1), ("val", n_val, 2)):
        for i in range(count):
            seed = int(np.random.SeedSequence([int(base_seed), tag, i]).generate_state(1)[0])
            rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0]))
            k_lights = int(rng.integers(6, 15))
            scene = synth_scene(seed, hw=hw, k_lights=k_lights)
            image = render(scene, sensor_noise_sigma)
            sid = f"{i:04d}"
            d = out_dir / split / sid
            d.mkdir(parents=True, exist_ok=True)
            save_image_png(d / "image.png", image)
            save_image_png(d / "reflectance.png", scene.reflectance)
            save_image_png(d / "illumination.png", scene.illumination)
            save_label_png(d / "label.png", scene.labels)
            manifest_lines.append(f"{sid}\t{split}\t{seed}")
            samples.append(CorpusSample(sid, split, seed, out_dir))
    (out_dir / "manifest.tsv").write_text("\n".join(manifest_lines) + "\n")
    return samples


def load_corpus(root: Path) -> dict[str, list[CorpusSample]]:
    root = Path(root)
    manifest = root / "manifest.tsv"
    if not manifest.is_file():
        raise DataError(f"no manifest.tsv under {root}")
    splits: dict[str, list[CorpusSample]] = {}
    lines = manifest.read_text().strip().splitlines()
    if not lines or lines[0] != "id\tsplit\tseed":
        raise DataError(f"malformed manifest header in {manifest}")
    for ln in lines[1:]:
        sid, split, seed = ln.split("\t")
        sample = CorpusSample(sid, split, int(seed), root)
        if not (sample._dir() / "image.png").is_file():
            raise DataError(f"missing sample directory for {split}/{sid}")
        splits.setdefault(split, []).append(sample)
    return splits


# -------------------------------------------------------------- augmentation

def hflip_image(chw: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(chw[..., ::-1])


def augment(policy: AugmentationPolicy, image: np.ndarray, label: np.ndarray,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random scale, pad-or-crop to the policy size, random horizontal flip.

    The same geometric transform hits image and label; labels resample
    nearest-neighbor and pad with the ignore index.
    """
    if image.shape[1:] != label.shape:
        raise DimensionError(f"image {image.shape} and label {label.shape} disagree")
    ch, cw = policy.crop_hw
    lo, hi = policy.scale_range
    scale = float(rng.uniform(lo, hi))
    if scale != 1.0:
        th = max(1, int(round(image.shape[1] * scale)))
        tw = max(1, int(round(image.shape[2] * scale)))
        image = np.stack([_resize_bilinear_2d(c, (th, tw)) for c in image]).astype(np.float32)
        label = _resize_nearest_2d(label, (th, tw))
    h, w = label.shape
    if h < ch or w < cw:
        pad_h, pad_w = max(0, ch - h), max(0, cw - w)
        image = np.pad(image, ((0, 0), (0, pad_h), (0, pad_w)),
                       constant_values=policy.image_pad_value)
        label = np.pad(label, ((0, pad_h), (0, pad_w)),
                       constant_values=policy.label_pad_value)
        h, w = label.shape
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    image = image[:, y0:y0 + ch, x0:x0 + cw]
    label = label[y0:y0 + ch, x0:x0 + cw]
    if rng.uniform() < policy.flip_prob:
        image = hflip_image(image)
        label = np.ascontiguousarray(label[:, ::-1])
    return np.ascontiguousarray(image, dtype=np.float32), np.ascontiguousarray(label)
