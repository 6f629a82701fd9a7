"""
Synthetic crowd scenes with vertical-only perspective, density rasterization
and PGM/CSV dataset storage
"""
import csv
import math
import os
from dataclasses import dataclass, fields
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.special import erf

from .config import (DEFAULT_IMAGE_SIZE, DEFAULT_SIGMA, MANIFEST_NAME, PGM_MAXVAL, SCENE_SPEC_NAME,
                     parse_key_values)
from .exceptions import ConfigError, ContractError, ParseError
from .utils import ensure_directory, spawn_seeds

TRUNCATION = 4.0  # Gaussian support, in sigmas


@dataclass
class SceneSpec:
    """Scene layout: depth bands, linear radius law r(y) = r0 + g * y, clutter"""
    height: int = DEFAULT_IMAGE_SIZE
    width: int = DEFAULT_IMAGE_SIZE
    expected_counts: Tuple[float, ...] = (12.0, 9.0, 6.0, 3.0)  # per band, top to bottom
    radius_base: float = 1.5
    radius_gain: float = 0.05
    clutter: float = 4.0            # expected number of background discs
    intensity: float = 0.85
    intensity_jitter: float = 0.1
    clutter_intensity: float = 0.35
    sigma: float = DEFAULT_SIGMA    # density Gaussian, image pixels
    density_downsample: int = 4     # image pixels per density pixel

    def validate(self) -> "SceneSpec":
        if self.height < 1 or self.width < 1:
            raise ConfigError(f"scene size must be positive, got {self.height}x{self.width}")
        if not self.expected_counts:
            raise ConfigError("scene spec needs at least one band")
        if any(c < 0 for c in self.expected_counts):
            raise ConfigError("expected counts must be >= 0")
        if self.radius_base <= 0 or self.radius_gain < 0:
            raise ConfigError("radius law needs r0 > 0 and g >= 0")
        if 2 * self.radius_at(self.height) >= min(self.height, self.width):
            raise ConfigError("heads at the bottom of the scene do not fit inside the image")
        if self.clutter < 0 or self.sigma <= 0:
            raise ConfigError("clutter must be >= 0 and sigma > 0")
        if self.density_downsample < 1 or self.height % self.density_downsample or self.width % self.density_downsample:
            raise ConfigError(f"density_downsample {self.density_downsample} must divide the scene size")
        return self

    @property
    def bands(self) -> int:
        return len(self.expected_counts)

    @property
    def density_shape(self) -> Tuple[int, int]:
        return self.height // self.density_downsample, self.width // self.density_downsample

    def radius_at(self, y):
        """Head radius at image row y; constant along rows, non-decreasing downwards"""
        return self.radius_base + self.radius_gain * np.asarray(y, dtype=np.float64)


class SceneSample:
    """One scene: image in [0, 1], head points (x, y), density map"""

    def __init__(self, image: np.ndarray, points: np.ndarray, density: np.ndarray, name: str = "",
                 sigma: float = DEFAULT_SIGMA):
        self.image = np.asarray(image, dtype=np.float64)
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        self.density = np.asarray(density, dtype=np.float64)
        self.name = name
        self.sigma = sigma  # density Gaussian the map was rasterized with, image pixels

    @property
    def count(self) -> int:
        return int(self.points.shape[0])

    def __repr__(self):
        return f"SceneSample({self.name or 'unnamed'}, count={self.count}, image={self.image.shape})"


def load_scene_spec(path: str) -> SceneSpec:
    """Flat 'key = value' scene spec; expected_counts is comma separated"""
    kinds = {f.name: (str if f.name == "expected_counts" else f.type) for f in fields(SceneSpec)}
    try:
        with open(path, encoding="utf-8") as handle:
            values = parse_key_values(handle.read(), kinds)
    except OSError as e:
        raise ConfigError(f"cannot read scene spec {path}: {e}")
    if "expected_counts" in values:
        try:
            values["expected_counts"] = tuple(float(v) for v in values["expected_counts"].split(",") if v.strip())
        except ValueError:
            raise ConfigError(f"expected_counts must be comma separated numbers in {path}")
    return SceneSpec(**values).validate()


def format_scene_spec(spec: SceneSpec) -> str:
    """Inverse of load_scene_spec"""
    lines = []
    for f in fields(spec):
        value = getattr(spec, f.name)
        text = ", ".join(repr(float(v)) for v in value) if f.name == "expected_counts" else repr(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- rendering

def _stamp_disc(image: np.ndarray, cx: float, cy: float, radius: float, value: float):
    """Anti-aliased filled disc, composited with max"""
    height, width = image.shape
    x0, x1 = max(0, int(cx - radius - 1)), min(width, int(cx + radius + 2))
    y0, y1 = max(0, int(cy - radius - 1)), min(height, int(cy + radius + 2))
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    distance = np.hypot(xs + 0.5 - cx, ys + 0.5 - cy)
    coverage = np.clip(radius + 0.5 - distance, 0.0, 1.0)
    np.maximum(image[y0:y1, x0:x1], value * coverage, out=image[y0:y1, x0:x1])


def generate_scene(spec: SceneSpec, seed: int) -> SceneSample:
    """Poisson head count per band, uniform placement in band, heads drawn as discs of radius r(y)"""
    spec.validate()
    rng = np.random.default_rng(seed)
    image = np.zeros((spec.height, spec.width))
    band_height = spec.height / spec.bands

    clutter_count = rng.poisson(spec.clutter)
    for _ in range(clutter_count):
        cx = rng.uniform(0, spec.width)
        cy = rng.uniform(0, spec.height)
        radius = float(spec.radius_at(cy)) * rng.uniform(0.5, 1.5)
        value = spec.clutter_intensity * (1.0 + rng.uniform(-spec.intensity_jitter, spec.intensity_jitter))
        _stamp_disc(image, cx, cy, radius, value)

    points = []
    for band, expected in enumerate(spec.expected_counts):
        count = rng.poisson(expected)
        ys = rng.uniform(band * band_height, (band + 1) * band_height, size=count)
        radii = spec.radius_at(ys)
        ys = np.clip(ys, radii, spec.height - radii)
        xs = rng.uniform(radii, spec.width - radii)
        jitter = rng.uniform(-spec.intensity_jitter, spec.intensity_jitter, size=count)
        for x, y, r, j in zip(xs, ys, radii, jitter):
            _stamp_disc(image, x, y, r, spec.intensity * (1.0 + j))
            points.append((x, y))

    points = np.array(points, dtype=np.float64).reshape(-1, 2)
    scale = 1.0 / spec.density_downsample
    density = rasterize_density(points * scale, spec.density_shape, spec.sigma * scale)
    return SceneSample(np.clip(image, 0.0, 1.0), points, density, sigma=spec.sigma)


def _axis_weights(center: float, sigma: float, start: int, stop: int) -> np.ndarray:
    """Gaussian mass of each pixel [i, i+1) in [start, stop), truncated at 4 sigma"""
    lo = np.maximum(np.arange(start, stop, dtype=np.float64), center - TRUNCATION * sigma)
    hi = np.minimum(np.arange(start + 1, stop + 1, dtype=np.float64), center + TRUNCATION * sigma)
    scale = 1.0 / (math.sqrt(2.0) * sigma)
    mass = 0.5 * (erf((hi - center) * scale) - erf((lo - center) * scale))
    return np.where(hi > lo, mass, 0.0)


def rasterize_density(points, shape: Tuple[int, int], sigma: float) -> np.ndarray:
    """Sum of unit-mass isotropic Gaussians, one per point, in map pixel units"""
    if sigma <= 0:
        raise ContractError(f"density sigma must be > 0, got {sigma}")
    height, width = shape
    density = np.zeros((height, width))
    reach = TRUNCATION * sigma
    for x, y in np.asarray(points, dtype=np.float64).reshape(-1, 2):
        x0, x1 = max(0, int(math.floor(x - reach))), min(width, int(math.ceil(x + reach)))
        y0, y1 = max(0, int(math.floor(y - reach))), min(height, int(math.ceil(y + reach)))
        if x0 >= x1 or y0 >= y1:
            continue
        density[y0:y1, x0:x1] += np.outer(_axis_weights(y, sigma, y0, y1), _axis_weights(x, sigma, x0, x1))
    return density


# ---------------------------------------------------------------- augmentation

def flip_horizontal(sample: SceneSample) -> SceneSample:
    """Mirror image, points and density left-right"""
    width = sample.image.shape[1]
    points = sample.points.copy()
    points[:, 0] = width - points[:, 0]
    return SceneSample(sample.image[:, ::-1].copy(), points, sample.density[:, ::-1].copy(), sample.name,
                       sample.sigma)


def rescale_scene(sample: SceneSample, factor: float) -> SceneSample:
    """Zoom about the image centre, crop/pad back to size, re-rasterize the density at the scene's sigma"""
    height, width = sample.image.shape
    # grid_mode scales pixel edges, so a point at x lands at x * zw / width like the labels
    zoomed = ndimage.zoom(sample.image, factor, order=1, mode="grid-constant", grid_mode=True)
    canvas = np.zeros_like(sample.image)
    zh, zw = zoomed.shape
    # centre the zoomed image on the canvas
    src_y, dst_y = max(0, (zh - height) // 2), max(0, (height - zh) // 2)
    src_x, dst_x = max(0, (zw - width) // 2), max(0, (width - zw) // 2)
    span_y, span_x = min(height, zh), min(width, zw)
    canvas[dst_y:dst_y + span_y, dst_x:dst_x + span_x] = zoomed[src_y:src_y + span_y, src_x:src_x + span_x]

    points = sample.points * (zw / width, zh / height) - (src_x - dst_x, src_y - dst_y)
    inside = (points[:, 0] >= 0) & (points[:, 0] < width) & (points[:, 1] >= 0) & (points[:, 1] < height)
    points = points[inside]
    map_height, map_width = sample.density.shape
    ratio = map_width / width
    density = rasterize_density(points * ratio, (map_height, map_width), sample.sigma * ratio)
    return SceneSample(np.clip(canvas, 0.0, 1.0), points, density, sample.name, sample.sigma)


# ---------------------------------------------------------------- PGM / CSV

def write_pgm(path: str, values: np.ndarray, scale: Optional[float] = None) -> float:
    """16-bit binary PGM of values / scale in [0, 1]; the scale is kept in a header comment"""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ContractError(f"PGM needs a 2-D array, got shape {values.shape}")
    if scale is None:
        peak = float(values.max()) if values.size else 0.0
        scale = peak if peak > 0 else 1.0
    quantized = np.rint(np.clip(values / scale, 0.0, 1.0) * PGM_MAXVAL).astype(">u2")
    height, width = values.shape
    header = f"P5\n# scale {scale!r}\n{width} {height}\n{PGM_MAXVAL}\n".encode("ascii")
    with open(path, "wb") as handle:
        handle.write(header + quantized.tobytes())
    return scale


def read_pgm(path: str) -> Tuple[np.ndarray, float]:
    """Read a binary PGM; returns (values * scale, scale)"""
    with open(path, "rb") as handle:
        payload = handle.read()

    tokens = []
    scale = 1.0
    offset = 0
    field_names = ("magic number", "width", "height", "maxval")
    while len(tokens) < 4:
        while offset < len(payload) and payload[offset:offset + 1].isspace():
            offset += 1
        if offset >= len(payload):
            raise ParseError(f"truncated PGM header: missing {field_names[len(tokens)]}", path, offset=offset)
        if payload[offset:offset + 1] == b"#":
            end = payload.find(b"\n", offset)
            end = len(payload) if end < 0 else end
            comment = payload[offset + 1:end].decode("ascii", "replace").split()
            if len(comment) == 2 and comment[0] == "scale":
                try:
                    scale = float(comment[1])
                except ValueError:
                    raise ParseError(f"bad scale comment {comment[1]!r}", path, offset=offset)
            offset = end + 1
            continue
        start = offset
        while offset < len(payload) and not payload[offset:offset + 1].isspace() and payload[offset:offset + 1] != b"#":
            offset += 1
        tokens.append((payload[start:offset], start))

    magic, _ = tokens[0]
    if magic != b"P5":
        raise ParseError(f"not a binary PGM (magic {magic!r})", path, offset=tokens[0][1])
    numbers = []
    for (token, position), name in zip(tokens[1:], field_names[1:]):
        try:
            numbers.append(int(token))
        except ValueError:
            raise ParseError(f"invalid PGM {name} {token!r}", path, offset=position)
    width, height, maxval = numbers
    if width < 1 or height < 1 or not 0 < maxval <= 65535:
        raise ParseError(f"invalid PGM geometry {width}x{height} maxval {maxval}", path, offset=tokens[1][1])

    offset += 1  # single whitespace after maxval
    dtype = ">u2" if maxval > 255 else "u1"
    expected = width * height * np.dtype(dtype).itemsize
    if len(payload) - offset < expected:
        raise ParseError(f"PGM raster truncated: need {expected} bytes, found {len(payload) - offset}",
                         path, offset=len(payload))
    raster = np.frombuffer(payload[offset:offset + expected], dtype=dtype).reshape(height, width)
    return raster.astype(np.float64) / maxval * scale, scale


def write_points(path: str, points: np.ndarray):
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["x", "y"])
        for x, y in np.asarray(points, dtype=np.float64).reshape(-1, 2):
            writer.writerow([repr(float(x)), repr(float(y))])


def read_points(path: str) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as handle:
        rows = list(csv.reader(handle))
    if not rows or [c.strip() for c in rows[0]] != ["x", "y"]:
        raise ParseError("points CSV must start with the header 'x,y'", path, line=1)
    points = []
    for line_number, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise ParseError(f"expected 2 columns, got {len(row)}", path, line=line_number)
        try:
            points.append((float(row[0]), float(row[1])))
        except ValueError:
            raise ParseError(f"non-numeric coordinate in {row!r}", path, line=line_number)
    return np.array(points, dtype=np.float64).reshape(-1, 2)


def scene_paths(directory: str, name: str) -> Tuple[str, str, str]:
    """Image, density and points file of one scene"""
    base = os.path.join(directory, name)
    return f"{base}.pgm", f"{base}_density.pgm", f"{base}.csv"


def save_scene(sample: SceneSample, directory: str, name: str):
    image_path, density_path, points_path = scene_paths(directory, name)
    write_pgm(image_path, sample.image, scale=1.0)
    write_pgm(density_path, sample.density)
    write_points(points_path, sample.points)


def load_scene(directory: str, name: str, sigma: float = DEFAULT_SIGMA) -> SceneSample:
    image_path, density_path, points_path = scene_paths(directory, name)
    image, _ = read_pgm(image_path)
    density, _ = read_pgm(density_path)
    return SceneSample(image, read_points(points_path), density, name, sigma)


# ---------------------------------------------------------------- datasets

def scene_name(index: int) -> str:
    return f"scene_{index:05d}"


def write_dataset(directory: str, spec: SceneSpec, n: int, seed: int, verbose: bool = False) -> List[str]:
    """Generate n scenes plus a manifest; returns the scene names"""
    spec.validate()
    ensure_directory(directory)
    names = []
    for index, scene_seed in enumerate(spawn_seeds(seed, n)):
        name = scene_name(index)
        save_scene(generate_scene(spec, scene_seed), directory, name)
        names.append(name)
    with open(os.path.join(directory, MANIFEST_NAME), "w", encoding="utf-8") as handle:
        handle.write("".join(f"{name}\n" for name in names))
    with open(os.path.join(directory, SCENE_SPEC_NAME), "w", encoding="utf-8") as handle:
        handle.write(format_scene_spec(spec))
    if verbose:
        print(f"🗂️ Wrote {len(names)} scenes to {directory}")
    return names


def read_manifest(directory: str) -> List[str]:
    path = os.path.join(directory, MANIFEST_NAME)
    try:
        with open(path, encoding="utf-8") as handle:
            lines = handle.read().splitlines()
    except OSError as e:
        raise ParseError(f"cannot read dataset manifest: {e}", path)
    names = []
    for line_number, line in enumerate(lines, start=1):
        name = line.strip()
        if not name:
            continue
        if os.sep in name or "/" in name:
            raise ParseError(f"manifest entry {name!r} is not a basename", path, line=line_number)
        names.append(name)
    return names


def load_dataset(directory: str) -> List[SceneSample]:
    """Scenes listed in the manifest; sigma comes from the stored scene spec when present"""
    spec_path = os.path.join(directory, SCENE_SPEC_NAME)
    sigma = load_scene_spec(spec_path).sigma if os.path.exists(spec_path) else DEFAULT_SIGMA
    return [load_scene(directory, name, sigma) for name in read_manifest(directory)]


def load_splits(directory: str) -> Tuple[List[SceneSample], List[SceneSample]]:
    """(train, test) from <dir>/train and <dir>/test, or the same scenes twice for a flat dataset"""
    train_dir = os.path.join(directory, "train")
    test_dir = os.path.join(directory, "test")
    if os.path.exists(os.path.join(train_dir, MANIFEST_NAME)):
        train = load_dataset(train_dir)
        test = load_dataset(test_dir) if os.path.exists(os.path.join(test_dir, MANIFEST_NAME)) else train
        return train, test
    scenes = load_dataset(directory)
    return scenes, scenes


def dataset_summary(scenes: Sequence[SceneSample]) -> Tuple[int, float]:
    """Total and mean head count"""
    counts = [s.count for s in scenes]
    total = int(sum(counts))
    return total, (total / len(counts) if counts else 0.0)
