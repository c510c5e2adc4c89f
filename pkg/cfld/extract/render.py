"""
Rasterisation of pose maps and stick-person images.

Everything is drawn with Pillow at 4x the target resolution and box-filtered down, which gives
anti-aliased edges while keeping flat regions exactly at their fill colour.
"""

from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw

from cfld.extract.poses import BONES, K, PoseSpec
from cfld.numkit.rng import Rng

SUPERSAMPLE = 4

Color = tuple[int, int, int]

BONE_COLORS: dict[tuple[str, str], Color] = {
    ("neck", "head"): (255, 255, 255),
    ("neck", "left_shoulder"): (255, 0, 0),
    ("neck", "right_shoulder"): (0, 255, 0),
    ("left_shoulder", "left_elbow"): (0, 0, 255),
    ("right_shoulder", "right_elbow"): (255, 255, 0),
    ("left_elbow", "left_hand"): (255, 0, 255),
    ("right_elbow", "right_hand"): (0, 255, 255),
    ("neck", "hip"): (255, 128, 0),
    ("hip", "feet"): (128, 0, 255),
}
HEAD_BONE_BACK: Color = (128, 128, 128)

# Colours drawn from the grid {25, 128, 230}^3, so any two differ by >= 102 in some channel
PALETTE: tuple[Color, ...] = (
    (230, 25, 25),
    (25, 230, 25),
    (25, 25, 230),
    (230, 230, 25),
    (230, 25, 230),
    (25, 230, 230),
    (230, 128, 25),
    (128, 25, 230),
    (25, 128, 128),
    (230, 230, 230),
    (25, 25, 25),
    (128, 128, 128),
)
MIN_COLOR_DISTANCE = 100.0
PATTERNS = ("solid", "stripes", "dots")


@dataclass(frozen=True)
class AppearanceSpec:
    torso: Color
    limb: Color
    head: Color
    background: Color
    pattern_color: Color
    pattern: str = "solid"
    phase: float = 0.0

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ValueError(f"Unknown pattern: {self.pattern}. Available patterns: {list(PATTERNS)}")

    @property
    def colors(self) -> tuple[Color, ...]:
        return (self.torso, self.limb, self.head, self.background, self.pattern_color)

    def to_dict(self) -> dict:
        return {
            "torso": list(self.torso),
            "limb": list(self.limb),
            "head": list(self.head),
            "background": list(self.background),
            "pattern_color": list(self.pattern_color),
            "pattern": self.pattern,
            "phase": self.phase,
        }


def sample_appearance(rng: Rng) -> AppearanceSpec:
    order = rng.permutation(len(PALETTE))
    torso, limb, head, background, pattern_color = (PALETTE[i] for i in order[:5])
    return AppearanceSpec(
        torso=torso,
        limb=limb,
        head=head,
        background=background,
        pattern_color=pattern_color,
        pattern=PATTERNS[rng.integers(0, len(PATTERNS))],
        phase=float(rng.uniform()),
    )


def _to_array(image: Image.Image, height: int, width: int) -> np.ndarray:
    small = image.resize((width, height), Image.Resampling.BOX)
    return np.asarray(small, dtype=np.float32).transpose(2, 0, 1) / 255.0 * 2.0 - 1.0


def _canvas_points(pose: PoseSpec, height: int, width: int) -> np.ndarray:
    return pose.array * np.array([width * SUPERSAMPLE, height * SUPERSAMPLE])


def _capsule(draw: ImageDraw.ImageDraw, p: np.ndarray, q: np.ndarray, width: float, fill) -> None:
    radius = width / 2.0
    draw.line([tuple(p), tuple(q)], fill=fill, width=max(1, int(round(width))))
    for x, y in (p, q):
        draw.ellipse([x - radius, y - radius, x + radius, y + radius], fill=fill)


def bone_color(bone: tuple[str, str], facing_front: bool) -> Color:
    if bone == ("neck", "head") and not facing_front:
        return HEAD_BONE_BACK
    return BONE_COLORS[bone]


def render_pose(pose: PoseSpec, height: int = 64, width: int = 64) -> np.ndarray:
    """Skeleton map [3, H, W] in [-1, 1]: one coloured segment per bone on black."""
    canvas = Image.new("RGB", (width * SUPERSAMPLE, height * SUPERSAMPLE), (0, 0, 0))
    draw = ImageDraw.Draw(canvas)
    points = _canvas_points(pose, height, width)
    line_width = max(2, round(0.045 * width)) * SUPERSAMPLE
    for bone in BONES:
        draw.line(
            [tuple(points[K[bone[0]]]), tuple(points[K[bone[1]]])],
            fill=bone_color(bone, pose.facing_front),
            width=line_width,
        )
    return _to_array(canvas, height, width)


def _torso_pattern(
    points: np.ndarray, facing_front: bool, appearance: AppearanceSpec, size: tuple[int, int]
) -> np.ndarray:
    """Boolean map (True = pattern colour) in torso-local coordinates."""
    width, height = size
    neck, hip = points[K["neck"]], points[K["hip"]]
    axis = (hip - neck) / np.linalg.norm(hip - neck)
    ys, xs = np.mgrid[0:height, 0:width] + 0.5
    along = (xs - neck[0]) * axis[0] + (ys - neck[1]) * axis[1]
    across = (xs - neck[0]) * -axis[1] + (ys - neck[1]) * axis[0]
    period = 0.08 * width
    if appearance.pattern == "solid":
        return np.zeros((height, width), dtype=bool)
    if appearance.pattern == "stripes":
        coordinate = along if facing_front else across
        return np.floor(coordinate / period + appearance.phase).astype(np.int64) % 2 == 1
    shift = 0.0 if facing_front else 0.5
    a = np.mod(along / period + appearance.phase + shift, 1.0) - 0.5
    b = np.mod(across / period + shift, 1.0) - 0.5
    return a * a + b * b < 0.09


def render_person(pose: PoseSpec, appearance: AppearanceSpec, height: int = 64, width: int = 64) -> np.ndarray:
    """Person image [3, H, W] in [-1, 1]: filled capsules per body part over the background."""
    size = (width * SUPERSAMPLE, height * SUPERSAMPLE)
    canvas = Image.new("RGB", size, appearance.background)
    draw = ImageDraw.Draw(canvas)
    points = _canvas_points(pose, height, width)
    scale = width * SUPERSAMPLE

    def at(name: str) -> np.ndarray:
        return points[K[name]]

    _capsule(draw, at("hip"), at("feet"), 0.12 * scale, appearance.limb)

    mask = Image.new("L", size, 0)
    mask_draw = ImageDraw.Draw(mask)
    _capsule(mask_draw, at("neck"), at("hip"), 0.16 * scale, 255)
    _capsule(mask_draw, at("left_shoulder"), at("right_shoulder"), 0.08 * scale, 255)
    pattern = _torso_pattern(points, pose.facing_front, appearance, size)
    torso = np.where(pattern[..., None], appearance.pattern_color, appearance.torso).astype(np.uint8)
    canvas = Image.composite(Image.fromarray(torso), canvas, mask)
    draw = ImageDraw.Draw(canvas)

    for side in ("left", "right"):
        _capsule(draw, at(f"{side}_shoulder"), at(f"{side}_elbow"), 0.06 * scale, appearance.limb)
        _capsule(draw, at(f"{side}_elbow"), at(f"{side}_hand"), 0.06 * scale, appearance.limb)
    _capsule(draw, at("neck"), at("head"), 0.05 * scale, appearance.head)
    radius = 0.07 * scale
    head = at("head")
    draw.ellipse([head[0] - radius, head[1] - radius, head[0] + radius, head[1] + radius], fill=appearance.head)
    return _to_array(canvas, height, width)


def color_histogram(image: np.ndarray, bins: int = 4) -> np.ndarray:
    """Normalised joint RGB histogram with `bins` levels per channel."""
    pixels = np.rint((np.clip(image, -1.0, 1.0) + 1.0) / 2.0 * 255.0).astype(np.int64)
    levels = np.minimum(pixels * bins // 256, bins - 1)
    codes = (levels[0] * bins + levels[1]) * bins + levels[2]
    histogram = np.bincount(codes.reshape(-1), minlength=bins**3).astype(np.float64)
    return histogram / histogram.sum()


def bone_centroids(pose_map: np.ndarray, tolerance: float = 0.2) -> np.ndarray:
    """Recover bone midpoints [len(BONES), 2] (normalised x, y) from a rendered pose map.

    Each pixel is assigned to the bone whose colour is nearest, if within `tolerance` in every
    channel; a bone's estimate is the centroid of its pixels (NaN when none survive).
    """
    _, height, width = pose_map.shape
    pixels = (pose_map.transpose(1, 2, 0) + 1.0) / 2.0
    candidates = [
        [np.asarray(BONE_COLORS[bone]) / 255.0]
        + ([np.asarray(HEAD_BONE_BACK) / 255.0] if bone == ("neck", "head") else [])
        for bone in BONES
    ]
    flat = [(index, color) for index, colors in enumerate(candidates) for color in colors]
    distances = np.stack([np.abs(pixels - color).max(axis=-1) for _, color in flat])
    nearest = distances.argmin(axis=0)
    close = distances.min(axis=0) < tolerance
    owner = np.array([index for index, _ in flat])[nearest]
    ys, xs = np.mgrid[0:height, 0:width] + 0.5
    centroids = np.full((len(BONES), 2), np.nan)
    for index in range(len(BONES)):
        selected = close & (owner == index)
        if selected.any():
            centroids[index] = (xs[selected].mean() / width, ys[selected].mean() / height)
    return centroids


def nearest_appearance(query: np.ndarray, gallery: list[np.ndarray], bins: int = 4) -> int:
    """Index of the gallery image whose colour histogram is closest (L1) to the query's."""
    target = color_histogram(query, bins)
    distances = [np.abs(color_histogram(image, bins) - target).sum() for image in gallery]
    return int(np.argmin(distances))

