"""Synthetic space images with stripe targets, stars, stray light and noise.

Every scene is fully described by a :class:`SceneParams`; rendering is a pure
function of its parameters, so a scene can be regenerated bit-for-bit from the JSON
stored next to its PNG files.
"""

from __future__ import annotations

import json
import logging
import math
import shutil
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

STRAYLIGHT_KINDS = ("none", "sun", "earth", "moon", "mixed")
TEST_LIGHTS = ("sun", "earth", "moon", "mixed")
SPLITS = ("labeled", "unlabeled", "val") + tuple(f"test_{k}" for k in TEST_LIGHTS)
HALF_PEAK_RADIUS = math.sqrt(2.0 * math.log(2.0))  # in units of sigma
SUPERSAMPLE = 3


@dataclass
class StripeParams:
    """One streak.

    The cross-section is flat over ``width`` pixels and falls off as a
    Gaussian of ``profile_sigma`` outside that core; the ends are rounded.
    """

    center: tuple[float, float]
    length: float
    width: float
    angle: float
    peak_intensity: float
    profile_sigma: float = 0.8

    def __post_init__(self):
        self.center = (float(self.center[0]), float(self.center[1]))
        if self.width < 1:
            raise ValueError(f"stripe width must be >= 1, got {self.width}")
        if self.length < 2 * self.width:
            raise ValueError(f"stripe length {self.length} < 2 * width {self.width}")
        if not 0.0 <= self.angle < math.pi:
            raise ValueError(f"stripe angle must be in [0, pi), got {self.angle}")
        if not 0.0 < self.peak_intensity <= 1.0:
            raise ValueError(f"peak_intensity must be in (0, 1], got {self.peak_intensity}")
        if self.profile_sigma <= 0:
            raise ValueError("profile_sigma must be positive")

    @property
    def half_peak_distance(self) -> float:
        """Distance from the axis at which the profile drops to half peak."""
        return self.width / 2.0 + self.profile_sigma * HALF_PEAK_RADIUS

    def endpoints(self):
        r, c = self.center
        dr = math.sin(self.angle) * self.length / 2.0
        dc = math.cos(self.angle) * self.length / 2.0
        return (r - dr, c - dc), (r + dr, c + dc)


@dataclass
class SceneParams:
    image_size: tuple[int, int] = (256, 256)
    stripes: list[StripeParams] = field(default_factory=list)
    star_count: int = 0
    star_sigma_range: tuple[float, float] = (0.6, 1.2)
    straylight_kind: str = "none"
    straylight_strength: float = 0.0
    noise_sigma: float = 0.0
    rng_seed: int = 0
    background_level: float = 0.05

    def __post_init__(self):
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))
        self.star_sigma_range = (float(self.star_sigma_range[0]), float(self.star_sigma_range[1]))
        self.stripes = [s if isinstance(s, StripeParams) else StripeParams(**s) for s in self.stripes]
        h, w = self.image_size
        if h < 64 or w < 64:
            raise ValueError(f"image_size must be at least 64x64, got {self.image_size}")
        if self.straylight_kind not in STRAYLIGHT_KINDS:
            raise ValueError(f"unknown straylight kind {self.straylight_kind!r}")
        for name in ("straylight_strength", "noise_sigma", "background_level"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.star_count < 0:
            raise ValueError("star_count must be >= 0")
        lo, hi = self.star_sigma_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad star_sigma_range {self.star_sigma_range}")
        if not 0 <= int(self.rng_seed) < 2**64:
            raise ValueError("rng_seed must fit in 64 bits")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneParams":
        d = dict(d)
        d["stripes"] = [StripeParams(**s) for s in d.get("stripes", [])]
        return cls(**d)


@dataclass
class RenderedScene:
    image: np.ndarray  # float64 in [0, 1]
    mask: np.ndarray  # bool
    snr: float


def _pixel_grid(h, w, supersample):
    """Sample coordinates, shape (h, w, s*s), at sub-pixel centres."""
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    rr = np.arange(h)[:, None, None, None] + offs[None, None, :, None]
    cc = np.arange(w)[None, :, None, None] + offs[None, None, None, :]
    rr, cc = np.broadcast_arrays(rr, cc)
    return rr.reshape(h, w, -1), cc.reshape(h, w, -1)


def segment_distance(rr, cc, p0, p1):
    """Euclidean distance from points to the segment p0-p1."""
    r0, c0 = p0
    dr, dc = p1[0] - r0, p1[1] - c0
    seg2 = dr * dr + dc * dc
    t = np.clip(((rr - r0) * dr + (cc - c0) * dc) / seg2, 0.0, 1.0)
    return np.hypot(rr - (r0 + t * dr), cc - (c0 + t * dc))


def stripe_profile(stripe: StripeParams, dist):
    excess = np.maximum(dist - stripe.width / 2.0, 0.0)
    return stripe.peak_intensity * np.exp(-(excess**2) / (2.0 * stripe.profile_sigma**2))


def render_stripe(stripe: StripeParams, size, supersample: int = SUPERSAMPLE) -> np.ndarray:
    """Anti-aliased stripe layer (mean over ``supersample**2`` sub-samples)."""
    rr, cc = _pixel_grid(size[0], size[1], supersample)
    p0, p1 = stripe.endpoints()
    return stripe_profile(stripe, segment_distance(rr, cc, p0, p1)).mean(axis=-1)


def stripe_mask(layer: np.ndarray, stripe: StripeParams) -> np.ndarray:
    return layer >= 0.5 * stripe.peak_intensity


def _straylight_params(rng: np.random.Generator, h, w):
    """Draw every stray-light shape parameter up front.

    All kinds consume the same draws so that the random stream is independent
    of kind and strength.
    """
    corner = rng.integers(4)
    sun_scale = rng.uniform(0.4, 0.9) * max(h, w)
    limb_angle = rng.uniform(0, 2 * math.pi)
    limb_offset = rng.uniform(0.1, 0.4)
    limb_width = rng.uniform(0.08, 0.2) * max(h, w)
    moon_center = (rng.uniform(0, h), rng.uniform(0, w))
    moon_sigma = rng.uniform(0.1, 0.25) * min(h, w)
    return dict(
        corner=int(corner),
        sun_scale=sun_scale,
        limb_angle=limb_angle,
        limb_offset=limb_offset,
        limb_width=limb_width,
        moon_center=moon_center,
        moon_sigma=moon_sigma,
    )


def straylight_field(kind: str, params: dict, h: int, w: int) -> np.ndarray:
    """Unit-peak stray-light shape of the given kind."""
    rr, cc = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    if kind == "none":
        return np.zeros((h, w))
    if kind == "sun":
        # bright source just outside one corner
        cr = -0.1 * h if params["corner"] in (0, 1) else 1.1 * h
        cw = -0.1 * w if params["corner"] in (0, 2) else 1.1 * w
        out = np.exp(-np.hypot(rr - cr, cc - cw) / params["sun_scale"])
    elif kind == "earth":
        # limb: smooth step across a line at random orientation
        nr, nc = math.sin(params["limb_angle"]), math.cos(params["limb_angle"])
        s = (rr - h / 2) * nr + (cc - w / 2) * nc
        edge = params["limb_offset"] * max(h, w)
        out = 1.0 / (1.0 + np.exp(-(s - edge) / params["limb_width"]))
    elif kind == "moon":
        mr, mc = params["moon_center"]
        out = np.exp(-((rr - mr) ** 2 + (cc - mc) ** 2) / (2 * params["moon_sigma"] ** 2))
    elif kind == "mixed":
        out = sum(straylight_field(k, params, h, w) for k in ("sun", "earth", "moon"))
    else:
        raise ValueError(f"unknown straylight kind {kind!r}")
    return out / out.max()


def _render_stars(rng: np.random.Generator, params: SceneParams) -> np.ndarray:
    h, w = params.image_size
    out = np.zeros((h, w))
    if params.star_count == 0:
        return out
    rr, cc = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    pos_r = rng.uniform(0, h, params.star_count)
    pos_c = rng.uniform(0, w, params.star_count)
    sig = rng.uniform(*params.star_sigma_range, params.star_count)
    amp = rng.uniform(0.1, 0.9, params.star_count)
    for r, c, s, a in zip(pos_r, pos_c, sig, amp):
        out += a * np.exp(-((rr - r) ** 2 + (cc - c) ** 2) / (2 * s * s))
    return out


def render_layers(params: SceneParams, background_only: bool = False):
    """Noise-free components: (stripe layer, mask, background, stray field, noise)."""
    h, w = params.image_size
    if not params.stripes and not background_only:
        raise ValueError("scene has no stripes; pass background_only=True for empty scenes")
    rng = np.random.default_rng(int(params.rng_seed))
    stray_params = _straylight_params(rng, h, w)
    stars = _render_stars(rng, params)
    noise = rng.standard_normal((h, w))

    stripes = np.zeros((h, w))
    mask = np.zeros((h, w), dtype=bool)
    for k, stripe in enumerate(params.stripes):
        layer = render_stripe(stripe, (h, w))
        m = stripe_mask(layer, stripe)
        if not m.any():
            raise ValueError(f"stripe {k} falls entirely outside the {h}x{w} frame")
        stripes += layer
        mask |= m
    stray = params.straylight_strength * straylight_field(params.straylight_kind, stray_params, h, w)
    background = params.background_level + stray + stars
    return stripes, mask, background, stray, noise


def scene_snr(stripes, mask, background, stray, noise_sigma) -> float:
    """Mean clipped stripe contrast over the mask divided by the background spread.

    The spread combines sensor noise and the stray-light variation in the
    stripe's neighbourhood; stars are excluded.
    """
    if not mask.any():
        return 0.0
    signal = np.clip(background + stripes, 0, 1) - np.clip(background, 0, 1)
    r, c = np.nonzero(mask)
    pad = 8
    window = stray[
        max(r.min() - pad, 0) : r.max() + pad + 1,
        max(c.min() - pad, 0) : c.max() + pad + 1,
    ]
    spread = math.sqrt(noise_sigma**2 + float(window.var()))
    return float(signal[mask].mean()) / max(spread, 1e-12)


def render_scene(params: SceneParams, background_only: bool = False) -> RenderedScene:
    """Render one scene to a float image in [0, 1] and its boolean target mask."""
    stripes, mask, background, stray, noise = render_layers(params, background_only)
    image = np.clip(background + stripes + params.noise_sigma * noise, 0.0, 1.0)
    snr = scene_snr(stripes, mask, background, stray, params.noise_sigma)
    return RenderedScene(image=image, mask=mask, snr=snr)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255.0).astype(np.uint8)


# --------------------------------------------------------------------------
# dataset


@dataclass
class DatasetConfig:
    out: str = "data"
    train_count: int = 1000
    val_count: int = 100
    test_per_light: int = 100
    labeling_rate: str = "1/4"
    seed: int = 0
    image_size: tuple[int, int] = (256, 256)
    # ranges are in pixels relative to a 256 px frame unless noted
    length_range: tuple[float, float] = (0.2, 0.6)  # fraction of min(H, W)
    width_range: tuple[float, float] = (1.0, 2.0)
    sigma_range: tuple[float, float] = (0.6, 1.0)
    peak_range: tuple[float, float] = (0.06, 0.3)
    noise_range: tuple[float, float] = (0.02, 0.05)
    straylight_range: tuple[float, float] = (0.2, 0.7)
    star_density: float = 1.5e-4  # expected stars per pixel
    force: bool = False

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        for name in ("train_count", "val_count", "test_per_light"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        rate = parse_rate(self.labeling_rate)
        self.labeling_rate = str(rate)

    @property
    def n_labeled(self) -> int:
        return labeled_count(self.train_count, self.labeling_rate)


def parse_rate(rate) -> Fraction:
    r = Fraction(str(rate))
    if not 0 < r <= 1:
        raise ValueError(f"labeling rate must be in (0, 1], got {rate}")
    return r


def labeled_count(train_count: int, rate) -> int:
    # round() on a Fraction rounds half to even: 1000/16 -> 62
    return int(round(train_count * parse_rate(rate)))


def sample_scene(rng: np.random.Generator, cfg: DatasetConfig, kind: str | None = None) -> SceneParams:
    """Draw a random single-stripe scene description."""
    h, w = cfg.image_size
    if kind is None:
        kind = TEST_LIGHTS[int(rng.integers(len(TEST_LIGHTS)))]
    length = rng.uniform(*cfg.length_range) * min(h, w)
    width = rng.uniform(*cfg.width_range)
    length = max(length, 2 * width)
    angle = rng.uniform(0, math.pi)
    margin = 4.0
    center = (rng.uniform(margin, h - margin), rng.uniform(margin, w - margin))
    stripe = StripeParams(
        center=center,
        length=length,
        width=width,
        angle=angle,
        peak_intensity=rng.uniform(*cfg.peak_range),
        profile_sigma=rng.uniform(*cfg.sigma_range),
    )
    return SceneParams(
        image_size=(h, w),
        stripes=[stripe],
        star_count=int(rng.poisson(cfg.star_density * h * w)),
        straylight_kind=kind,
        straylight_strength=rng.uniform(*cfg.straylight_range),
        noise_sigma=rng.uniform(*cfg.noise_range),
        rng_seed=int(rng.integers(2**63)),
    )


def _write_sample(root: Path, split: str, idx: int, params: SceneParams, with_mask: bool) -> dict:
    scene = render_scene(params)
    stem = f"{idx:05d}"
    img_rel = Path(split) / "img" / f"{stem}.png"
    scene_rel = Path(split) / "scene" / f"{stem}.json"
    for rel in (img_rel, scene_rel):
        (root / rel).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(scene.image)).save(root / img_rel)
    (root / scene_rel).write_text(json.dumps(params.to_dict()))
    entry = {"image": img_rel.as_posix(), "mask": None, "scene": scene_rel.as_posix(), "snr": scene.snr}
    if with_mask:
        mask_rel = Path(split) / "mask" / f"{stem}.png"
        (root / mask_rel).parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(scene.mask.astype(np.uint8) * 255).save(root / mask_rel)
        entry["mask"] = mask_rel.as_posix()
    return entry


def build_dataset(cfg: DatasetConfig) -> dict:
    """Render all splits under ``cfg.out`` and write ``manifest.json``."""
    root = Path(cfg.out)
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        if not cfg.force:
            raise FileExistsError(f"{manifest_path} exists; use force to overwrite")
        for split in SPLITS:
            shutil.rmtree(root / split, ignore_errors=True)
    root.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(cfg.seed)
    train = [sample_scene(rng, cfg) for _ in range(cfg.train_count)]
    val = [sample_scene(rng, cfg) for _ in range(cfg.val_count)]
    tests = {k: [sample_scene(rng, cfg, kind=k) for _ in range(cfg.test_per_light)] for k in TEST_LIGHTS}

    n_lab = cfg.n_labeled
    splits = {
        "labeled": [_write_sample(root, "labeled", i, s, True) for i, s in enumerate(train[:n_lab])],
        "unlabeled": [_write_sample(root, "unlabeled", i, s, False) for i, s in enumerate(train[n_lab:])],
        "val": [_write_sample(root, "val", i, s, True) for i, s in enumerate(val)],
    }
    for k, params_list in tests.items():
        splits[f"test_{k}"] = [_write_sample(root, f"test_{k}", i, s, True) for i, s in enumerate(params_list)]

    manifest = {
        "root_path": str(root.resolve()),
        "labeling_rate": cfg.labeling_rate,
        "generator_seed": cfg.seed,
        "image_size": list(cfg.image_size),
        "splits": splits,
    }
    validate_manifest(manifest)
    manifest_path.write_text(json.dumps(manifest, indent=1))
    log.info("wrote %s (%d labeled, %d unlabeled)", manifest_path, n_lab, cfg.train_count - n_lab)
    return manifest


def validate_manifest(manifest: dict) -> None:
    splits = manifest["splits"]
    missing = set(SPLITS) - set(splits)
    if missing:
        raise ValueError(f"manifest lacks splits {sorted(missing)}")
    seen = set()
    for name, entries in splits.items():
        for e in entries:
            if name == "unlabeled" and e.get("mask") is not None:
                raise ValueError(f"unlabeled entry {e['image']} carries a mask")
            if name != "unlabeled" and not e.get("mask"):
                raise ValueError(f"{name} entry {e['image']} has no mask")
            if e["image"] in seen:
                raise ValueError(f"{e['image']} appears in more than one split")
            seen.add(e["image"])


def load_manifest(root) -> dict:
    path = Path(root)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    # the directory the manifest lives in wins over the recorded absolute path
    manifest["root_path"] = str(path.parent.resolve())
    validate_manifest(manifest)
    return manifest


def load_split(manifest: dict, split: str):
    """Return ``(images, masks)`` as float32 arrays (N, H, W); masks None if absent."""
    root = Path(manifest["root_path"])
    entries = manifest["splits"][split]
    if not entries:
        return np.zeros((0,) + tuple(manifest["image_size"]), np.float32), None
    imgs = np.stack([np.asarray(Image.open(root / e["image"]), dtype=np.float32) / 255.0 for e in entries])
    if entries[0]["mask"] is None:
        return imgs, None
    masks = np.stack([np.asarray(Image.open(root / e["mask"])) > 127 for e in entries]).astype(np.float32)
    return imgs, masks
