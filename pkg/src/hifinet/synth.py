"""Procedural real images, forged variants with exact masks, and
post-processing transforms.

Every image is a deterministic function of its seed.  Each forgery method
leaves its own low-level trace so the attribute hierarchy is learnable:

=================  ===========================================  ===========
method             trace                                        mask area
=================  ===========================================  ===========
splice             donor region upscaled 2x (nearest, blocky)   ~0.25
copy_move          region copied with a half-pixel shift        ~0.20
inpaint            region mean fill + white (unfiltered) noise  ~0.10
retouch_blur       strong Gaussian smoothing inside a blob      ~0.15
synth_texture_a    full image, periodic checkerboard artefact   1.0
synth_texture_b    full image, smooth random field, no grain    1.0
=================  ===========================================  ===========
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .taxonomy import REAL, TaxonomyTree

PARTIAL_METHODS = ("splice", "copy_move", "inpaint", "retouch_blur")
FULL_METHODS = ("synth_texture_a", "synth_texture_b")
METHODS = PARTIAL_METHODS + FULL_METHODS

# configured mean mask area per method; sampling range is [0.6, 1.4] x target
AREA_TARGETS = {
    "splice": 0.25,
    "copy_move": 0.20,
    "inpaint": 0.10,
    "retouch_blur": 0.15,
    "synth_texture_a": 1.0,
    "synth_texture_b": 1.0,
}
AREA_SPREAD = 0.4
NOISE_STD = 0.03


@dataclass
class Sample:
    image: np.ndarray           # [3,H,W] in [0,1]
    mask: np.ndarray            # [1,H,W] binary, 1 = forged
    leaf: str
    seed: int
    provenance: dict = field(default_factory=dict)

    @property
    def is_forged(self) -> bool:
        return self.leaf != REAL


def derive_seed(master: int, *parts) -> int:
    """64-bit seed from a master seed and arbitrary identifying parts."""
    h = hashlib.blake2b(repr((int(master),) + parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def area_bounds(method: str) -> tuple[float, float]:
    t = AREA_TARGETS[method]
    if t >= 1.0:
        return 1.0, 1.0
    return t * (1 - AREA_SPREAD) * 0.8, t * (1 + AREA_SPREAD) * 1.2


# --------------------------------------------------------------------------
# scene primitives


def _grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    return np.mgrid[0:h, 0:w].astype(np.float64) + 0.5


def _scene(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Smooth gradient background plus 2-5 anti-aliased shapes."""
    yy, xx = _grid(h, w)
    base = rng.uniform(0.2, 0.8, size=3)
    theta = rng.uniform(0, 2 * np.pi)
    amp = rng.uniform(0.05, 0.3, size=3)
    ramp = (np.cos(theta) * (xx / w - 0.5) + np.sin(theta) * (yy / h - 0.5))
    img = base[:, None, None] + amp[:, None, None] * ramp[None]
    for _ in range(rng.integers(2, 6)):
        color = rng.uniform(0.0, 1.0, size=3)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        if rng.random() < 0.5:
            ry, rx = rng.uniform(0.1, 0.3) * h, rng.uniform(0.1, 0.3) * w
            sd = (np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) - 1.0) * min(ry, rx)
        else:
            hy, hx = rng.uniform(0.1, 0.3) * h, rng.uniform(0.1, 0.3) * w
            sd = np.maximum(np.abs(yy - cy) - hy, np.abs(xx - cx) - hx)
        cover = np.clip(0.5 - sd, 0.0, 1.0)
        img = img * (1 - cover) + color[:, None, None] * cover
    return img


def _grain(rng: np.random.Generator, h: int, w: int, std: float = NOISE_STD) -> np.ndarray:
    """Band-limited sensor-like noise: white noise low-passed, rescaled."""
    n = ndimage.gaussian_filter(rng.standard_normal((3, h, w)), sigma=(0, 0.7, 0.7), mode="wrap")
    return n * (std / n.std())


def generate_real(seed: int, h: int = 32, w: int = 32) -> Sample:
    if h < 16 or w < 16:
        raise ValueError(f"images must be at least 16x16, got {h}x{w}")
    rng = np.random.default_rng(seed)
    img = np.clip(_scene(rng, h, w) + _grain(rng, h, w), 0.0, 1.0)
    return Sample(img, np.zeros((1, h, w)), REAL, int(seed), {"generator": "real_scene"})


# --------------------------------------------------------------------------
# regions


def _rect(rng: np.random.Generator, h: int, w: int, frac: float) -> tuple[int, int, int, int]:
    area = frac * h * w
    aspect = np.exp(rng.uniform(-0.5, 0.5))
    rh = int(np.clip(round(np.sqrt(area * aspect)), 2, h - 1))
    rw = int(np.clip(round(area / rh), 2, w - 1))
    y0 = int(rng.integers(0, h - rh + 1))
    x0 = int(rng.integers(0, w - rw + 1))
    return y0, x0, rh, rw


def _ellipse(rng: np.random.Generator, h: int, w: int, frac: float) -> np.ndarray:
    area = frac * h * w
    aspect = np.exp(rng.uniform(-0.5, 0.5))
    ry = np.sqrt(area * aspect / np.pi)
    rx = area / (np.pi * ry)
    ry, rx = min(ry, h / 2 - 0.5), min(rx, w / 2 - 0.5)
    cy = rng.uniform(ry, h - ry)
    cx = rng.uniform(rx, w - rx)
    yy, xx = _grid(h, w)
    return (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0).astype(np.float64)


def _rect_mask(h: int, w: int, r: tuple[int, int, int, int]) -> np.ndarray:
    y0, x0, rh, rw = r
    m = np.zeros((h, w))
    m[y0:y0 + rh, x0:x0 + rw] = 1.0
    return m


def _sample_region(rng, method: str, h: int, w: int):
    """Draw a region whose area lies within the method's bounds."""
    lo, hi = area_bounds(method)
    t = AREA_TARGETS[method]
    for _ in range(100):
        frac = rng.uniform(t * (1 - AREA_SPREAD), t * (1 + AREA_SPREAD))
        if method in ("splice", "copy_move"):
            r = _rect(rng, h, w, frac)
            m = _rect_mask(h, w, r)
        else:
            r = None
            m = _ellipse(rng, h, w, frac)
        if lo <= m.mean() <= hi:
            return r, m
    raise ValueError(f"{method}: region larger than image or bounds unsatisfiable for {h}x{w}")


# --------------------------------------------------------------------------
# forgeries


def _splice(base: np.ndarray, donor: np.ndarray, rng, r) -> np.ndarray:
    y0, x0, rh, rw = r
    h, w = base.shape[1:]
    ch, cw = (rh + 1) // 2, (rw + 1) // 2
    dy = int(rng.integers(0, h - ch + 1))
    dx = int(rng.integers(0, w - cw + 1))
    crop = donor[:, dy:dy + ch, dx:dx + cw]
    up = np.repeat(np.repeat(crop, 2, axis=1), 2, axis=2)[:, :rh, :rw]
    out = base.copy()
    out[:, y0:y0 + rh, x0:x0 + rw] = up
    return out


def _copy_move(base: np.ndarray, rng, r) -> np.ndarray:
    y0, x0, rh, rw = r
    h, w = base.shape[1:]
    for _ in range(50):
        sy = int(rng.integers(0, h - rh))
        sx = int(rng.integers(0, w - rw))
        if abs(sy - y0) >= rh // 2 or abs(sx - x0) >= rw // 2:
            break
    src = base[:, sy:sy + rh + 1, sx:sx + rw + 1]
    shifted = 0.25 * (src[:, :-1, :-1] + src[:, 1:, :-1] + src[:, :-1, 1:] + src[:, 1:, 1:])
    out = base.copy()
    out[:, y0:y0 + rh, x0:x0 + rw] = shifted
    return out


def _inpaint(base: np.ndarray, rng, m: np.ndarray) -> np.ndarray:
    region = m > 0
    ring = ndimage.binary_dilation(region, iterations=2) & ~region
    if not ring.any():
        ring = ~region
    mean = base[:, ring].mean(axis=1)
    hp = base - ndimage.gaussian_filter(base, sigma=(0, 1.0, 1.0))
    std = max(float(hp[:, ring].std()), 0.01)
    fill = mean[:, None, None] + rng.normal(0.0, std * 1.5, size=base.shape)
    return np.where(region[None], fill, base)


def _retouch(base: np.ndarray, m: np.ndarray) -> np.ndarray:
    blurred = ndimage.gaussian_filter(base, sigma=(0, 2.0, 2.0), mode="nearest")
    return np.where(m[None] > 0, blurred, base)


def _synth_a(rng, h: int, w: int) -> np.ndarray:
    img = _scene(rng, h, w)
    low = ndimage.gaussian_filter(rng.standard_normal((3, h // 4, w // 4)), sigma=(0, 0.5, 0.5))
    img = img + 0.04 * np.repeat(np.repeat(low, 4, axis=1), 4, axis=2)[:, :h, :w]
    yy, xx = np.mgrid[0:h, 0:w]
    checker = np.where((yy + xx) % 2 == 0, 1.0, -1.0)
    amp = rng.uniform(0.025, 0.045)
    return img + amp * checker[None]


def _synth_b(rng, h: int, w: int) -> np.ndarray:
    img = _scene(rng, h, w)
    field = ndimage.gaussian_filter(rng.standard_normal((3, h, w)), sigma=(0, 3.0, 3.0), mode="wrap")
    field *= rng.uniform(0.05, 0.1) / field.std()
    img = ndimage.gaussian_filter(img, sigma=(0, 0.6, 0.6), mode="nearest") + field
    return img + rng.normal(0.0, 0.003, size=img.shape)


def apply_forgery(base: Sample, method: str, donor: Sample | None = None, seed: int = 0) -> Sample:
    """Forge ``base`` (a real sample) with ``method``; returns a new sample."""
    if method not in METHODS:
        raise ValueError(f"unknown forgery method {method!r}")
    if base.leaf != REAL:
        raise ValueError("apply_forgery: base must be a real sample")
    _, h, w = base.image.shape
    rng = np.random.default_rng(seed)
    prov = {"generator": method, "base_seed": base.seed}
    if method in FULL_METHODS:
        img = _synth_a(rng, h, w) if method == "synth_texture_a" else _synth_b(rng, h, w)
        mask = np.ones((h, w))
    else:
        if method == "splice" and donor is None:
            raise ValueError("splice requires a donor sample")
        r, mask = _sample_region(rng, method, h, w)
        if method == "splice":
            if donor.image.shape != base.image.shape:
                raise ValueError("splice donor must match the base image size")
            img = _splice(base.image, donor.image, rng, r)
            prov["donor_seed"] = donor.seed
        elif method == "copy_move":
            img = _copy_move(base.image, rng, r)
        elif method == "inpaint":
            img = _inpaint(base.image, rng, mask)
        else:
            img = _retouch(base.image, mask)
        if r is not None:
            prov["region"] = list(r)
    return Sample(np.clip(img, 0.0, 1.0), mask[None].astype(np.float64), method, int(seed), prov)


def make_sample(leaf: str, seed: int, h: int = 32, w: int = 32) -> Sample:
    """Generate one sample of class ``leaf`` entirely from ``seed``."""
    base = generate_real(derive_seed(seed, "base"), h, w)
    if leaf == REAL:
        base.seed = int(seed)
        return base
    donor = generate_real(derive_seed(seed, "donor"), h, w) if leaf == "splice" else None
    return apply_forgery(base, leaf, donor, derive_seed(seed, "forge"))


# --------------------------------------------------------------------------
# post-processing


def parse_transform(spec: str) -> tuple[str, float]:
    """``"blur:5"`` -> ``("gaussian_blur", 5.0)``; also ``resize:F``, ``noise:S``."""
    name, _, arg = spec.partition(":")
    alias = {"blur": "gaussian_blur", "noise": "gaussian_noise", "resize": "resize",
             "gaussian_blur": "gaussian_blur", "gaussian_noise": "gaussian_noise"}
    if name not in alias or not arg:
        raise ValueError(f"bad post-process spec {spec!r}; use resize:F, blur:K or noise:S")
    return alias[name], float(arg)


def _blur_kernel(k: int) -> np.ndarray:
    sigma = 0.3 * ((k - 1) * 0.5 - 1) + 0.8
    x = np.arange(k, dtype=np.float64) - (k - 1) / 2
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def apply_postprocess(sample: Sample, transform: str, param: float, seed: int = 0) -> Sample:
    """Return a transformed copy; labels never change, masks only through
    the geometry of ``resize`` (nearest neighbour)."""
    img, mask = sample.image, sample.mask
    if transform == "resize":
        if param <= 0:
            raise ValueError("resize factor must be positive")
        if param == 1:
            new_img, new_mask = img.copy(), mask.copy()
        else:
            h, w = img.shape[1:]
            nh, nw = max(1, round(h * param)), max(1, round(w * param))
            new_img = np.stack([np.asarray(Image.fromarray(c.astype(np.float32), mode="F")
                                           .resize((nw, nh), Image.BILINEAR), dtype=np.float64) for c in img])
            m8 = Image.fromarray((mask[0] * 255).astype(np.uint8), mode="L").resize((nw, nh), Image.NEAREST)
            new_mask = (np.asarray(m8) > 127).astype(np.float64)[None]
    elif transform == "gaussian_blur":
        k = int(param)
        if k != param or k < 1 or k % 2 == 0:
            raise ValueError(f"blur kernel size must be a positive odd integer, got {param}")
        new_mask = mask.copy()
        if k == 1:
            new_img = img.copy()
        else:
            g = _blur_kernel(k)
            new_img = ndimage.correlate1d(img, g, axis=1, mode="reflect")
            new_img = ndimage.correlate1d(new_img, g, axis=2, mode="reflect")
    elif transform == "gaussian_noise":
        if param < 0:
            raise ValueError("noise sigma must be non-negative")
        new_mask = mask.copy()
        if param == 0:
            new_img = img.copy()
        else:
            rng = np.random.default_rng(seed)
            new_img = img + rng.normal(0.0, param, size=img.shape)
    else:
        raise ValueError(f"unknown transform {transform!r}")
    prov = dict(sample.provenance, postprocess=f"{transform}:{param:g}")
    return Sample(np.clip(new_img, 0.0, 1.0), new_mask, sample.leaf, sample.seed, prov)


# --------------------------------------------------------------------------
# files


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, image: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(quantize(image).transpose(1, 2, 0)), mode="RGB").save(path, format="PPM")


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask)[0] > 0).astype(np.uint8) * 255, mode="L").save(path, format="PPM")


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise ValueError(f"{path}: expected an RGB (P6) image, got mode {im.mode}")
        arr = np.asarray(im, dtype=np.float64)
    return arr.transpose(2, 0, 1) / 255.0


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > 127).astype(np.float64)[None]


@dataclass(frozen=True)
class Record:
    path: str
    mask_path: str
    leaf: str
    seed: int
    split: str


@dataclass
class DatasetConfig:
    master_seed: int
    per_leaf: int = 400
    real_count: int = 2400
    image_size: int = 32
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)


SPLITS = ("train", "val", "test")
MANIFEST = "manifest.tsv"
TAXONOMY_FILE = "taxonomy.json"


def _split_labels(n: int, fractions) -> list[str]:
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    return ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)


def build_dataset(config: DatasetConfig, out_dir, tree: TaxonomyTree) -> list[Record]:
    """Generate every record, write images/masks and the manifest."""
    for leaf in tree.leaves:
        if leaf != REAL and leaf not in METHODS:
            raise ValueError(f"taxonomy leaf {leaf!r} has no procedural generator")
    if abs(sum(config.split) - 1.0) > 1e-9 or min(config.split) < 0:
        raise ValueError(f"split fractions must be non-negative and sum to 1, got {config.split}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    records: list[Record] = []
    idx = 0
    s = config.image_size
    for leaf in tree.leaves:
        n = config.real_count if leaf == REAL else config.per_leaf
        for split in _split_labels(n, config.split):
            seed = derive_seed(config.master_seed, idx)
            sample = make_sample(leaf, seed, s, s)
            stem = f"{idx:05d}_{leaf}"
            img_rel, mask_rel = f"images/{stem}.ppm", f"masks/{stem}.pgm"
            write_image(out / img_rel, sample.image)
            write_mask(out / mask_rel, sample.mask)
            records.append(Record(img_rel, mask_rel, leaf, seed, split))
            idx += 1
    write_manifest(out / MANIFEST, records)
    (out / TAXONOMY_FILE).write_text(tree.dumps(), encoding="utf-8")
    return records


def write_manifest(path, records: list[Record]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(f"{r.path}\t{r.mask_path}\t{r.leaf}\t{r.seed}\t{r.split}\n")


def load_manifest(path, tree: TaxonomyTree | None = None) -> list[Record]:
    """Read and validate a manifest; paths are relative to its directory."""
    path = Path(path)
    root = path.parent
    records, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 tab-separated fields")
            rec = Record(parts[0], parts[1], parts[2], int(parts[3]), parts[4])
            if rec.split not in SPLITS:
                raise ValueError(f"{path}:{lineno}: unknown split {rec.split!r}")
            if rec.path in seen:
                raise ValueError(f"{path}:{lineno}: {rec.path} listed twice (splits must be disjoint)")
            seen.add(rec.path)
            if tree is not None and rec.leaf not in tree.leaves:
                raise ValueError(f"{path}:{lineno}: label {rec.leaf!r} not in taxonomy")
            for p in (rec.path, rec.mask_path):
                if not os.path.exists(root / p):
                    raise FileNotFoundError(f"{path}:{lineno}: missing file {p}")
            records.append(rec)
    return records


def load_arrays(root, records: list[Record]) -> tuple[np.ndarray, np.ndarray]:
    """Stack images [N,3,H,W] and masks [N,1,H,W] for ``records``."""
    root = Path(root)
    imgs = np.stack([read_image(root / r.path) for r in records]) if records else np.zeros((0, 3, 0, 0))
    masks = np.stack([read_mask(root / r.mask_path) for r in records]) if records else np.zeros((0, 1, 0, 0))
    return imgs, masks
