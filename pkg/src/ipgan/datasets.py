"""Re-ID corpora: manifests, a synthetic multi-camera generator, and real-data ingestion.

Images are float HWC arrays in [-1, 1]. On disk they are 8-bit RGB PNGs where
pixel ``p`` maps to ``p / 127.5 - 1``.
"""

from __future__ import annotations

import colorsys
import dataclasses
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

SPLITS = ("train", "query", "gallery")
JUNK_IDENTITY = -1
MANIFEST_FORMAT = "ipgan-manifest/1"
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp")

_FILENAME_RE = re.compile(r"^(-1|\d+)_c(\d+)")


class ManifestError(ValueError):
    pass


# ----------------------------------------------------------------------------
# pixel mapping


def to_uint8(x):
    x = np.asarray(x, dtype=np.float64)
    return np.clip(np.rint((x + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(p):
    return np.asarray(p, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)


def quantize(x):
    """Snap ``x`` onto the 8-bit grid so a PNG round trip is lossless."""
    return from_uint8(to_uint8(x))


def write_image(path, image):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = to_uint8(image)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def read_image(path, size=None, channels=3):
    """Load an image file as float HWC; ``size`` is (H, W) and triggers a resize."""
    with Image.open(path) as im:
        im = im.convert("RGB" if channels == 3 else "L")
        if size is not None and (im.height, im.width) != tuple(size):
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        arr = np.asarray(im)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return from_uint8(arr)


# ----------------------------------------------------------------------------
# manifest types


@dataclass(frozen=True)
class ImageRecord:
    """One labeled image.

    ``image_ref`` is a path relative to the owning manifest's root. Generated
    and translated images carry a non-empty ``provenance`` and count as
    synthetic.
    """

    image_ref: str
    identity: int
    camera: int
    split: str
    provenance: str = ""

    @property
    def is_synthetic(self) -> bool:
        return bool(self.provenance)


@dataclass
class DatasetManifest:
    records: list
    num_cameras: int
    image_height: int
    image_width: int
    image_channels: int = 3
    name: str = ""
    seed: int | None = None
    # Not part of identity: where image files live, or the images themselves
    # for corpora that were never written to disk.
    root: Path | None = field(default=None, compare=False, repr=False)
    images: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        self.records = list(self.records)
        if self.num_cameras < 1:
            raise ManifestError("num_cameras must be positive")
        if min(self.image_height, self.image_width, self.image_channels) < 1:
            raise ManifestError("image dimensions must be positive")
        for rec in self.records:
            if not 1 <= rec.camera <= self.num_cameras:
                raise ManifestError(
                    f"camera out of range: record {rec.image_ref!r} has camera "
                    f"{rec.camera}, L={self.num_cameras}"
                )
            if rec.split not in SPLITS:
                raise ManifestError(f"unknown split {rec.split!r}")
            if rec.identity < JUNK_IDENTITY:
                raise ManifestError(f"invalid identity {rec.identity}")
            if rec.identity == JUNK_IDENTITY and rec.split != "gallery":
                raise ManifestError("junk identity -1 is only allowed in gallery records")
        if self.images is not None and len(self.images) != len(self.records):
            raise ManifestError("inline images are not aligned with records")

    def __len__(self):
        return len(self.records)

    @property
    def image_shape(self):
        return (self.image_height, self.image_width, self.image_channels)

    @property
    def num_identities(self) -> int:
        return len({r.identity for r in self.records if r.split == "train" and r.identity >= 0})

    @property
    def identities(self):
        return np.array([r.identity for r in self.records], dtype=np.int64)

    @property
    def cameras(self):
        return np.array([r.camera for r in self.records], dtype=np.int64)

    def load_images(self):
        """All images as an (n, H, W, C) float32 array, in record order."""
        if self.images is not None:
            return np.asarray(self.images, dtype=np.float32)
        out = np.empty((len(self.records),) + self.image_shape, dtype=np.float32)
        root = Path(self.root) if self.root is not None else Path(".")
        size = (self.image_height, self.image_width)
        for i, rec in enumerate(self.records):
            out[i] = read_image(root / rec.image_ref, size=size, channels=self.image_channels)
        return out

    def replace(self, **changes):
        keep = {"root": self.root, "images": self.images}
        keep.update(changes)
        return dataclasses.replace(self, **keep)


def materialize(manifest, root):
    """Write inline images under ``root`` at their record paths; return a disk-backed copy."""
    root = Path(root)
    images = manifest.load_images()
    for rec, img in zip(manifest.records, images):
        write_image(root / rec.image_ref, img)
    return manifest.replace(root=root, images=None)


def remap_identities(manifest):
    """Relabel train identities to 0..N-1; returns (manifest, vocabulary)."""
    vocab = sorted({r.identity for r in manifest.records if r.identity >= 0})
    index = {ident: i for i, ident in enumerate(vocab)}
    records = [
        dataclasses.replace(r, identity=index[r.identity]) if r.identity >= 0 else r
        for r in manifest.records
    ]
    return manifest.replace(records=records), np.array(vocab, dtype=np.int64)


# ----------------------------------------------------------------------------
# manifest file format


def _check_field(value, what):
    if "\t" in value or "\n" in value or "\r" in value:
        raise ManifestError(f"{what} may not contain tabs or newlines: {value!r}")
    return value


def save_manifest(manifest, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"format={MANIFEST_FORMAT}",
        f"name={_check_field(manifest.name, 'name')}",
        f"L={manifest.num_cameras}",
        f"N={manifest.num_identities}",
        f"H={manifest.image_height}",
        f"W={manifest.image_width}",
        f"C={manifest.image_channels}",
        f"seed={'' if manifest.seed is None else manifest.seed}",
    ]
    for r in manifest.records:
        lines.append(
            "\t".join(
                [
                    _check_field(r.image_ref, "path"),
                    str(r.identity),
                    str(r.camera),
                    r.split,
                    _check_field(r.provenance, "provenance"),
                ]
            )
        )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def load_manifest(path, root=None):
    """Read a manifest file. Image paths resolve against ``root`` (default: the file's directory)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    header = {}
    records = []
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                if records:
                    raise ManifestError(f"{path}:{lineno}: header line after records")
                key, sep, value = line.partition("=")
                if not sep:
                    raise ManifestError(f"{path}:{lineno}: malformed header line {line!r}")
                header[key] = value
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ManifestError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
            ref, ident, cam, split, prov = parts
            try:
                records.append(ImageRecord(ref, int(ident), int(cam), split, prov))
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None

    if header.get("format") != MANIFEST_FORMAT:
        raise ManifestError(
            f"unsupported manifest version {header.get('format')!r}, expected {MANIFEST_FORMAT!r}"
        )
    try:
        seed = header.get("seed", "")
        manifest = DatasetManifest(
            records=records,
            num_cameras=int(header["L"]),
            image_height=int(header["H"]),
            image_width=int(header["W"]),
            image_channels=int(header["C"]),
            name=header.get("name", ""),
            seed=int(seed) if seed else None,
            root=Path(root) if root is not None else path.parent,
        )
    except KeyError as exc:
        raise ManifestError(f"{path}: missing header key {exc.args[0]}") from None
    if int(header.get("N", manifest.num_identities)) != manifest.num_identities:
        raise ManifestError(
            f"{path}: header N={header['N']} disagrees with {manifest.num_identities} train identities"
        )
    return manifest


# ----------------------------------------------------------------------------
# real data


def parse_reid_filename(name):
    """Split a Market-1501 style name ``<id>_c<cam>...`` into (identity, camera)."""
    base = Path(name).name
    m = _FILENAME_RE.match(base)
    if m is None:
        raise ValueError(f"cannot parse identity/camera from {base!r}")
    return int(m.group(1)), int(m.group(2))


_REID_SUBDIRS = {"train": "bounding_box_train", "query": "query", "gallery": "bounding_box_test"}


def ingest_reid_directory(root, image_size=(128, 64), name=None):
    """Build (train, query, gallery) manifests from a Market-1501 style tree."""
    root = Path(root)
    found = {}
    for split, sub in _REID_SUBDIRS.items():
        d = root / sub
        if not d.is_dir():
            raise FileNotFoundError(f"missing {sub}/ under {root}")
        recs = []
        for p in sorted(d.iterdir()):
            if p.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            ident, cam = parse_reid_filename(p.name)
            if ident == JUNK_IDENTITY and split != "gallery":
                logger.warning("skipping junk image %s outside the gallery", p.name)
                continue
            recs.append(ImageRecord(f"{sub}/{p.name}", ident, cam, split))
        found[split] = recs
    num_cameras = max((r.camera for recs in found.values() for r in recs), default=1)
    name = name or root.name
    return tuple(
        DatasetManifest(
            records=found[split],
            num_cameras=num_cameras,
            image_height=image_size[0],
            image_width=image_size[1],
            name=f"{name}/{split}",
            root=root,
        )
        for split in SPLITS
    )


# ----------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class CameraStyle:
    hue_deg: float = 0.0
    gain: float = 1.0
    offset: float = 0.0
    sigma: float = 0.0


IDENTITY_STYLE = CameraStyle()


class GlyphParams(NamedTuple):
    shirt: tuple
    pants: tuple
    pattern: int  # 0 plain, 1 horizontal stripes, 2 vertical stripes, 3 checker
    torso_width: float
    waist: float


def _hue_rotation(theta_deg):
    t = math.radians(theta_deg)
    u = np.full(3, 1.0 / math.sqrt(3.0))
    cross = np.array([[0, -u[2], u[1]], [u[2], 0, -u[0]], [-u[1], u[0], 0]])
    return math.cos(t) * np.eye(3) + math.sin(t) * cross + (1 - math.cos(t)) * np.outer(u, u)


def apply_camera_style(image, camera, style, rng=None):
    """Photometric camera transform, ``clamp(hue(gain * (x + noise + offset)))``.

    Noise is added first, then the brightness offset, then the contrast gain
    (about 0), then a hue rotation about the gray axis. ``style`` maps camera
    ids to :class:`CameraStyle`. ``rng`` seeds the noise and is required when
    the style has ``sigma > 0``.
    """
    if camera not in style:
        raise KeyError(f"unknown camera id {camera}")
    s = style[camera]
    x = np.asarray(image)
    if x.size and (x.min() < -1.0 - 1e-6 or x.max() > 1.0 + 1e-6):
        raise ValueError("image values must lie in [-1, 1]")
    out = x.astype(np.float64)
    if s.sigma > 0:
        if rng is None:
            raise ValueError("a seeded rng is required for sigma > 0")
        out = out + s.sigma * np.random.default_rng(rng).standard_normal(out.shape)
    out = s.gain * (out + s.offset)
    if s.hue_deg % 360 != 0:
        if out.shape[-1] != 3:
            raise ValueError("hue rotation needs 3 channels")
        out = out @ _hue_rotation(s.hue_deg).T
    return np.clip(out, -1.0, 1.0).astype(x.dtype if x.dtype.kind == "f" else np.float32)


def default_source_styles(num_cameras):
    return {
        i + 1: CameraStyle(
            hue_deg=-20.0 + 40.0 * i / max(num_cameras - 1, 1),
            gain=(1.05, 0.95)[i % 2],
            offset=(0.04, -0.04)[(i // 2) % 2],
            sigma=0.02,
        )
        for i in range(num_cameras)
    }


def default_target_styles(num_cameras):
    # Hue stays within 40..100 degrees: wide enough that cameras are easy to
    # tell apart, narrow enough that clothing colour still identifies a person.
    return {
        i + 1: CameraStyle(
            hue_deg=40.0 + 60.0 * i / max(num_cameras - 1, 1),
            gain=(1.25, 0.8)[i % 2],
            offset=(0.15, -0.15)[(i // 2) % 2],
            sigma=0.03,
        )
        for i in range(num_cameras)
    }


@dataclass(frozen=True)
class SyntheticSpec:
    """Shape of a desk-scale cross-domain corpus.

    Source, target-train and test identities are disjoint. When glyph or
    style parameters are left as ``None`` they are derived from the seed and
    the default style families.
    """

    num_identities: int = 20
    num_cameras: int = 4
    images_per_identity_per_camera: int = 2
    image_height: int = 32
    image_width: int = 16
    image_channels: int = 3
    num_test_identities: int | None = None
    num_distractors: int = 0
    identity_glyph_params: Sequence[GlyphParams] | None = None
    source_styles: Mapping[int, CameraStyle] | None = None
    target_styles: Mapping[int, CameraStyle] | None = None

    @property
    def total_identities(self):
        return 2 * self.num_identities + (self.num_test_identities or self.num_identities)

    def validate(self):
        if self.num_cameras < 2:
            raise ValueError("num_cameras must be >= 2 for camera-domain translation")
        if self.images_per_identity_per_camera < 1:
            raise ValueError("images_per_identity_per_camera must be >= 1")
        if self.num_identities < 1:
            raise ValueError("num_identities must be >= 1")
        if self.image_channels != 3:
            raise ValueError("synthetic images are RGB (image_channels=3)")
        if self.image_height < 8 or self.image_width < 4:
            raise ValueError("synthetic images must be at least 8x4")
        if self.num_distractors < 0:
            raise ValueError("num_distractors must be >= 0")
        if self.identity_glyph_params is not None:
            glyphs = list(self.identity_glyph_params)
            if len(glyphs) != self.total_identities:
                raise ValueError(
                    f"need {self.total_identities} glyph parameter tuples, got {len(glyphs)}"
                )
            if len(set(glyphs)) != len(glyphs):
                raise ValueError("identities must have distinct glyph parameters")
        for styles in (self.source_styles, self.target_styles):
            if styles is None:
                continue
            if sorted(styles) != list(range(1, self.num_cameras + 1)):
                raise ValueError("style tables must cover cameras 1..num_cameras")
            if len(set(styles.values())) != len(styles):
                raise ValueError("cameras must have distinct style parameters")


def _random_color(rng):
    h, s, v = rng.uniform(0, 1), rng.uniform(0.5, 1.0), rng.uniform(0.35, 1.0)
    return tuple(round(c, 6) for c in colorsys.hsv_to_rgb(h, s, v))


def draw_glyphs(count, seed):
    rng = np.random.default_rng([seed, 0x61])
    glyphs, seen = [], set()
    while len(glyphs) < count:
        g = GlyphParams(
            shirt=_random_color(rng),
            pants=_random_color(rng),
            pattern=int(rng.integers(4)),
            torso_width=round(float(rng.uniform(0.45, 0.8)), 6),
            waist=round(float(rng.uniform(0.5, 0.65)), 6),
        )
        if g not in seen:
            seen.add(g)
            glyphs.append(g)
    return glyphs


def render_glyph(glyph, height, width, rng):
    """Draw a pedestrian-like figure on a tinted background; returns HWC in [-1, 1]."""
    rows = np.arange(height)[:, None] / (height - 1)
    cols = np.arange(width)[None, :] / (width - 1)
    top = np.array([0.62, 0.66, 0.52])
    bottom = np.array([0.40, 0.42, 0.50])
    img = top + rows[..., None] * (bottom - top) + 0 * cols[..., None]

    dy = int(rng.integers(-1, 2))
    dx = int(rng.integers(-1, 2))
    cx = 0.5 + dx / width
    r = rows - dy / height
    c = cols

    head = ((r - 0.12) / 0.09) ** 2 + ((c - cx) / 0.16) ** 2 <= 1.0
    img[head] = (0.85, 0.68, 0.55)

    half = glyph.torso_width / 2
    torso = (r >= 0.22) & (r < glyph.waist) & (np.abs(c - cx) <= half)
    shirt = np.array(glyph.shirt)
    dark = shirt * 0.45
    rr = np.broadcast_to(r, torso.shape)
    cc = np.broadcast_to(c, torso.shape)
    if glyph.pattern == 1:
        alt = (np.floor(rr * height / 2) % 2).astype(bool)
    elif glyph.pattern == 2:
        alt = (np.floor(cc * width / 2) % 2).astype(bool)
    elif glyph.pattern == 3:
        alt = ((np.floor(rr * height / 3) + np.floor(cc * width / 3)) % 2).astype(bool)
    else:
        alt = np.zeros(torso.shape, dtype=bool)
    img[torso & ~alt] = shirt
    img[torso & alt] = dark

    leg_gap = 0.05
    legs = (r >= glyph.waist) & (r < 0.95) & (np.abs(c - cx) <= half * 0.9) & (np.abs(c - cx) >= leg_gap)
    img[legs] = glyph.pants
    return (img * 2.0 - 1.0).astype(np.float64)


def generate_synthetic_dataset(spec, seed):
    """Render (source_train, target_train, query, gallery) manifests with inline images.

    Deterministic in ``(spec, seed)``. Every image is quantized to the 8-bit
    grid, so writing it to PNG and reading it back is exact.
    """
    spec.validate()
    n, L, k = spec.num_identities, spec.num_cameras, spec.images_per_identity_per_camera
    n_test = spec.num_test_identities or n
    H, W = spec.image_height, spec.image_width
    glyphs = list(spec.identity_glyph_params or draw_glyphs(spec.total_identities, seed))
    src_styles = dict(spec.source_styles or default_source_styles(L))
    tgt_styles = dict(spec.target_styles or default_target_styles(L))

    counter = [0]

    def render(ident_glyph, camera, styles):
        idx = counter[0]
        counter[0] += 1
        base = render_glyph(ident_glyph, H, W, np.random.default_rng([seed, idx, 1]))
        img = apply_camera_style(base, camera, styles, rng=[seed, idx, 2])
        return quantize(img), idx

    def build(name, split, identities, styles, per_cam, prefix, domain):
        records, images = [], []
        for ident in identities:
            for cam in range(1, L + 1):
                for j in range(per_cam):
                    img, idx = render(glyphs[ident], cam, styles)
                    ref = f"{prefix}/{ident:04d}_c{cam}_{j:03d}.png"
                    records.append(ImageRecord(ref, ident, cam, split, f"synthetic:{domain}:{seed}:{idx}"))
                    images.append(img)
        return records, images

    def manifest(name, records, images):
        return DatasetManifest(
            records=records,
            num_cameras=L,
            image_height=H,
            image_width=W,
            image_channels=3,
            name=name,
            seed=seed,
            images=np.stack(images) if images else np.zeros((0, H, W, 3), np.float32),
        )

    source_ids = range(0, n)
    target_ids = range(n, 2 * n)
    test_ids = range(2 * n, 2 * n + n_test)

    src = manifest("source_train", *build("source_train", "train", source_ids, src_styles, k, "source_train", "source"))
    tgt = manifest("target_train", *build("target_train", "train", target_ids, tgt_styles, k, "target_train", "target"))
    query = manifest("query", *build("query", "query", test_ids, tgt_styles, 1, "query", "target"))
    g_recs, g_imgs = build("gallery", "gallery", test_ids, tgt_styles, k, "gallery", "target")

    rng = np.random.default_rng([seed, 0x6A])
    for j in range(spec.num_distractors):
        glyph = draw_glyphs(1, int(rng.integers(2**31)))[0]
        cam = int(rng.integers(1, L + 1))
        img, idx = render(glyph, cam, tgt_styles)
        g_recs.append(ImageRecord(f"gallery/-1_c{cam}_{j:03d}.png", JUNK_IDENTITY, cam, "gallery", f"synthetic:target:{seed}:{idx}"))
        g_imgs.append(img)
    gallery = manifest("gallery", g_recs, g_imgs)
    return src, tgt, query, gallery


def synthetic_styles(spec):
    """The (source, target) camera style tables a spec resolves to."""
    L = spec.num_cameras
    return (
        dict(spec.source_styles or default_source_styles(L)),
        dict(spec.target_styles or default_target_styles(L)),
    )
