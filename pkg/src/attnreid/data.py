"""Synthetic re-identification data and a manifest-driven folder loader.

Manifest format, one entry per line (UTF-8, ``#`` starts a comment)::

    relative/path.png  person_id  camera_id  split

with split one of ``train``, ``query``, ``gallery``. Person id ``-1`` marks
junk/distractor images.
"""

from __future__ import annotations

import colorsys
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

SPLITS = ("train", "query", "gallery")
IMAGE_SUFFIXES = {".png", ".ppm", ".pgm", ".pnm", ".bmp", ".tif", ".tiff"}
MANIFEST_NAME = "manifest.txt"


class ManifestError(ValueError):
    """A manifest line could not be parsed or references nothing usable."""


class EmptyDatasetWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    pid: int
    cam: int
    split: str


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)

    def counts(self) -> dict:
        out = {s: 0 for s in SPLITS}
        for e in self.entries:
            out[e.split] += 1
        return out

    def ids(self, split: str) -> set:
        return {e.pid for e in self.entries if e.split == split and e.pid >= 0}

    def check(self, require_disjoint_train: bool = True) -> None:
        """Raise ManifestError when split discipline is violated."""
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise ManifestError("an image appears more than once in the manifest")
        if require_disjoint_train:
            overlap = self.ids("train") & (self.ids("query") | self.ids("gallery"))
            if overlap:
                raise ManifestError(f"train and test identities overlap: {sorted(overlap)[:5]}...")

    def to_text(self) -> str:
        lines = ["# path person_id camera_id split"]
        lines += [f"{e.path} {e.pid} {e.cam} {e.split}" for e in self.entries]
        return "\n".join(lines) + "\n"


def parse_manifest(text: str, source: str = "<manifest>") -> DatasetManifest:
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ManifestError(f"{source}:{lineno}: expected 'path id cam split', got {raw!r}")
        path, pid, cam, split = parts
        try:
            pid_i = int(pid)
        except ValueError:
            raise ManifestError(f"{source}:{lineno}: person id {pid!r} is not an integer") from None
        try:
            cam_i = int(cam)
        except ValueError:
            raise ManifestError(f"{source}:{lineno}: camera id {cam!r} is not an integer") from None
        if split not in SPLITS:
            raise ManifestError(f"{source}:{lineno}: split {split!r} not in {SPLITS}")
        entries.append(ManifestEntry(path, pid_i, cam_i, split))
    return DatasetManifest(entries)


def normalize_images(imgs: np.ndarray, mean, std, dtype=np.float32) -> np.ndarray:
    """uint8 n x H x W x 3 to float n x 3 x H x W with per-channel mean/std."""
    dtype = np.dtype(dtype)
    x = imgs.astype(dtype) / dtype.type(255.0)
    x = (x - np.asarray(mean, dtype=dtype)) / np.asarray(std, dtype=dtype)
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


@dataclass
class ReidDataset:
    """Images held as uint8 N x H x W x 3, normalized on access."""

    images: np.ndarray
    pids: np.ndarray
    cams: np.ndarray
    splits: np.ndarray
    paths: list
    mean: tuple = (0.5, 0.5, 0.5)
    std: tuple = (0.5, 0.5, 0.5)

    def __len__(self) -> int:
        return len(self.pids)

    @property
    def hw(self) -> tuple:
        return tuple(self.images.shape[1:3])

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == split)

    def subset(self, idx: Sequence[int]) -> "ReidDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return ReidDataset(self.images[idx], self.pids[idx], self.cams[idx], self.splits[idx],
                           [self.paths[i] for i in idx], self.mean, self.std)

    def split(self, name: str) -> "ReidDataset":
        return self.subset(self.indices(name))

    def tensor(self, idx: Optional[Sequence[int]] = None, dtype=np.float32) -> np.ndarray:
        """Normalized float images, n x 3 x H x W."""
        imgs = self.images if idx is None else self.images[np.asarray(idx, dtype=np.int64)]
        return normalize_images(imgs, self.mean, self.std, dtype)

    def num_ids(self, split: str = "train") -> int:
        return len(set(self.pids[self.indices(split)].tolist()) - {-1})

    @property
    def manifest(self) -> DatasetManifest:
        return DatasetManifest([ManifestEntry(p, int(i), int(c), str(s))
                                for p, i, c, s in zip(self.paths, self.pids, self.cams, self.splits)])


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IdentitySpec:
    id: int
    torso_hue: float
    leg_hue: float
    torso_sat: float
    torso_val: float
    leg_val: float
    build: float
    skin: float
    accessories: tuple  # (bag, hat, stripe, backpack) bits
    accent_hue: float

    def appearance(self) -> tuple:
        return (round(self.torso_hue, 6), round(self.leg_hue, 6), round(self.torso_sat, 6),
                round(self.torso_val, 6), round(self.leg_val, 6), round(self.build, 6),
                round(self.skin, 6), self.accessories, round(self.accent_hue, 6))


def _draw_identity(pid: int, rng: np.random.Generator) -> IdentitySpec:
    # hues drawn from a coarse palette with jitter: many ids share a dominant colour
    palette = np.linspace(0.0, 1.0, 9, endpoint=False)
    return IdentitySpec(
        id=pid,
        torso_hue=float((rng.choice(palette) + rng.normal(0, 0.02)) % 1.0),
        leg_hue=float((rng.choice(palette) + rng.normal(0, 0.02)) % 1.0),
        torso_sat=float(rng.uniform(0.25, 0.95)),
        torso_val=float(rng.uniform(0.35, 0.95)),
        leg_val=float(rng.uniform(0.15, 0.8)),
        build=float(rng.uniform(0.75, 1.15)),
        skin=float(rng.uniform(0.35, 0.85)),
        accessories=tuple(int(b) for b in rng.random(4) < (0.3, 0.25, 0.3, 0.25)),
        accent_hue=float(rng.random()),
    )


def make_identities(n: int, rng: np.random.Generator, start: int = 0) -> list:
    out, seen = [], set()
    pid = start
    while len(out) < n:
        spec = _draw_identity(pid, rng)
        if spec.appearance() in seen:
            continue
        seen.add(spec.appearance())
        out.append(spec)
        pid += 1
    return out


def _rgb(h, s, v) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, min(max(s, 0.0), 1.0), min(max(v, 0.0), 1.0)))


@dataclass(frozen=True)
class CameraModel:
    gain: tuple
    offset: float
    background: tuple
    mirror: bool
    noise: float
    scale: float
    occlusion: float


def _camera_models(n_cams: int, rng: np.random.Generator, domain: str) -> list:
    cams = []
    for c in range(n_cams):
        if domain == "target":
            # eye-level indoor views: tighter crops, warm light, stronger contrast swings
            gain = tuple(rng.uniform(0.8, 1.25, 3) * (1.1, 1.0, 0.85))
            bg = tuple(rng.uniform(0.45, 0.8, 3))
            scale = float(rng.uniform(1.05, 1.2))
            noise = float(rng.uniform(0.03, 0.06))
            occ = 0.3
        else:
            gain = tuple(rng.uniform(0.8, 1.2, 3))
            bg = tuple(rng.uniform(0.15, 0.6, 3))
            scale = float(rng.uniform(0.85, 1.0))
            noise = float(rng.uniform(0.02, 0.05))
            occ = 0.1
        cams.append(CameraModel(gain, float(rng.uniform(-0.08, 0.08)), bg, bool(c % 2), noise, scale, occ))
    return cams


def render_person(ident: IdentitySpec, cam: CameraModel, hw: tuple, rng: np.random.Generator) -> np.ndarray:
    """Blocky head/torso/legs figure under one camera's view; returns uint8 H x W x 3."""
    h, w = hw
    yy = np.linspace(0.0, 1.0, h)[:, None, None]
    img = np.empty((h, w, 3))
    img[...] = np.asarray(cam.background) * (0.85 + 0.3 * yy)
    img += rng.normal(0, 0.04, size=(1, 1, 3))

    s = cam.scale * rng.uniform(0.95, 1.05)
    cx = w / 2 + rng.uniform(-0.08, 0.08) * w
    top = h * (0.04 + rng.uniform(-0.03, 0.03)) + (1 - s) * h * 0.5

    def band(y0, y1, half_w, color, x0=None):
        r0 = int(round(top + y0 * h * s))
        r1 = int(round(top + y1 * h * s))
        cxx = cx if x0 is None else x0
        c0 = int(round(cxx - half_w * w * s))
        c1 = int(round(cxx + half_w * w * s))
        r0, r1 = max(r0, 0), min(r1, h)
        c0, c1 = max(c0, 0), min(c1, w)
        if r1 > r0 and c1 > c0:
            img[r0:r1, c0:c1] = color

    torso = _rgb(ident.torso_hue, ident.torso_sat, ident.torso_val)
    legs = _rgb(ident.leg_hue, 0.5, ident.leg_val)
    skin = _rgb(0.07, 0.45, ident.skin)
    accent = _rgb(ident.accent_hue, 0.8, 0.85)
    bag, hat, stripe, backpack = ident.accessories
    bw = 0.24 * ident.build
    side = -1 if cam.mirror else 1

    band(0.55, 0.93, 0.09, legs, cx - 0.1 * w * s)
    band(0.55, 0.93, 0.09, legs, cx + 0.1 * w * s)
    band(0.92, 0.97, 0.1, np.array([0.1, 0.1, 0.1]), cx - 0.1 * w * s)
    band(0.92, 0.97, 0.1, np.array([0.1, 0.1, 0.1]), cx + 0.1 * w * s)
    band(0.2, 0.57, bw, torso)
    band(0.22, 0.5, 0.06, torso * 0.8, cx - (bw + 0.06) * w * s)
    band(0.22, 0.5, 0.06, torso * 0.8, cx + (bw + 0.06) * w * s)
    if stripe:
        band(0.33, 0.39, bw, accent)
    if backpack:
        band(0.22, 0.45, 0.07, accent * 0.7, cx - side * bw * w * s)
    band(0.05, 0.2, 0.12, skin)
    if hat:
        band(0.03, 0.09, 0.14, accent)
    if bag:
        band(0.45, 0.62, 0.08, accent * 0.9, cx + side * (bw + 0.12) * w * s)

    if rng.random() < cam.occlusion:
        r0 = int(h * rng.uniform(0.6, 0.8))
        img[r0:, :] = img[r0:, :] * 0.3 + 0.35

    img = img * np.asarray(cam.gain) * rng.uniform(0.9, 1.1) + cam.offset
    img += rng.normal(0, cam.noise, size=img.shape)
    return (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def generate_synthetic(n_train_ids: int, n_test_ids: int, imgs_per_id: int, n_cams: int,
                       hw: Sequence[int] = (64, 32), seed: int = 0, domain: str = "source"):
    """Render a seeded dataset with disjoint train/test identities.

    Image ``i`` of an identity is taken by camera ``i % n_cams``. For test
    identities the first image of each camera is a query, the rest gallery.
    Returns ``(dataset, manifest)``.
    """
    if n_cams < 2:
        raise ValueError("n_cams must be at least 2 so camera exclusion can be exercised")
    if imgs_per_id < n_cams:
        raise ValueError(f"imgs_per_id ({imgs_per_id}) must be >= n_cams ({n_cams})")
    if domain not in ("source", "target"):
        raise ValueError("domain must be 'source' or 'target'")
    hw = (int(hw[0]), int(hw[1]))
    root = np.random.SeedSequence(seed)
    id_ss, cam_ss, img_ss = root.spawn(3)
    idents = make_identities(n_train_ids + n_test_ids, np.random.default_rng(id_ss))
    cams = _camera_models(n_cams, np.random.default_rng(cam_ss), domain)

    images, pids, camids, splits, paths = [], [], [], [], []
    img_rng = np.random.default_rng(img_ss)
    for k, ident in enumerate(idents):
        is_train = k < n_train_ids
        for i in range(imgs_per_id):
            cam = i % n_cams
            split = "train" if is_train else ("query" if i < n_cams else "gallery")
            images.append(render_person(ident, cams[cam], hw, img_rng))
            pids.append(ident.id)
            camids.append(cam)
            splits.append(split)
            paths.append(f"{split}/{ident.id:05d}_c{cam}_{i:04d}.png")
    ds = ReidDataset(np.stack(images), np.asarray(pids, dtype=np.int64), np.asarray(camids, dtype=np.int64),
                     np.asarray(splits), paths)
    return ds, ds.manifest


def write_folder_dataset(ds: ReidDataset, root) -> Path:
    """Write PNG images and ``manifest.txt`` under ``root``; returns the manifest path."""
    root = Path(root)
    for img, rel in zip(ds.images, ds.paths):
        dest = root / rel
        dest.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(img).save(dest, format="PNG")
    manifest = root / MANIFEST_NAME
    manifest.write_text(ds.manifest.to_text(), encoding="utf-8")
    return manifest


def load_folder_dataset(root, manifest_file=None, input_hw: Optional[Sequence[int]] = None,
                        mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5)) -> ReidDataset:
    """Decode every manifest entry, resizing to ``input_hw`` (H, W) when given."""
    root = Path(root)
    manifest_path = Path(manifest_file) if manifest_file is not None else root / MANIFEST_NAME
    if not manifest_path.is_absolute() and not manifest_path.exists():
        manifest_path = root / manifest_path
    if not manifest_path.exists():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    manifest = parse_manifest(manifest_path.read_text(encoding="utf-8"), str(manifest_path))
    if not manifest.entries:
        warnings.warn(f"{manifest_path}: manifest has no entries; dataset is empty", EmptyDatasetWarning)
        h, w = input_hw or (0, 0)
        return ReidDataset(np.zeros((0, h, w, 3), dtype=np.uint8), np.zeros(0, dtype=np.int64),
                           np.zeros(0, dtype=np.int64), np.asarray([], dtype="<U7"), [], tuple(mean), tuple(std))
    images = []
    for e in manifest.entries:
        path = root / e.path
        if not path.exists():
            raise FileNotFoundError(f"{manifest_path}: missing image {path}")
        if path.suffix.lower() not in IMAGE_SUFFIXES:
            raise ManifestError(f"{manifest_path}: unsupported image format {path.suffix!r} for {e.path}")
        with Image.open(path) as im:
            im = im.convert("RGB")
            if input_hw is not None and (im.height, im.width) != tuple(input_hw):
                im = im.resize((int(input_hw[1]), int(input_hw[0])), Image.BILINEAR)
            images.append(np.asarray(im, dtype=np.uint8))
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ManifestError(f"images have differing sizes {sorted(shapes)}; pass input_hw to resize")
    return ReidDataset(np.stack(images),
                       np.asarray([e.pid for e in manifest.entries], dtype=np.int64),
                       np.asarray([e.cam for e in manifest.entries], dtype=np.int64),
                       np.asarray([e.split for e in manifest.entries]),
                       [e.path for e in manifest.entries], tuple(mean), tuple(std))
