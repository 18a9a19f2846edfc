"""Synthetic identity images, noise injection, pair sampling, and file I/O.

Identities are mixtures of six oriented Gaussian blobs on a shared background
gradient. Blob placement is deliberately uneven across the image: most
identity-defining structure sits in the middle and bottom bands while the top
band stays close to background, so perturbations in different horizontal
regions hit the recognizer very differently. Per-sample variation is a small
shared translation, amplitude and contrast jitter, and additive pixel noise.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from pinact.linalg import SeededRng

VARIATION_PIXEL_NOISE = 0.02
VARIATION_SHIFT_SD = 1.2
VARIATION_AMP_JITTER = 0.05
VARIATION_CONTRAST_SPAN = 0.15
# per-sample brightness wobble confined to the top/bottom bands: within-class
# nuisance that teaches the recognizer those bands are unreliable
WOBBLE_TOP_AMP = 0.30
WOBBLE_BOTTOM_AMP = 0.25

# identity = shared template + small per-identity deviations of the
# middle-band blobs only; identities are deliberately confusable so
# verification margins stay realistic, and the discriminative signal is
# concentrated in the middle band
IDENTITY_POS_DEV = 0.060
IDENTITY_SCALE_DEV = 0.15
IDENTITY_ANGLE_DEV = 0.45
IDENTITY_AMP_DEV = 0.20
_DEVIATED_BLOBS = (0, 1, 4, 5)

# (row band, amplitude scale) per blob; bottom blobs are template-fixed
_BLOB_BANDS = (
    ((0.36, 0.60), 1.0),
    ((0.36, 0.60), 1.0),
    ((0.64, 0.88), 0.55),
    ((0.64, 0.88), 0.45),
    ((0.40, 0.70), 0.9),
    ((0.40, 0.62), 0.8),
)


@dataclass(frozen=True)
class IdentityLatent:
    """Deterministic identity definition: one row per blob.

    Columns: center row, center col (fractions of the image), major/minor
    sigma in pixels, orientation, amplitude.
    """

    ident: int
    blobs: np.ndarray

    def __post_init__(self):
        if self.blobs.shape != (len(_BLOB_BANDS), 6):
            raise ValueError("latent must define six blobs")


def sample_latent(ident, rng):
    """Draw a free-standing latent (used for the shared template)."""
    blobs = np.zeros((len(_BLOB_BANDS), 6))
    for i, ((lo, hi), amp_scale) in enumerate(_BLOB_BANDS):
        u = rng.uniform(6)
        blobs[i] = (
            lo + (hi - lo) * u[0],
            0.15 + 0.70 * u[1],
            2.0 + 1.5 * u[2],
            1.2 + 1.2 * u[3],
            np.pi * u[4],
            (0.40 + 0.45 * u[5]) * amp_scale,
        )
    return IdentityLatent(int(ident), blobs)


def derive_identity_latent(template, ident, rng):
    """Identity as a small deterministic deviation of the middle-band blobs."""
    blobs = template.blobs.copy()
    u = rng.standard_normal(blobs.size).reshape(blobs.shape)
    sel = list(_DEVIATED_BLOBS)
    blobs[sel, 0] += u[sel, 0] * IDENTITY_POS_DEV
    blobs[sel, 1] += u[sel, 1] * IDENTITY_POS_DEV
    blobs[sel, 2] *= np.exp(u[sel, 2] * IDENTITY_SCALE_DEV)
    blobs[sel, 3] *= np.exp(u[sel, 3] * IDENTITY_SCALE_DEV)
    blobs[sel, 4] += u[sel, 4] * IDENTITY_ANGLE_DEV
    blobs[sel, 5] *= np.exp(u[sel, 5] * IDENTITY_AMP_DEV)
    return IdentityLatent(int(ident), blobs)


def _render(latent, h, w, shift=(0.0, 0.0), amp_jitter=None, contrast=1.0):
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    # near-black top band, brightness ramp below it
    band_top = h // 3
    img = np.where(
        rows < band_top,
        0.02,
        0.10 + 0.24 * (rows - band_top) / max(h - 1 - band_top, 1),
    ) * np.ones((h, w))
    for i, (cy, cx, s1, s2, ang, amp) in enumerate(latent.blobs):
        if amp_jitter is not None:
            amp = amp * amp_jitter[i]
        dy = rows - (cy * h + shift[0])
        dx = cols - (cx * w + shift[1])
        ca, sa = np.cos(ang), np.sin(ang)
        u = ca * dx + sa * dy
        v = -sa * dx + ca * dy
        img = img + amp * np.exp(-0.5 * ((u / s1) ** 2 + (v / s2) ** 2))
    img = 0.5 + contrast * (img - 0.5)
    return img


def _band_wobble(rng, h, w, row_lo, row_hi, band_rows, amp_scale, positive=False):
    """Smooth random brightness bump confined to one horizontal band."""
    cy = row_lo + (row_hi - row_lo) * rng.uniform(1)[0]
    cx = rng.uniform(1)[0]
    amp = amp_scale * rng.standard_normal(1)[0]
    if positive:
        amp = abs(amp)
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    bump = amp * np.exp(
        -0.5 * (((rows - cy * h) / 3.0) ** 2 + ((cols - cx * w) / 6.0) ** 2)
    )
    band = np.zeros((h, w))
    band[band_rows, :] = 1.0
    return bump * band


def render_identity_sample(latent, variation_rng=None, h=32, w=32):
    """Render one sample; no rng means the canonical (variation-free) image."""
    if variation_rng is None:
        return np.clip(_render(latent, h, w), 0.0, 1.0).reshape(-1)
    rng = variation_rng
    shift = rng.standard_normal(2) * VARIATION_SHIFT_SD
    amp_jitter = 1.0 + VARIATION_AMP_JITTER * rng.standard_normal(len(_BLOB_BANDS))
    span = VARIATION_CONTRAST_SPAN
    contrast = 1.0 - span + 2.0 * span * rng.uniform(1)[0]
    img = _render(latent, h, w, shift, amp_jitter, contrast)
    img += _band_wobble(
        rng, h, w, 0.04, 0.24, slice(0, h // 3 + 1), WOBBLE_TOP_AMP, positive=True
    )
    img += _band_wobble(
        rng, h, w, 0.72, 0.94, slice(2 * (h // 3), h), WOBBLE_BOTTOM_AMP
    )
    img = img + VARIATION_PIXEL_NOISE * rng.standard_normal(h * w).reshape(h, w)
    return np.clip(img, 0.0, 1.0).reshape(-1)


# --- perturbation regions and noise injection ---------------------------------


def region_mask(name, h=32, w=32):
    """Flat boolean mask for one horizontal band ('top', 'middle', 'bottom')
    or the full image ('full')."""
    bands = np.array_split(np.arange(h), 3)
    named = {"top": bands[0], "middle": bands[1], "bottom": bands[2]}
    mask = np.zeros((h, w), dtype=bool)
    if name == "full":
        mask[:] = True
    elif name in named:
        mask[named[name], :] = True
    else:
        raise ValueError(f"unknown region {name!r}")
    return mask.reshape(-1)


def draw_scaled_noise(x, intensity, rng, mask=None):
    """Gaussian noise on the masked support, rescaled so ||noise|| equals
    intensity * ||x|| exactly (pre-clip)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if intensity < 0:
        raise ValueError("intensity must be non-negative")
    if intensity == 0:
        return np.zeros_like(x)
    x_norm = np.linalg.norm(x)
    if x_norm == 0:
        raise ValueError("intensity is undefined for an all-zero image")
    if mask is None:
        support = np.ones(x.size, dtype=bool)
    else:
        support = np.asarray(mask, dtype=bool).reshape(-1)
        if support.size != x.size:
            raise ValueError("mask size does not match the image")
        if not support.any():
            raise ValueError("region mask is empty")
    eta = np.zeros_like(x)
    draw = rng.standard_normal(int(support.sum()))
    norm = np.linalg.norm(draw)
    if norm == 0:
        draw[0] = 1.0
        norm = 1.0
    eta[support] = draw * (intensity * x_norm / norm)
    return eta


def add_noise_at_intensity(x, intensity, rng, mask=None):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    eta = draw_scaled_noise(x, intensity, rng, mask)
    return np.clip(x + eta, 0.0, 1.0)


def perturbation_intensity(clean, perturbed):
    """Realized ||perturbed - clean|| / ||clean||."""
    clean = np.asarray(clean, dtype=np.float64).reshape(-1)
    delta = np.asarray(perturbed, dtype=np.float64).reshape(-1) - clean
    return float(np.linalg.norm(delta) / np.linalg.norm(clean))


# --- dataset ------------------------------------------------------------------

DEFAULT_SPLITS = {"recognizer_train": 14, "basis_fit": 17, "pin_train": 4, "eval": 5}


@dataclass
class DatasetConfig:
    identities: int = 16
    images_per_identity: int = 40
    height: int = 32
    width: int = 32
    seed: int = 2024
    splits: dict = field(default_factory=lambda: dict(DEFAULT_SPLITS))


class Dataset:
    """In-memory dataset: flat float images plus the reproducibility manifest."""

    def __init__(self, config, images, labels, manifest):
        self.config = config
        self.images = images
        self.labels = labels
        self.manifest = manifest

    @property
    def dim(self):
        return self.config.height * self.config.width

    def split_ids(self, split):
        return list(self.manifest["splits"][split])

    def split_images(self, split):
        return np.stack([self.images[i] for i in self.split_ids(split)])


def _quantize(img):
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def generate_dataset(config=None):
    config = config or DatasetConfig()
    if sum(config.splits.values()) != config.images_per_identity:
        raise ValueError("split sizes must sum to images_per_identity")
    root = SeededRng(config.seed, 0)
    template = sample_latent(-1, root.derive("template"))
    images, labels = {}, {}
    splits = {name: [] for name in config.splits}
    hashes = {}
    for ident in range(config.identities):
        latent = derive_identity_latent(template, ident, root.derive(f"latent/{ident}"))
        cursor = 0
        for split_name, count in config.splits.items():
            for j in range(count):
                image_id = f"id{ident:02d}_im{cursor:02d}"
                rng = root.derive(f"image/{ident}/{cursor}")
                img = render_identity_sample(
                    latent, rng, config.height, config.width
                )
                images[image_id] = img
                labels[image_id] = ident
                splits[split_name].append(image_id)
                hashes[image_id] = hashlib.sha256(_quantize(img).tobytes()).hexdigest()
                cursor += 1
    manifest = {
        "schema_version": 1,
        "seed": config.seed,
        "identities": config.identities,
        "images_per_identity": config.images_per_identity,
        "height": config.height,
        "width": config.width,
        "split_sizes": dict(config.splits),
        "splits": splits,
        "hashes": hashes,
    }
    return Dataset(config, images, labels, manifest)


def make_pairs(dataset, n_pos, n_neg, rng, split="eval"):
    """Sample verification pairs from one split: positives are same-identity
    distinct images, negatives cross identities. Pairs never touch the
    basis-fit split unless explicitly asked for."""
    ids = dataset.split_ids(split)
    by_ident = {}
    for image_id in ids:
        by_ident.setdefault(dataset.labels[image_id], []).append(image_id)
    idents = sorted(by_ident)
    rich = [i for i in idents if len(by_ident[i]) >= 2]
    if n_pos > 0 and not rich:
        raise ValueError("no identity has two images in this split")
    if n_neg > 0 and len(idents) < 2:
        raise ValueError("need at least two identities for negative pairs")
    pairs = []
    for _ in range(n_pos):
        ident = rich[int(rng.integers(0, len(rich)))]
        a, b = rng.choice(len(by_ident[ident]), size=2, replace=False)
        pairs.append((by_ident[ident][int(a)], by_ident[ident][int(b)], 1))
    for _ in range(n_neg):
        ia, ib = rng.choice(len(idents), size=2, replace=False)
        a = by_ident[idents[int(ia)]][int(rng.integers(0, len(by_ident[idents[int(ia)]])))]
        b = by_ident[idents[int(ib)]][int(rng.integers(0, len(by_ident[idents[int(ib)]])))]
        pairs.append((a, b, 0))
    return pairs


# --- PGM and manifest files -----------------------------------------------------


def write_pgm(path, image, h=None, w=None):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 1:
        if h is None or w is None:
            raise ValueError("flat image needs explicit height and width")
        img = img.reshape(h, w)
    data = _quantize(img)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    with open(path, "wb") as fh:
        fh.write(header + data.tobytes())


def read_pgm(path):
    """Binary PGM with maxval 255; returns a float image in [0, 1]."""
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def token():
        nonlocal pos
        while pos < len(buf):
            if buf[pos : pos + 1].isspace():
                pos += 1
            elif buf[pos : pos + 1] == b"#":
                while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: malformed header at byte {start}")
        return buf[start:pos]

    if token() != b"P5":
        raise ValueError(f"{path}: not a binary PGM (bad magic at byte 0)")
    try:
        w, h, maxval = int(token()), int(token()), int(token())
    except ValueError as exc:
        raise ValueError(f"{path}: malformed header near byte {pos}") from exc
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    payload = buf[pos : pos + h * w]
    if len(payload) != h * w:
        raise ValueError(
            f"{path}: truncated payload at byte {pos + len(payload)} "
            f"(need {h * w} pixels)"
        )
    if pos + h * w != len(buf):
        raise ValueError(f"{path}: trailing bytes after pixel payload")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    return img.astype(np.float64) / 255.0


def save_dataset(dataset, out_dir):
    out_dir.mkdir(parents=True, exist_ok=True)
    img_dir = out_dir / "images"
    img_dir.mkdir(exist_ok=True)
    cfg = dataset.config
    for image_id, img in dataset.images.items():
        write_pgm(img_dir / f"{image_id}.pgm", img, cfg.height, cfg.width)
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(dataset.manifest, fh, indent=1, sort_keys=True)
    return out_dir / "manifest.json"


def load_dataset(out_dir):
    """Rebuild a Dataset from manifest + PGM files; verifies content hashes."""
    with open(out_dir / "manifest.json") as fh:
        manifest = json.load(fh)
    config = DatasetConfig(
        identities=manifest["identities"],
        images_per_identity=manifest["images_per_identity"],
        height=manifest["height"],
        width=manifest["width"],
        seed=manifest["seed"],
        splits=dict(manifest["split_sizes"]),
    )
    images, labels = {}, {}
    for split_ids in manifest["splits"].values():
        for image_id in split_ids:
            img = read_pgm(out_dir / "images" / f"{image_id}.pgm").reshape(-1)
            digest = hashlib.sha256(_quantize(img).tobytes()).hexdigest()
            if digest != manifest["hashes"][image_id]:
                raise ValueError(f"{image_id}: content hash mismatch")
            images[image_id] = img
            labels[image_id] = int(image_id[2:4])
    return Dataset(config, images, labels, manifest)
