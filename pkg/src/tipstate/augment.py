"""Label-preserving augmentations and per-class augmentation policies."""
from __future__ import annotations

import configparser
import enum
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import (BoxOutOfBounds, BoxTooSmall, DataError, PolicyMismatch,
                     SigmaOutOfRange)
from .imagecore import LabeledSample, ScanImage, resize
from .seeding import derive_seed

MAX_SIGMA = 0.5
MIN_CROP_FRACTION = 0.5
_SNAP = 1e-9


class Flips(str, enum.Enum):
    None_ = "None"
    HorizontalOnly = "HorizontalOnly"
    Both = "Both"


@dataclass(frozen=True)
class AugmentPolicy:
    rotations: bool = True
    flips: Flips = Flips.Both
    crop_pan: bool = True
    noise_sigma_range: tuple[float, float] = (0.0, 0.15)
    repeats: int = 4

    def __post_init__(self):
        object.__setattr__(self, "flips", Flips(self.flips))
        lo, hi = (float(v) for v in self.noise_sigma_range)
        if not 0.0 <= lo <= hi <= MAX_SIGMA:
            raise SigmaOutOfRange(f"noise range {(lo, hi)} not within [0, {MAX_SIGMA}]")
        object.__setattr__(self, "noise_sigma_range", (lo, hi))
        if int(self.repeats) < 0:
            raise ValueError("repeats must be >= 0")
        object.__setattr__(self, "repeats", int(self.repeats))

    @property
    def is_restricted(self) -> bool:
        """True when only horizontal flips and noise can be applied."""
        return (not self.rotations and not self.crop_pan
                and self.flips in (Flips.HorizontalOnly, Flips.None_))


DEFAULT_POLICY = AugmentPolicy()
# Tip changes are horizontal shears; rotating or cropping could move or cut
# away the discontinuity.
TIPCHANGE_POLICY = AugmentPolicy(rotations=False, flips=Flips.HorizontalOnly, crop_pan=False)
RESTRICTED_LABELS = frozenset({"TipChange"})


def default_policies(classes: Sequence[str], repeats: int | None = None) -> dict[str, AugmentPolicy]:
    out = {}
    for c in classes:
        p = TIPCHANGE_POLICY if c in RESTRICTED_LABELS else DEFAULT_POLICY
        out[c] = p if repeats is None else replace(p, repeats=repeats)
    return out


# -- primitive transforms ------------------------------------------------------

def _bilinear_sample(v, rows, cols):
    h, w = v.shape
    rows = np.where(np.abs(rows - np.round(rows)) < _SNAP, np.round(rows), rows)
    cols = np.where(np.abs(cols - np.round(cols)) < _SNAP, np.round(cols), cols)
    inside = (rows >= 0) & (rows <= h - 1) & (cols >= 0) & (cols <= w - 1)
    r = np.clip(rows, 0, h - 1)
    c = np.clip(cols, 0, w - 1)
    r0 = np.floor(r).astype(int)
    c0 = np.floor(c).astype(int)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr, fc = r - r0, c - c0
    out = ((1 - fr) * (1 - fc) * v[r0, c0] + (1 - fr) * fc * v[r0, c1]
           + fr * (1 - fc) * v[r1, c0] + fr * fc * v[r1, c1])
    return np.where(inside, out, 0.0)


def rotate(img: ScanImage, theta_deg: float) -> ScanImage:
    """Counter-clockwise rotation about the image centre (90 deg == ``np.rot90``).

    Bilinear resampling; pixels whose source falls outside the frame are 0.
    """
    theta = float(theta_deg) % 360.0
    if theta == 0.0:
        return img
    v = img.values
    h, w = v.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    y -= cy
    x -= cx
    t = np.deg2rad(theta)
    cos, sin = np.cos(t), np.sin(t)
    src_r = cos * y + sin * x + cy
    src_c = -sin * y + cos * x + cx
    return ScanImage(np.clip(_bilinear_sample(v, src_r, src_c), -1.0, 1.0))


def flip(img: ScanImage, axis: str) -> ScanImage:
    """``"Horizontal"`` mirrors left-right (reverses columns), ``"Vertical"`` up-down."""
    if axis == "Horizontal":
        return ScanImage(img.values[:, ::-1])
    if axis == "Vertical":
        return ScanImage(img.values[::-1, :])
    raise ValueError(f"axis must be 'Horizontal' or 'Vertical', got {axis!r}")


@dataclass(frozen=True)
class Box:
    top: int
    left: int
    height: int
    width: int


def crop_pan(img: ScanImage, box: Box, out_side: int) -> ScanImage:
    """Crop ``box`` and resize the crop to ``out_side`` x ``out_side``."""
    h, w = img.shape
    if (box.top < 0 or box.left < 0 or box.height < 1 or box.width < 1
            or box.top + box.height > h or box.left + box.width > w):
        raise BoxOutOfBounds(f"{box} outside {h}x{w} image")
    if box.height < MIN_CROP_FRACTION * h or box.width < MIN_CROP_FRACTION * w:
        raise BoxTooSmall(f"{box} smaller than {MIN_CROP_FRACTION:.0%} of the frame")
    crop = img.values[box.top:box.top + box.height, box.left:box.left + box.width]
    return resize(ScanImage(crop), out_side)


def add_gaussian_noise(img: ScanImage, sigma: float, seed: int) -> ScanImage:
    if not 0.0 <= sigma <= MAX_SIGMA:
        raise SigmaOutOfRange(f"sigma {sigma} not in [0, {MAX_SIGMA}]")
    if sigma == 0.0:
        return img
    noise = np.random.default_rng(seed).normal(0.0, sigma, size=img.shape)
    return ScanImage(np.clip(img.values + noise, -1.0, 1.0))


# -- policies ------------------------------------------------------------------

def check_policy(label: str, policy: AugmentPolicy):
    if label in RESTRICTED_LABELS and not policy.is_restricted:
        raise PolicyMismatch(f"{label} samples allow only horizontal flips and noise")


def augment_sample(s: LabeledSample, policy: AugmentPolicy, seed: int) -> list[LabeledSample]:
    """``policy.repeats`` randomly transformed copies of ``s``.

    Each copy records the applied operations in ``meta["ops"]``.
    """
    check_policy(s.label.name, policy)
    side = s.image.height
    out = []
    for r in range(policy.repeats):
        rng = np.random.default_rng(derive_seed(seed, s.source_id, r))
        img, ops = s.image, []
        if policy.rotations:
            theta = float(rng.uniform(0.0, 360.0))
            img = rotate(img, theta)
            ops.append(("rotate", theta))
        if policy.flips is not Flips.None_ and rng.random() < 0.5:
            img = flip(img, "Horizontal")
            ops.append(("flip", "Horizontal"))
        if policy.flips is Flips.Both and rng.random() < 0.5:
            img = flip(img, "Vertical")
            ops.append(("flip", "Vertical"))
        if policy.crop_pan and img.height == img.width:
            frac = rng.uniform(MIN_CROP_FRACTION, 1.0)
            size = max(int(np.ceil(MIN_CROP_FRACTION * side)), int(round(frac * side)))
            top = int(rng.integers(0, side - size + 1))
            left = int(rng.integers(0, side - size + 1))
            img = crop_pan(img, Box(top, left, size, size), side)
            ops.append(("crop_pan", (top, left, size)))
        lo, hi = policy.noise_sigma_range
        sigma = float(rng.uniform(lo, hi)) if hi > 0 else 0.0
        if sigma > 0:
            img = add_gaussian_noise(img, sigma, int(rng.integers(2**63)))
            ops.append(("noise", sigma))
        out.append(LabeledSample(img, s.surface, s.label, f"{s.source_id}#aug{r}",
                                 {"parent": s.source_id, "ops": ops}))
    return out


def augment_dataset(samples: Sequence[LabeledSample], policies: Mapping[str, AugmentPolicy],
                    seed: int, include_originals: bool = True) -> list[LabeledSample]:
    out = []
    for s in samples:
        try:
            policy = policies[s.label.name]
        except KeyError:
            raise PolicyMismatch(f"no augmentation policy for {s.label.name}") from None
        if include_originals:
            out.append(s)
        out.extend(augment_sample(s, policy, seed))
    return out


# -- policy files --------------------------------------------------------------

def _parse_bool(text):
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise DataError(f"not a boolean: {text!r}")


def read_policies(path, classes: Sequence[str]) -> dict[str, AugmentPolicy]:
    """Read an INI-style policy file; one ``[ClassName]`` section per override.

    Keys: ``rotations``, ``flips`` (None|HorizontalOnly|Both), ``crop_pan``,
    ``noise_sigma_range`` (``lo, hi``), ``repeats``.  A ``[DEFAULT]`` section
    applies to every class.  Classes without a section keep compiled defaults.
    """
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp.read(path, encoding="utf-8")
    policies = default_policies(classes)
    for name in classes:
        section = cp[name] if cp.has_section(name) else cp.defaults()
        if not section:
            continue
        base = policies[name]
        kw = {}
        if "rotations" in section:
            kw["rotations"] = _parse_bool(section["rotations"])
        if "flips" in section:
            kw["flips"] = Flips(section["flips"].strip())
        if "crop_pan" in section:
            kw["crop_pan"] = _parse_bool(section["crop_pan"])
        if "noise_sigma_range" in section:
            lo, hi = (float(x) for x in section["noise_sigma_range"].split(","))
            kw["noise_sigma_range"] = (lo, hi)
        if "repeats" in section:
            kw["repeats"] = int(section["repeats"])
        policies[name] = replace(base, **kw)
        check_policy(name, policies[name])
    return policies


def write_policies(path, policies: Mapping[str, AugmentPolicy]) -> Path:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    for name, p in policies.items():
        cp[name] = {
            "rotations": str(p.rotations).lower(),
            "flips": p.flips.value,
            "crop_pan": str(p.crop_pan).lower(),
            "noise_sigma_range": f"{p.noise_sigma_range[0]!r}, {p.noise_sigma_range[1]!r}",
            "repeats": str(p.repeats),
        }
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        cp.write(fh)
    return path
