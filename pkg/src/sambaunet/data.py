"""Synthetic short-axis cardiac phantoms and the SMBD dataset file format.

File layout (little-endian)::

    header  : b"SMBD" | u32 version | u32 count | u32 H | u32 W      (20 bytes)
    sample  : f32[H*W] image (row-major) | u8[H*W] labels            (5*H*W bytes)
"""

from __future__ import annotations

import dataclasses
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, FormatError

BG, RV, MYO, LV = 0, 1, 2, 3

MAGIC = b"SMBD"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")
# below this the myocardial ring is thinner than a pixel and topology breaks
MIN_EXTENT = 32


@dataclass
class SegSample:
    image: np.ndarray  # float32 (H, W)
    label: np.ndarray  # uint8 (H, W)

    def __eq__(self, other):
        return (
            isinstance(other, SegSample)
            and self.image.tobytes() == other.image.tobytes()
            and self.label.tobytes() == other.label.tobytes()
        )


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 64
    lv_radius: tuple = (6.0, 9.0)
    myo_thickness: tuple = (2.5, 4.0)
    rv_radius: tuple = (8.0, 12.0)
    rv_offset: tuple = (0.85, 1.1)  # fraction of (lv_radius + myo + rv_radius) * 0.6
    center_jitter: float = 4.0
    intensity: tuple = (0.1, 0.75, 0.35, 0.9)  # BG, RV, MYO, LV means
    noise: float = 0.03
    seed: int = 0


PRESETS = {
    "normal": PhantomSpec(),
    "dcm": PhantomSpec(lv_radius=(9.0, 12.0), myo_thickness=(2.0, 3.0)),
    "hcm": PhantomSpec(lv_radius=(4.5, 7.0), myo_thickness=(4.5, 6.5)),
    "minf": PhantomSpec(lv_radius=(7.5, 10.5), myo_thickness=(2.0, 3.5)),
    "arv": PhantomSpec(rv_radius=(11.0, 15.0), rv_offset=(0.95, 1.2)),
}


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def sample_seeds(master: int, count: int) -> list[int]:
    """Per-sample seeds: successive outputs of a splitmix64 stream seeded with ``master``."""
    golden = 0x9E3779B97F4A7C15
    return [splitmix64((master + i * golden) & 0xFFFFFFFFFFFFFFFF) for i in range(count)]


def generate_phantom(spec: PhantomSpec) -> SegSample:
    """LV disk wrapped in a MYO annulus, with a crescent RV attached on one side.

    Radii and jitter in ``spec`` are given for a 64x64 frame and scale with ``size``.
    """
    n = spec.size
    if n < MIN_EXTENT:
        raise ConfigurationError(f"phantoms need at least {MIN_EXTENT}x{MIN_EXTENT} pixels, got {n}")
    rng = np.random.default_rng(spec.seed)
    scale = n / 64.0
    r_lv = rng.uniform(*spec.lv_radius) * scale
    t = rng.uniform(*spec.myo_thickness) * scale
    r_rv = rng.uniform(*spec.rv_radius) * scale
    r_out = r_lv + t
    angle = rng.uniform(0, 2 * np.pi)
    # RV disk centre sits beyond the MYO edge so the crescent hugs it
    dist = r_out + rng.uniform(*spec.rv_offset) * r_rv * 0.6
    if dist >= r_out + r_rv - 1.0 * scale:
        dist = r_out + r_rv - 1.5 * scale
    if r_out + dist + r_rv > n - 3 * scale:
        raise ConfigurationError(
            f"phantom geometry (width {r_out + dist + r_rv:.1f}) does not fit a {n}x{n} image"
        )
    c = n / 2.0 + rng.uniform(-spec.center_jitter, spec.center_jitter, size=2) * scale
    # shift the whole heart so the RV stays inside the frame
    rv_c = c + dist * np.array([np.sin(angle), np.cos(angle)])
    for axis in range(2):
        low = min(c[axis] - r_out, rv_c[axis] - r_rv)
        high = max(c[axis] + r_out, rv_c[axis] + r_rv)
        shift = max(0.0, 1.0 - low) - max(0.0, high - (n - 2.0))
        c[axis] += shift
        rv_c[axis] += shift
    if min(c.min() - r_out, (rv_c - r_rv).min()) < 0.5 or max(c.max() + r_out, (rv_c + r_rv).max()) > n - 1.5:
        raise ConfigurationError("phantom structures do not fit inside the image")

    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    d_lv = np.hypot(yy - c[0], xx - c[1])
    d_rv = np.hypot(yy - rv_c[0], xx - rv_c[1])
    label = np.zeros((n, n), dtype=np.uint8)
    label[d_rv <= r_rv] = RV
    label[d_lv <= r_out] = MYO
    label[d_lv <= r_lv] = LV

    means = np.asarray(spec.intensity, dtype=np.float64)
    image = means[label]
    if spec.noise > 0:
        image = image + rng.normal(0.0, spec.noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return SegSample(image, label)


def check_topology(label: np.ndarray) -> list[str]:
    """Return a list of violated invariants (empty when the mask is valid)."""
    problems = []
    for cls, name in ((RV, "RV"), (MYO, "MYO"), (LV, "LV")):
        if not np.any(label == cls):
            problems.append(f"{name} is empty")
    if problems:
        return problems
    padded = np.pad(label, 1, constant_values=BG)
    centre = padded[1:-1, 1:-1]
    neighbours = [padded[:-2, 1:-1], padded[2:, 1:-1], padded[1:-1, :-2], padded[1:-1, 2:]]
    lv = centre == LV
    for nb in neighbours:
        if np.any(lv & (nb != LV) & (nb != MYO)):
            problems.append("LV touches a class other than MYO (not enclosed by the annulus)")
            break
    if any(np.any((centre == RV) & (nb == LV)) for nb in neighbours):
        problems.append("RV is adjacent to LV")
    if not any(np.any((centre == RV) & (nb == MYO)) for nb in neighbours):
        problems.append("RV is not adjacent to MYO")
    return problems


def generate_dataset(count: int, size: int = 64, preset: str = "mixed", seed: int = 0,
                     noise: float | None = None) -> list[SegSample]:
    names = sorted(PRESETS)
    if preset != "mixed" and preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset!r}; choose from {names + ['mixed']}")
    out = []
    for i, s in enumerate(sample_seeds(seed, count)):
        base = PRESETS[names[s % len(names)] if preset == "mixed" else preset]
        changes = {"size": size, "seed": s}
        if noise is not None:
            changes["noise"] = noise
        out.append(generate_phantom(dataclasses.replace(base, **changes)))
    return out


# ---------------------------------------------------------------------------
# binary format
# ---------------------------------------------------------------------------

def write_dataset(samples: Sequence[SegSample], path) -> None:
    if not samples:
        raise ConfigurationError("cannot write an empty dataset")
    H, W = samples[0].image.shape
    for s in samples:
        if s.image.shape != (H, W) or s.label.shape != (H, W):
            raise ConfigurationError("all samples must share one extent")
        if s.label.max(initial=0) > 3:
            raise ConfigurationError("labels must lie in 0..3")
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    try:
        with open(tmp, "wb") as f:
            f.write(_HEADER.pack(MAGIC, VERSION, len(samples), H, W))
            for s in samples:
                f.write(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
                f.write(np.ascontiguousarray(s.label, dtype=np.uint8).tobytes())
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def read_dataset(path) -> list[SegSample]:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(
            f"truncated header: expected {_HEADER.size} bytes, got {len(blob)}", len(blob)
        )
    magic, version, count, H, W = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    per = 5 * H * W
    expected = _HEADER.size + count * per
    if len(blob) != expected:
        raise FormatError(
            f"length mismatch: expected {expected} bytes, got {len(blob)}", min(len(blob), expected)
        )
    out = []
    off = _HEADER.size
    for _ in range(count):
        img = np.frombuffer(blob, dtype="<f4", count=H * W, offset=off).reshape(H, W)
        off += 4 * H * W
        lab = np.frombuffer(blob, dtype=np.uint8, count=H * W, offset=off).reshape(H, W)
        if lab.max(initial=0) > 3:
            raise FormatError("label value outside 0..3", off)
        off += H * W
        out.append(SegSample(img.astype(np.float32), lab.copy()))
    return out


def write_pgm(path, array: np.ndarray, maxval: int = 255) -> None:
    """Binary (P5) grayscale image; float images are scaled from [0, 1]."""
    a = np.asarray(array)
    if a.dtype.kind == "f":
        a = np.clip(np.rint(a * maxval), 0, maxval)
    a = a.astype(np.uint8)
    H, W = a.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{W} {H}\n{maxval}\n".encode())
        f.write(a.tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(maxsplit=4)
    if parts[0] != b"P5":
        raise FormatError("not a binary PGM", 0)
    W, H, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval > 255:
        raise FormatError("only 8-bit PGM is supported", 0)
    data = parts[4] if len(parts) > 4 else b""
    if len(data) < H * W:
        raise FormatError(f"PGM payload holds {len(data)} bytes, expected {H * W}", len(blob) - len(data))
    return np.frombuffer(data[: H * W], dtype=np.uint8).reshape(H, W)


def export_pgm(samples: Sequence[SegSample], directory) -> None:
    """Write ``NNNN_image.pgm`` and ``NNNN_label.pgm`` (labels scaled x85) per sample."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        write_pgm(d / f"{i:04d}_image.pgm", s.image)
        write_pgm(d / f"{i:04d}_label.pgm", s.label.astype(np.uint8) * 85)


def import_pgm(directory) -> list[SegSample]:
    d = Path(directory)
    out = []
    for img_path in sorted(d.glob("*_image.pgm")):
        img = read_pgm(img_path).astype(np.float32) / 255.0
        lab = read_pgm(img_path.with_name(img_path.name.replace("_image", "_label"))) // 85
        out.append(SegSample(img, lab.astype(np.uint8)))
    return out


def split(samples: Sequence, train_fraction: float, seed: int = 0):
    """Deterministic shuffled split into (train, val)."""
    if not 0 < train_fraction < 1:
        raise ConfigurationError(f"train fraction must lie in (0, 1), got {train_fraction}")
    n = len(samples)
    n_train = int(round(n * train_fraction))
    if n_train == 0 or n_train == n:
        raise ConfigurationError(f"split of {n} samples at {train_fraction} leaves one side empty")
    order = np.random.default_rng(seed).permutation(n)
    return [samples[i] for i in order[:n_train]], [samples[i] for i in order[n_train:]]
