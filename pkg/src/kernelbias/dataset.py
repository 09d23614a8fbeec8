"""Synthetic subgroup-structured image data with controllable frequency
content, plus a manifest-based loader for external image sets.

The synthetic construction puts the category signal into the *phase* of a
band-limited radial pattern: category 0 and category 1 are sign-flips of the
same ring texture, so class information is balanced while each subgroup's
discriminative content lives in its own frequency band. Images are
grayscale, values in [0, 1].
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imgfreq import ImageTensor, load_grid, save_grid

__all__ = [
    "Sample",
    "GroupSpec",
    "SynthSpec",
    "LoadError",
    "generate_synthetic",
    "signal_pattern",
    "load_manifest",
    "export_manifest",
    "split",
]


class LoadError(ValueError):
    """Raised for missing/malformed manifest entries or unsupported images."""


@dataclass(frozen=True)
class Sample:
    id: str
    image: ImageTensor
    category: int
    attributes: dict[str, object] = field(default_factory=dict)


@dataclass(frozen=True)
class GroupSpec:
    """Per-subgroup generation parameters; frequencies in cycles/pixel."""

    count: int
    signal_band: tuple[float, float]
    signal_amplitude: float = 3.0  # L2 norm of the category packet
    noise_std: float = 0.005
    texture_band: tuple[float, float] = (0.09, 0.14)
    texture_amplitude: float = 0.05
    random_center: bool = True  # draw the packet center per sample
    window_sigma: float = 4.5  # Gaussian envelope of the packet, in pixels

    def __post_init__(self):
        low, high = self.signal_band
        if not (0 <= low < high <= 0.5):
            raise ValueError(f"signal band must satisfy 0 <= low < high <= 0.5, got {self.signal_band}")
        tlo, thi = self.texture_band
        if not (0 <= tlo < thi <= 0.5):
            raise ValueError(f"texture band must satisfy 0 <= low < high <= 0.5, got {self.texture_band}")
        if self.count < 0:
            raise ValueError("count must be >= 0")


@dataclass(frozen=True)
class SynthSpec:
    groups: dict[str, GroupSpec]
    image_size: int = 32
    num_categories: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.num_categories != 2:
            raise ValueError("the synthetic generator encodes two categories (phase 0 / pi)")
        if self.image_size < 4:
            raise ValueError("image_size too small")


def _band_mask(size: int, low: float, high: float) -> np.ndarray:
    wy = np.arange(size) - size // 2
    r = np.sqrt(wy[:, np.newaxis] ** 2 + wy[np.newaxis, :] ** 2) / size
    return (r >= low) & (r < high)


def _bandpass_noise(rng: np.random.Generator, size: int, low: float, high: float) -> np.ndarray:
    """Unit-std real field with spectral support limited to [low, high) cycles/pixel."""
    field_white = rng.standard_normal((size, size))
    spec = np.fft.fftshift(np.fft.fft2(field_white))
    spec *= _band_mask(size, low, high)
    out = np.fft.ifft2(np.fft.ifftshift(spec)).real
    std = out.std()
    return out / std if std > 0 else out


def signal_pattern(size: int, freq: float, category: int,
                   band: tuple[float, float] | None = None,
                   center: tuple[float, float] | None = None,
                   window_sigma: float | None = None) -> np.ndarray:
    """Radial sinusoid cos(2*pi*f*r + phase) with phase 0 / pi encoding the category.

    ``center`` places the pattern's origin (defaults to the image center);
    ``window_sigma`` applies a Gaussian envelope so the packet is spatially
    localized (the envelope locates the center; the sign at the center
    carries the phase). When ``band`` is given the pattern is projected onto
    that spectral band and normalized to unit L2, so the category evidence
    carries no DC offset or out-of-band leakage and every draw has the same
    energy; a raw windowed sinusoid leaks class information into its spatial
    mean, which would defeat the per-band construction.
    """
    if center is None:
        center = ((size - 1) / 2.0, (size - 1) / 2.0)
    cy, cx = center
    yy, xx = np.mgrid[0:size, 0:size]
    r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    phase = 0.0 if category == 0 else np.pi
    raw = np.cos(2 * np.pi * freq * r + phase)
    if window_sigma is not None:
        raw = raw * np.exp(-(r**2) / (2.0 * window_sigma**2))
    if band is None:
        return raw
    spec = np.fft.fftshift(np.fft.fft2(raw))
    spec *= _band_mask(size, band[0], band[1] + 1.0 / size)  # keep the quantized ring edge
    out = np.fft.ifft2(np.fft.ifftshift(spec)).real
    norm = float(np.linalg.norm(out))
    return out / norm if norm > 0 else out


def generate_synthetic(spec: SynthSpec) -> list[Sample]:
    """Deterministic subgroup-structured samples; one RNG stream per sample."""
    samples: list[Sample] = []
    size = spec.image_size
    for g_idx, (name, group) in enumerate(sorted(spec.groups.items())):
        for i in range(group.count):
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, g_idx, i])))
            category = i % 2
            freq = float(rng.uniform(*group.signal_band))
            if group.random_center:
                margin = min(2.0 * group.window_sigma, (size - 1) / 2.0)
                center = tuple(rng.uniform(margin, size - 1 - margin, size=2))
            else:
                center = None
            texture = group.texture_amplitude * _bandpass_noise(rng, size, *group.texture_band)
            noise = group.noise_std * rng.standard_normal((size, size))
            pattern = group.signal_amplitude * signal_pattern(
                size, freq, category, band=group.signal_band, center=center,
                window_sigma=group.window_sigma,
            )
            pixels = 0.5 + texture + pattern + noise
            clipped = np.clip(pixels, 0.0, 1.0)
            samples.append(
                Sample(
                    id=f"{name}_{i:05d}",
                    image=ImageTensor(clipped[np.newaxis]),
                    category=category,
                    attributes={
                        "group": name,
                        "signal_freq": freq,
                        "clip_rate": float(np.mean(clipped != pixels)),
                    },
                )
            )
    return samples


# ---------------------------------------------------------------------------
# Manifest I/O
# ---------------------------------------------------------------------------


def _read_pnm(path: Path) -> np.ndarray:
    """Binary PGM (P5) / PPM (P6), 8-bit, normalized to [0, 1]; returns (C, H, W)."""
    data = path.read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise LoadError(f"{path}: truncated header")
        fields.append(data[start:pos])
    magic = fields[0]
    if magic not in (b"P5", b"P6"):
        raise LoadError(f"{path}: unsupported format {magic!r} (only binary P5/P6)")
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval <= 0 or maxval > 255:
        raise LoadError(f"{path}: only 8-bit images supported (maxval {maxval})")
    pos += 1  # single whitespace after maxval
    channels = 1 if magic == b"P5" else 3
    count = width * height * channels
    raw = data[pos : pos + count]
    if len(raw) != count:
        raise LoadError(f"{path}: truncated pixel data")
    arr = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / maxval
    if channels == 1:
        return arr.reshape(1, height, width)
    return arr.reshape(height, width, 3).transpose(2, 0, 1)


def _write_pnm(path: Path, image: ImageTensor) -> None:
    v = np.clip(np.rint(image.values * 255), 0, 255).astype(np.uint8)
    if image.channels == 1:
        header = f"P5\n{image.width} {image.height}\n255\n".encode("ascii")
        payload = v[0].tobytes()
    elif image.channels == 3:
        header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
        payload = v.transpose(1, 2, 0).tobytes()
    else:
        raise LoadError(f"cannot write {image.channels}-channel image as PNM")
    path.write_bytes(header + payload)


def _load_image(path: Path) -> ImageTensor:
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".ppm"):
        return ImageTensor(_read_pnm(path))
    if suffix == ".grid":
        grid = load_grid(path)
        if grid.min() < -1e-9 or grid.max() > 1 + 1e-9:
            raise LoadError(f"{path}: raw grid values outside [0, 1]")
        return ImageTensor(np.clip(grid, 0.0, 1.0)[np.newaxis])
    raise LoadError(f"{path}: unsupported image format {suffix!r}")


def load_manifest(path) -> list[Sample]:
    """Read a manifest: one `<relative_path>\\t<category>\\t<k=v,...>` record per line."""
    path = Path(path)
    if not path.exists():
        raise LoadError(f"manifest {path} does not exist")
    root = path.parent
    samples: list[Sample] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise LoadError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            rel, cat_text, attr_text = parts
            img_path = root / rel
            if not img_path.exists():
                raise LoadError(f"{path}:{lineno}: image file {img_path} missing")
            try:
                category = int(cat_text)
            except ValueError:
                raise LoadError(f"{path}:{lineno}: category {cat_text!r} is not an integer") from None
            attributes: dict[str, object] = {}
            if attr_text.strip():
                for pair in attr_text.split(","):
                    key, sep, value = pair.partition("=")
                    if not sep:
                        raise LoadError(f"{path}:{lineno}: malformed attribute {pair!r}")
                    attributes[key.strip()] = value.strip()
            try:
                image = _load_image(img_path)
            except LoadError as err:
                raise LoadError(f"{path}:{lineno}: {err}") from None
            samples.append(Sample(id=Path(rel).stem, image=image, category=category, attributes=attributes))
    return samples


def export_manifest(samples: list[Sample], out_dir, image_format: str = "grid") -> Path:
    """Write images plus a manifest in the loader's format; returns the manifest path."""
    if image_format not in ("grid", "pnm"):
        raise LoadError(f"unsupported export format {image_format!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        if image_format == "grid":
            if s.image.channels != 1:
                raise LoadError("raw grid export supports single-channel images only")
            fname = f"{s.id}.grid"
            save_grid(out / fname, s.image.values[0])
        else:
            fname = f"{s.id}.pgm" if s.image.channels == 1 else f"{s.id}.ppm"
            _write_pnm(out / fname, s.image)
        attrs = ",".join(f"{k}={v}" for k, v in sorted(s.attributes.items()))
        lines.append(f"{fname}\t{s.category}\t{attrs}")
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return manifest


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


def split(samples, train_fraction: float, seed: int, stratify_by: str = "group"):
    """Per-stratum proportional split, deterministic under seed.

    Strata smaller than 2 samples go wholly to the training side, with a
    warning. Returns (train, test); together they cover the input exactly.
    """
    if not (0 < train_fraction < 1):
        raise ValueError("train_fraction must be in (0, 1)")
    strata: dict[str, list[int]] = {}
    for idx, s in enumerate(samples):
        strata.setdefault(str(s.attributes.get(stratify_by, "")), []).append(idx)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 2])))
    train_idx: list[int] = []
    test_idx: list[int] = []
    for key in sorted(strata):
        members = strata[key]
        if len(members) < 2:
            warnings.warn(f"stratum {key!r} has fewer than 2 samples; placed wholly in train")
            train_idx.extend(members)
            continue
        order = rng.permutation(len(members))
        n_train = int(round(train_fraction * len(members)))
        n_train = min(max(n_train, 1), len(members) - 1)  # keep both sides non-empty
        for pos in order[:n_train]:
            train_idx.append(members[pos])
        for pos in order[n_train:]:
            test_idx.append(members[pos])
    train_idx.sort()
    test_idx.sort()
    return [samples[i] for i in train_idx], [samples[i] for i in test_idx]
