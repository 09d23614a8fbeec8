"""2D discrete Fourier transforms, annulus energy injection, and spectral diagnostics.

Spectra are DC-centered: index (i, j) of the coefficient grid corresponds to
integer frequency (wy, wx) = (i - H//2, j - W//2). Radial quantities use the
radius r = sqrt(wx^2 + wy^2) in bin units; bin index b converts to normalized
frequency (cycles/pixel) as b / max(H, W).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ImageTensor",
    "Spectrum",
    "RadialProfile",
    "InjectionResult",
    "InvalidInputError",
    "SymmetryViolationError",
    "UndefinedMetricError",
    "DimensionMismatchError",
    "dft2",
    "idft2",
    "inject_energy",
    "inject_energy_spectrum",
    "annulus_mask",
    "radial_power",
    "f_half",
    "mean_magnitude_spectrum",
    "save_grid",
    "load_grid",
    "save_grid_csv",
    "load_grid_csv",
    "save_spectrum",
    "load_spectrum",
]


class InvalidInputError(ValueError):
    """Raised for non-finite or dimensionally inconsistent inputs."""


class SymmetryViolationError(ValueError):
    """Raised when an inverse transform of a non-Hermitian spectrum is requested."""


class UndefinedMetricError(ValueError):
    """Raised when a spectral metric is undefined (e.g. zero total power)."""


class DimensionMismatchError(ValueError):
    """Raised when grids of different dimensions are combined."""


@dataclass(frozen=True)
class ImageTensor:
    """Real-valued image grid, shape (channels, height, width).

    Intensities are nominally in [0, 1]; perturbation deltas may be signed
    and unbounded. All values must be finite.
    """

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[np.newaxis, :, :]
        if v.ndim != 3:
            raise InvalidInputError(f"expected (C, H, W) or (H, W) array, got ndim={v.ndim}")
        if v.shape[1] < 1 or v.shape[2] < 1:
            raise InvalidInputError(f"degenerate image dimensions {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("image contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def channel(self, c: int) -> np.ndarray:
        return self.values[c]


@dataclass(frozen=True)
class Spectrum:
    """DC-centered complex 2D Fourier coefficient grid."""

    coeffs: np.ndarray
    source_dims: tuple[int, int] | None = None  # (H, W) of the source image

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.complex128)
        if c.ndim != 2:
            raise InvalidInputError(f"spectrum must be 2D, got ndim={c.ndim}")
        object.__setattr__(self, "coeffs", c)
        if self.source_dims is None:
            object.__setattr__(self, "source_dims", c.shape)

    @property
    def height(self) -> int:
        return self.coeffs.shape[0]

    @property
    def width(self) -> int:
        return self.coeffs.shape[1]

    def total_power(self) -> float:
        return float(np.sum(np.abs(self.coeffs) ** 2))

    def hermitian_residual(self) -> float:
        """Max |S(-w) - conj(S(w))|, using modular index negation."""
        h, w = self.coeffs.shape
        iy = (2 * (h // 2) - np.arange(h)) % h  # centered index of -wy; Nyquist maps onto itself
        ix = (2 * (w // 2) - np.arange(w)) % w
        mirrored = self.coeffs[np.ix_(iy, ix)]
        return float(np.max(np.abs(mirrored - np.conj(self.coeffs))))


@dataclass(frozen=True)
class RadialProfile:
    """Spectral power accumulated into integer radius bins.

    ``bin_to_normalized`` converts a bin index to cycles/pixel.
    """

    power_per_bin: np.ndarray
    bin_to_normalized: float

    def __post_init__(self):
        p = np.asarray(self.power_per_bin, dtype=np.float64)
        if np.any(p < 0):
            raise InvalidInputError("radial power bins must be non-negative")
        object.__setattr__(self, "power_per_bin", p)

    def total_power(self) -> float:
        return float(np.sum(self.power_per_bin))


@dataclass(frozen=True)
class InjectionResult:
    """Outcome of an annulus energy injection.

    ``image`` is clipped to [0, 1]; ``pre_clip`` is the raw inverse transform
    on which the exact spectral scaling property holds. ``annulus_empty`` flags
    an annulus that missed the spectrum entirely (image passes through unchanged).
    """

    image: ImageTensor
    pre_clip: ImageTensor
    annulus_empty: bool
    clipped_fraction: float


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


_TWIDDLE_CACHE: dict[int, np.ndarray] = {}
_DFT_MATRIX_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _twiddles(n: int) -> np.ndarray:
    t = _TWIDDLE_CACHE.get(n)
    if t is None:
        t = np.exp(-2j * np.pi * np.arange(n // 2) / n)
        _TWIDDLE_CACHE[n] = t
    return t


def _bit_reverse_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for _ in range(bits):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    return rev


def _fft_pow2(a: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Iterative radix-2 Cooley-Tukey along the last axis (length power of two)."""
    n = a.shape[-1]
    out = np.array(a[..., _bit_reverse_indices(n)], dtype=np.complex128)
    size = 2
    while size <= n:
        half = size // 2
        tw = _twiddles(size)
        if inverse:
            tw = np.conj(tw)
        shaped = out.reshape(*out.shape[:-1], n // size, size)
        even = shaped[..., :half].copy()
        odd = shaped[..., half:] * tw
        shaped[..., :half] = even + odd
        shaped[..., half:] = even - odd
        size *= 2
    return out


def _dft_matrix(n: int, inverse: bool) -> np.ndarray:
    key = (n, inverse)
    m = _DFT_MATRIX_CACHE.get(key)
    if m is None:
        sign = 2j if inverse else -2j
        k = np.arange(n)
        m = np.exp(sign * np.pi * np.outer(k, k) / n)
        _DFT_MATRIX_CACHE[key] = m
    return m


def _transform_axis(a: np.ndarray, inverse: bool) -> np.ndarray:
    """Unnormalized DFT along the last axis; radix-2 fast path, matrix fallback."""
    n = a.shape[-1]
    if _is_pow2(n):
        return _fft_pow2(a, inverse=inverse)
    return a @ _dft_matrix(n, inverse).T


def _dft2_raw(pixels: np.ndarray) -> np.ndarray:
    """Uncentered unnormalized 2D DFT of a real (H, W) grid."""
    rows = _transform_axis(pixels.astype(np.complex128), inverse=False)
    return _transform_axis(rows.T, inverse=False).T


def _idft2_raw(coeffs: np.ndarray) -> np.ndarray:
    h, w = coeffs.shape
    rows = _transform_axis(coeffs, inverse=True)
    return _transform_axis(rows.T, inverse=True).T / (h * w)


def _center(grid: np.ndarray) -> np.ndarray:
    h, w = grid.shape
    return np.roll(np.roll(grid, h // 2, axis=0), w // 2, axis=1)


def _uncenter(grid: np.ndarray) -> np.ndarray:
    h, w = grid.shape
    return np.roll(np.roll(grid, -(h // 2), axis=0), -(w // 2), axis=1)


def dft2(image: ImageTensor, channel: int = 0) -> Spectrum:
    """Centered 2D DFT of one image channel.

    Uses a radix-2 FFT when both dimensions are powers of two and a
    direct-summation DFT otherwise.
    """
    if channel >= image.channels or channel < 0:
        raise InvalidInputError(f"channel {channel} out of range for {image.channels}-channel image")
    pixels = image.channel(channel)
    return Spectrum(_center(_dft2_raw(pixels)), source_dims=(image.height, image.width))


_HERMITIAN_RESIDUAL_MAX = 1e-8


def idft2(spectrum: Spectrum) -> ImageTensor:
    """Inverse transform back to a real image.

    Raises SymmetryViolationError if the imaginary residue of the inverse
    transform exceeds 1e-8 max-abs (non-Hermitian input).
    """
    raw = _idft2_raw(_uncenter(spectrum.coeffs))
    residue = float(np.max(np.abs(raw.imag)))
    if residue > _HERMITIAN_RESIDUAL_MAX:
        raise SymmetryViolationError(
            f"inverse transform has imaginary residue {residue:.3e} (non-Hermitian spectrum)"
        )
    return ImageTensor(raw.real[np.newaxis, :, :])


def _radius_grid(h: int, w: int) -> np.ndarray:
    wy = np.arange(h) - h // 2
    wx = np.arange(w) - w // 2
    return np.sqrt(wy[:, np.newaxis] ** 2 + wx[np.newaxis, :] ** 2)


def annulus_mask(h: int, w: int, r0: float, delta_width: float) -> np.ndarray:
    """Boolean mask of centered bins with (r - r0)^2 <= delta_width^2."""
    r = _radius_grid(h, w)
    return (r - r0) ** 2 <= delta_width**2


def inject_energy_spectrum(
    spectrum: Spectrum, r0: float, delta_width: float, delta_gain: float
) -> Spectrum:
    """Spectral-domain primitive: scale annulus coefficients by (1 + delta_gain).

    Coefficients outside the annulus are copied bit-for-bit; phase is
    preserved everywhere (the scaling factor is a non-negative real).
    """
    coeffs = spectrum.coeffs.copy()
    mask = annulus_mask(spectrum.height, spectrum.width, r0, delta_width)
    coeffs[mask] *= 1.0 + delta_gain
    return Spectrum(coeffs, source_dims=spectrum.source_dims)


def inject_energy(
    image: ImageTensor, r0: float, delta_width: float, delta_gain: float
) -> InjectionResult:
    """Scale coefficient magnitudes by (1 + delta_gain) inside the radial annulus.

    The same annulus is applied to every channel. The returned image is
    clipped to [0, 1]; the exact (1+gain)^2 power property holds on
    ``pre_clip``.
    """
    if r0 < 0:
        raise InvalidInputError("annulus radius r0 must be >= 0")
    if delta_width < 0:
        raise InvalidInputError("annulus half-width must be >= 0")
    if delta_gain < -1:
        raise InvalidInputError("gain must be >= -1 (magnitudes cannot go negative)")

    mask = annulus_mask(image.height, image.width, r0, delta_width)
    if not mask.any():
        return InjectionResult(image=image, pre_clip=image, annulus_empty=True, clipped_fraction=0.0)
    if delta_gain == 0.0:
        return InjectionResult(image=image, pre_clip=image, annulus_empty=False, clipped_fraction=0.0)

    out = np.empty_like(image.values)
    for c in range(image.channels):
        out[c] = idft2(inject_energy_spectrum(dft2(image, c), r0, delta_width, delta_gain)).values[0]
    pre_clip = ImageTensor(out)
    clipped = np.clip(out, 0.0, 1.0)
    frac = float(np.mean(clipped != out))
    return InjectionResult(
        image=ImageTensor(clipped), pre_clip=pre_clip, annulus_empty=False, clipped_fraction=frac
    )


def radial_power(spectrum: Spectrum) -> RadialProfile:
    """Accumulate |coeff|^2 into integer bins by round(r); bins cover 0..ceil(max r)."""
    h, w = spectrum.coeffs.shape
    r = _radius_grid(h, w)
    bins = np.rint(r).astype(np.intp)
    n_bins = int(np.ceil(r.max())) + 1
    power = np.bincount(bins.ravel(), weights=(np.abs(spectrum.coeffs) ** 2).ravel(), minlength=n_bins)
    return RadialProfile(power_per_bin=power, bin_to_normalized=1.0 / max(h, w))


def f_half(profile: RadialProfile) -> float:
    """Half-power frequency: smallest bin whose cumulative power reaches half the total,
    expressed in cycles/pixel."""
    total = profile.total_power()
    if total <= 0.0:
        raise UndefinedMetricError("half-power frequency undefined for zero total power")
    cumulative = np.cumsum(profile.power_per_bin)
    b = int(np.searchsorted(cumulative, 0.5 * total))
    return b * profile.bin_to_normalized


def mean_magnitude_spectrum(perturbations: list[ImageTensor]) -> np.ndarray:
    """Element-wise mean of centered |dft2| magnitudes over images (and channels)."""
    if not perturbations:
        raise InvalidInputError("need at least one image")
    dims = (perturbations[0].height, perturbations[0].width)
    acc = np.zeros(dims, dtype=np.float64)
    count = 0
    for img in perturbations:
        if (img.height, img.width) != dims:
            raise DimensionMismatchError(
                f"image dims {(img.height, img.width)} differ from first image {dims}"
            )
        for c in range(img.channels):
            acc += np.abs(dft2(img, c).coeffs)
            count += 1
    return acc / count


# ---------------------------------------------------------------------------
# Grid serialization: raw "SPEC v1" format and CSV.
# ---------------------------------------------------------------------------

_RAW_MAGIC = "SPEC v1"


def save_grid(path, grid: np.ndarray) -> None:
    """Write a real (H, W) grid: one-line text header "SPEC v1 <H> <W>", then
    row-major little-endian float64 payload."""
    g = np.ascontiguousarray(np.asarray(grid, dtype="<f8"))
    if g.ndim != 2:
        raise InvalidInputError("raw grid format stores 2D grids")
    with open(path, "wb") as fh:
        fh.write(f"{_RAW_MAGIC} {g.shape[0]} {g.shape[1]}\n".encode("ascii"))
        fh.write(g.tobytes())


def load_grid(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").strip()
        parts = header.split()
        if len(parts) != 4 or " ".join(parts[:2]) != _RAW_MAGIC:
            raise InvalidInputError(f"{path}: not a {_RAW_MAGIC} grid (header {header!r})")
        h, w = int(parts[2]), int(parts[3])
        payload = fh.read(8 * h * w)
        if len(payload) != 8 * h * w:
            raise InvalidInputError(f"{path}: truncated payload")
        return np.frombuffer(payload, dtype="<f8").reshape(h, w).copy()


def save_spectrum(path_stem, spectrum: Spectrum) -> tuple:
    """Write a complex spectrum as a real/imaginary grid pair (raw format)."""
    stem = str(path_stem)
    re_path, im_path = stem + "_re.grid", stem + "_im.grid"
    save_grid(re_path, spectrum.coeffs.real)
    save_grid(im_path, spectrum.coeffs.imag)
    return re_path, im_path


def load_spectrum(path_stem) -> Spectrum:
    stem = str(path_stem)
    re = load_grid(stem + "_re.grid")
    im = load_grid(stem + "_im.grid")
    return Spectrum(re + 1j * im)


def save_grid_csv(path, grid: np.ndarray) -> None:
    """CSV export: comment line "# <H>,<W>", then row-major comma-separated values."""
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise InvalidInputError("CSV grid format stores 2D grids")
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# {g.shape[0]},{g.shape[1]}\n")
        for row in g:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_grid_csv(path) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("#"):
            raise InvalidInputError(f"{path}: missing dimension comment line")
        h, w = (int(p) for p in header.lstrip("#").strip().split(","))
        rows = [[float(v) for v in line.strip().split(",")] for line in fh if line.strip()]
    grid = np.array(rows, dtype=np.float64)
    if grid.shape != (h, w):
        raise InvalidInputError(f"{path}: payload shape {grid.shape} != header ({h}, {w})")
    return grid
