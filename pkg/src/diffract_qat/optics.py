"""Scalar free-space propagation between parallel planes.

Fields are complex arrays whose last two axes are (rows, cols) on a uniform
grid; any leading axes are treated as a batch.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.fft as sfft


def fft_workers() -> int:
    """Worker count for FFTs, capped by ``DIFFRACT_QAT_THREADS`` when set."""
    value = os.environ.get("DIFFRACT_QAT_THREADS")
    if value:
        return max(1, int(value))
    return 1


@dataclass
class ComplexField:
    values: np.ndarray
    pitch: float
    wavelength: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.ndim < 2 or min(self.values.shape[-2:]) < 1:
            raise ValueError(f"field needs a 2D grid, got shape {self.values.shape}")
        if not self.pitch > 0 or not self.wavelength > 0:
            raise ValueError("pitch and wavelength must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[-2:]

    @property
    def height(self) -> int:
        return self.values.shape[-2]

    @property
    def width(self) -> int:
        return self.values.shape[-1]

    def power(self) -> np.ndarray | float:
        """Total power ``sum |E|^2 * pitch^2`` per batch item."""
        return (np.abs(self.values) ** 2).sum(axis=(-2, -1)) * self.pitch**2

    def with_values(self, values) -> "ComplexField":
        return replace(self, values=values)


def frequency_grid(shape, pitch: float):
    """Spatial frequencies in standard FFT order (cycles per meter)."""
    fy = sfft.fftfreq(shape[0], d=pitch)
    fx = sfft.fftfreq(shape[1], d=pitch)
    return np.meshgrid(fy, fx, indexing="ij")


def angular_spectrum_transfer(shape, pitch: float, wavelength: float, distance: float):
    """``exp(j 2 pi z sqrt(1/lambda^2 - f^2))`` with evanescent components zeroed."""
    fy, fx = frequency_grid(shape, pitch)
    arg = 1.0 / wavelength**2 - fx**2 - fy**2
    propagating = arg > 0
    kz = np.sqrt(np.where(propagating, arg, 0.0))
    return np.where(propagating, np.exp(2j * np.pi * distance * kz), 0.0)


@dataclass(frozen=True, eq=False)
class PropagationPlan:
    """Precomputed angular-spectrum propagator for one grid and distance.

    ``pad`` is an integer factor; ``pad=2`` runs the FFTs on a grid twice the
    field size in each axis, trading cost for reduced wrap-around.
    """

    shape: tuple[int, int]
    pitch: float
    wavelength: float
    distance: float
    pad: int = 1
    transfer: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.pad < 1 or int(self.pad) != self.pad:
            raise ValueError(f"pad must be a positive integer, got {self.pad}")
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        padded = (self.shape[0] * self.pad, self.shape[1] * self.pad)
        h = angular_spectrum_transfer(padded, self.pitch, self.wavelength, self.distance)
        h.setflags(write=False)
        object.__setattr__(self, "transfer", h)

    def _check(self, f: ComplexField):
        if f.shape != self.shape:
            raise ValueError(f"field shape {f.shape} does not match plan shape {self.shape}")
        if not (np.isclose(f.pitch, self.pitch, rtol=1e-12)
                and np.isclose(f.wavelength, self.wavelength, rtol=1e-12)):
            raise ValueError("field pitch/wavelength do not match the propagation plan")

    def _apply(self, values: np.ndarray, transfer: np.ndarray) -> np.ndarray:
        h, w = self.shape
        if self.pad > 1:
            big = np.zeros(values.shape[:-2] + transfer.shape, dtype=np.complex128)
            big[..., :h, :w] = values
            values = big
        workers = fft_workers()
        spec = sfft.fft2(values, workers=workers)
        out = sfft.ifft2(spec * transfer, workers=workers)
        return out[..., :h, :w]

    def forward(self, f: ComplexField) -> ComplexField:
        self._check(f)
        if self.distance == 0:
            return f.with_values(f.values.copy())
        return f.with_values(self._apply(f.values, self.transfer))

    def adjoint(self, f: ComplexField) -> ComplexField:
        self._check(f)
        if self.distance == 0:
            return f.with_values(f.values.copy())
        return f.with_values(self._apply(f.values, np.conj(self.transfer)))


def propagate_angular_spectrum(f: ComplexField, plan: PropagationPlan) -> ComplexField:
    return plan.forward(f)


def propagate_adjoint(grad: ComplexField, plan: PropagationPlan) -> ComplexField:
    """Conjugate transpose of :func:`propagate_angular_spectrum`."""
    return plan.adjoint(grad)


def rs_kernel(r, z: float, wavelength: float):
    return (z / r**2) * (1.0 / (2 * np.pi * r) + 1.0 / (1j * wavelength)) * np.exp(
        2j * np.pi * r / wavelength
    )


def propagate_direct_rs(f: ComplexField, z: float) -> ComplexField:
    """Brute-force Rayleigh-Sommerfeld sum onto the same grid at distance z.

    Costs O((H*W)^2); intended as a reference for small grids.
    """
    if not z > 0:
        raise ValueError(f"direct summation needs z > 0, got {z}")
    h, w = f.shape
    ys, xs = np.meshgrid(np.arange(h) * f.pitch, np.arange(w) * f.pitch, indexing="ij")
    dy = ys.reshape(-1, 1) - ys.reshape(1, -1)
    dx = xs.reshape(-1, 1) - xs.reshape(1, -1)
    r = np.sqrt(dx**2 + dy**2 + z**2)
    kernel = rs_kernel(r, z, f.wavelength) * f.pitch**2
    flat = f.values.reshape(f.values.shape[:-2] + (h * w,))
    out = flat @ kernel.T
    return f.with_values(out.reshape(f.values.shape))


def _centered_offsets(outer, inner):
    if inner[0] > outer[0] or inner[1] > outer[1]:
        raise ValueError(f"window {tuple(inner)} does not fit inside {tuple(outer)}")
    return (outer[0] - inner[0]) // 2, (outer[1] - inner[1]) // 2


def embed_fov(image_field: ComplexField, layer_shape) -> ComplexField:
    """Place a field at the center of a larger zero-amplitude grid."""
    oy, ox = _centered_offsets(layer_shape, image_field.shape)
    h, w = image_field.shape
    out = np.zeros(image_field.values.shape[:-2] + tuple(layer_shape), dtype=np.complex128)
    out[..., oy:oy + h, ox:ox + w] = image_field.values
    return image_field.with_values(out)


def extract_detector(f: ComplexField, detector_shape) -> ComplexField:
    """Crop the centered ``detector_shape`` window (adjoint of :func:`embed_fov`)."""
    oy, ox = _centered_offsets(f.shape, detector_shape)
    h, w = detector_shape
    return f.with_values(f.values[..., oy:oy + h, ox:ox + w].copy())


@dataclass(frozen=True)
class GeometrySpec:
    """Layer stack geometry. Lengths in meters; pitch is ``neuron_size * wavelength``."""

    num_layers: int
    layer_shape: tuple[int, int]
    fov_shape: tuple[int, int]
    detector_shape: tuple[int, int]
    wavelength: float = 632.8e-9
    neuron_size: float = 0.5
    z_in: float = 5.3
    z: float = 5.3
    z_out: float = 9.3
    distances_in_wavelengths: bool = True
    pad: int = 1

    def __post_init__(self):
        for name in ("layer_shape", "fov_shape", "detector_shape"):
            object.__setattr__(self, name, tuple(int(s) for s in getattr(self, name)))
        if self.num_layers < 1:
            raise ValueError("need at least one layer")
        if min(self.z_in, self.z, self.z_out) <= 0:
            raise ValueError("all propagation distances must be positive")
        for name in ("fov_shape", "detector_shape"):
            s = getattr(self, name)
            if s[0] > self.layer_shape[0] or s[1] > self.layer_shape[1] or min(s) < 1:
                raise ValueError(f"{name} {s} does not fit in layer {self.layer_shape}")

    @property
    def pitch(self) -> float:
        return self.neuron_size * self.wavelength

    def _meters(self, d: float) -> float:
        return d * self.wavelength if self.distances_in_wavelengths else d

    @property
    def distances(self) -> tuple[float, float, float]:
        return self._meters(self.z_in), self._meters(self.z), self._meters(self.z_out)

    def plans(self) -> tuple[PropagationPlan, PropagationPlan, PropagationPlan]:
        return tuple(
            PropagationPlan(self.layer_shape, self.pitch, self.wavelength, d, pad=self.pad)
            for d in self.distances
        )


# Field dump: magic "CFLD", u32 version, u32 height, u32 width, f64 pitch,
# f64 wavelength, then height*width (f64 re, f64 im) pairs row-major; little-endian.
_FIELD_MAGIC = b"CFLD"
_FIELD_HEADER = struct.Struct("<4sIIIdd")


def write_field(path, f: ComplexField) -> None:
    if f.values.ndim != 2:
        raise ValueError("field dumps hold a single 2D grid")
    h, w = f.shape
    header = _FIELD_HEADER.pack(_FIELD_MAGIC, 1, h, w, f.pitch, f.wavelength)
    body = np.ascontiguousarray(f.values).astype("<c16").tobytes()
    Path(path).write_bytes(header + body)


def read_field(path) -> ComplexField:
    data = Path(path).read_bytes()
    if len(data) < _FIELD_HEADER.size:
        raise ValueError(f"{path}: truncated field header")
    magic, version, h, w, pitch, wavelength = _FIELD_HEADER.unpack_from(data)
    if magic != _FIELD_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != 1:
        raise ValueError(f"{path}: unsupported field dump version {version}")
    body = data[_FIELD_HEADER.size:]
    if len(body) != h * w * 16:
        raise ValueError(f"{path}: expected {h * w * 16} payload bytes, got {len(body)}")
    values = np.frombuffer(body, dtype="<c16").reshape(h, w).astype(np.complex128)
    return ComplexField(values, pitch, wavelength)
