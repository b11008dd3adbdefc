"""Frequency response data: grids, measurement sets, spectra, file formats.

A design works entirely on sampled responses, so the grid is the ground truth
everything else refers back to.  Frequencies are stored in Hz together with
the sample rate; normalized angular frequency omega = 2*pi*f/fs must lie in
(0, pi].

File formats
------------
A measurement is one CSV file with header ``freq_hz, re_00, im_00, re_01,
im_01, ...`` where the two-digit suffix is the (row, column) entry of the
response matrix, row-major.  A set of measurements is a JSON manifest::

    {"label": ..., "sample_rate_hz": ..., "response_shape": [r, c],
     "measurements": ["m0.csv", ...]}

with file paths relative to the manifest.  Scalar spectra use the same CSV
shape with a single complex column (``re_00, im_00``).
"""

from __future__ import annotations

import csv
import dataclasses
import json
import pathlib

import numpy as np

__all__ = [
    "SchemaError",
    "FrequencyGrid",
    "FrdMeasurement",
    "FrdSet",
    "NoiseSpectrum",
    "make_linear_grid",
    "evaluate_rational",
    "save_frd_set",
    "load_frd_set",
    "save_spectrum",
    "load_spectrum",
]


class SchemaError(ValueError):
    """Malformed frequency-response file or manifest."""


@dataclasses.dataclass(frozen=True)
class FrequencyGrid:
    """Strictly increasing frequency samples in Hz with their sample rate."""

    freqs_hz: np.ndarray
    sample_rate_hz: float

    def __post_init__(self):
        freqs = np.asarray(self.freqs_hz, dtype=float)
        object.__setattr__(self, "freqs_hz", freqs)
        if freqs.ndim != 1 or freqs.size == 0:
            raise SchemaError("grid must be a nonempty 1-D frequency array")
        if np.any(np.diff(freqs) <= 0):
            raise SchemaError("grid frequencies must be strictly increasing")
        if freqs[0] <= 0:
            raise SchemaError("grid frequencies must be positive")
        if self.sample_rate_hz <= 0:
            raise SchemaError("sample rate must be positive")
        if freqs[-1] > self.sample_rate_hz / 2.0:
            raise SchemaError(
                f"grid extends to {freqs[-1]:g} Hz, beyond Nyquist "
                f"{self.sample_rate_hz / 2.0:g} Hz"
            )

    @property
    def omega(self) -> np.ndarray:
        """Normalized angular frequencies 2*pi*f/fs in (0, pi]."""
        return 2.0 * np.pi * self.freqs_hz / self.sample_rate_hz

    @property
    def z(self) -> np.ndarray:
        """Unit-circle evaluation points exp(1j*omega)."""
        return np.exp(1j * self.omega)

    def __len__(self) -> int:
        return self.freqs_hz.size

    def trapezoid_weights(self) -> np.ndarray:
        """Trapezoidal quadrature weights over omega (rad), endpoints halved."""
        om = self.omega
        w = np.zeros_like(om)
        if om.size == 1:
            return w
        w[1:-1] = (om[2:] - om[:-2]) / 2.0
        w[0] = (om[1] - om[0]) / 2.0
        w[-1] = (om[-1] - om[-2]) / 2.0
        return w

    def refined(self, factor: int) -> "FrequencyGrid":
        """Linear grid over the same span with ``factor`` times the points."""
        if factor < 1:
            raise ValueError("refinement factor must be >= 1")
        n = len(self) * factor
        freqs = np.linspace(self.freqs_hz[0], self.freqs_hz[-1], n)
        return FrequencyGrid(freqs, self.sample_rate_hz)

    def matches(self, other: "FrequencyGrid", rtol: float = 1e-9) -> bool:
        return (
            len(self) == len(other)
            and self.sample_rate_hz == other.sample_rate_hz
            and np.allclose(self.freqs_hz, other.freqs_hz, rtol=rtol, atol=0.0)
        )


def make_linear_grid(f_lo: float, f_hi: float, count: int, sample_rate_hz: float) -> FrequencyGrid:
    """Linearly spaced grid from f_lo to f_hi inclusive."""
    if count < 2:
        raise ValueError("grid needs at least two points")
    return FrequencyGrid(np.linspace(f_lo, f_hi, count), sample_rate_hz)


@dataclasses.dataclass(frozen=True)
class FrdMeasurement:
    """One measured response on a grid; ``response`` has shape (F, r, c)."""

    grid: FrequencyGrid
    response: np.ndarray

    def __post_init__(self):
        resp = np.asarray(self.response, dtype=complex)
        if resp.ndim == 1:
            resp = resp.reshape(-1, 1, 1)
        object.__setattr__(self, "response", resp)
        if resp.ndim != 3 or resp.shape[0] != len(self.grid):
            raise SchemaError(
                f"response shape {resp.shape} does not match grid of {len(self.grid)} points"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.response.shape[1], self.response.shape[2]


@dataclasses.dataclass(frozen=True)
class FrdSet:
    """A family of measurements of one system, sharing a grid."""

    label: str
    measurements: tuple[FrdMeasurement, ...]

    def __post_init__(self):
        meas = tuple(self.measurements)
        object.__setattr__(self, "measurements", meas)
        if not meas:
            raise SchemaError("a measurement set needs at least one measurement")
        grid = meas[0].grid
        shape = meas[0].shape
        for k, m in enumerate(meas[1:], start=1):
            if not grid.matches(m.grid):
                raise SchemaError(f"measurement {k} grid differs from measurement 0")
            if m.shape != shape:
                raise SchemaError(f"measurement {k} shape {m.shape} differs from {shape}")

    @property
    def grid(self) -> FrequencyGrid:
        return self.measurements[0].grid

    @property
    def shape(self) -> tuple[int, int]:
        return self.measurements[0].shape

    def __len__(self) -> int:
        return len(self.measurements)

    def stacked(self) -> np.ndarray:
        """All responses as one (l, F, r, c) array."""
        return np.stack([m.response for m in self.measurements])


@dataclasses.dataclass(frozen=True)
class NoiseSpectrum:
    """Scalar coloring-filter samples R(e^{j omega}) on a grid."""

    grid: FrequencyGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=complex)
        object.__setattr__(self, "values", vals)
        if vals.shape != (len(self.grid),):
            raise SchemaError("spectrum values must be one complex sample per grid point")


def evaluate_rational(
    num: np.ndarray,
    den: np.ndarray,
    omega: np.ndarray,
    denominator_floor: float = 1e-14,
) -> np.ndarray:
    """Evaluate num(z)/den(z) at z = exp(1j*omega), coefficients descending.

    Raises ZeroDivisionError naming the first frequency where the denominator
    magnitude falls under ``denominator_floor`` relative to its peak.
    """
    num = np.atleast_1d(np.asarray(num, dtype=complex))
    den = np.atleast_1d(np.asarray(den, dtype=complex))
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    z = np.exp(1j * omega)
    den_vals = np.polyval(den, z)
    scale = max(float(np.max(np.abs(den_vals))), 1.0)
    bad = np.abs(den_vals) < denominator_floor * scale
    if np.any(bad):
        idx = int(np.argmax(bad))
        raise ZeroDivisionError(
            f"denominator vanishes at omega = {omega[idx]:.6g} rad (sample {idx})"
        )
    return np.polyval(num, z) / den_vals


# -- file I/O ---------------------------------------------------------------


def _entry_columns(rows: int, cols: int) -> list[str]:
    names = []
    for r in range(rows):
        for c in range(cols):
            names.extend([f"re_{r}{c}", f"im_{r}{c}"])
    return names


def _write_response_csv(path: pathlib.Path, grid: FrequencyGrid, resp: np.ndarray) -> None:
    rows, cols = resp.shape[1], resp.shape[2]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["freq_hz"] + _entry_columns(rows, cols))
        for k, f in enumerate(grid.freqs_hz):
            row = [repr(float(f))]
            for r in range(rows):
                for c in range(cols):
                    row.append(repr(float(resp[k, r, c].real)))
                    row.append(repr(float(resp[k, r, c].imag)))
            writer.writerow(row)


def _read_response_csv(path: pathlib.Path) -> tuple[np.ndarray, np.ndarray, tuple[int, int]]:
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if header[0] != "freq_hz" or len(header) < 3 or len(header) % 2 == 0:
            raise SchemaError(f"{path}: header must be freq_hz followed by re/im pairs")
        pairs = (len(header) - 1) // 2
        suffixes = []
        for p in range(pairs):
            re_name, im_name = header[1 + 2 * p], header[2 + 2 * p]
            if not (re_name.startswith("re_") and im_name.startswith("im_")):
                raise SchemaError(f"{path}: columns {re_name}, {im_name} are not a re/im pair")
            if re_name[3:] != im_name[3:]:
                raise SchemaError(f"{path}: mismatched entry suffix {re_name} vs {im_name}")
            suffixes.append(re_name[3:])
        rows = max(int(s[0]) for s in suffixes) + 1
        cols = max(int(s[1]) for s in suffixes) + 1
        if len(suffixes) != rows * cols:
            raise SchemaError(f"{path}: expected {rows * cols} entries, found {len(suffixes)}")
        data = []
        for line in reader:
            if not line:
                continue
            data.append([float(v) for v in line])
    arr = np.asarray(data, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 1 + 2 * pairs:
        raise SchemaError(f"{path}: ragged or empty data rows")
    freqs = arr[:, 0]
    resp = arr[:, 1::2] + 1j * arr[:, 2::2]
    return freqs, resp.reshape(-1, rows, cols), (rows, cols)


def save_frd_set(frd: FrdSet, manifest_path: str | pathlib.Path) -> None:
    """Write one CSV per measurement plus a JSON manifest tying them together."""
    manifest_path = pathlib.Path(manifest_path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    stem = manifest_path.stem
    files = []
    for k, meas in enumerate(frd.measurements):
        name = f"{stem}_m{k}.csv"
        _write_response_csv(manifest_path.parent / name, frd.grid, meas.response)
        files.append(name)
    manifest = {
        "label": frd.label,
        "sample_rate_hz": frd.grid.sample_rate_hz,
        "response_shape": list(frd.shape),
        "measurements": files,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")


def load_frd_set(manifest_path: str | pathlib.Path) -> FrdSet:
    """Load a measurement set from its JSON manifest."""
    manifest_path = pathlib.Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"{manifest_path}: cannot parse manifest: {exc}") from exc
    for key in ("label", "sample_rate_hz", "response_shape", "measurements"):
        if key not in manifest:
            raise SchemaError(f"{manifest_path}: manifest missing key {key!r}")
    fs = float(manifest["sample_rate_hz"])
    shape = tuple(manifest["response_shape"])
    measurements = []
    for name in manifest["measurements"]:
        freqs, resp, got_shape = _read_response_csv(manifest_path.parent / name)
        if got_shape != shape:
            raise SchemaError(f"{name}: response shape {got_shape} != manifest {shape}")
        measurements.append(FrdMeasurement(FrequencyGrid(freqs, fs), resp))
    return FrdSet(label=str(manifest["label"]), measurements=tuple(measurements))


def save_spectrum(spec: NoiseSpectrum, path: str | pathlib.Path) -> None:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_response_csv(path, spec.grid, spec.values.reshape(-1, 1, 1))


def load_spectrum(path: str | pathlib.Path, sample_rate_hz: float) -> NoiseSpectrum:
    freqs, resp, shape = _read_response_csv(pathlib.Path(path))
    if shape != (1, 1):
        raise SchemaError(f"{path}: spectrum must have a single complex column")
    return NoiseSpectrum(FrequencyGrid(freqs, sample_rate_hz), resp[:, 0, 0])
