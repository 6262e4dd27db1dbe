"""One-tissue compartment model evaluated exactly for piecewise-linear inputs.

The tissue curve is ``C_t(t) = K1 * int_0^t C_p(s) exp(-k2 (t - s)) ds``.  When
``C_p`` is piecewise linear the convolution and its integral over any interval
have closed forms on every linear segment, so frame averages are computed
without a quadrature step size.

Times are in minutes throughout.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .errors import ExtrapolationWarning, InvalidArgumentError

# Relative slack allowed past the last input sample before warning.
EXTRAPOLATION_TOL = 1e-9


@dataclass(frozen=True)
class FrameScheme:
    """Ordered, non-overlapping acquisition frames."""

    starts: np.ndarray
    ends: np.ndarray

    def __post_init__(self):
        starts = np.asarray(self.starts, dtype=float).ravel()
        ends = np.asarray(self.ends, dtype=float).ravel()
        if starts.size == 0:
            raise InvalidArgumentError("frame scheme must contain at least one frame")
        if starts.shape != ends.shape:
            raise InvalidArgumentError("frame starts and ends differ in length")
        if not (np.all(np.isfinite(starts)) and np.all(np.isfinite(ends))):
            raise InvalidArgumentError("frame times must be finite")
        if np.any(ends <= starts):
            raise InvalidArgumentError("every frame needs t_end > t_start")
        if np.any(starts[1:] < ends[:-1]):
            raise InvalidArgumentError("frames must be sorted and non-overlapping")
        starts.setflags(write=False)
        ends.setflags(write=False)
        object.__setattr__(self, "starts", starts)
        object.__setattr__(self, "ends", ends)

    @classmethod
    def from_durations(cls, blocks, start=0.0, unit="s"):
        """Build contiguous frames from ``[(count, duration), ...]`` blocks."""
        scale = {"s": 1.0 / 60.0, "min": 1.0}[unit]
        durations = [d * scale for n, d in blocks for _ in range(n)]
        edges = start + np.concatenate([[0.0], np.cumsum(durations)])
        return cls(edges[:-1], edges[1:])

    @property
    def n_frames(self) -> int:
        return int(self.starts.size)

    @property
    def durations(self) -> np.ndarray:
        return self.ends - self.starts

    @property
    def mids(self) -> np.ndarray:
        return 0.5 * (self.starts + self.ends)

    def __len__(self):
        return self.n_frames

    def __eq__(self, other):
        if not isinstance(other, FrameScheme):
            return NotImplemented
        return np.array_equal(self.starts, other.starts) and np.array_equal(self.ends, other.ends)

    def __hash__(self):
        return hash((self.starts.tobytes(), self.ends.tobytes()))

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t_start_min", "t_end_min"])
            for s, e in zip(self.starts, self.ends):
                w.writerow([repr(float(s)), repr(float(e))])

    @classmethod
    def from_csv(cls, path):
        cols = _read_two_column_csv(path, ("t_start_min", "t_end_min"))
        return cls(cols[0], cols[1])


def default_frames() -> FrameScheme:
    """6 x 5 s, 3 x 30 s, 5 x 60 s and 3 x 120 s: a 13 minute, 17 frame scan."""
    return FrameScheme.from_durations([(6, 5), (3, 30), (5, 60), (3, 120)])


@dataclass(frozen=True)
class InputFunction:
    """Sampled blood curve, linear between samples.

    Zero before the first sample and held at the last value after the final one.
    """

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).ravel()
        v = np.asarray(self.values, dtype=float).ravel()
        if t.size < 2 or t.shape != v.shape:
            raise InvalidArgumentError("input function needs >= 2 paired samples")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
            raise InvalidArgumentError("input function samples must be finite")
        if np.any(np.diff(t) <= 0):
            raise InvalidArgumentError("input sample times must be strictly increasing")
        if np.any(v < 0):
            raise InvalidArgumentError("input values must be non-negative")
        t.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = np.interp(t, self.times, self.values, left=0.0, right=self.values[-1])
        return out

    def scaled(self, factor: float) -> "InputFunction":
        return InputFunction(self.times, self.values * factor)

    def __eq__(self, other):
        if not isinstance(other, InputFunction):
            return NotImplemented
        return np.array_equal(self.times, other.times) and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.times.tobytes(), self.values.tobytes()))

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time_min", "value"])
            for t, v in zip(self.times, self.values):
                w.writerow([repr(float(t)), repr(float(v))])

    @classmethod
    def from_csv(cls, path):
        cols = _read_two_column_csv(path, ("time_min", "value"))
        return cls(cols[0], cols[1])


def default_input(scale: float = 1.0, t_end: float = 13.0) -> InputFunction:
    """Feng-type plasma curve sampled every 2.5 s for 2 min, then every 15 s.

    The analytic shape ``(A1 t - A2 - A3) e^{l1 t} + A2 e^{l2 t} + A3 e^{l3 t}``
    peaks at about 0.25 min and then washes out slowly, similar in character to a
    perfusion tracer bolus.
    """
    a1, a2, a3 = 851.1225, 20.8113, 21.8798
    l1, l2, l3 = -4.1339, -0.0104, -0.1191
    early = np.arange(0.0, 2.0, 2.5 / 60.0)
    late = np.arange(2.0, t_end + 1e-9, 0.25)
    t = np.concatenate([early, late])
    v = (a1 * t - a2 - a3) * np.exp(l1 * t) + a2 * np.exp(l2 * t) + a3 * np.exp(l3 * t)
    v = np.maximum(v, 0.0)
    # normalize so the peak equals ``scale``
    return InputFunction(t, v * (scale / v.max()))


@dataclass(frozen=True)
class KineticParams:
    K1: float
    k2: float

    def __post_init__(self):
        for name in ("K1", "k2"):
            val = float(getattr(self, name))
            if not math.isfinite(val):
                raise InvalidArgumentError(f"{name} must be finite, got {val}")
            if val < 0:
                raise InvalidArgumentError(f"{name} must be non-negative, got {val}")
            object.__setattr__(self, name, val)


@dataclass(frozen=True)
class SpilloverFractions:
    f_lv: float = 0.0
    f_rv: float = 0.0

    def __post_init__(self):
        for name in ("f_lv", "f_rv"):
            val = float(getattr(self, name))
            if not (0.0 <= val <= 1.0):
                raise InvalidArgumentError(f"{name} must lie in [0, 1], got {val}")
            object.__setattr__(self, name, val)
        if self.f_lv + self.f_rv > 1.0 + 1e-15:
            raise InvalidArgumentError("f_lv + f_rv must not exceed 1")


@dataclass(frozen=True)
class SpilloverInputs:
    """Ventricular blood curves; the plasma input is the LV curve times ``plasma_fraction``."""

    c_lv: InputFunction
    c_rv: InputFunction
    plasma_fraction: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.plasma_fraction <= 1.0):
            raise InvalidArgumentError("plasma_fraction must lie in (0, 1]")

    @property
    def plasma(self) -> InputFunction:
        return self.c_lv.scaled(self.plasma_fraction)


# --------------------------------------------------------------------------
# closed-form kernels


@numba.njit(cache=True)
def _exp_phis(x):
    """E1..E3 with E_n(x) = sum_j (-x)^j / (j + n)!, stable for all x >= 0."""
    if x < 0.5:
        e1 = 0.0
        e2 = 0.0
        e3 = 0.0
        term = 1.0  # (-x)^j
        f1 = 1.0  # (j+1)!
        f2 = 2.0
        f3 = 6.0
        for j in range(20):
            e1 += term / f1
            e2 += term / f2
            e3 += term / f3
            term *= -x
            f1 *= j + 2
            f2 *= j + 3
            f3 *= j + 4
        return e1, e2, e3
    e1 = -math.expm1(-x) / x
    e2 = (1.0 - e1) / x
    e3 = (0.5 - e2) / x
    return e1, e2, e3


@numba.njit(cache=True)
def _convolve_pieces(h, c0, slope, k2):
    """Return (I, CJ) at every breakpoint.

    ``I`` is ``int_0^t C_p(s) exp(-k2 (t - s)) ds`` and ``CJ`` its running integral.
    """
    n = h.size
    conv = np.zeros(n + 1)
    cum = np.zeros(n + 1)
    cur = 0.0
    acc = 0.0
    for j in range(n):
        hj = h[j]
        x = k2 * hj
        e1, e2, e3 = _exp_phis(x)
        phi1 = hj * e1
        phi2 = hj * hj * e2
        psi2 = hj * hj * hj * e3
        acc += cur * phi1 + c0[j] * phi2 + slope[j] * psi2
        cur = cur * math.exp(-x) + c0[j] * phi1 + slope[j] * phi2
        conv[j + 1] = cur
        cum[j + 1] = acc
    return conv, cum


@numba.njit(cache=True)
def _frame_means(h, c0, slope, k2, i_start, i_end, durations):
    _, cum = _convolve_pieces(h, c0, slope, k2)
    out = np.empty(i_start.size)
    for f in range(i_start.size):
        out[f] = (cum[i_end[f]] - cum[i_start[f]]) / durations[f]
    return out


def _pieces(inp: InputFunction, points):
    """Split [0, max(points)] at input knots and the requested points."""
    pts = np.asarray(points, dtype=float)
    t_max = float(pts.max())
    knots = inp.times[(inp.times > 0) & (inp.times < t_max)]
    bp = np.unique(np.concatenate([[0.0], knots, pts]))
    a, b = bp[:-1], bp[1:]
    ca = inp(a)
    # left limit at b: a segment ending on the first sample sees the zero side of the jump
    cb = np.where(b <= inp.times[0], 0.0, inp(b))
    h = b - a
    slope = (cb - ca) / h
    extrapolated = t_max > inp.times[-1] * (1 + EXTRAPOLATION_TOL) + EXTRAPOLATION_TOL
    return bp, h, ca, slope, extrapolated


def _check_params(K1, k2):
    if not (math.isfinite(K1) and math.isfinite(k2)):
        raise InvalidArgumentError(f"kinetic parameters must be finite (K1={K1}, k2={k2})")


class FrameModel:
    """Precomputed segment layout for repeated frame-average evaluations.

    The layout depends only on the input curve and the frame scheme, so MCMC and
    least-squares loops reuse one instance and pay only for the recursion.
    """

    def __init__(self, frames: FrameScheme, inp: InputFunction, spillover: SpilloverInputs | None = None):
        if frames.starts[0] < 0:
            raise InvalidArgumentError("frames must start at or after t = 0")
        self.frames = frames
        self.spillover = spillover
        if spillover is not None:
            inp = spillover.plasma
        self.input = inp
        bp, self._h, self._c0, self._slope, extrap = _pieces(inp, np.concatenate([frames.starts, frames.ends]))
        self._i_start = np.searchsorted(bp, frames.starts).astype(np.int64)
        self._i_end = np.searchsorted(bp, frames.ends).astype(np.int64)
        self._dur = frames.durations.copy()
        self.extrapolated = bool(extrap)
        if self.extrapolated:
            warnings.warn("frames extend past the last input sample; holding the last value",
                          ExtrapolationWarning, stacklevel=2)
        if spillover is not None:
            self.blood_lv = frame_average_input(spillover.c_lv, frames)
            self.blood_rv = frame_average_input(spillover.c_rv, frames)

    @property
    def n_frames(self):
        return self.frames.n_frames

    def tissue(self, K1: float, k2: float) -> np.ndarray:
        """Frame-averaged tissue curve for the one-tissue model."""
        _check_params(K1, k2)
        if K1 == 0.0:
            return np.zeros(self.n_frames)
        base = _frame_means(self._h, self._c0, self._slope, float(k2), self._i_start, self._i_end, self._dur)
        return np.maximum(K1 * base, 0.0)

    def __call__(self, K1: float, k2: float, f_lv: float = 0.0, f_rv: float = 0.0) -> np.ndarray:
        tissue = self.tissue(K1, k2)
        if self.spillover is None:
            return tissue
        return f_lv * self.blood_lv + f_rv * self.blood_rv + (1.0 - f_lv - f_rv) * tissue


def frame_average_input(inp: InputFunction, frames: FrameScheme) -> np.ndarray:
    """Exact mean of a piecewise-linear curve over each frame."""
    bp, h, c0, slope, extrap = _pieces(inp, np.concatenate([frames.starts, frames.ends]))
    if extrap:
        warnings.warn("frames extend past the last input sample; holding the last value",
                      ExtrapolationWarning, stacklevel=2)
    cum = np.concatenate([[0.0], np.cumsum(h * (c0 + 0.5 * slope * h))])
    i0 = np.searchsorted(bp, frames.starts)
    i1 = np.searchsorted(bp, frames.ends)
    return (cum[i1] - cum[i0]) / frames.durations


def tissue_tac(params: KineticParams, inp: InputFunction, t) -> np.ndarray | float:
    """Instantaneous tissue concentration at time(s) ``t`` (minutes, >= 0)."""
    _check_params(params.K1, params.k2)
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(ts < 0):
        raise InvalidArgumentError("t must be non-negative")
    if params.K1 == 0.0 or ts.max() == 0.0:
        out = np.zeros(ts.shape)
    else:
        bp, h, c0, slope, extrap = _pieces(inp, ts[ts > 0])
        if extrap:
            warnings.warn("evaluation past the last input sample; holding the last value",
                          ExtrapolationWarning, stacklevel=2)
        conv, _ = _convolve_pieces(h, c0, slope, params.k2)
        out = np.zeros(ts.shape)
        pos = ts > 0
        out[pos] = np.maximum(params.K1 * conv[np.searchsorted(bp, ts[pos])], 0.0)
    if np.ndim(t) == 0:
        return float(out[0])
    return out


def frame_averaged_tac(params: KineticParams, inp: InputFunction, frames: FrameScheme) -> np.ndarray:
    """Mean tissue concentration within each frame."""
    return FrameModel(frames, inp).tissue(params.K1, params.k2)


def spillover_frame_tac(params: KineticParams, fracs: SpilloverFractions, sp: SpilloverInputs,
                        frames: FrameScheme) -> np.ndarray:
    """Blood-contaminated frame means; blood terms are frame-averaged like the tissue term."""
    if fracs.f_lv + fracs.f_rv > 1.0 + 1e-15:
        raise InvalidArgumentError("f_lv + f_rv must not exceed 1")
    model = FrameModel(frames, sp.c_lv, spillover=sp)
    return model(params.K1, params.k2, fracs.f_lv, fracs.f_rv)


def _read_two_column_csv(path, header):
    with open(Path(path), newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InvalidArgumentError(f"{path}: empty file")
    got = tuple(c.strip() for c in rows[0])
    if got != header:
        raise InvalidArgumentError(f"{path}: expected header {','.join(header)}, got {','.join(got)}")
    try:
        data = np.array([[float(c) for c in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise InvalidArgumentError(f"{path}: non-numeric value ({exc})") from None
    if data.ndim != 2 or data.shape[1] != 2:
        raise InvalidArgumentError(f"{path}: expected two columns")
    return data[:, 0], data[:, 1]
