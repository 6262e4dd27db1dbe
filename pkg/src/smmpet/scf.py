"""Voxelwise weighted nonlinear least squares (standard curve fitting).

Each voxel curve is fitted independently by a projected Levenberg-Marquardt
iteration with a forward-difference Jacobian.
"""
from __future__ import annotations

import enum
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidArgumentError
from .kinetics import FrameModel, FrameScheme, InputFunction, KineticParams, SpilloverFractions, SpilloverInputs
from .phantom import DynamicImage

FD_REL_STEP = 1e-6
# frame durations enter the weights in seconds
SECONDS_PER_MIN = 60.0


class FitStatus(str, enum.Enum):
    CONVERGED = "CONVERGED"
    MAX_ITER = "MAX_ITER"
    AT_BOUND = "AT_BOUND"
    FAILED = "FAILED"


@dataclass
class FitConfig:
    weights: np.ndarray | None = None  # None -> unit weights
    lower: tuple = (0.0, 0.0)
    upper: tuple = (math.inf, 5.0)
    init: KineticParams = field(default_factory=lambda: KineticParams(0.5, 0.1))
    max_iter: int = 200
    grad_tol: float = 1e-8
    step_tol: float = 1e-10
    damping_init: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 0.1
    spillover: bool = False
    init_fractions: SpilloverFractions = field(default_factory=SpilloverFractions)

    def __post_init__(self):
        n_par = 4 if self.spillover else 2
        if len(self.lower) == 2 and n_par == 4:
            self.lower = tuple(self.lower) + (0.0, 0.0)
        if len(self.upper) == 2 and n_par == 4:
            self.upper = tuple(self.upper) + (1.0, 1.0)
        lo, hi = np.asarray(self.lower, float), np.asarray(self.upper, float)
        if lo.size != n_par or hi.size != n_par or np.any(lo > hi):
            raise InvalidArgumentError("bounds need lower <= upper for every parameter")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if not np.all(np.isfinite(w)) or np.any(w < 0):
                raise InvalidArgumentError("weights must be finite and non-negative")
            self.weights = w
        if min(self.grad_tol, self.step_tol) <= 0 or self.max_iter < 1:
            raise InvalidArgumentError("tolerances must be positive and max_iter >= 1")
        if not (self.damping_up > 1 and 0 < self.damping_down < 1 and self.damping_init > 0):
            raise InvalidArgumentError("damping factors need init > 0, up > 1, 0 < down < 1")

    @classmethod
    def for_spillover(cls, **kw):
        """Preset with K1 limited to [0, 1] as used for in-vivo data."""
        kw.setdefault("lower", (0.0, 0.0, 0.0, 0.0))
        kw.setdefault("upper", (1.0, 5.0, 1.0, 1.0))
        return cls(spillover=True, **kw)


@dataclass
class VoxelFit:
    params: KineticParams
    wrss: float
    iterations: int
    status: FitStatus
    fractions: SpilloverFractions | None = None
    trace: list = field(default_factory=list, repr=False)  # objective after each accepted step


def weights_from_counts(frames: FrameScheme, frame_counts) -> np.ndarray:
    """Squared frame duration (seconds) over total frame counts; zero-count frames get zero weight."""
    counts = np.asarray(frame_counts, dtype=float)
    if counts.shape != (frames.n_frames,):
        raise InvalidArgumentError(f"expected {frames.n_frames} frame counts, got {counts.shape}")
    if np.any(counts < 0) or not np.all(np.isfinite(counts)):
        raise InvalidArgumentError("frame counts must be finite and non-negative")
    dt = frames.durations * SECONDS_PER_MIN
    out = np.zeros_like(counts)
    pos = counts > 0
    out[pos] = dt[pos] ** 2 / counts[pos]
    return out


def image_frame_weights(img: DynamicImage, frames: FrameScheme) -> np.ndarray:
    """Weights using summed image activity times duration as the frame count proxy."""
    counts = img.data.sum(axis=0) * frames.durations * SECONDS_PER_MIN
    return weights_from_counts(frames, counts)


def _project(p, lo, hi, spillover):
    p = np.clip(p, lo, hi)
    if spillover and p[2] + p[3] > 1.0:
        p[2:] /= p[2] + p[3]
    return p


def lm_fit_voxel(y, model: FrameModel, cfg: FitConfig, record_trace: bool = False) -> VoxelFit:
    """Projected Levenberg-Marquardt fit of one voxel curve.

    Stops when the largest cosine between the weighted residual and a free
    Jacobian column drops below ``grad_tol`` (the MINPACK gradient test), when
    the relative step falls below ``step_tol``, or after ``max_iter`` iterations.
    """
    y = np.asarray(y, dtype=float)
    T = model.n_frames
    if y.shape != (T,) or not np.all(np.isfinite(y)):
        raise InvalidArgumentError("voxel curve must be a finite vector matching the frame count")
    w = np.ones(T) if cfg.weights is None else cfg.weights
    if w.shape != (T,):
        raise InvalidArgumentError("weights length does not match frame count")
    if not np.any(w > 0):
        raise InvalidArgumentError("all weights are zero")
    if cfg.spillover and model.spillover is None:
        raise InvalidArgumentError("spill-over fit needs a model built with SpilloverInputs")
    sw = np.sqrt(w)
    lo = np.asarray(cfg.lower, float)
    hi = np.asarray(cfg.upper, float)
    spill = cfg.spillover

    def predict(p):
        if spill:
            return model(p[0], p[1], p[2], p[3])
        return model.tissue(p[0], p[1])

    p = np.array([cfg.init.K1, cfg.init.k2] + ([cfg.init_fractions.f_lv, cfg.init_fractions.f_rv] if spill else []))
    p = _project(p, lo, hi, spill)
    r = sw * (y - predict(p))
    f = float(r @ r)
    if not math.isfinite(f):
        raise InvalidArgumentError("objective is not finite at the initial parameters")
    lam = cfg.damping_init
    trace = [f] if record_trace else []
    status = FitStatus.MAX_ITER
    n_par = p.size
    it = 0
    for it in range(cfg.max_iter + 1):
        # forward-difference Jacobian of the weighted residual (backward at an upper bound)
        J = np.empty((T, n_par))
        m0 = y - r / np.where(sw > 0, sw, 1.0)
        for j in range(n_par):
            h = FD_REL_STEP * max(abs(p[j]), 1e-2)
            q = p.copy()
            if q[j] + h > hi[j]:
                h = -h
            q[j] += h
            J[:, j] = sw * (predict(q) - m0) / h
        g = J.T @ r  # descent direction for the parameters (half the negative gradient)
        free = np.ones(n_par, dtype=bool)
        free &= ~((p <= lo) & (g < 0))
        free &= ~((p >= hi) & (g > 0))
        rn = math.sqrt(f)
        if rn == 0.0:
            status = FitStatus.CONVERGED
            break
        cnorm = np.linalg.norm(J, axis=0)
        cos = np.abs(g) / np.where(cnorm > 0, cnorm * rn, np.inf)
        if not np.any(free) or np.max(cos[free], initial=0.0) <= cfg.grad_tol:
            status = FitStatus.AT_BOUND if not np.all(free) else FitStatus.CONVERGED
            break
        if it == cfg.max_iter:
            break
        Jf = J[:, free]
        A = Jf.T @ Jf
        gf = g[free]
        diag = np.maximum(np.diag(A), 1e-12 * max(np.max(np.diag(A)), 1e-300))
        stepped = False
        small_step = False
        while lam < 1e16:
            try:
                delta = np.linalg.solve(A + lam * np.diag(diag), gf)
            except np.linalg.LinAlgError:
                lam *= cfg.damping_up
                continue
            p_new = p.copy()
            p_new[free] += delta
            p_new = _project(p_new, lo, hi, spill)
            r_new = sw * (y - predict(p_new))
            f_new = float(r_new @ r_new)
            step = np.linalg.norm(p_new - p)
            if math.isfinite(f_new) and f_new <= f:
                small_step = step <= cfg.step_tol * (np.linalg.norm(p) + cfg.step_tol)
                p, r, f = p_new, r_new, f_new
                lam = max(lam * cfg.damping_down, 1e-15)
                stepped = True
                if record_trace:
                    trace.append(f)
                break
            if step <= cfg.step_tol * (np.linalg.norm(p) + cfg.step_tol):
                small_step = True
                break
            lam *= cfg.damping_up
        if small_step or not stepped:
            at_bound = np.any((p <= lo) | (p >= hi))
            status = FitStatus.AT_BOUND if at_bound else FitStatus.CONVERGED
            break
    fr = SpilloverFractions(p[2], min(p[3], 1.0 - p[2])) if spill else None
    return VoxelFit(KineticParams(p[0], p[1]), f, it, status, fr, trace)


@dataclass
class FitMap:
    """Per-voxel fit results in raster order."""

    nx: int
    ny: int
    K1: np.ndarray
    k2: np.ndarray
    wrss: np.ndarray
    iterations: np.ndarray
    status: list
    f_lv: np.ndarray | None = None
    f_rv: np.ndarray | None = None

    def __len__(self):
        return self.K1.size


def _fit_chunk(args):
    data, frames, inp, spillover, cfg = args
    model = FrameModel(frames, inp, spillover=spillover)
    out = []
    for y in data:
        try:
            out.append(lm_fit_voxel(y, model, cfg))
        except (InvalidArgumentError, FloatingPointError, np.linalg.LinAlgError):
            out.append(None)
    return out


def fit_image(img: DynamicImage, inp: InputFunction, frames: FrameScheme, cfg: FitConfig,
              workers: int = 1, spillover: SpilloverInputs | None = None, chunk: int = 64) -> FitMap:
    """Fit every voxel independently; failures are flagged per voxel rather than raised."""
    if img.n_frames != frames.n_frames:
        raise InvalidArgumentError("image frame count does not match the frame scheme")
    jobs = [(img.data[s:s + chunk], frames, inp, spillover, cfg) for s in range(0, img.n_voxels, chunk)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_fit_chunk, jobs))
    else:
        parts = [_fit_chunk(j) for j in jobs]
    fits = [f for part in parts for f in part]
    n = img.n_voxels
    K1 = np.full(n, np.nan)
    k2 = np.full(n, np.nan)
    wrss = np.full(n, np.nan)
    iters = np.zeros(n, dtype=int)
    status = []
    f_lv = np.full(n, np.nan) if cfg.spillover else None
    f_rv = np.full(n, np.nan) if cfg.spillover else None
    for i, fit in enumerate(fits):
        if fit is None:
            status.append(FitStatus.FAILED)
            continue
        K1[i], k2[i], wrss[i], iters[i] = fit.params.K1, fit.params.k2, fit.wrss, fit.iterations
        status.append(fit.status)
        if cfg.spillover:
            f_lv[i], f_rv[i] = fit.fractions.f_lv, fit.fractions.f_rv
    return FitMap(img.nx, img.ny, K1, k2, wrss, iters, status, f_lv, f_rv)


def default_config(img: DynamicImage | None = None, frames: FrameScheme | None = None, **kw) -> FitConfig:
    """Duration-squared over frame-count weights when an image is supplied."""
    if img is not None and frames is not None and "weights" not in kw:
        kw["weights"] = image_frame_weights(img, frames)
    return FitConfig(**kw)


def with_weights(cfg: FitConfig, weights) -> FitConfig:
    return replace(cfg, weights=np.asarray(weights, dtype=float))
