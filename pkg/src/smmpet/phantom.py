"""Region-wise dynamic phantoms, image-domain noise and the DPET file format.

Voxels are stored in raster order, ``i = y * nx + x``.  Image data are frame mean
activity concentrations with shape ``(n_voxels, T)``.
"""
from __future__ import annotations

import csv
import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError
from .kinetics import FrameModel, FrameScheme, InputFunction, KineticParams, default_frames, default_input

DPET_MAGIC = b"DPET"
DPET_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")

# truth K1 written for background voxels
NOISE_K1 = 0.0

# reference rates for two myocardial segments
MIDINFEROSEPTAL = KineticParams(0.9016, 0.0730)
APEX = KineticParams(0.3290, 0.0554)


@dataclass
class Region:
    region_id: int
    mask: np.ndarray  # bool, shape (ny, nx)
    params: KineticParams | None  # None marks the noise background
    name: str = ""

    @property
    def is_noise(self) -> bool:
        return self.params is None


@dataclass
class PhantomSpec:
    nx: int
    ny: int
    regions: list[Region]
    frames: FrameScheme
    input: InputFunction

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise InvalidArgumentError("phantom dims must be positive")
        cover = np.zeros((self.ny, self.nx), dtype=int)
        ids = set()
        for r in self.regions:
            if r.mask.shape != (self.ny, self.nx):
                raise InvalidArgumentError(f"region {r.region_id}: mask shape {r.mask.shape} != {(self.ny, self.nx)}")
            if r.region_id in ids:
                raise InvalidArgumentError(f"duplicate region_id {r.region_id}")
            ids.add(r.region_id)
            cover += r.mask.astype(int)
        if np.any(cover != 1):
            raise InvalidArgumentError("regions must partition the lattice (every voxel in exactly one region)")
        if sum(r.is_noise for r in self.regions) > 1:
            raise InvalidArgumentError("at most one region may be the noise background")

    def to_json(self, path=None):
        doc = {
            "dims": [self.nx, self.ny],
            "regions": [
                {
                    "region_id": r.region_id,
                    "name": r.name,
                    "voxels": [[int(x), int(y)] for y, x in zip(*np.nonzero(r.mask))],
                    **({"noise": True} if r.is_noise else {"K1": r.params.K1, "k2": r.params.k2}),
                }
                for r in self.regions
            ],
            "frames": [[float(s), float(e)] for s, e in zip(self.frames.starts, self.frames.ends)],
            "input": {"times": self.input.times.tolist(), "values": self.input.values.tolist()},
        }
        text = json.dumps(doc, indent=1)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text

    @classmethod
    def from_json(cls, source, frames: FrameScheme | None = None, inp: InputFunction | None = None):
        """Parse a spec document; ``rects`` ``[x0, y0, x1, y1)`` may stand in for ``voxels``.

        ``frames``/``inp`` override or supply the document's own entries.
        """
        if isinstance(source, (str, Path)) and Path(source).exists():
            doc = json.loads(Path(source).read_text(encoding="utf-8"))
        elif isinstance(source, dict):
            doc = source
        else:
            doc = json.loads(source)
        try:
            nx, ny = (int(v) for v in doc["dims"])
            regions = []
            for rd in doc["regions"]:
                mask = np.zeros((ny, nx), dtype=bool)
                for x, y in rd.get("voxels", []):
                    if not (0 <= x < nx and 0 <= y < ny):
                        raise InvalidArgumentError(f"region {rd['region_id']}: voxel ({x},{y}) outside lattice")
                    mask[y, x] = True
                for x0, y0, x1, y1 in rd.get("rects", []):
                    mask[y0:y1, x0:x1] = True
                params = None if rd.get("noise", False) else KineticParams(rd["K1"], rd["k2"])
                regions.append(Region(int(rd["region_id"]), mask, params, rd.get("name", "")))
            if frames is None:
                fr = np.asarray(doc["frames"], dtype=float)
                frames = FrameScheme(fr[:, 0], fr[:, 1])
            if inp is None:
                inp = InputFunction(doc["input"]["times"], doc["input"]["values"])
        except (KeyError, TypeError, IndexError) as exc:
            raise InvalidArgumentError(f"malformed phantom spec: missing or bad field {exc}") from None
        return cls(nx, ny, regions, frames, inp)


@dataclass
class DynamicImage:
    nx: int
    ny: int
    data: np.ndarray  # (n_voxels, T)
    truth_k1: np.ndarray | None = None
    truth_k2: np.ndarray | None = None
    truth_region: np.ndarray | None = None
    noise_region: int | None = None  # region_id of the zero-activity background, if any
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 2 or self.data.shape[0] != self.nx * self.ny:
            raise InvalidArgumentError(f"data shape {self.data.shape} does not match dims {self.nx}x{self.ny}")
        if not np.all(np.isfinite(self.data)):
            raise InvalidArgumentError("image data must be finite")
        for name in ("truth_k1", "truth_k2", "truth_region"):
            arr = getattr(self, name)
            if arr is not None and np.asarray(arr).shape != (self.n_voxels,):
                raise InvalidArgumentError(f"{name} does not match image dims")

    @property
    def n_voxels(self) -> int:
        return self.nx * self.ny

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]

    @property
    def has_truth(self) -> bool:
        return self.truth_k1 is not None

    def coords(self):
        """(x, y) arrays in raster order."""
        y, x = np.divmod(np.arange(self.n_voxels), self.nx)
        return x, y

    def with_data(self, data) -> "DynamicImage":
        return DynamicImage(self.nx, self.ny, data, self.truth_k1, self.truth_k2, self.truth_region,
                            self.noise_region, dict(self.meta))

    def noise_mask(self) -> np.ndarray:
        if self.truth_region is None or self.noise_region is None:
            return np.zeros(self.n_voxels, dtype=bool)
        return self.truth_region == self.noise_region

    # ---- persistence

    def to_dpet(self, path):
        write_dpet(path, self.data, self.nx, self.ny)

    @classmethod
    def from_dpet(cls, path, truth_csv=None):
        data, nx, ny = read_dpet(path)
        img = cls(nx, ny, data)
        if truth_csv is not None:
            img.load_truth(truth_csv)
        return img

    def write_truth_csv(self, path):
        if not self.has_truth:
            raise InvalidArgumentError("image carries no truth")
        x, y = self.coords()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "region_id", "K1", "k2"])
            for i in range(self.n_voxels):
                w.writerow([int(x[i]), int(y[i]), int(self.truth_region[i]),
                            repr(float(self.truth_k1[i])), repr(float(self.truth_k2[i]))])

    def load_truth(self, path):
        k1, k2, reg, noise_id = read_truth_csv(path, self.nx, self.ny)
        self.truth_k1, self.truth_k2, self.truth_region, self.noise_region = k1, k2, reg, noise_id


def read_truth_csv(path, nx, ny):
    """Return per-voxel (K1, k2, region_id, noise_region_id)."""
    n = nx * ny
    k1 = np.full(n, np.nan)
    k2 = np.full(n, np.nan)
    reg = np.full(n, -1, dtype=int)
    noise_flag = {}
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != ["x", "y", "region_id", "K1", "k2"]:
            raise InvalidArgumentError(f"{path}: expected header x,y,region_id,K1,k2")
        for row in rd:
            x, y = int(row["x"]), int(row["y"])
            if not (0 <= x < nx and 0 <= y < ny):
                raise InvalidArgumentError(f"{path}: voxel ({x},{y}) outside {nx}x{ny} image")
            i = y * nx + x
            k1[i], k2[i], reg[i] = float(row["K1"]), float(row["k2"]), int(row["region_id"])
            noise_flag.setdefault(reg[i], True)
            if k1[i] != NOISE_K1:
                noise_flag[reg[i]] = False
    if np.any(reg < 0):
        raise InvalidArgumentError(f"{path}: truth does not cover every voxel")
    noise_ids = [r for r, flag in noise_flag.items() if flag]
    return k1, k2, reg, (int(noise_ids[0]) if noise_ids else None)


def write_dpet(path, data, nx, ny):
    """Little-endian header followed by float64 values, all voxels of frame 1 first."""
    data = np.asarray(data, dtype=float)
    T = data.shape[1]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DPET_MAGIC, DPET_VERSION, nx, ny, 1, T))
        fh.write(np.ascontiguousarray(data.T).astype("<f8").tobytes())


def read_dpet(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise InvalidArgumentError(f"{path}: truncated DPET header")
    magic, version, nx, ny, nz, T = _HEADER.unpack_from(raw)
    if magic != DPET_MAGIC:
        raise InvalidArgumentError(f"{path}: bad magic {magic!r}")
    if version != DPET_VERSION:
        raise InvalidArgumentError(f"{path}: unsupported DPET version {version}")
    if nz != 1:
        raise InvalidArgumentError(f"{path}: only single-slice images are supported (nz={nz})")
    expected = _HEADER.size + 8 * nx * ny * T
    if len(raw) != expected:
        raise InvalidArgumentError(f"{path}: expected {expected} bytes, found {len(raw)}")
    vals = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(T, nx * ny)
    return vals.T.astype(float), nx, ny


# --------------------------------------------------------------------------


def render_noise_free(spec: PhantomSpec) -> DynamicImage:
    """Every voxel gets the frame-averaged curve of its region; the noise region stays zero."""
    model = FrameModel(spec.frames, spec.input)
    n = spec.nx * spec.ny
    data = np.zeros((n, spec.frames.n_frames))
    k1 = np.zeros(n)
    k2 = np.zeros(n)
    reg = np.zeros(n, dtype=int)
    noise_id = None
    for r in spec.regions:
        idx = np.flatnonzero(r.mask.ravel())
        reg[idx] = r.region_id
        if r.is_noise:
            noise_id = r.region_id
            continue
        data[idx] = model.tissue(r.params.K1, r.params.k2)
        k1[idx] = r.params.K1
        k2[idx] = r.params.k2
    return DynamicImage(spec.nx, spec.ny, data, k1, k2, reg, noise_id)


class NoiseKind(str, enum.Enum):
    GAUSSIAN_HETERO = "gaussian"
    SCALED_POISSON = "poisson"


@dataclass(frozen=True)
class NoiseModel:
    kind: NoiseKind = NoiseKind.GAUSSIAN_HETERO
    level: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind(self.kind))
        if not (self.level >= 0):
            raise InvalidArgumentError("noise level must be >= 0")
        if not (0 <= int(self.seed) < 2**64):
            raise InvalidArgumentError("seed must be a 64-bit unsigned integer")


def frame_generators(seed: int, n_frames: int):
    """Independent counter-based streams, one per frame."""
    children = np.random.SeedSequence(int(seed)).spawn(n_frames)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


def add_noise(img: DynamicImage, noise: NoiseModel, frames: FrameScheme) -> DynamicImage:
    """Image-domain noise with per-frame spread shrinking like 1/sqrt(frame duration).

    Gaussian: ``sd_t = level * mean_t / sqrt(dt_t)`` with ``mean_t`` the frame mean over
    non-background voxels; results are clipped at zero.  Poisson: ``level`` is the
    activity represented by one count.
    """
    if frames.n_frames != img.n_frames:
        raise InvalidArgumentError("frame scheme does not match image frame count")
    dt = frames.durations
    gens = frame_generators(noise.seed, img.n_frames)
    out = np.empty_like(img.data)
    if noise.kind is NoiseKind.GAUSSIAN_HETERO:
        if noise.level == 0:
            return img.with_data(img.data.copy())
        tissue = ~img.noise_mask()
        if not np.any(tissue):
            tissue = np.ones(img.n_voxels, dtype=bool)
        mean_t = img.data[tissue].mean(axis=0)
        for t, g in enumerate(gens):
            sd = noise.level * mean_t[t] / np.sqrt(dt[t])
            out[:, t] = np.maximum(0.0, img.data[:, t] + sd * g.standard_normal(img.n_voxels))
    else:
        if noise.level == 0:
            raise InvalidArgumentError("SCALED_POISSON needs level > 0 (activity per count)")
        if np.any(img.data < 0):
            raise InvalidArgumentError("Poisson noise needs non-negative activity")
        for t, g in enumerate(gens):
            counts = g.poisson(img.data[:, t] * dt[t] / noise.level)
            out[:, t] = counts * noise.level / dt[t]
    res = img.with_data(out)
    res.meta.update(noise_kind=noise.kind.value, noise_level=noise.level, seed=int(noise.seed))
    return res


def rect_mask(nx, ny, x0, y0, x1, y1):
    m = np.zeros((ny, nx), dtype=bool)
    m[y0:y1, x0:x1] = True
    return m


# built-in phantom: a 4 x 4 grid of 8 x 8 cells, each holding a 4 x 4 tissue block
CELL = 8
BLOCK = 4
BLOCK_OFFSET = 2
# peak of the built-in input curve (arbitrary activity units)
PHANTOM_INPUT_PEAK = 0.04
# noise used by the acceptance experiments on the built-in phantom
PHANTOM_NOISE_LEVEL = 0.35


def _is_abnormal_cell(k: int, per_row: int) -> bool:
    # scatters 6 of the 16 cells without row or column alignment
    return (5 * k + k // per_row) % 8 < 3


def default_phantom(frames: FrameScheme | None = None, inp: InputFunction | None = None) -> PhantomSpec:
    """32 x 32 slice of 4 x 4 tissue blocks scattered over a zero background.

    Ten blocks carry the midinferoseptal reference rates (normal, 160 voxels),
    six the apex rates (defect, 96 voxels); the other 768 voxels are background.
    Blocks are separated by background so every region has plenty of edge voxels.
    """
    nx = ny = 32
    normal = np.zeros((ny, nx), dtype=bool)
    abnormal = np.zeros((ny, nx), dtype=bool)
    per_row = nx // CELL
    for k in range(per_row * (ny // CELL)):
        x0 = (k % per_row) * CELL + BLOCK_OFFSET
        y0 = (k // per_row) * CELL + BLOCK_OFFSET
        target = abnormal if _is_abnormal_cell(k, per_row) else normal
        target |= rect_mask(nx, ny, x0, y0, x0 + BLOCK, y0 + BLOCK)
    noise = ~(normal | abnormal)
    regions = [
        Region(1, normal, MIDINFEROSEPTAL, "normal"),
        Region(2, abnormal, APEX, "abnormal"),
        Region(3, noise, None, "noise"),
    ]
    return PhantomSpec(nx, ny, regions, frames or default_frames(), inp or default_input(scale=PHANTOM_INPUT_PEAK))
