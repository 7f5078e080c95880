"""Synthetic two-modality phantom dataset.

Every slice is rendered from an :class:`AnatomyParams` (organ ellipse, up to
three lesion ellipses and a smooth background field). The source modality is a
fixed, deterministic function of the anatomy. The target modality additionally
depends on a style seed that draws channel gains, a bias field, band-limited
texture and the lesion contrast, so one anatomy maps to a whole distribution of
target images while the lesion mask stays the same.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .domains import Domain
from .errors import CorruptDataError

DATASET_FORMAT = "uada-dataset/1"
SLICE_MAGIC = b"UADA"
SLICE_VERSION = 1
HEADER_SIZE = 64
# magic, version, channels, H, W, domain, labeled; padded to HEADER_SIZE
_HEADER = struct.Struct("<4sIIIIBB")

MIN_GRID = 32
N_FIELD_COEFFS = 4
SOURCE_LESION_OFFSET = 0.3
TARGET_LESION_OFFSET = 0.4


@dataclass(frozen=True)
class Ellipse:
    center: tuple[float, float]  # (x, y) as fraction of the grid
    axes: tuple[float, float]  # semi-axes (x, y) as fraction of the grid
    rotation: float  # radians

    def contains(self, x, y):
        """Boolean array: which points (in grid fractions) lie inside the ellipse."""
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        dx = np.asarray(x) - self.center[0]
        dy = np.asarray(y) - self.center[1]
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return (u / self.axes[0]) ** 2 + (v / self.axes[1]) ** 2 <= 1.0

    def boundary(self, n=64):
        t = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        u = self.axes[0] * np.cos(t)
        v = self.axes[1] * np.sin(t)
        return self.center[0] + c * u - s * v, self.center[1] + s * u + c * v

    def area_pixels(self, grid_size):
        return math.pi * self.axes[0] * self.axes[1] * grid_size**2


@dataclass(frozen=True)
class AnatomyParams:
    seed: int
    grid_size: int
    background_field: tuple[tuple[float, ...], ...]  # cosine-basis coefficients
    organ: Ellipse
    lesions: tuple[Ellipse, ...] = ()


@dataclass
class PhantomSlice:
    image: np.ndarray  # float32 [C, H, W], zero mean / unit std per channel
    mask: np.ndarray  # uint8 [H, W]
    domain: Domain
    patient_id: str = ""
    labeled: bool = True
    slice_index: int = 0


def pixel_centers(grid_size):
    """Pixel-centre coordinates (x, y) in grid fractions, each of shape [H, W]."""
    t = (np.arange(grid_size) + 0.5) / grid_size
    y, x = np.meshgrid(t, t, indexing="ij")
    return x, y


def _cosine_field(coeffs, grid_size):
    coeffs = np.asarray(coeffs, dtype=np.float64)
    t = (np.arange(grid_size) + 0.5) / grid_size
    basis = np.cos(np.pi * np.outer(np.arange(coeffs.shape[0]), t))  # [K, N]
    return basis.T @ coeffs @ basis  # [N(y), N(x)]


def _unit_range(f):
    lo, hi = f.min(), f.max()
    if hi - lo < 1e-12:
        return np.zeros_like(f)
    return (f - lo) / (hi - lo)


def generate_anatomy(seed: int, grid_size: int = 64) -> AnatomyParams:
    """Draw a random anatomy. Pure function of ``seed`` and ``grid_size``."""
    if grid_size < MIN_GRID:
        raise ValueError(f"grid_size must be >= {MIN_GRID}, got {grid_size}")
    rng = np.random.default_rng(seed)

    decay = 1.0 / (1.0 + np.add.outer(np.arange(N_FIELD_COEFFS), np.arange(N_FIELD_COEFFS)))
    coeffs = rng.normal(size=(N_FIELD_COEFFS, N_FIELD_COEFFS)) * decay
    coeffs[0, 0] = 0.0

    organ = Ellipse(
        center=(0.5 + rng.uniform(-0.05, 0.05), 0.5 + rng.uniform(-0.05, 0.05)),
        axes=(rng.uniform(0.25, 0.35), rng.uniform(0.25, 0.35)),
        rotation=rng.uniform(0.0, np.pi),
    )

    n_lesions = int(rng.integers(0, 4))
    lesions = []
    while len(lesions) < n_lesions:
        lesion = Ellipse(
            center=(
                organ.center[0] + rng.uniform(-0.6, 0.6) * organ.axes[0],
                organ.center[1] + rng.uniform(-0.6, 0.6) * organ.axes[1],
            ),
            axes=(rng.uniform(0.04, 0.09), rng.uniform(0.04, 0.09)),
            rotation=rng.uniform(0.0, np.pi),
        )
        # Whole boundary inside the organ => whole lesion inside (ellipses are convex).
        if organ.contains(*lesion.boundary()).all():
            lesions.append(lesion)

    return AnatomyParams(
        seed=int(seed),
        grid_size=int(grid_size),
        background_field=tuple(tuple(float(v) for v in row) for row in coeffs),
        organ=organ,
        lesions=tuple(lesions),
    )


def lesion_mask(anatomy: AnatomyParams) -> np.ndarray:
    """Pixels whose centre lies inside any lesion ellipse."""
    x, y = pixel_centers(anatomy.grid_size)
    mask = np.zeros((anatomy.grid_size, anatomy.grid_size), dtype=bool)
    for lesion in anatomy.lesions:
        mask |= lesion.contains(x, y)
    return mask.astype(np.uint8)


def anatomy_intensity(anatomy: AnatomyParams) -> np.ndarray:
    """Lesion-free tissue intensity in [0, 1]."""
    x, y = pixel_centers(anatomy.grid_size)
    field = _unit_range(_cosine_field(anatomy.background_field, anatomy.grid_size))
    organ = anatomy.organ.contains(x, y)
    return np.where(organ, 0.45 + 0.2 * field, 0.1 + 0.2 * field)


def normalize_channels(image: np.ndarray) -> np.ndarray:
    """Per-channel zero mean / unit std, computed in float64, returned as float32."""
    image = np.asarray(image, dtype=np.float64)
    mean = image.mean(axis=(1, 2), keepdims=True)
    std = image.std(axis=(1, 2), keepdims=True)
    return ((image - mean) / np.maximum(std, 1e-12)).astype(np.float32)


def source_exponents(channels: int) -> np.ndarray:
    # Monotone contrast curves a**gamma_k, one per source channel.
    return np.linspace(0.6, 1.6, channels) if channels > 1 else np.ones(1)


def render_source(anatomy: AnatomyParams, channels: int = 3) -> PhantomSlice:
    a = anatomy_intensity(anatomy)
    mask = lesion_mask(anatomy)
    raw = np.stack([a**g for g in source_exponents(channels)])
    raw = raw + SOURCE_LESION_OFFSET * mask
    return PhantomSlice(image=normalize_channels(raw), mask=mask, domain=Domain.SOURCE, labeled=True)


@dataclass(frozen=True)
class TargetStyle:
    gains: np.ndarray  # [C]
    bias_coeffs: np.ndarray  # [C, 3, 3]
    texture_amplitude: np.ndarray  # [C]
    lesion_gain: float
    texture_seed: int


def draw_target_style(style_seed: int, channels: int = 5) -> TargetStyle:
    rng = np.random.default_rng([int(style_seed), 0x5A17])
    return TargetStyle(
        gains=rng.uniform(0.5, 1.5, size=channels),
        bias_coeffs=rng.normal(scale=0.08, size=(channels, 3, 3)),
        texture_amplitude=rng.uniform(0.02, 0.08, size=channels),
        lesion_gain=float(rng.uniform(0.5, 1.5)),
        texture_seed=int(rng.integers(0, 2**31 - 1)),
    )


def _texture(style: TargetStyle, channels: int, grid_size: int) -> np.ndarray:
    rng = np.random.default_rng(style.texture_seed)
    out = np.empty((channels, grid_size, grid_size))
    for k in range(channels):
        t = ndimage.gaussian_filter(rng.normal(size=(grid_size, grid_size)), sigma=1.0, mode="wrap")
        out[k] = style.texture_amplitude[k] * t / t.std()
    return out


def render_target(anatomy: AnatomyParams, style_seed: int, channels: int = 5) -> PhantomSlice:
    style = draw_target_style(style_seed, channels)
    a = anatomy_intensity(anatomy)
    mask = lesion_mask(anatomy)
    n = anatomy.grid_size
    raw = style.gains[:, None, None] * a[None]
    raw = raw + np.stack([_cosine_field(style.bias_coeffs[k], n) for k in range(channels)])
    raw = raw + _texture(style, channels, n)
    raw = raw + TARGET_LESION_OFFSET * style.lesion_gain * mask
    return PhantomSlice(image=normalize_channels(raw), mask=mask, domain=Domain.TARGET, labeled=True)


# --------------------------------------------------------------------------
# On-disk format


def encode_slice(s: PhantomSlice) -> bytes:
    image = np.ascontiguousarray(s.image, dtype="<f4")
    mask = np.ascontiguousarray(s.mask, dtype=np.uint8)
    c, h, w = image.shape
    if mask.shape != (h, w):
        raise ValueError(f"mask shape {mask.shape} does not match image {image.shape}")
    header = _HEADER.pack(
        SLICE_MAGIC, SLICE_VERSION, c, h, w, 0 if s.domain is Domain.SOURCE else 1, int(bool(s.labeled))
    )
    header = header.ljust(HEADER_SIZE, b"\0")
    return header + image.tobytes() + mask.tobytes()


def decode_slice(data: bytes, path="<bytes>") -> tuple[np.ndarray, np.ndarray, Domain, bool]:
    if len(data) < HEADER_SIZE:
        raise CorruptDataError(f"{path}: truncated header")
    magic, version, c, h, w, dom, labeled = _HEADER.unpack_from(data)
    if magic != SLICE_MAGIC or version != SLICE_VERSION:
        raise CorruptDataError(f"{path}: not a {SLICE_MAGIC.decode()} v{SLICE_VERSION} slice file")
    n_img = 4 * c * h * w
    if len(data) != HEADER_SIZE + n_img + h * w:
        raise CorruptDataError(f"{path}: payload size does not match header")
    image = np.frombuffer(data, dtype="<f4", count=c * h * w, offset=HEADER_SIZE).reshape(c, h, w)
    mask = np.frombuffer(data, dtype=np.uint8, offset=HEADER_SIZE + n_img).reshape(h, w)
    domain = Domain.SOURCE if dom == 0 else Domain.TARGET
    return image.astype(np.float32), mask.copy(), domain, bool(labeled)


# --------------------------------------------------------------------------
# Dataset building


@dataclass
class DatasetConfig:
    n_source: int = 40
    n_target: int = 20
    labeled_fraction: float = 0.5
    slices_per_patient: int = 4
    grid_size: int = 64
    seed: int = 0
    source_channels: int = 3
    target_channels: int = 5
    n_folds: int = 5

    def validate(self):
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ValueError(f"labeled_fraction must be in (0, 1], got {self.labeled_fraction}")
        if self.grid_size < MIN_GRID:
            raise ValueError(f"grid_size must be >= {MIN_GRID}, got {self.grid_size}")
        for name in ("n_source", "n_target", "slices_per_patient", "n_folds"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_target < self.n_folds:
            raise ValueError("need at least one target patient per fold")


@dataclass
class SliceRecord:
    patient_id: str
    domain: Domain
    labeled: bool
    path: str  # relative to the manifest directory
    sha256: str = ""
    slice_index: int = 0


@dataclass
class DatasetManifest:
    n_source: int
    n_target: int
    n_target_labeled: int
    folds: dict[int, list[str]]
    records: list[SliceRecord]
    config: dict = field(default_factory=dict)
    root: Optional[Path] = None

    def fold_of(self, patient_id: str) -> Optional[int]:
        for k, ids in self.folds.items():
            if patient_id in ids:
                return k
        return None

    def patients(self, domain: Domain, labeled: Optional[bool] = None) -> list[str]:
        seen = []
        for r in self.records:
            if r.domain is domain and (labeled is None or r.labeled == labeled) and r.patient_id not in seen:
                seen.append(r.patient_id)
        return seen

    def to_json(self) -> str:
        doc = {
            "format": DATASET_FORMAT,
            "n_source": self.n_source,
            "n_target": self.n_target,
            "n_target_labeled": self.n_target_labeled,
            "folds": {str(k): list(v) for k, v in sorted(self.folds.items())},
            "records": [
                {
                    "patient_id": r.patient_id,
                    "domain": r.domain.value,
                    "labeled": r.labeled,
                    "slice_index": r.slice_index,
                    "path": r.path,
                    "sha256": r.sha256,
                }
                for r in self.records
            ],
            "config": self.config,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str, root=None) -> "DatasetManifest":
        doc = json.loads(text)
        if doc.get("format") != DATASET_FORMAT:
            raise CorruptDataError(f"unsupported dataset format {doc.get('format')!r}")
        return cls(
            n_source=doc["n_source"],
            n_target=doc["n_target"],
            n_target_labeled=doc["n_target_labeled"],
            folds={int(k): list(v) for k, v in doc["folds"].items()},
            records=[
                SliceRecord(
                    patient_id=r["patient_id"],
                    domain=Domain(r["domain"]),
                    labeled=r["labeled"],
                    path=r["path"],
                    sha256=r["sha256"],
                    slice_index=r.get("slice_index", 0),
                )
                for r in doc["records"]
            ],
            config=doc.get("config", {}),
            root=Path(root) if root is not None else None,
        )


def load_manifest(path) -> DatasetManifest:
    """Read ``manifest.json`` from a dataset directory (or the file itself)."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    return DatasetManifest.from_json(path.read_text(encoding="utf-8"), root=path.parent)


def _derived_seed(master: int, *key: int) -> int:
    # Counter-based split of the master seed: independent of evaluation order.
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


_SOURCE_KEY, _TARGET_KEY, _STYLE_KEY = 1, 2, 3


def source_patient_id(i: int) -> str:
    return f"S{i:04d}"


def target_patient_id(i: int) -> str:
    return f"T{i:04d}"


def _render_job(job):
    kind, config, patient, sl, labeled = job
    anatomy = generate_anatomy(
        _derived_seed(config.seed, _SOURCE_KEY if kind == "source" else _TARGET_KEY, patient, sl),
        config.grid_size,
    )
    if kind == "source":
        s = render_source(anatomy, config.source_channels)
        s.patient_id = source_patient_id(patient)
    else:
        style_seed = _derived_seed(config.seed, _STYLE_KEY, patient)
        s = render_target(anatomy, style_seed, config.target_channels)
        s.patient_id = target_patient_id(patient)
        s.labeled = labeled
    s.slice_index = sl
    return s


def _jobs(config: DatasetConfig, n_labeled: int):
    for p in range(config.n_source):
        for sl in range(config.slices_per_patient):
            yield ("source", config, p, sl, True)
    for p in range(config.n_target):
        for sl in range(config.slices_per_patient):
            yield ("target", config, p, sl, p < n_labeled)


def generate_slices(config: DatasetConfig, jobs: int = 1) -> list[PhantomSlice]:
    """Render every slice of the dataset in manifest order, without touching disk."""
    config.validate()
    n_labeled = math.ceil(config.labeled_fraction * config.n_target - 1e-9)
    work = list(_jobs(config, n_labeled))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_render_job, work, chunksize=16))
    return [_render_job(j) for j in work]


def build_dataset(config: DatasetConfig, out_dir, jobs: int = 1) -> DatasetManifest:
    """Render the dataset, write one file per slice plus ``manifest.json``.

    Target patients are assigned to folds round-robin and the first
    ``ceil(labeled_fraction * n_target)`` of them are labeled, so labeled
    patients are spread evenly over folds.
    """
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"output directory is not writable: {out_dir}")

    n_labeled = math.ceil(config.labeled_fraction * config.n_target - 1e-9)
    folds = {k: [] for k in range(config.n_folds)}
    for p in range(config.n_target):
        folds[p % config.n_folds].append(target_patient_id(p))

    records = []
    for s in generate_slices(config, jobs=jobs):
        rel = f"{s.domain.value}/{s.patient_id}_{s.slice_index:03d}.bin"
        data = encode_slice(s)
        path = out_dir / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        records.append(
            SliceRecord(
                patient_id=s.patient_id,
                domain=s.domain,
                labeled=s.labeled,
                path=rel,
                sha256=hashlib.sha256(data).hexdigest(),
                slice_index=s.slice_index,
            )
        )

    manifest = DatasetManifest(
        n_source=config.n_source,
        n_target=config.n_target,
        n_target_labeled=n_labeled,
        folds=folds,
        records=records,
        config=asdict(config),
        root=out_dir,
    )
    (out_dir / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    return manifest


def load_slices(
    manifest: DatasetManifest,
    domain=None,
    fold: Optional[int | Iterable[int]] = None,
    labeled: Optional[bool] = None,
    patients: Optional[Sequence[str]] = None,
    verify: bool = True,
) -> list[PhantomSlice]:
    """Load the slices matching every given filter, in manifest order.

    ``fold`` may be a single fold index or several; fold filters only apply to
    target slices (source patients are not in any fold).
    """
    if manifest.root is None:
        raise ValueError("manifest has no root directory; use load_manifest()")
    domain = Domain.parse(domain) if domain is not None else None
    fold_patients = None
    if fold is not None:
        folds = [fold] if isinstance(fold, int) else list(fold)
        fold_patients = {p for k in folds for p in manifest.folds[k]}
    wanted = set(patients) if patients is not None else None

    out = []
    for r in manifest.records:
        if domain is not None and r.domain is not domain:
            continue
        if fold_patients is not None and r.patient_id not in fold_patients:
            continue
        if labeled is not None and r.labeled != labeled:
            continue
        if wanted is not None and r.patient_id not in wanted:
            continue
        path = manifest.root / r.path
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise FileNotFoundError(f"slice file missing: {path}") from None
        if verify and hashlib.sha256(data).hexdigest() != r.sha256:
            raise CorruptDataError(f"checksum mismatch: {path}")
        image, mask, dom, lab = decode_slice(data, path)
        out.append(
            PhantomSlice(
                image=image, mask=mask, domain=dom, patient_id=r.patient_id, labeled=lab, slice_index=r.slice_index
            )
        )
    return out
