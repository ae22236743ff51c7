"""Synthetic brain phantoms, preprocessing, augmentation, splits, and volume IO.

Phantoms are nested randomized ellipsoids: an outer CSF shell, a cortical
gray-matter shell, a white-matter interior, two deep gray-matter blobs, a
brainstem, and a cerebellum, all jittered per seed. The skull-strip task
uses the same geometry with binarized labels. Augmentation magnitudes are
arbitrary defaults; the label volume is only ever transformed geometrically
(nearest neighbor).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import kspace
from .errors import ConfigError, DataError, FormatError, GenerationError

CLASS_NAMES_TISSUE = (
    "background",
    "csf",
    "cortical_gm",
    "white_matter",
    "deep_gm",
    "brainstem",
    "cerebellum",
)
CLASS_NAMES_BINARY = ("background", "brain")

TASK_SKULL_STRIP = "skull_strip"
TASK_TISSUE = "tissue"
TASKS = (TASK_SKULL_STRIP, TASK_TISSUE)


def class_names(task: str) -> tuple[str, ...]:
    return CLASS_NAMES_BINARY if task == TASK_SKULL_STRIP else CLASS_NAMES_TISSUE


def num_classes(task: str) -> int:
    return len(class_names(task))


@dataclass
class Volume:
    """3D intensity grid (D x H x W float64) with isotropic spacing metadata."""

    data: np.ndarray
    spacing_mm: float = 3.0

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise DataError(f"volume must be 3D, got shape {self.data.shape}")


@dataclass
class LabelVolume:
    """3D class-index grid (D x H x W uint16)."""

    data: np.ndarray
    spacing_mm: float = 3.0

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.uint16)
        if self.data.ndim != 3:
            raise DataError(f"label volume must be 3D, got shape {self.data.shape}")


# Default per-class intensity models: mean, std (class index order).
_DEFAULT_MEANS = (0.05, 0.88, 0.45, 0.75, 0.52, 0.65, 0.58)
_DEFAULT_STDS = (0.02, 0.04, 0.04, 0.04, 0.04, 0.04, 0.04)


@dataclass(frozen=True)
class PhantomParams:
    """Everything needed to regenerate one phantom deterministically."""

    seed: int
    extents: tuple[int, int, int] = (32, 32, 32)
    task: str = TASK_TISSUE
    spacing_mm: float = 3.0
    class_means: tuple[float, ...] = _DEFAULT_MEANS
    class_stds: tuple[float, ...] = _DEFAULT_STDS
    # brain ellipsoid semi-axes as a fraction of (half-extent - 1), per axis
    radius_range: tuple[float, float] = (0.78, 0.93)
    center_jitter: float = 0.04  # fraction of the extent

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if len(self.class_means) != 7 or len(self.class_stds) != 7:
            raise ConfigError("class_means/class_stds must have 7 entries")


def _ellipsoid_mask(coords, center, radii) -> np.ndarray:
    zz, yy, xx = coords
    rho2 = (
        ((zz - center[0]) / radii[0]) ** 2
        + ((yy - center[1]) / radii[1]) ** 2
        + ((xx - center[2]) / radii[2]) ** 2
    )
    return rho2 <= 1.0


def generate_phantom(params: PhantomParams) -> tuple[Volume, LabelVolume]:
    """Render one phantom; bitwise reproducible from its params."""
    ext = params.extents
    if min(ext) < 8:
        raise GenerationError(f"extents {ext} too small to fit the tissue shells")
    rng = np.random.default_rng(np.random.SeedSequence([int(params.seed)]))

    center = np.array(
        [e * (0.5 + rng.uniform(-params.center_jitter, params.center_jitter))
         for e in ext]
    )
    lo, hi = params.radius_range
    radii = np.array([(e / 2.0 - 1.0) * rng.uniform(lo, hi) for e in ext])

    zz, yy, xx = np.meshgrid(*(np.arange(e, dtype=np.float64) for e in ext),
                             indexing="ij")
    coords = (zz, yy, xx)
    rho = np.sqrt(
        ((zz - center[0]) / radii[0]) ** 2
        + ((yy - center[1]) / radii[1]) ** 2
        + ((xx - center[2]) / radii[2]) ** 2
    )

    labels = np.zeros(ext, dtype=np.uint16)
    brain = rho <= 1.0
    labels[brain & (rho > 0.86)] = 1                 # CSF shell
    labels[brain & (rho <= 0.86) & (rho > 0.68)] = 2  # cortical GM shell
    labels[rho <= 0.68] = 3                           # WM interior

    # cerebellum: lower-posterior ellipsoid, clipped to the brain mask
    cb_center = center + np.array([0.0, 0.42 * radii[1], 0.42 * radii[2]])
    cb_center += rng.uniform(-0.04, 0.04, 3) * radii
    cb_mask = _ellipsoid_mask(coords, cb_center, radii * (0.38, 0.33, 0.36)) & brain
    labels[cb_mask] = 6

    # brainstem: vertically elongated, bottom center
    bs_center = center + np.array([0.0, 0.52 * radii[1], -0.05 * radii[2]])
    bs_center += rng.uniform(-0.04, 0.04, 3) * radii
    bs_mask = _ellipsoid_mask(coords, bs_center, radii * (0.22, 0.44, 0.20)) & brain
    labels[bs_mask] = 5

    # two deep gray-matter blobs inside the white matter
    for side in (-1.0, 1.0):
        dg_center = center + np.array([side * 0.26 * radii[0], 0.0, 0.08 * radii[2]])
        dg_center += rng.uniform(-0.03, 0.03, 3) * radii
        dg_mask = _ellipsoid_mask(coords, dg_center, radii * 0.20) & (rho <= 0.62)
        labels[dg_mask] = 4

    means = np.asarray(params.class_means)
    stds = np.asarray(params.class_stds)
    intensities = means[labels] + rng.standard_normal(ext) * stds[labels]

    if params.task == TASK_SKULL_STRIP:
        labels = (labels > 0).astype(np.uint16)

    return (
        Volume(intensities, spacing_mm=params.spacing_mm),
        LabelVolume(labels, spacing_mm=params.spacing_mm),
    )


def z_normalize(volume: Volume) -> Volume:
    """(v - mean) / population std; all-zeros if the input is constant."""
    data = volume.data
    std = data.std()
    if std < 1e-8:
        return Volume(np.zeros_like(data), spacing_mm=volume.spacing_mm)
    return Volume((data - data.mean()) / std, spacing_mm=volume.spacing_mm)


@dataclass(frozen=True)
class AugmentConfig:
    """Per-transform enable flags and magnitude ranges (defaults arbitrary)."""

    affine: bool = True
    rotate_deg: float = 8.0
    scale_range: tuple[float, float] = (0.92, 1.08)
    translate_vox: float = 2.0

    contrast: bool = True
    gamma_range: tuple[float, float] = (0.8, 1.25)

    gaussian_noise: bool = True
    noise_std_range: tuple[float, float] = (0.0, 0.06)

    motion: bool = True
    motion_lines: int = 3
    motion_phase: float = 1.0  # max phase-ramp magnitude, radians at Nyquist

    bias_field: bool = True
    bias_order: int = 2
    bias_coeff: float = 0.25

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(affine=False, contrast=False, gaussian_noise=False,
                   motion=False, bias_field=False)


def sample_seed(base_seed: int, sample_index: int, epoch: int = 0) -> np.random.SeedSequence:
    """Schedule-independent per-sample seed derivation."""
    return np.random.SeedSequence([int(base_seed), int(epoch), int(sample_index)])


def _apply_affine(vol: np.ndarray, labels: np.ndarray, rng, cfg: AugmentConfig):
    angles = np.deg2rad(rng.uniform(-cfg.rotate_deg, cfg.rotate_deg, 3))
    scale = rng.uniform(*cfg.scale_range)
    shift = rng.uniform(-cfg.translate_vox, cfg.translate_vox, 3)
    rotations = []
    for axis, ang in enumerate(angles):
        c, s = np.cos(ang), np.sin(ang)
        r = np.eye(3)
        i, j = [k for k in range(3) if k != axis]
        r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
        rotations.append(r)
    rot = rotations[0] @ rotations[1] @ rotations[2]
    center = (np.array(vol.shape) - 1) / 2.0
    # output voxel -> input voxel: inverse of (rotate, scale, translate about center)
    matrix = rot.T / scale
    offset = center - matrix @ (center + shift)
    out_vol = ndimage.affine_transform(vol, matrix, offset=offset, order=1,
                                       mode="constant", cval=0.0)
    out_lab = ndimage.affine_transform(labels, matrix, offset=offset, order=0,
                                       mode="constant", cval=0)
    return out_vol, out_lab


def _apply_contrast(vol: np.ndarray, rng, cfg: AugmentConfig) -> np.ndarray:
    gamma = rng.uniform(*cfg.gamma_range)
    lo, hi = vol.min(), vol.max()
    if hi - lo < 1e-12:
        return vol
    unit = (vol - lo) / (hi - lo)
    return lo + (unit ** gamma) * (hi - lo)


def _apply_motion(vol: np.ndarray, rng, cfg: AugmentConfig) -> np.ndarray:
    h = vol.shape[1]
    planes = kspace.volume_to_kspace(vol)
    n_lines = min(cfg.motion_lines, h - 1)
    rows = rng.choice(np.arange(1, h), size=n_lines, replace=False)
    wp = planes.packed_width
    ramp = np.arange(wp) / max(wp - 1, 1)
    for row in rows:
        theta = rng.uniform(-cfg.motion_phase, cfg.motion_phase) * ramp
        cos_t, sin_t = np.cos(theta), np.sin(theta)
        re = planes.real[:, row, :].copy()
        im = planes.imag[:, row, :].copy()
        planes.real[:, row, :] = re * cos_t - im * sin_t
        planes.imag[:, row, :] = re * sin_t + im * cos_t
    return kspace.kspace_to_volume(planes)


def _apply_bias_field(vol: np.ndarray, rng, cfg: AugmentConfig) -> np.ndarray:
    axes = [np.linspace(-1.0, 1.0, e) for e in vol.shape]
    zz, yy, xx = np.meshgrid(*axes, indexing="ij")
    log_field = np.zeros_like(vol)
    for i in range(cfg.bias_order + 1):
        for j in range(cfg.bias_order + 1 - i):
            for k in range(cfg.bias_order + 1 - i - j):
                if i == j == k == 0:
                    continue
                coeff = rng.uniform(-cfg.bias_coeff, cfg.bias_coeff)
                log_field += coeff * (zz ** i) * (yy ** j) * (xx ** k)
    return vol * np.exp(log_field)


def augment(volume: Volume, labels: LabelVolume, cfg: AugmentConfig,
            seed: np.random.SeedSequence | int) -> tuple[Volume, LabelVolume]:
    """Apply the enabled transforms in fixed order.

    Order: affine -> contrast -> noise -> motion -> bias field. Only the
    affine transform touches the labels (nearest neighbor).
    """
    if volume.data.shape != labels.data.shape:
        raise DataError(
            f"volume/label extents differ: {volume.data.shape} vs {labels.data.shape}"
        )
    rng = np.random.default_rng(seed)
    vol = volume.data.copy()
    lab = labels.data.copy()
    if cfg.affine:
        vol, lab = _apply_affine(vol, lab, rng, cfg)
    if cfg.contrast:
        vol = _apply_contrast(vol, rng, cfg)
    if cfg.gaussian_noise:
        std = rng.uniform(*cfg.noise_std_range)
        vol = vol + rng.standard_normal(vol.shape) * std
    if cfg.motion:
        vol = _apply_motion(vol, rng, cfg)
    if cfg.bias_field:
        vol = _apply_bias_field(vol, rng, cfg)
    return (
        Volume(vol, spacing_mm=volume.spacing_mm),
        LabelVolume(lab, spacing_mm=labels.spacing_mm),
    )


def split_dataset(n: int, seed: int) -> tuple[list[int], list[int], list[int]]:
    """Disjoint 80/10/10 shuffle split of range(n)."""
    if n < 10:
        raise ConfigError(f"need at least 10 subjects to split, got {n}")
    order = np.random.default_rng(np.random.SeedSequence([int(seed)])).permutation(n)
    n_train = int(np.floor(0.8 * n))
    n_val = int(np.floor(0.1 * n))
    train = sorted(int(i) for i in order[:n_train])
    val = sorted(int(i) for i in order[n_train : n_train + n_val])
    test = sorted(int(i) for i in order[n_train + n_val :])
    return train, val, test


# -- KVOL persistence ----------------------------------------------------------
#
# Layout (little-endian): magic "KVOL" | version u16 | type tag u8
# (0 = float64 intensities, 1 = uint16 labels) | extents 3*u64
# | spacing f64 mm | raw payload.

KVOL_MAGIC = b"KVOL"
KVOL_VERSION = 1
_TAG_VOLUME = 0
_TAG_LABELS = 1


def write_volume(path, value: Volume | LabelVolume) -> None:
    if isinstance(value, Volume):
        tag, payload = _TAG_VOLUME, value.data.astype("<f8").tobytes()
    elif isinstance(value, LabelVolume):
        tag, payload = _TAG_LABELS, value.data.astype("<u2").tobytes()
    else:
        raise DataError(f"cannot serialize {type(value).__name__}")
    header = KVOL_MAGIC + struct.pack(
        "<HB3Qd", KVOL_VERSION, tag, *value.data.shape, value.spacing_mm
    )
    with open(path, "wb") as fh:
        fh.write(header + payload)


def _read_kvol(path) -> tuple[int, tuple[int, int, int], float, bytes]:
    with open(path, "rb") as fh:
        blob = fh.read()
    header_size = 4 + struct.calcsize("<HB3Qd")
    if len(blob) < header_size:
        raise FormatError(f"{path}: truncated header")
    if blob[:4] != KVOL_MAGIC:
        raise FormatError(f"{path}: not a KVOL file (bad magic)")
    version, tag, d, h, w, spacing = struct.unpack("<HB3Qd", blob[4:header_size])
    if version != KVOL_VERSION:
        raise FormatError(f"{path}: unsupported KVOL version {version}")
    item = 8 if tag == _TAG_VOLUME else 2
    expected = header_size + d * h * w * item
    if len(blob) != expected:
        raise FormatError(
            f"{path}: payload size mismatch (got {len(blob)}, expected {expected})"
        )
    return tag, (d, h, w), spacing, blob[header_size:]


def read_volume(path) -> Volume:
    tag, extents, spacing, payload = _read_kvol(path)
    if tag != _TAG_VOLUME:
        raise FormatError(f"{path}: type tag {tag} is not an intensity volume")
    data = np.frombuffer(payload, dtype="<f8").reshape(extents)
    return Volume(data.copy(), spacing_mm=spacing)


def read_labels(path) -> LabelVolume:
    tag, extents, spacing, payload = _read_kvol(path)
    if tag != _TAG_LABELS:
        raise FormatError(f"{path}: type tag {tag} is not a label volume")
    data = np.frombuffer(payload, dtype="<u2").reshape(extents)
    return LabelVolume(data.copy(), spacing_mm=spacing)


def write_manifest(path, entries: list[dict]) -> None:
    """Dataset manifest: JSON list of {volume_path, label_path, split}."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(entries, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        entries = json.load(fh)
    for entry in entries:
        for key in ("volume_path", "label_path", "split"):
            if key not in entry:
                raise FormatError(f"manifest entry missing {key!r}: {entry}")
    return entries
