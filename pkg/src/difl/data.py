"""Dataset manifests and a procedural multi-domain toy benchmark.

The manifest is a flat CSV (id, path, domain, slice, role, x, y, z, qw, qx,
qy, qz). Reference records carry camera poses; query records may omit them
when running blind. The toy generator renders seeded smooth texture scenes
from simulated camera poses under per-domain photometric styles, so the same
place looks different in every domain while the geometry stays put.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .bank import DomainId
from .errors import ConfigError, ImageReadError, ManifestError

MANIFEST_COLUMNS = ["id", "path", "domain", "slice", "role",
                    "x", "y", "z", "qw", "qx", "qy", "qz"]


@dataclass
class Pose:
    """Camera position (meters) and orientation as a unit quaternion (w,x,y,z)."""

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.orientation = np.asarray(self.orientation, dtype=np.float64).reshape(4)
        norm = float(np.linalg.norm(self.orientation))
        if abs(norm - 1.0) > 1e-6:
            raise ConfigError(f"quaternion norm {norm} not within 1e-6 of 1")

    @staticmethod
    def from_yaw(x: float, y: float, z: float, yaw_deg: float) -> "Pose":
        half = math.radians(yaw_deg) / 2.0
        return Pose(np.array([x, y, z]),
                    np.array([math.cos(half), 0.0, 0.0, math.sin(half)]))

    def __eq__(self, other):
        return (isinstance(other, Pose)
                and np.array_equal(self.position, other.position)
                and np.array_equal(self.orientation, other.orientation))


@dataclass
class ImageRecord:
    id: str
    path: Path
    domain: DomainId
    slice: str
    role: str  # "reference" | "query"
    pose: Pose | None

    def __post_init__(self):
        if self.role not in ("reference", "query"):
            raise ManifestError(f"record {self.id}: unknown role {self.role!r}")
        if self.role == "reference" and self.pose is None:
            raise ManifestError(f"reference record {self.id} has no pose")


@dataclass
class DatasetManifest:
    records: list[ImageRecord]
    domains: list[DomainId]
    slices: list[str]

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ManifestError(f"duplicate record ids: {dup}")
        names = {d.name for d in self.domains}
        for r in self.records:
            if r.domain.name not in names:
                raise ManifestError(f"record {r.id}: domain {r.domain.name} "
                                    "not in manifest domain list")
            if r.slice not in self.slices:
                raise ManifestError(f"record {r.id}: slice {r.slice} "
                                    "not in manifest slice list")

    def references(self) -> list[ImageRecord]:
        return [r for r in self.records if r.role == "reference"]

    def queries(self) -> list[ImageRecord]:
        return [r for r in self.records if r.role == "query"]

    def by_domain(self) -> dict[str, list[ImageRecord]]:
        out: dict[str, list[ImageRecord]] = {d.name: [] for d in self.domains}
        for r in self.records:
            out[r.domain.name].append(r)
        return out

    def domain_by_name(self, name: str) -> DomainId:
        for d in self.domains:
            if d.name == name:
                return d
        raise ManifestError(f"unknown domain {name!r}")


def _domains_from_names(names) -> list[DomainId]:
    # Indices are assigned 1-based over sorted names, so a manifest file fully
    # determines the domain ids.
    return [DomainId(index=i + 1, name=n)
            for i, n in enumerate(sorted(set(names)))]


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read and validate a manifest CSV; records come back sorted by id."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_COLUMNS:
            raise ManifestError(
                f"bad manifest header {reader.fieldnames}, "
                f"expected {MANIFEST_COLUMNS}")
        rows = list(reader)
    domains = _domains_from_names(row["domain"] for row in rows)
    by_name = {d.name: d for d in domains}
    records = []
    for row in rows:
        pose_fields = [row[k] for k in ("x", "y", "z", "qw", "qx", "qy", "qz")]
        if all(v == "" for v in pose_fields):
            pose = None
        elif any(v == "" for v in pose_fields):
            raise ManifestError(f"record {row['id']}: partial pose")
        else:
            vals = [float(v) for v in pose_fields]
            try:
                pose = Pose(np.array(vals[:3]), np.array(vals[3:]))
            except ConfigError as exc:
                raise ManifestError(f"record {row['id']}: {exc}") from exc
        rec_path = Path(row["path"])
        if not rec_path.is_absolute():
            rec_path = path.parent / rec_path
        records.append(ImageRecord(id=row["id"], path=rec_path,
                                   domain=by_name[row["domain"]],
                                   slice=row["slice"], role=row["role"],
                                   pose=pose))
    records.sort(key=lambda r: r.id)
    slices = sorted({r.slice for r in records})
    return DatasetManifest(records=records, domains=domains, slices=slices)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for r in sorted(manifest.records, key=lambda rec: rec.id):
            rec_path = r.path
            try:
                rec_path = rec_path.relative_to(path.parent.resolve())
            except ValueError:
                try:
                    rec_path = rec_path.relative_to(path.parent)
                except ValueError:
                    pass
            if r.pose is None:
                pose_cols = [""] * 7
            else:
                pose_cols = [repr(float(v)) for v in
                             (*r.pose.position, *r.pose.orientation)]
            writer.writerow([r.id, rec_path.as_posix(), r.domain.name,
                             r.slice, r.role, *pose_cols])


def load_image(path: str | Path) -> np.ndarray:
    """Decode an RGB image file to a HxWx3 uint8 array."""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"))
    except OSError as exc:
        raise ImageReadError(f"cannot read image {path}: {exc}") from exc


# --------------------------------------------------------------------------
# Toy benchmark generation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DomainStyle:
    """Photometric transform: color mix, gamma, bias, plus a screen-space
    sinusoidal overlay. Geometry of the underlying scene is untouched."""

    color_matrix: tuple  # 3x3, row-major
    gamma: tuple         # per-channel exponent
    bias: tuple          # per-channel additive shift
    overlay_amp: float
    overlay_freq: tuple  # cycles across the image, (fx, fy)
    overlay_phase: float


@dataclass
class ToySceneSpec:
    n_places: int = 50
    n_domains: int = 3
    image_size: int = 64
    pose_jitter: tuple[float, float] = (0.2, 1.0)  # meters, degrees
    seed: int = 0
    style_params: list[DomainStyle] | None = None
    place_spacing: float = 10.0   # meters between neighboring places
    pixels_per_meter: float = 8.0

    def __post_init__(self):
        if self.n_places < 2:
            raise ConfigError("n_places must be >= 2")
        if self.n_domains < 2:
            raise ConfigError("n_domains must be >= 2")


_MIX_PERMS = [(0, 1, 2), (1, 2, 0), (2, 0, 1), (0, 2, 1), (1, 0, 2), (2, 1, 0)]
_BIAS_DIRS = [(1, -1, 0), (-1, 0, 1), (0, 1, -1), (1, 0, -1), (-1, 1, 0), (0, -1, 1)]


def default_styles(n_domains: int, seed: int) -> list[DomainStyle]:
    """Distinct per-domain styles; domain 1 is the clean reference condition.

    Biases are drawn from fixed well-separated directions so per-domain
    channel means differ by a clear margin.
    """
    rng = np.random.default_rng(seed + 7919)
    styles = [DomainStyle(color_matrix=tuple(np.eye(3).ravel()),
                          gamma=(1.0, 1.0, 1.0), bias=(0.0, 0.0, 0.0),
                          overlay_amp=0.0, overlay_freq=(0.0, 0.0),
                          overlay_phase=0.0)]
    for d in range(1, n_domains):
        perm = _MIX_PERMS[(d - 1) % len(_MIX_PERMS)]
        alpha = 0.45
        mat = (1 - alpha) * np.eye(3) + alpha * np.eye(3)[list(perm)]
        gamma = 0.75 + 0.7 * rng.random(3)
        direction = np.array(_BIAS_DIRS[(d - 1) % len(_BIAS_DIRS)], dtype=float)
        bias = 0.15 * direction + rng.uniform(-0.02, 0.02, 3)
        angle = rng.uniform(0, math.pi)
        freq = 3.0 + 4.0 * rng.random()
        styles.append(DomainStyle(
            color_matrix=tuple(mat.ravel()),
            gamma=tuple(gamma),
            bias=tuple(bias),
            overlay_amp=0.10 + 0.05 * rng.random(),
            overlay_freq=(freq * math.cos(angle), freq * math.sin(angle)),
            overlay_phase=float(rng.uniform(0, 2 * math.pi)),
        ))
    return styles


@dataclass
class _PlaceField:
    """Smooth pseudo-random RGB field over world coordinates: per-channel sums
    of random plane waves. Wavelengths span roughly 1-8 m so patterns are
    visible in an 8 m viewport yet distinctive between places."""

    freqs: np.ndarray    # (K, 2) cycles per meter
    phases: np.ndarray   # (3, K)
    amps: np.ndarray     # (3, K)

    @staticmethod
    def for_place(seed: int, place: int, n_waves: int = 8) -> "_PlaceField":
        rng = np.random.default_rng((seed, 104729, place))
        wavelength = rng.uniform(1.0, 8.0, n_waves)
        angle = rng.uniform(0, 2 * math.pi, n_waves)
        freqs = np.stack([np.cos(angle), np.sin(angle)], axis=1) / wavelength[:, None]
        phases = rng.uniform(0, 2 * math.pi, (3, n_waves))
        amps = rng.uniform(0.4, 1.0, (3, n_waves))
        amps /= amps.sum(axis=1, keepdims=True)
        return _PlaceField(freqs, phases, amps)

    def sample(self, world_xy: np.ndarray) -> np.ndarray:
        """world_xy (..., 2) -> rgb in [0, 1] with shape (..., 3)."""
        arg = 2 * math.pi * (world_xy @ self.freqs.T)        # (..., K)
        waves = np.sin(arg[..., None, :] + self.phases)      # (..., 3, K)
        rgb = 0.5 + 0.5 * (waves * self.amps).sum(axis=-1)
        return rgb


def _camera_grid(size: int, ppm: float) -> np.ndarray:
    """Pixel centers in camera-frame meters, (H, W, 2), x right, y down."""
    coords = (np.arange(size) - (size - 1) / 2.0) / ppm
    xs, ys = np.meshgrid(coords, coords)
    return np.stack([xs, ys], axis=-1)


def render_view(field: _PlaceField, pose_xy: np.ndarray, yaw_deg: float,
                style: DomainStyle, size: int, ppm: float) -> np.ndarray:
    """Render the place field seen from a camera pose, styled; HxWx3 uint8."""
    cam = _camera_grid(size, ppm)
    yaw = math.radians(yaw_deg)
    rot = np.array([[math.cos(yaw), -math.sin(yaw)],
                    [math.sin(yaw), math.cos(yaw)]])
    world = cam @ rot.T + np.asarray(pose_xy)[:2]
    rgb = field.sample(world)

    mat = np.asarray(style.color_matrix).reshape(3, 3)
    rgb = np.clip(rgb @ mat.T, 0.0, 1.0)
    rgb = rgb ** np.asarray(style.gamma)
    rgb = rgb + np.asarray(style.bias)
    if style.overlay_amp:
        # Screen-space overlay: sticks to the camera, not the scene.
        u = np.linspace(0.0, 1.0, size)
        uu, vv = np.meshgrid(u, u)
        overlay = style.overlay_amp * np.sin(
            2 * math.pi * (style.overlay_freq[0] * uu
                           + style.overlay_freq[1] * vv)
            + style.overlay_phase)
        rgb = rgb + overlay[..., None]
    rgb = np.clip(rgb, 0.0, 1.0)
    return (rgb * 255.0 + 0.5).astype(np.uint8)


def generate_toy_dataset(spec: ToySceneSpec, out_dir: str | Path) -> DatasetManifest:
    """Render the benchmark to ``out_dir`` and write ``manifest.csv``.

    Domain 1 provides one reference image per place at the exact place pose;
    every other domain provides one query per place at a pose perturbed
    within ``pose_jitter``. Same spec (including seed) gives bit-identical
    image files.
    """
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)

    styles = spec.style_params or default_styles(spec.n_domains, spec.seed)
    if len(styles) != spec.n_domains:
        raise ConfigError(f"need {spec.n_domains} styles, got {len(styles)}")
    domains = [DomainId(index=d + 1, name=f"d{d + 1:02d}")
               for d in range(spec.n_domains)]

    grid = math.ceil(math.sqrt(spec.n_places))
    rng = np.random.default_rng((spec.seed, 15485863))
    jitter_pos, jitter_rot = spec.pose_jitter

    records: list[ImageRecord] = []
    for place in range(spec.n_places):
        field = _PlaceField.for_place(spec.seed, place)
        px = spec.place_spacing * (place % grid)
        py = spec.place_spacing * (place // grid)
        yaw = float(rng.uniform(0.0, 360.0))
        ref_pose = Pose.from_yaw(px, py, 0.0, yaw)

        for d, domain in enumerate(domains):
            if d == 0:
                pose, role = ref_pose, "reference"
                view_xy, view_yaw = (px, py), yaw
            else:
                theta = rng.uniform(0, 2 * math.pi)
                radius = jitter_pos * rng.random()
                dx, dy = radius * math.cos(theta), radius * math.sin(theta)
                dyaw = float(rng.uniform(-jitter_rot, jitter_rot))
                view_xy, view_yaw = (px + dx, py + dy), yaw + dyaw
                pose, role = Pose.from_yaw(*view_xy, 0.0, view_yaw), "query"
            image = render_view(field, np.array(view_xy), view_yaw,
                                styles[d], spec.image_size,
                                spec.pixels_per_meter)
            rec_id = f"p{place:04d}_{domain.name}"
            rel = Path("images") / f"{rec_id}.png"
            Image.fromarray(image).save(out_dir / rel)
            records.append(ImageRecord(id=rec_id, path=out_dir / rel,
                                       domain=domain, slice="toy",
                                       role=role, pose=pose))

    records.sort(key=lambda r: r.id)
    manifest = DatasetManifest(records=records, domains=domains, slices=["toy"])
    save_manifest(manifest, out_dir / "manifest.csv")
    return manifest
