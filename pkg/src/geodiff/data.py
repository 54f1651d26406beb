"""Deterministic synthetic scenes (shaded image -> depth -> normals) and the
``GDS1`` sample / dataset-manifest formats.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError
from .geometry import DepthMap, NormalMap

GENERATOR_VERSION = 1
SAMPLE_MAGIC = b"GDS1"
SAMPLE_VERSION = 1
_HEADER = struct.Struct("<4sIIIQ")  # magic, version, H, W, scene_seed
PLANES = ("condition", "depth", "normal_x", "normal_y", "normal_z")


@dataclass(frozen=True)
class SceneConfig:
    n_bumps: int = 3
    base_depth: tuple[float, float] = (2.0, 3.0)
    max_tilt: float = 0.8  # largest depth offset the tilt adds at any pixel
    bump_amplitude: float = 0.35
    bump_sigma: tuple[float, float] = (0.12, 0.25)  # fraction of min(H, W)
    fog: float = 1.0
    shading: float = 0.2
    light_spread: float = 0.5
    texture_amplitude: float = 0.01
    invalid_fraction: float = 0.02


@dataclass
class GeoSample:
    condition: np.ndarray
    depth_gt: DepthMap
    normals_gt: NormalMap
    scene_seed: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.condition.shape


def _surface(rng, H, W, cfg: SceneConfig):
    """Closed-form depth and its analytic gradient on the pixel grid."""
    y, x = np.mgrid[0:H, 0:W].astype(np.float64)
    base = rng.uniform(*cfg.base_depth)
    tx, ty = rng.uniform(-cfg.max_tilt, cfg.max_tilt, size=2)
    d = base + tx * (x / max(W - 1, 1) - 0.5) + ty * (y / max(H - 1, 1) - 0.5)
    gx = np.full_like(d, tx / max(W - 1, 1))
    gy = np.full_like(d, ty / max(H - 1, 1))
    size = min(H, W)
    for _ in range(cfg.n_bumps):
        cx = rng.uniform(0, W - 1)
        cy = rng.uniform(0, H - 1)
        sigma = rng.uniform(*cfg.bump_sigma) * size
        amp = rng.uniform(-cfg.bump_amplitude, cfg.bump_amplitude)
        g = amp * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * sigma**2))
        d += g
        gx += -g * (x - cx) / sigma**2
        gy += -g * (y - cy) / sigma**2
    return d, gx, gy


def gen_scene(seed: int, H: int = 16, W: int = 16, cfg: SceneConfig = SceneConfig()) -> GeoSample:
    """One synthetic scene, fully determined by ``(seed, H, W, cfg)``.

    Depth is a tilted plane plus Gaussian bumps. The condition image is a
    Lambertian rendering with exponential fog and a faint texture, so depth
    must be inferred jointly from brightness and shading.
    """
    if H < 8 or W < 8:
        raise DomainError(f"scene must be at least 8x8, got {H}x{W}")
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
    d, gx, gy = _surface(rng, H, W, cfg)
    n = np.stack([-gx, -gy, np.ones_like(d)], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)

    light = np.array([*rng.uniform(-cfg.light_spread, cfg.light_spread, size=2), 1.0])
    light /= np.linalg.norm(light)
    lambert = np.clip(n @ light, 0.0, None)

    y, x = np.mgrid[0:H, 0:W].astype(np.float64)
    fr = rng.uniform(0.5, 2.0, size=2) * 2 * np.pi / min(H, W)
    ph = rng.uniform(0, 2 * np.pi, size=2)
    texture = 0.5 * (np.sin(fr[0] * x + ph[0]) + np.sin(fr[1] * y + ph[1]))

    fog = np.exp(-cfg.fog * (d - cfg.base_depth[0]))
    cond = fog * (1.0 - cfg.shading + cfg.shading * lambert) + cfg.texture_amplitude * texture
    cond = np.clip(cond, 0.0, None)

    mask = rng.random((H, W)) >= cfg.invalid_fraction
    f32 = np.float32
    return GeoSample(
        condition=cond.astype(f32),
        depth_gt=DepthMap(d.astype(f32), mask),
        normals_gt=NormalMap(n.astype(f32), mask.copy()),
        scene_seed=int(seed),
    )


def save_sample(sample: GeoSample, path) -> None:
    path = Path(path)
    path.write_bytes(encode_sample(sample))


def encode_sample(sample: GeoSample) -> bytes:
    H, W = sample.shape
    parts = [_HEADER.pack(SAMPLE_MAGIC, SAMPLE_VERSION, H, W, sample.scene_seed & 0xFFFFFFFFFFFFFFFF)]
    n = sample.normals_gt.vectors
    planes = [sample.condition, sample.depth_gt.values, n[..., 0], n[..., 1], n[..., 2]]
    for p in planes:
        parts.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    parts.append(np.packbits(sample.depth_gt.mask.ravel(), bitorder="little").tobytes())
    return b"".join(parts)


def load_sample(path) -> GeoSample:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read sample: {e.strerror}", 0, path) from e
    return decode_sample(data, path)


def decode_sample(data: bytes, path=None) -> GeoSample:
    if len(data) < 4 or data[:4] != SAMPLE_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {SAMPLE_MAGIC!r}", 0, path)
    if len(data) < _HEADER.size:
        raise FormatError("truncated header", len(data), path)
    _, version, H, W, seed = _HEADER.unpack_from(data, 0)
    if version != SAMPLE_VERSION:
        raise FormatError(f"unsupported version {version}", 4, path)
    if H < 1 or W < 1:
        raise FormatError(f"invalid dimensions {H}x{W}", 8, path)
    off = _HEADER.size
    plane_bytes = H * W * 4
    planes = {}
    for name in PLANES:
        if len(data) < off + plane_bytes:
            raise FormatError(
                f"truncated file: plane '{name}' needs {plane_bytes} bytes, "
                f"{max(len(data) - off, 0)} available", off, path)
        planes[name] = np.frombuffer(data, dtype="<f4", count=H * W, offset=off).reshape(H, W).astype(np.float32)
        off += plane_bytes
    mask_bytes = (H * W + 7) // 8
    if len(data) < off + mask_bytes:
        raise FormatError(
            f"truncated file: plane 'mask' needs {mask_bytes} bytes, "
            f"{max(len(data) - off, 0)} available", off, path)
    bits = np.frombuffer(data, dtype=np.uint8, count=mask_bytes, offset=off)
    mask = np.unpackbits(bits, count=H * W, bitorder="little").astype(bool).reshape(H, W)
    off += mask_bytes
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes", off, path)
    normals = np.stack([planes["normal_x"], planes["normal_y"], planes["normal_z"]], axis=-1)
    return GeoSample(
        condition=planes["condition"],
        depth_gt=DepthMap(planes["depth"].copy(), mask),
        normals_gt=NormalMap(normals, mask.copy()),
        scene_seed=int(seed),
    )


@dataclass
class DatasetManifest:
    n: int
    H: int
    W: int
    seed: int
    split_fraction: float
    train: list[int]
    test: list[int]
    files: list[str]
    generator_version: int = GENERATOR_VERSION
    scene: dict = field(default_factory=lambda: asdict(SceneConfig()))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        d["scene"] = {k: tuple(v) if isinstance(v, list) else v for k, v in d["scene"].items()}
        return cls(**d)


def split_indices(n: int, seed: int, split_fraction: float) -> tuple[list[int], list[int]]:
    """Deterministic train/test split ranked by a per-index hash."""
    n_train = min(max(int(round(n * split_fraction)), 1), n - 1)
    key = lambda i: hashlib.sha256(f"{seed}:{i}".encode()).digest()
    order = sorted(range(n), key=key)
    return sorted(order[:n_train]), sorted(order[n_train:])


def make_dataset(out_dir, n: int, seed: int = 42, split_fraction: float = 0.75,
                 H: int = 16, W: int = 16, cfg: SceneConfig = SceneConfig()) -> DatasetManifest:
    if n < 2:
        raise DomainError("a dataset needs at least 2 samples")
    if not 0.0 < split_fraction < 1.0:
        raise DomainError("split_fraction must lie in (0, 1)")
    out = Path(out_dir)
    try:
        (out / "samples").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {out}: {e.strerror}") from e
    files = []
    for i in range(n):
        rel = f"samples/{i:06d}.gds"
        sample = gen_scene(seed ^ i, H, W, cfg)
        try:
            save_sample(sample, out / rel)
        except OSError as e:
            raise OSError(f"cannot write {out / rel}: {e.strerror}") from e
        files.append(rel)
    train, test = split_indices(n, seed, split_fraction)
    manifest = DatasetManifest(n, H, W, seed, split_fraction, train, test, files, scene=asdict(cfg))
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest


def load_manifest(root) -> DatasetManifest:
    path = Path(root) / "manifest.json"
    return DatasetManifest.from_json(path.read_text())


def load_dataset(root, split: str | None = None) -> tuple[DatasetManifest, list[GeoSample], list[int]]:
    """Load a dataset directory; ``split`` selects ``'train'``, ``'test'`` or all."""
    root = Path(root)
    man = load_manifest(root)
    idx = {"train": man.train, "test": man.test, None: list(range(man.n))}[split]
    return man, [load_sample(root / man.files[i]) for i in idx], list(idx)


def dataset_checksum(root) -> str:
    """SHA-256 over the manifest and every sample file, in index order."""
    root = Path(root)
    man = load_manifest(root)
    h = hashlib.sha256((root / "manifest.json").read_bytes())
    for rel in man.files:
        h.update((root / rel).read_bytes())
    return h.hexdigest()
