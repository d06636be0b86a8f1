"""Procedural stick-figure shapes, reference renders and on-disk dataset layout.

Dataset layout (one directory per sample)::

    sample_000042/
        manifest.json        # version, seed, complexity, N, V
        shape.npz            # occupancy, colors, normals, render mask + depth
        front_color.png ...  # 4 views x {color, normal}, 8-bit RGB, lossless

and a top-level ``dataset.json`` listing sample directories with their split.
"""
from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from . import CONVENTION_VERSION
from .errors import ConfigurationError, CorruptFileError, EmptyShapeError, VersionError
from .geometry import VIEW_NAMES, GridSpec, build_projection_tables, canonical_views

MODALITIES = ("color", "normal")
MAX_ATTEMPTS = 10
BACKGROUND_DEPTH = 1.0


@dataclass
class ShapeSample:
    occupancy: np.ndarray  # (N, N, N) bool
    colors: np.ndarray  # (N, N, N, 3) float32 in [0, 1]
    normals: np.ndarray  # (N, N, N, 3) float32, unit on surface voxels, zero elsewhere
    seed: int
    complexity: int

    @property
    def N(self) -> int:
        return self.occupancy.shape[0]

    def surface_mask(self) -> np.ndarray:
        return surface_voxels(self.occupancy)

    def __eq__(self, other):
        if not isinstance(other, ShapeSample):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.complexity == other.complexity
            and np.array_equal(self.occupancy, other.occupancy)
            and np.array_equal(self.colors, other.colors)
            and np.array_equal(self.normals, other.normals)
        )


@dataclass
class MultiviewImageSet:
    """Four canonical views of color and normal maps (8-bit) plus mask and depth.

    ``color`` and ``normal`` are ``(4, V, V, 3)`` uint8; normals are world-space
    unit vectors encoded as ``(n + 1) / 2``.  ``depth`` is the normalized
    near-to-far entry depth in [0, 1] with background at 1.
    """

    color: np.ndarray
    normal: np.ndarray
    mask: np.ndarray
    depth: np.ndarray

    @property
    def V(self) -> int:
        return self.color.shape[1]

    @property
    def condition_image(self) -> np.ndarray:
        return self.color[0].astype(np.float32) / 255.0

    def as_float(self) -> np.ndarray:
        """``(4, 2, V, V, 3)`` float32 array in [0, 1], modality order color, normal."""
        return np.stack([self.color, self.normal], axis=1).astype(np.float32) / 255.0

    def __eq__(self, other):
        if not isinstance(other, MultiviewImageSet):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, f), getattr(other, f)) for f in ("color", "normal", "mask", "depth")
        )


# ---------------------------------------------------------------- primitives

def _sdf_sphere(p, center, radius):
    return np.linalg.norm(p - center, axis=-1) - radius


def _sdf_capsule(p, a, b, radius):
    ab = b - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[..., None] * ab), axis=-1) - radius


def _sdf_box(p, center, half):
    q = np.abs(p - center) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    return outside + np.minimum(q.max(axis=-1), 0.0)


def primitive_sdf(prim: dict, p: np.ndarray) -> np.ndarray:
    kind = prim["kind"]
    if kind == "sphere":
        return _sdf_sphere(p, prim["center"], prim["radius"])
    if kind == "capsule":
        return _sdf_capsule(p, prim["a"], prim["b"], prim["radius"])
    if kind == "box":
        return _sdf_box(p, prim["center"], prim["half"])
    raise ValueError(kind)


def _direction(elevation, forward):
    """Unit vector in the x-y plane tilted toward +z by ``forward``."""
    return np.array([np.cos(elevation) * np.cos(forward), np.sin(elevation), np.sin(forward)])


def stick_figure(rng: np.random.Generator, complexity: int, jitter: float = 0.0) -> list[dict]:
    """``complexity + 2`` primitives: trunk, head, then limbs and a held prop."""
    lo, hi = 0.08, 0.92
    cx = 0.5 + rng.uniform(-0.04, 0.04) + jitter
    cz = 0.5 + rng.uniform(-0.04, 0.04)
    lean = rng.uniform(-0.15, 0.15)
    r_trunk = rng.uniform(0.09, 0.12)
    bottom = np.array([cx, 0.40, cz])
    top = bottom + 0.24 * np.array([np.sin(lean), np.cos(lean), 0.0])
    color = lambda: np.round(rng.uniform(0.15, 0.95, 3) * 255) / 255  # noqa: E731
    prims = [
        {"kind": "capsule", "a": bottom, "b": top, "radius": r_trunk, "color": color()},
    ]
    r_head = rng.uniform(0.075, 0.1)
    prims.append(
        {"kind": "sphere", "center": top + np.array([0, r_trunk + r_head * 0.6, 0]), "radius": r_head, "color": color()}
    )
    side = [1, -1]
    limbs = []
    for s in side:  # arms: may swing across the trunk toward the viewer
        start = top + np.array([s * 0.6 * r_trunk, -0.02, 0.0])
        d = _direction(rng.uniform(-1.3, 1.1), rng.uniform(-0.3, 1.2))
        d[0] *= s
        limbs.append(("capsule", start, d, rng.uniform(0.18, 0.28)))
    for s in side:  # legs
        start = bottom + np.array([s * 0.5 * r_trunk, 0.0, 0.0])
        d = _direction(-np.pi / 2 + s * rng.uniform(0.0, 0.45), rng.uniform(-0.5, 0.5))
        d[0] = abs(d[0]) * s
        limbs.append(("capsule", start, d, rng.uniform(0.26, 0.34)))
    limbs.append(("box", None, None, None))
    for kind, start, d, length in limbs[:complexity]:
        if kind == "capsule":
            end = np.clip(start + length * d, lo, hi)
            prims.append({"kind": "capsule", "a": start, "b": end, "radius": rng.uniform(0.065, 0.08), "color": color()})
        else:
            # a box held in front of the trunk
            center = (top + bottom) / 2 + np.array([rng.uniform(-0.08, 0.08), rng.uniform(-0.05, 0.05), r_trunk + 0.04])
            prims.append({"kind": "box", "center": center, "half": rng.uniform(0.06, 0.1, 3), "color": color()})
    return prims


def voxel_centers(N: int) -> np.ndarray:
    ax = (np.arange(N) + 0.5) / N
    return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1)


def union_sdf(prims, p) -> tuple[np.ndarray, np.ndarray]:
    d = np.stack([primitive_sdf(prim, p) for prim in prims], axis=-1)
    return d.min(axis=-1), d.argmin(axis=-1)


def surface_voxels(occ: np.ndarray) -> np.ndarray:
    padded = np.pad(occ, 1, constant_values=False)
    interior = padded[1:-1, 1:-1, 1:-1].copy()
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return occ & ~interior


def is_six_connected(occ: np.ndarray) -> bool:
    _, n = ndimage.label(occ)
    return n == 1


def generate_shape(seed: int, complexity: int, grid: GridSpec) -> ShapeSample:
    """Deterministic voxelised stick figure for ``(seed, complexity, N)``."""
    if complexity not in range(1, 6):
        raise ConfigurationError(f"complexity must be in 1..5, got {complexity}")
    N = grid.N
    p = voxel_centers(N)
    for attempt in range(MAX_ATTEMPTS):
        rng = np.random.default_rng([seed, complexity, attempt])
        prims = stick_figure(rng, complexity, jitter=0.01 * attempt)
        sdf, owner = union_sdf(prims, p)
        occ = sdf < 0
        if not occ.any():
            continue
        if not is_six_connected(occ):
            if attempt < MAX_ATTEMPTS - 1:
                continue
            labels, _ = ndimage.label(occ)
            occ = labels == np.bincount(labels[occ]).argmax()
        break
    else:
        raise EmptyShapeError(f"seed {seed}: empty shape after {MAX_ATTEMPTS} attempts")
    palette = np.stack([prim["color"] for prim in prims]).astype(np.float32)
    colors = np.where(occ[..., None], palette[owner], 0.0).astype(np.float32)
    normals = _surface_normals(prims, occ, p)
    return ShapeSample(occ, colors, normals, int(seed), int(complexity))


def _surface_normals(prims, occ, p, h=1e-4) -> np.ndarray:
    surf = surface_voxels(occ)
    pts = p[surf]
    grad = np.zeros_like(pts)
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = h
        grad[:, axis] = (union_sdf(prims, pts + e)[0] - union_sdf(prims, pts - e)[0]) / (2 * h)
    # fall back to the direction of empty neighbours where the gradient vanishes
    weak = np.linalg.norm(grad, axis=1) < 1e-8
    if weak.any():
        padded = np.pad(occ, 1).astype(float)
        idx = np.argwhere(surf)[weak] + 1
        for axis in range(3):
            e = np.zeros(3, int)
            e[axis] = 1
            hi = padded[tuple((idx + e).T)]
            lo = padded[tuple((idx - e).T)]
            grad[weak, axis] = lo - hi
    grad /= np.maximum(np.linalg.norm(grad, axis=1, keepdims=True), 1e-12)
    normals = np.zeros(occ.shape + (3,), np.float32)
    normals[surf] = grad
    return normals


# ------------------------------------------------------------------ rendering

def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255).astype(np.uint8)


def render_reference_views(shape: ShapeSample, views=None, V: int | None = None) -> MultiviewImageSet:
    """Orthographic first-hit renders of the occupancy along each pixel's ray column."""
    N = shape.N
    if views is None:
        views = canonical_views(V if V is not None else 4 * N)
    views = list(views)
    V = views[0].V
    if V % N:
        raise ConfigurationError(f"render size {V} must be a multiple of grid size {N}")
    proj = build_projection_tables(GridSpec(N), views)
    occ = shape.occupancy.reshape(-1)
    colors = shape.colors.reshape(-1, 3)
    normals = shape.normals.reshape(-1, 3)
    out = {k: [] for k in ("color", "normal", "mask", "depth")}
    for k in range(len(views)):
        cols = proj.pixel_to_column[k]  # (V^2, N)
        hits = occ[cols]
        mask = hits.any(axis=1)
        first = hits.argmax(axis=1)
        vox = cols[np.arange(cols.shape[0]), first]
        color = np.where(mask[:, None], colors[vox], 0.0)
        normal = np.where(mask[:, None], (normals[vox] + 1) / 2, 0.0)
        depth = np.where(mask, first / N, BACKGROUND_DEPTH)
        out["color"].append(to_uint8(color).reshape(V, V, 3))
        out["normal"].append(to_uint8(normal).reshape(V, V, 3))
        out["mask"].append(mask.reshape(V, V))
        out["depth"].append(depth.astype(np.float32).reshape(V, V))
    return MultiviewImageSet(*(np.stack(out[k]) for k in ("color", "normal", "mask", "depth")))


# ---------------------------------------------------------------- persistence

def sample_dirname(seed: int) -> str:
    return f"sample_{seed:06d}"


def save_sample(sample: ShapeSample, renders: MultiviewImageSet, directory) -> Path:
    path = Path(directory) / sample_dirname(sample.seed)
    path.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(
        path / "shape.npz",
        occupancy=sample.occupancy,
        colors=sample.colors,
        normals=sample.normals,
        mask=renders.mask,
        depth=renders.depth,
    )
    for k, view in enumerate(VIEW_NAMES):
        for modality in MODALITIES:
            Image.fromarray(getattr(renders, modality)[k]).save(path / f"{view}_{modality}.png")
    manifest = {
        "version": CONVENTION_VERSION,
        "seed": sample.seed,
        "complexity": sample.complexity,
        "N": sample.N,
        "V": renders.V,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptFileError(f"{path}/manifest.json: {exc}") from exc
    if manifest.get("version") != CONVENTION_VERSION:
        raise VersionError(f"{path}: version {manifest.get('version')!r}, expected {CONVENTION_VERSION!r}")
    return manifest


def load_sample(path) -> tuple[ShapeSample, MultiviewImageSet]:
    path = Path(path)
    manifest = read_manifest(path)
    try:
        with np.load(path / "shape.npz") as data:
            arrays = {k: data[k] for k in ("occupancy", "colors", "normals", "mask", "depth")}
        images = {m: [] for m in MODALITIES}
        for view in VIEW_NAMES:
            for modality in MODALITIES:
                with Image.open(path / f"{view}_{modality}.png") as im:
                    images[modality].append(np.asarray(im.convert("RGB")))
    except (zipfile.BadZipFile, OSError, KeyError, ValueError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise CorruptFileError(f"{path}: {exc}") from exc
    sample = ShapeSample(
        arrays["occupancy"].astype(bool),
        arrays["colors"],
        arrays["normals"],
        manifest["seed"],
        manifest["complexity"],
    )
    if sample.N != manifest["N"]:
        raise CorruptFileError(f"{path}: grid size {sample.N} disagrees with manifest N={manifest['N']}")
    renders = MultiviewImageSet(
        np.stack(images["color"]), np.stack(images["normal"]), arrays["mask"].astype(bool), arrays["depth"]
    )
    return sample, renders


def _make_one(args):
    seed, complexity, N, V, out_dir = args
    sample = generate_shape(seed, complexity, GridSpec(N))
    renders = render_reference_views(sample, canonical_views(V))
    return str(save_sample(sample, renders, out_dir).name)


def generate_dataset(seeds, complexity, N, V, out_dir, eval_seeds=(), workers: int = 1) -> Path:
    """Write every seed's sample plus ``dataset.json``; seeds in ``eval_seeds`` form the eval split."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(int(s), complexity, N, V, out_dir) for s in seeds]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            names = list(pool.map(_make_one, jobs))
    else:
        names = [_make_one(job) for job in jobs]
    eval_seeds = {int(s) for s in eval_seeds}
    entries = [
        {"path": name, "seed": int(s), "split": "eval" if int(s) in eval_seeds else "train"}
        for name, s in zip(names, seeds)
    ]
    manifest = {"version": CONVENTION_VERSION, "N": N, "V": V, "complexity": complexity, "samples": entries}
    (out_dir / "dataset.json").write_text(json.dumps(manifest, indent=2))
    return out_dir / "dataset.json"


def load_dataset(root, split: str | None = None) -> list[tuple[ShapeSample, MultiviewImageSet]]:
    root = Path(root)
    manifest_path = root / "dataset.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != CONVENTION_VERSION:
        raise VersionError(f"{manifest_path}: version {manifest.get('version')!r}")
    return [
        load_sample(root / e["path"]) for e in manifest["samples"] if split is None or e["split"] == split
    ]
