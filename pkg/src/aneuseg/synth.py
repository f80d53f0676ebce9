"""Procedural vessel trees with aneurysm-like bulges, plus ground truth.

Scenes are unions of capsule segments (the vessel tree) and bulge primitives
(saccular spheres or fusiform ellipsoids) combined through a polynomial
smooth-min SDF, then meshed by marching cubes.  Each mesh vertex is labeled
by its nearest primitive, which stands in for expert annotation: a vertex is
an aneurysm point iff a bulge is closer than every tube segment.

Bulge diameters follow a truncated normal (mean 7.49 mm, sd 2.72 mm, range
3.48 to 18.66 mm) so synthetic lesions match the size regime of real
saccular aneurysms on principal brain arteries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import truncnorm
from skimage.measure import marching_cubes

from . import normals as _normals
from .surface import ANEURYSM, LabelMap, SurfaceModel

SMOOTH_BLEND_MM = 0.5
DEFAULT_RESOLUTION_MM = 0.4

TUBE_RADIUS_RANGE = (1.0, 3.0)
BULGE_DIAMETER_MEAN = 7.49
BULGE_DIAMETER_SD = 2.72
BULGE_DIAMETER_RANGE = (3.48, 18.66)


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class Tube:
    """Capsule segment: endpoints in mm plus wall radius."""
    p0: np.ndarray
    p1: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "p0", np.asarray(self.p0, dtype=np.float64).reshape(3))
        object.__setattr__(self, "p1", np.asarray(self.p1, dtype=np.float64).reshape(3))
        object.__setattr__(self, "radius", float(self.radius))


@dataclass(frozen=True)
class Bulge:
    """Saccular sphere or fusiform ellipsoid attached to one tube segment.

    ``radii`` are half-axes in the local frame (along ``axis``, then the two
    perpendicular directions); a saccular bulge has three equal radii.
    """
    kind: str
    center: np.ndarray
    radii: np.ndarray
    axis: np.ndarray
    segment: int

    def __post_init__(self):
        if self.kind not in ("saccular", "fusiform"):
            raise SceneError(f"unknown bulge kind {self.kind!r}")
        center = np.asarray(self.center, dtype=np.float64).reshape(3)
        radii = np.asarray(self.radii, dtype=np.float64).reshape(3)
        axis = np.asarray(self.axis, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(axis)
        if norm < 1e-12:
            raise SceneError("bulge axis must be nonzero")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "radii", radii)
        object.__setattr__(self, "axis", axis / norm)
        object.__setattr__(self, "segment", int(self.segment))

    @property
    def diameter(self) -> float:
        return 2.0 * float(self.radii.max())


@dataclass
class VesselScene:
    tubes: list
    bulges: list
    seed: int = 0

    def __post_init__(self):
        if not self.tubes:
            raise SceneError("scene needs at least one tube segment")
        for t in self.tubes:
            if not (TUBE_RADIUS_RANGE[0] - 1e-9 <= t.radius <= TUBE_RADIUS_RANGE[1] + 1e-9):
                raise SceneError(f"tube radius {t.radius} outside {TUBE_RADIUS_RANGE}")
        lo, hi = BULGE_DIAMETER_RANGE
        for b in self.bulges:
            if not (lo - 0.1 <= b.diameter <= hi + 0.1):
                raise SceneError(f"bulge diameter {b.diameter:.2f} outside [{lo}, {hi}]")
            if not (0 <= b.segment < len(self.tubes)):
                raise SceneError("bulge attached to missing segment")
            t = self.tubes[b.segment]
            gap = _segment_distance(b.center, t.p0, t.p1)
            if gap > t.radius + b.radii.max() + 1e-9:
                raise SceneError("bulge center detached from its segment")

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.full(3, np.inf)
        hi = np.full(3, -np.inf)
        for t in self.tubes:
            lo = np.minimum(lo, np.minimum(t.p0, t.p1) - t.radius)
            hi = np.maximum(hi, np.maximum(t.p0, t.p1) + t.radius)
        for b in self.bulges:
            r = b.radii.max()
            lo = np.minimum(lo, b.center - r)
            hi = np.maximum(hi, b.center + r)
        return lo, hi


# ---------------------------------------------------------------------------
# Signed distance evaluation
# ---------------------------------------------------------------------------

def _segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    ba = b - a
    denom = float(ba @ ba)
    if denom < 1e-18:
        return float(np.linalg.norm(p - a))
    h = np.clip((p - a) @ ba / denom, 0.0, 1.0)
    return float(np.linalg.norm(p - a - h * ba))


def capsule_sdf(points: np.ndarray, tube: Tube) -> np.ndarray:
    pa = points - tube.p0
    ba = tube.p1 - tube.p0
    denom = float(ba @ ba)
    if denom < 1e-18:
        return np.linalg.norm(pa, axis=1) - tube.radius
    h = np.clip(pa @ ba / denom, 0.0, 1.0)
    return np.linalg.norm(pa - h[:, None] * ba, axis=1) - tube.radius


def _orthobasis(axis: np.ndarray) -> np.ndarray:
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    v = np.cross(axis, helper)
    v /= np.linalg.norm(v)
    w = np.cross(axis, v)
    return np.stack([axis, v, w])


def bulge_sdf(points: np.ndarray, bulge: Bulge) -> np.ndarray:
    if bulge.kind == "saccular":
        return np.linalg.norm(points - bulge.center, axis=1) - bulge.radii[0]
    # fusiform: standard first-order ellipsoid distance bound in local frame
    frame = _orthobasis(bulge.axis)
    q = (points - bulge.center) @ frame.T
    k0 = np.linalg.norm(q / bulge.radii, axis=1)
    k1 = np.linalg.norm(q / (bulge.radii ** 2), axis=1)
    out = np.empty(len(points))
    on_center = k1 < 1e-12
    out[on_center] = -bulge.radii.min()
    ok = ~on_center
    out[ok] = k0[ok] * (k0[ok] - 1.0) / k1[ok]
    return out


def smooth_min(a: np.ndarray, b: np.ndarray, k: float = SMOOTH_BLEND_MM) -> np.ndarray:
    h = np.clip(0.5 + 0.5 * (b - a) / k, 0.0, 1.0)
    return b + (a - b) * h - k * h * (1.0 - h)


def scene_sdf(scene: VesselScene, points: np.ndarray) -> np.ndarray:
    """Smooth-union signed distance of the whole scene."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    d = capsule_sdf(points, scene.tubes[0])
    for tube in scene.tubes[1:]:
        d = smooth_min(d, capsule_sdf(points, tube))
    for bulge in scene.bulges:
        d = smooth_min(d, bulge_sdf(points, bulge))
    return d


def nearest_primitive(scene: VesselScene, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per point: (is a bulge nearest, index of nearest bulge or -1)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    tube_d = np.min(np.stack([capsule_sdf(points, t) for t in scene.tubes]), axis=0)
    if not scene.bulges:
        return np.zeros(len(points), dtype=bool), np.full(len(points), -1, dtype=np.int64)
    bulge_stack = np.stack([bulge_sdf(points, b) for b in scene.bulges])
    bulge_idx = bulge_stack.argmin(axis=0)
    bulge_d = bulge_stack.min(axis=0)
    is_bulge = bulge_d < tube_d
    comp = np.where(is_bulge, bulge_idx, -1).astype(np.int64)
    return is_bulge, comp


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------

@dataclass
class SceneSpec:
    """Knobs for random scene generation."""
    n_branches: int = 2
    segments_per_branch: tuple = (3, 5)
    segment_length: tuple = (7.0, 13.0)
    tube_radius: tuple = (1.2, 2.6)
    n_bulges: int = 1
    bulge_mean: float = BULGE_DIAMETER_MEAN
    bulge_sd: float = BULGE_DIAMETER_SD
    bulge_range: tuple = BULGE_DIAMETER_RANGE
    fusiform_prob: float = 0.08
    extent: float = 45.0
    drift: float = 0.45  # direction wander per segment, radians-ish

    def validate(self) -> None:
        if self.n_branches < 1:
            raise SceneError("need at least one branch")
        if self.n_bulges < 0:
            raise SceneError("bulge count must be non-negative")
        if self.bulge_range[1] / 2.0 > self.extent:
            raise SceneError("bulge radius exceeds scene extent")
        if not (TUBE_RADIUS_RANGE[0] <= self.tube_radius[0] <= self.tube_radius[1] <= TUBE_RADIUS_RANGE[1]):
            raise SceneError(f"tube_radius must sit inside {TUBE_RADIUS_RANGE}")


def sample_bulge_diameters(n: int, rng: np.random.Generator,
                           mean: float = BULGE_DIAMETER_MEAN,
                           sd: float = BULGE_DIAMETER_SD,
                           lo: float = BULGE_DIAMETER_RANGE[0],
                           hi: float = BULGE_DIAMETER_RANGE[1]) -> np.ndarray:
    a, b = (lo - mean) / sd, (hi - mean) / sd
    return truncnorm.rvs(a, b, loc=mean, scale=sd, size=n, random_state=rng)


def _random_unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _grow_branch(start: np.ndarray, direction: np.ndarray, n_segments: int,
                 spec: SceneSpec, radius: float, rng: np.random.Generator) -> list:
    tubes = []
    p = start.copy()
    d = direction.copy()
    half = spec.extent / 2.0
    for _ in range(n_segments):
        length = rng.uniform(*spec.segment_length)
        q = p + d * length
        tubes.append(Tube(p0=p, p1=q, radius=radius))
        p = q
        d = d + spec.drift * _random_unit(rng) - 0.3 * np.clip(np.abs(p) / half - 0.8, 0.0, None) * np.sign(p)
        d /= np.linalg.norm(d)
    return tubes


def generate_scene(spec: SceneSpec, rng: np.random.Generator) -> VesselScene:
    """Random branching tube tree with bulges attached at wall positions.

    Deterministic given the generator state.  Bulges are kept mutually
    separated so each one forms its own surface component.
    """
    spec.validate()
    seed_tag = int(rng.integers(0, 2 ** 31 - 1))

    tubes = []
    trunk_radius = rng.uniform(*spec.tube_radius)
    trunk = _grow_branch(np.zeros(3), _random_unit(rng),
                         int(rng.integers(spec.segments_per_branch[0], spec.segments_per_branch[1] + 1)),
                         spec, trunk_radius, rng)
    tubes.extend(trunk)
    for _ in range(spec.n_branches - 1):
        host = tubes[int(rng.integers(0, len(tubes)))]
        t = rng.uniform(0.2, 0.9)
        origin = host.p0 + t * (host.p1 - host.p0)
        axis = host.p1 - host.p0
        axis /= np.linalg.norm(axis)
        side = _random_unit(rng)
        side -= (side @ axis) * axis
        nrm = np.linalg.norm(side)
        if nrm < 1e-6:
            side = _orthobasis(axis)[1]
        else:
            side /= nrm
        direction = 0.8 * side + 0.6 * axis * rng.choice([-1.0, 1.0])
        direction /= np.linalg.norm(direction)
        radius = min(host.radius, rng.uniform(*spec.tube_radius))
        n_seg = int(rng.integers(spec.segments_per_branch[0], spec.segments_per_branch[1] + 1))
        tubes.extend(_grow_branch(origin, direction, n_seg, spec, radius, rng))

    bulges = []
    diameters = sample_bulge_diameters(spec.n_bulges, rng, spec.bulge_mean, spec.bulge_sd,
                                       spec.bulge_range[0], spec.bulge_range[1])
    for d in diameters:
        placed = False
        for _ in range(64):
            seg_id = int(rng.integers(0, len(tubes)))
            tube = tubes[seg_id]
            axis = tube.p1 - tube.p0
            axis /= np.linalg.norm(axis)
            base = tube.p0 + rng.uniform(0.25, 0.75) * (tube.p1 - tube.p0)
            fusiform = (rng.uniform() < spec.fusiform_prob) and (d / 2.0 > tube.radius + 0.7)
            if fusiform:
                a_perp = min(max(0.3 * d, tube.radius + 0.7), d / 2.0)
                candidate = Bulge(kind="fusiform", center=base,
                                  radii=np.array([d / 2.0, a_perp, a_perp]),
                                  axis=axis, segment=seg_id)
            else:
                side = _random_unit(rng)
                side -= (side @ axis) * axis
                nrm = np.linalg.norm(side)
                side = _orthobasis(axis)[1] if nrm < 1e-6 else side / nrm
                center = base + side * (tube.radius + 0.45 * d / 2.0)
                candidate = Bulge(kind="saccular", center=center,
                                  radii=np.full(3, d / 2.0), axis=axis, segment=seg_id)
            min_gap = min(
                (np.linalg.norm(candidate.center - other.center) - candidate.radii.max() - other.radii.max()
                 for other in bulges), default=np.inf)
            if min_gap >= 3.0:
                bulges.append(candidate)
                placed = True
                break
        if not placed:
            raise SceneError("could not place a bulge with the required separation")
    return VesselScene(tubes=tubes, bulges=bulges, seed=seed_tag)


# ---------------------------------------------------------------------------
# Meshing
# ---------------------------------------------------------------------------

def _signed_volume(positions: np.ndarray, triangles: np.ndarray) -> float:
    a = positions[triangles[:, 0]]
    b = positions[triangles[:, 1]]
    c = positions[triangles[:, 2]]
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def mesh_scene(scene: VesselScene, resolution: float = DEFAULT_RESOLUTION_MM
               ) -> tuple[SurfaceModel, LabelMap, np.ndarray]:
    """Marching-cubes mesh of the scene SDF with per-vertex ground truth.

    Returns (model, label map, component ids); component id is the bulge
    index for aneurysm vertices and -1 elsewhere.  Triangles are oriented
    outward (positive enclosed volume).
    """
    if resolution <= 0:
        raise SceneError("resolution must be positive")
    lo, hi = scene.bounds()
    pad = 3.0 * resolution + SMOOTH_BLEND_MM
    lo = lo - pad + 0.137 * resolution  # nudge off exact zero crossings at nodes
    hi = hi + pad
    axes = [np.arange(lo[d], hi[d] + resolution, resolution) for d in range(3)]
    shape = tuple(len(a) for a in axes)

    volume = np.empty(shape, dtype=np.float32)
    gx, gy = np.meshgrid(axes[0], axes[1], indexing="ij")
    plane = np.column_stack([gx.ravel(), gy.ravel()])
    for kz, z in enumerate(axes[2]):
        pts = np.column_stack([plane, np.full(len(plane), z)])
        volume[:, :, kz] = scene_sdf(scene, pts).reshape(shape[0], shape[1]).astype(np.float32)
    if volume.min() >= 0:
        raise SceneError(f"resolution {resolution} too coarse: no interior samples")

    verts, faces, _, _ = marching_cubes(volume, level=0.0, spacing=(resolution,) * 3)
    positions = verts.astype(np.float64) + lo
    triangles = faces.astype(np.int64)
    degen = (triangles[:, 0] == triangles[:, 1]) | (triangles[:, 1] == triangles[:, 2]) \
        | (triangles[:, 0] == triangles[:, 2])
    triangles = triangles[~degen]
    if _signed_volume(positions, triangles) < 0:
        triangles = triangles[:, ::-1]

    nrm = _normals.triangle_vertex_normals(positions, triangles)
    model = SurfaceModel(positions=positions, normals=nrm, triangles=triangles)

    is_bulge, comp = nearest_primitive(scene, positions)
    labels = is_bulge.astype(np.uint8) * ANEURYSM
    gt = LabelMap(labels=labels, prob=labels.astype(np.float64),
                  coverage=np.ones(len(labels), np.int64))
    return model, gt, comp


def is_watertight(triangles: np.ndarray) -> bool:
    """Every undirected edge incident to exactly two triangles."""
    tri = np.asarray(triangles, dtype=np.int64)
    edges = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    edges.sort(axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return bool((counts == 2).all())


# ---------------------------------------------------------------------------
# Scene files and cross-validation folds
# ---------------------------------------------------------------------------

_SCENE_MAGIC = "aneuseg-scene 1"


def scene_to_text(scene: VesselScene) -> str:
    lines = [_SCENE_MAGIC, f"seed {scene.seed}"]
    for t in scene.tubes:
        coords = " ".join("%.17g" % v for v in np.concatenate([t.p0, t.p1]))
        lines.append(f"tube {coords} {'%.17g' % t.radius}")
    for b in scene.bulges:
        coords = " ".join("%.17g" % v for v in np.concatenate([b.center, b.radii, b.axis]))
        lines.append(f"bulge {b.kind} {coords} {b.segment}")
    return "\n".join(lines) + "\n"


def scene_from_text(text: str) -> VesselScene:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != _SCENE_MAGIC:
        raise SceneError("not a scene file")
    seed = 0
    tubes, bulges = [], []
    for line in lines[1:]:
        tokens = line.split()
        try:
            if tokens[0] == "seed":
                seed = int(tokens[1])
            elif tokens[0] == "tube":
                vals = [float(t) for t in tokens[1:8]]
                tubes.append(Tube(p0=vals[0:3], p1=vals[3:6], radius=vals[6]))
            elif tokens[0] == "bulge":
                vals = [float(t) for t in tokens[2:11]]
                bulges.append(Bulge(kind=tokens[1], center=vals[0:3], radii=vals[3:6],
                                    axis=vals[6:9], segment=int(tokens[11])))
            else:
                raise SceneError(f"unknown scene line {tokens[0]!r}")
        except (IndexError, ValueError) as exc:
            raise SceneError(f"malformed scene line: {line!r}") from exc
    return VesselScene(tubes=tubes, bulges=bulges, seed=seed)


def save_scene(scene: VesselScene, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(scene_to_text(scene))


def load_scene(path) -> VesselScene:
    with open(path, "r", encoding="utf-8") as fh:
        return scene_from_text(fh.read())


def five_folds(n_items: int, seed: int = 0, n_folds: int = 5) -> list[np.ndarray]:
    """Shuffle item indices and split them into ``n_folds`` near-equal folds."""
    order = np.random.default_rng(seed).permutation(n_items)
    return [np.sort(part) for part in np.array_split(order, n_folds)]
