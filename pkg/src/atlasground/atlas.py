"""Labeled voxel atlas, organ registry, synthetic generation and atlas files.

Voxel coordinates are integer grid indices ``(x, y, z)`` into ``labels``;
label 0 is background. An atlas on disk is a directory holding ``meta.json``
and ``labels.raw`` (little-endian uint16, x varies fastest).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

LABEL_DTYPE = np.dtype("<u2")
META_FILE = "meta.json"
LABELS_FILE = "labels.raw"


class AtlasError(ValueError):
    """Raised for invalid atlas construction or manipulation."""


def _norm_term(term: str) -> str:
    return " ".join(term.lower().split())


@dataclass(frozen=True, eq=False)
class Organ:
    id: int
    canonical_name: str
    synonyms: tuple[str, ...]
    functional_group: str
    voxels: np.ndarray  # (K, 3) int64, read-only

    def __post_init__(self) -> None:
        if self.id < 1:
            raise AtlasError(f"organ id must be >= 1, got {self.id}")
        terms = self.terms
        if any(not t or t != _norm_term(t) for t in terms):
            raise AtlasError(f"organ {self.id}: terms must be nonempty and lowercase-normalized: {terms}")
        if len(set(terms)) != len(terms):
            raise AtlasError(f"organ {self.id}: duplicate terms {terms}")
        if self.voxels.ndim != 2 or self.voxels.shape[1] != 3 or len(self.voxels) == 0:
            raise AtlasError(f"organ {self.id} ({self.canonical_name}) has no voxels")

    @property
    def terms(self) -> tuple[str, ...]:
        return (self.canonical_name, *self.synonyms)

    @property
    def n_voxels(self) -> int:
        return len(self.voxels)

    def mean_point(self) -> np.ndarray:
        """Arithmetic mean of the voxel coordinates."""
        return self.voxels.mean(axis=0)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Organ):
            return NotImplemented
        return (
            self.id == other.id
            and self.canonical_name == other.canonical_name
            and self.synonyms == other.synonyms
            and self.functional_group == other.functional_group
            and np.array_equal(self.voxels, other.voxels)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class OrganRegistry:
    organs: dict[int, Organ]
    groups: dict[str, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        groups: dict[str, list[int]] = {}
        for oid in sorted(self.organs):
            organ = self.organs[oid]
            if organ.id != oid:
                raise AtlasError(f"registry key {oid} does not match organ id {organ.id}")
            groups.setdefault(organ.functional_group, []).append(oid)
        computed = {g: tuple(ids) for g, ids in sorted(groups.items())}
        if self.groups and {g: tuple(v) for g, v in self.groups.items()} != computed:
            raise AtlasError("groups do not partition the organ ids by functional_group")
        object.__setattr__(self, "groups", computed)
        seen: dict[str, int] = {}
        for oid in sorted(self.organs):
            for term in self.organs[oid].terms:
                if term in seen:
                    raise AtlasError(f"term {term!r} registered for organs {seen[term]} and {oid}")
                seen[term] = oid

    @property
    def ids(self) -> list[int]:
        return sorted(self.organs)

    def __len__(self) -> int:
        return len(self.organs)

    def __getitem__(self, oid: int) -> Organ:
        try:
            return self.organs[oid]
        except KeyError:
            raise KeyError(f"unknown organ id {oid}") from None

    def __contains__(self, oid: object) -> bool:
        return oid in self.organs

    def glossary(self) -> dict[str, int]:
        """Map every canonical name and synonym to its organ id."""
        return {t: o.id for o in self.organs.values() for t in o.terms}

    def by_name(self, name: str) -> Organ:
        oid = self.glossary().get(_norm_term(name))
        if oid is None:
            raise KeyError(f"no organ named {name!r}")
        return self.organs[oid]

    def group_of(self, oid: int) -> tuple[int, ...]:
        return self.groups[self[oid].functional_group]


class Atlas:
    """Immutable labeled volume plus its organ registry."""

    __slots__ = ("dims", "resolution_mm", "labels", "registry", "_cache")

    def __init__(self, labels: np.ndarray, resolution_mm: float, registry: OrganRegistry):
        labels = np.array(labels, dtype=LABEL_DTYPE, copy=True)
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise AtlasError(f"labels must be a nonempty 3D array, got shape {labels.shape}")
        if not resolution_mm > 0:
            raise AtlasError(f"resolution_mm must be positive, got {resolution_mm}")
        by_label = _voxels_by_label(labels)
        missing = set(by_label) - set(registry.organs)
        if missing:
            raise AtlasError(f"labels {sorted(missing)} not in registry")
        for oid, organ in registry.organs.items():
            if oid not in by_label or not np.array_equal(by_label[oid], organ.voxels):
                raise AtlasError(f"organ {oid} voxel list does not match its labels")
        labels.setflags(write=False)
        self.dims: tuple[int, int, int] = tuple(int(d) for d in labels.shape)  # type: ignore[assignment]
        self.resolution_mm = float(resolution_mm)
        self.labels = labels
        self.registry = registry
        self._cache: dict = {}

    @classmethod
    def from_labels(
        cls,
        labels: np.ndarray,
        resolution_mm: float,
        names: dict[int, tuple[str, Sequence[str], str]],
    ) -> "Atlas":
        """Build an atlas from a label volume and ``{id: (name, synonyms, group)}``."""
        voxels = _voxels_by_label(labels)
        organs = {}
        for oid, (name, synonyms, group) in names.items():
            if oid not in voxels:
                raise AtlasError(f"organ {oid} ({name}) has zero voxels")
            organs[oid] = Organ(oid, name, tuple(synonyms), group, voxels[oid])
        return cls(labels, resolution_mm, OrganRegistry(organs))

    def __repr__(self) -> str:
        return f"Atlas(dims={self.dims}, resolution_mm={self.resolution_mm}, organs={len(self.registry)})"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Atlas):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.resolution_mm == other.resolution_mm
            and np.array_equal(self.labels, other.labels)
            and self.registry == other.registry
        )

    __hash__ = None  # type: ignore[assignment]

    def organ(self, oid: int) -> Organ:
        return self.registry[oid]

    def label_at(self, voxel: Sequence[int]) -> int:
        x, y, z = (int(v) for v in voxel)
        return int(self.labels[x, y, z])

    def cached(self, key, factory):
        """Memoize derived read-only structures (spatial indices, hulls)."""
        if key not in self._cache:
            self._cache[key] = factory()
        return self._cache[key]


def _voxels_by_label(labels: np.ndarray) -> dict[int, np.ndarray]:
    coords = np.argwhere(labels != 0)
    if len(coords) == 0:
        return {}
    vals = labels[tuple(coords.T)]
    # argwhere is C-ordered; a stable sort by label keeps that order within each organ
    order = np.argsort(vals, kind="stable")
    coords, vals = coords[order], vals[order]
    cuts = np.flatnonzero(np.diff(vals)) + 1
    out = {}
    for chunk, lab in zip(np.split(coords, cuts), vals[np.r_[0, cuts]]):
        chunk = np.ascontiguousarray(chunk, dtype=np.int64)
        chunk.setflags(write=False)
        out[int(lab)] = chunk
    return out


# --- synthetic generation ---------------------------------------------------


@dataclass(frozen=True)
class ShapeSpec:
    """A primitive: ``box`` (corner, size), ``ball`` (center, radius) or
    ``shell`` (center, radius, thickness; interior left as background)."""

    kind: str
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 0.0
    thickness: float = 1.0
    corner: tuple[int, int, int] = (0, 0, 0)
    size: tuple[int, int, int] = (1, 1, 1)

    def __post_init__(self) -> None:
        if self.kind not in ("box", "ball", "shell"):
            raise AtlasError(f"unknown shape kind {self.kind!r}")
        if self.kind == "box" and min(self.size) < 1:
            raise AtlasError(f"box size must be positive, got {self.size}")
        if self.kind in ("ball", "shell") and self.radius < 0:
            raise AtlasError("radius must be nonnegative")
        if self.kind == "shell" and not 0 < self.thickness <= self.radius:
            raise AtlasError("shell thickness must be in (0, radius]")

    def shifted(self, offset: np.ndarray) -> "ShapeSpec":
        off = tuple(int(v) for v in offset)
        return ShapeSpec(
            self.kind,
            center=tuple(c + o for c, o in zip(self.center, off)),
            radius=self.radius,
            thickness=self.thickness,
            corner=tuple(c + o for c, o in zip(self.corner, off)),
            size=self.size,
        )

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == "box":
            lo = np.asarray(self.corner, dtype=float)
            return lo, lo + np.asarray(self.size) - 1
        c = np.asarray(self.center, dtype=float)
        return c - self.radius, c + self.radius

    def mask(self, dims: Sequence[int]) -> np.ndarray:
        lo, hi = self.bounds()
        if np.any(lo < 0) or np.any(hi > np.asarray(dims) - 1):
            raise AtlasError(f"{self.kind} shape with bounds {lo}..{hi} does not fit inside dims {tuple(dims)}")
        if self.kind == "box":
            m = np.zeros(dims, dtype=bool)
            (x0, y0, z0), (sx, sy, sz) = self.corner, self.size
            m[x0 : x0 + sx, y0 : y0 + sy, z0 : z0 + sz] = True
            return m
        grid = np.indices(dims, dtype=float)
        d2 = sum((g - c) ** 2 for g, c in zip(grid, self.center))
        m = d2 <= self.radius**2
        if self.kind == "shell":
            inner = self.radius - self.thickness
            m &= d2 > inner**2
        return m

    def to_dict(self) -> dict:
        if self.kind == "box":
            return {"kind": "box", "corner": list(self.corner), "size": list(self.size)}
        d = {"kind": self.kind, "center": list(self.center), "radius": self.radius}
        if self.kind == "shell":
            d["thickness"] = self.thickness
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeSpec":
        kind = d["kind"]
        if kind == "box":
            return cls("box", corner=tuple(int(v) for v in d["corner"]), size=tuple(int(v) for v in d["size"]))
        return cls(
            kind,
            center=tuple(float(v) for v in d["center"]),
            radius=float(d["radius"]),
            thickness=float(d.get("thickness", 1.0)),
        )


@dataclass(frozen=True)
class OrganSpec:
    name: str
    group: str
    shape: ShapeSpec
    synonyms: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"name": self.name, "group": self.group, "shape": self.shape.to_dict(), "synonyms": list(self.synonyms)}

    @classmethod
    def from_dict(cls, d: dict) -> "OrganSpec":
        return cls(d["name"], d["group"], ShapeSpec.from_dict(d["shape"]), tuple(d.get("synonyms", ())))


@dataclass(frozen=True)
class SyntheticAtlasSpec:
    dims: tuple[int, int, int]
    resolution_mm: float
    organs: tuple[OrganSpec, ...]
    jitter: int = 0  # max per-axis integer displacement of each shape, drawn from the seed

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "resolution_mm": self.resolution_mm,
            "jitter": self.jitter,
            "organs": [o.to_dict() for o in self.organs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticAtlasSpec":
        return cls(
            tuple(int(v) for v in d["dims"]),
            float(d["resolution_mm"]),
            tuple(OrganSpec.from_dict(o) for o in d["organs"]),
            int(d.get("jitter", 0)),
        )


def default_synonyms(name: str, extra: Iterable[str] = ()) -> tuple[str, ...]:
    name = _norm_term(name)
    out = [f"{name} organ"]
    for s in extra:
        s = _norm_term(s)
        if s != name and s not in out:
            out.append(s)
    return tuple(out)


def generate_synthetic_atlas(spec: SyntheticAtlasSpec, seed: int = 0) -> Atlas:
    """Rasterize the shape primitives of ``spec`` into a labeled atlas.

    Organs get ids 1..M in declaration order; a later organ overwrites
    voxels claimed by an earlier one.
    """
    dims = tuple(int(d) for d in spec.dims)
    if len(dims) != 3 or min(dims) < 1:
        raise AtlasError(f"dims must be 3 positive integers, got {spec.dims}")
    if len(spec.organs) < 2:
        raise AtlasError("a synthetic atlas needs at least 2 organs")
    rng = np.random.default_rng(seed)
    labels = np.zeros(dims, dtype=LABEL_DTYPE)
    names = {}
    for oid, ospec in enumerate(spec.organs, start=1):
        shape = ospec.shape
        if spec.jitter:
            shape = shape.shifted(rng.integers(-spec.jitter, spec.jitter + 1, size=3))
        labels[shape.mask(dims)] = oid
        name = _norm_term(ospec.name)
        names[oid] = (name, default_synonyms(name, ospec.synonyms), ospec.group)
    present = set(np.unique(labels).tolist())
    for oid, (name, _, _) in names.items():
        if oid not in present:
            raise AtlasError(f"organ {name!r} has zero surviving voxels")
    return Atlas.from_labels(labels, spec.resolution_mm, names)


# --- manipulation -----------------------------------------------------------


def merge_organs(atlas: Atlas, ids: Sequence[int], new_name: str) -> Atlas:
    """Replace the listed organs with one super-organ carrying the first id.

    The super-organ keeps the first organ's functional group; its synonyms are
    the merged organs' former terms. Annotation remapping is up to the caller.
    """
    ids = [int(i) for i in ids]
    if not ids:
        raise AtlasError("merge_organs needs at least one id")
    if len(set(ids)) != len(ids):
        raise AtlasError(f"duplicate ids in merge: {ids}")
    for oid in ids:
        if oid not in atlas.registry:
            raise AtlasError(f"unknown organ id {oid}")
    keep = ids[0]
    new_name = _norm_term(new_name)
    labels = np.array(atlas.labels)
    labels[np.isin(labels, ids)] = keep
    names = {}
    for oid, organ in atlas.registry.organs.items():
        if oid in ids[1:]:
            continue
        if oid == keep:
            terms = [t for i in ids for t in atlas.registry[i].terms if t != new_name]
            names[oid] = (new_name, tuple(dict.fromkeys(terms)), organ.functional_group)
        else:
            names[oid] = (organ.canonical_name, organ.synonyms, organ.functional_group)
    return Atlas.from_labels(labels, atlas.resolution_mm, names)


def sample_organ_points(organ: Organ, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` voxels uniformly with replacement, as float coordinates."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    idx = rng.integers(0, organ.n_voxels, size=n)
    return organ.voxels[idx].astype(np.float64)


def atlas_center(atlas: Atlas) -> np.ndarray:
    return (np.asarray(atlas.dims, dtype=np.float64) - 1.0) / 2.0


def random_point_in_random_organ(atlas: Atlas, rng: np.random.Generator) -> np.ndarray:
    ids = atlas.registry.ids
    if not ids:
        raise AtlasError("atlas has no organs")
    organ = atlas.registry[ids[int(rng.integers(len(ids)))]]
    return organ.voxels[int(rng.integers(organ.n_voxels))].astype(np.float64)


# --- files ------------------------------------------------------------------


def atlas_meta(atlas: Atlas) -> dict:
    return {
        "format": "atlasground-atlas/1",
        "dims": list(atlas.dims),
        "resolution_mm": atlas.resolution_mm,
        "organs": [
            {
                "id": o.id,
                "canonical_name": o.canonical_name,
                "synonyms": list(o.synonyms),
                "functional_group": o.functional_group,
            }
            for o in (atlas.registry[i] for i in atlas.registry.ids)
        ],
        "groups": {g: list(ids) for g, ids in atlas.registry.groups.items()},
    }


def save_atlas(atlas: Atlas, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / META_FILE).write_text(json.dumps(atlas_meta(atlas), indent=2, sort_keys=True) + "\n")
    (directory / LABELS_FILE).write_bytes(atlas.labels.astype(LABEL_DTYPE).tobytes(order="F"))
    return directory


def load_atlas(directory: str | Path) -> Atlas:
    directory = Path(directory)
    try:
        meta = json.loads((directory / META_FILE).read_text())
        raw = (directory / LABELS_FILE).read_bytes()
    except FileNotFoundError as exc:
        raise AtlasError(f"not an atlas directory: {directory} ({exc.filename} missing)") from None
    dims = tuple(int(d) for d in meta["dims"])
    expected = int(np.prod(dims)) * LABEL_DTYPE.itemsize
    if len(raw) != expected:
        raise AtlasError(f"{LABELS_FILE}: expected {expected} bytes for dims {dims}, got {len(raw)}")
    labels = np.frombuffer(raw, dtype=LABEL_DTYPE).reshape(dims, order="F")
    names = {
        int(o["id"]): (o["canonical_name"], tuple(o["synonyms"]), o["functional_group"]) for o in meta["organs"]
    }
    atlas = Atlas.from_labels(labels, float(meta["resolution_mm"]), names)
    groups = {g: tuple(v) for g, v in meta.get("groups", {}).items()}
    if groups and groups != dict(atlas.registry.groups):
        raise AtlasError("meta groups disagree with organ functional groups")
    return atlas


def benchmark_atlas_spec() -> SyntheticAtlasSpec:
    """The shipped 40^3 benchmark layout: 4 organs in 2 functional groups.

    The thoracic pair sits in the upper slab, the abdominal pair in the lower
    slab, and organs of one group are closer to each other than to any organ
    of the other group. The volume center lies in the gap between the slabs,
    outside both group hulls.
    """
    return SyntheticAtlasSpec(
        dims=(40, 40, 40),
        resolution_mm=4.0,
        organs=(
            OrganSpec("lung", "thoracic", ShapeSpec("box", corner=(4, 8, 26), size=(12, 24, 12)), ("pulmonary",)),
            OrganSpec("heart", "thoracic", ShapeSpec("ball", center=(22.0, 18.0, 31.0), radius=6.0), ("cardiac",)),
            OrganSpec("liver", "abdominal", ShapeSpec("box", corner=(4, 6, 1), size=(12, 16, 11)), ("hepatic",)),
            OrganSpec(
                "stomach",
                "abdominal",
                ShapeSpec("shell", center=(22.0, 24.0, 7.0), radius=6.0, thickness=2.0),
                ("gastric",),
            ),
        ),
    )
