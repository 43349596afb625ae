"""Synthetic tri-modal shapes, their on-disk format, and batching.

Every shape is an instance of a *concept* (category, color, size,
leg count). The concept drives all three modalities:

* a colored point cloud built from axis-aligned parts (slab, optional
  back rest, legs), with xyz jitter;
* M view descriptors ``R_m g(concept) + noise`` where ``g`` sums one fixed
  random basis vector per attribute value and ``R_m`` is a fixed
  orthogonal mixing matrix per view;
* five captions drawing one synonym per attribute value plus filler
  words, in shuffled order.

Within a split concepts are drawn without replacement whenever the split
is no larger than the number of concepts, so every query has a single
well-defined answer. See FORMAT.md for the byte layout.
"""

from __future__ import annotations

import itertools
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

VERSION = "TMR1"
MAGIC = VERSION.encode("ascii")
HEADER_BYTES = 8  # magic + u32 record count

_CATEGORY_WORDS = [
    "table", "desk", "chair", "stool", "bench", "cabinet", "shelf", "sofa",
    "bed", "counter", "stand", "ottoman", "dresser", "nightstand", "bar", "console",
]
_COLOR_WORDS = [
    ("red", "crimson"), ("blue", "azure"), ("green", "emerald"), ("yellow", "golden"),
    ("black", "ebony"), ("white", "ivory"), ("brown", "chocolate"), ("gray", "ashen"),
]
_SIZE_WORDS = [("small", "little"), ("large", "big"), ("medium", "midsize"), ("huge", "giant")]
_LEG_WORDS = [("three-legged", "tripod"), ("four-legged", "quadruped"), ("five-legged", "pentapod")]
_FILLERS = [
    "a", "the", "with", "and", "of", "piece", "furniture", "object",
    "thing", "model", "nice", "simple", "shape", "item", "looks", "has",
]
_PALETTE = np.array(
    [[0.85, 0.1, 0.1], [0.1, 0.2, 0.85], [0.1, 0.7, 0.2], [0.95, 0.85, 0.1],
     [0.05, 0.05, 0.05], [0.95, 0.95, 0.95], [0.45, 0.25, 0.1], [0.5, 0.5, 0.5]]
)
# width, depth, leg height of the four slab archetypes
_ASPECTS = [(0.9, 0.9, 0.5), (1.0, 0.5, 0.6), (0.6, 0.6, 0.9), (0.9, 0.4, 0.3)]
_SLAB = 0.08
_BACK = 0.5
_FLOOR = -0.9


class DatasetError(Exception):
    """Base class for dataset file problems."""


class DatasetVersionError(DatasetError):
    pass


class DatasetTruncatedError(DatasetError):
    pass


class DatasetOffsetError(DatasetError):
    pass


@dataclass(frozen=True)
class DataConfig:
    train_shapes: int = 256
    test_shapes: int = 64
    n_points: int = 256
    views: int = 6
    d_v: int = 32
    vocab: int = 64
    max_len: int = 12
    captions: int = 5
    n_categories: int = 16
    n_colors: int = 4
    n_sizes: int = 2
    n_part_counts: int = 2
    synonyms: int = 2
    point_jitter: float = 0.01
    view_noise: float = 0.05

    def __post_init__(self):
        if self.n_categories > 4 * len(_CATEGORY_WORDS):
            raise ValueError(f"at most {4 * len(_CATEGORY_WORDS)} categories supported")
        if self.n_colors > len(_PALETTE) or self.n_sizes > len(_SIZE_WORDS):
            raise ValueError("too many colors or sizes for the built-in vocabulary")
        if self.n_part_counts > len(_LEG_WORDS):
            raise ValueError("too many part counts for the built-in vocabulary")
        if self.synonyms < 1 or self.captions < 1:
            raise ValueError("need at least one synonym and one caption")
        if self.max_len < 4:
            raise ValueError("max_len must fit one token per attribute (4)")
        if self.vocab < self.attribute_tokens:
            raise ValueError(
                f"vocab={self.vocab} is smaller than the {self.attribute_tokens} attribute tokens"
            )
        if min(self.train_shapes, self.test_shapes, self.n_points, self.views, self.d_v) < 1:
            raise ValueError("shape counts, n_points, views and d_v must be positive")

    @property
    def attribute_sizes(self) -> tuple[int, int, int, int]:
        return (self.n_categories, self.n_colors, self.n_sizes, self.n_part_counts)

    @property
    def attribute_tokens(self) -> int:
        return sum(self.attribute_sizes) * self.synonyms

    @property
    def n_concepts(self) -> int:
        return int(np.prod(self.attribute_sizes))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class Concept:
    category: int
    color: int
    size_id: int
    parts: int

    def size(self, cfg: DataConfig) -> float:
        return float(np.linspace(0.6, 1.0, cfg.n_sizes)[self.size_id]) if cfg.n_sizes > 1 else 1.0

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.category, self.color, self.size_id, self.parts)


@dataclass
class ShapeRecord:
    id: int
    points: np.ndarray  # n_points x 6, xyz then rgb
    views: np.ndarray  # M x d_v
    captions: list[np.ndarray]
    concept: Concept
    size: float = 1.0


# ------------------------------------------------------------ vocabulary


def vocabulary(cfg: DataConfig) -> list[str]:
    """Token strings by id: attribute synonyms first, then fillers."""

    def syn(base: Sequence[str] | str, s: int) -> str:
        if isinstance(base, str):
            return base if s == 0 else f"{base}~{s}"
        return base[s] if s < len(base) else f"{base[0]}~{s}"

    words: list[str] = []
    for c in range(cfg.n_categories):
        base = _CATEGORY_WORDS[c % len(_CATEGORY_WORDS)]
        base = base if c < len(_CATEGORY_WORDS) else f"{base}{c // len(_CATEGORY_WORDS)}"
        words += [syn(base, s) if s else base for s in range(cfg.synonyms)]
    for table, count in ((_COLOR_WORDS, cfg.n_colors), (_SIZE_WORDS, cfg.n_sizes), (_LEG_WORDS, cfg.n_part_counts)):
        for v in range(count):
            words += [syn(table[v], s) for s in range(cfg.synonyms)]
    n_fill = cfg.vocab - len(words)
    words += [_FILLERS[i] if i < len(_FILLERS) else f"w{i}" for i in range(n_fill)]
    return words


def attribute_token_ids(cfg: DataConfig, attribute: int, value: int) -> list[int]:
    """Synonym ids of ``value`` for attribute 0..3 (category, color, size, parts)."""
    start = sum(cfg.attribute_sizes[:attribute]) * cfg.synonyms
    first = start + value * cfg.synonyms
    return list(range(first, first + cfg.synonyms))


def filler_ids(cfg: DataConfig) -> list[int]:
    return list(range(cfg.attribute_tokens, cfg.vocab))


def tokenize(text: str, vocab: Sequence[str]) -> list[int]:
    """Whitespace tokenization against the dataset vocabulary; unknown words dropped."""
    index = {w: i for i, w in enumerate(vocab)}
    return [index[w] for w in text.lower().split() if w in index]


# ------------------------------------------------------------- generation


@dataclass
class _World:
    """Everything shared by all shapes of one generated dataset."""

    slot_uvw: np.ndarray
    slot_part: np.ndarray
    point_order: np.ndarray
    bases: list[np.ndarray]
    mixing: np.ndarray  # M x d_v x d_v


def _make_world(cfg: DataConfig, rng: np.random.Generator) -> _World:
    bases = [rng.normal(0.0, 1.0 / np.sqrt(cfg.d_v), size=(k, cfg.d_v)) for k in cfg.attribute_sizes]
    mixing = np.empty((cfg.views, cfg.d_v, cfg.d_v))
    for m in range(cfg.views):
        q, r = np.linalg.qr(rng.normal(size=(cfg.d_v, cfg.d_v)))
        mixing[m] = q * np.sign(np.diag(r))
    return _World(
        slot_uvw=rng.uniform(size=(cfg.n_points, 3)),
        slot_part=rng.uniform(size=cfg.n_points),
        point_order=rng.permutation(cfg.n_points),
        bases=bases,
        mixing=mixing,
    )


def _category_geometry(c: int) -> tuple[float, float, float, bool, bool]:
    w, d, h = _ASPECTS[(c // 4) % 4]
    shrink = 1.0 - 0.1 * (c // 16)
    return w * shrink, d * shrink, h, bool(c % 2), bool((c // 2) % 2)


def build_points(concept: Concept, cfg: DataConfig, world: _World, rng=None, jitter: float | None = None) -> np.ndarray:
    """Point cloud of one concept instance; noise-free when ``jitter == 0``."""
    width, depth, leg_h, has_back, round_legs = _category_geometry(concept.category)
    size = concept.size(cfg)
    n_legs = 3 + concept.parts
    w, d, lh = width * size, depth * size, leg_h * size
    slab_lo, slab_hi = _FLOOR + lh, _FLOOR + lh + _SLAB * size
    u = world.slot_uvw
    f = world.slot_part
    xyz = np.empty((cfg.n_points, 3))

    slab = f < 0.45
    back = (f >= 0.45) & (f < 0.6) & has_back
    legs = ~(slab | back)
    xyz[slab] = np.column_stack([
        (u[slab, 0] - 0.5) * w, (u[slab, 1] - 0.5) * d, slab_lo + u[slab, 2] * (slab_hi - slab_lo)
    ])
    xyz[back] = np.column_stack([
        (u[back, 0] - 0.5) * w,
        d / 2 - u[back, 1] * _SLAB * size,
        slab_hi + u[back, 2] * _BACK * size,
    ])
    start = np.where(has_back, 0.6, 0.45)
    leg_idx = np.minimum(((f[legs] - start) / (1 - start) * n_legs).astype(int), n_legs - 1)
    angles = 2 * np.pi * leg_idx / n_legs + np.pi / 4
    cx = np.cos(angles) * (w / 2 - 0.05 * size) * np.sqrt(2) * 0.7
    cy = np.sin(angles) * (d / 2 - 0.05 * size) * np.sqrt(2) * 0.7
    half = 0.04 * size
    if round_legs:
        r = np.sqrt(u[legs, 0]) * half
        th = 2 * np.pi * u[legs, 1]
        ox, oy = r * np.cos(th), r * np.sin(th)
    else:
        ox, oy = (u[legs, 0] - 0.5) * 2 * half, (u[legs, 1] - 0.5) * 2 * half
    xyz[legs] = np.column_stack([cx + ox, cy + oy, _FLOOR + u[legs, 2] * lh])

    sigma = cfg.point_jitter if jitter is None else jitter
    if sigma > 0:
        xyz = xyz + rng.normal(0.0, sigma, size=xyz.shape)
    xyz = np.clip(xyz, -1.0, 1.0)
    rgb = np.broadcast_to(_PALETTE[concept.color], xyz.shape)
    pts = np.concatenate([xyz, rgb], axis=1)[world.point_order]
    return pts.astype(np.float32)


def view_template(concept: Concept, world: _World) -> np.ndarray:
    return sum(world.bases[a][v] for a, v in enumerate(concept.as_tuple()))


def build_views(concept: Concept, cfg: DataConfig, world: _World, rng=None, noise: float | None = None) -> np.ndarray:
    g = view_template(concept, world)
    views = world.mixing @ g
    sigma = cfg.view_noise if noise is None else noise
    if sigma > 0:
        views = views + rng.normal(0.0, sigma, size=views.shape)
    return views.astype(np.float32)


def build_caption(concept: Concept, cfg: DataConfig, rng: np.random.Generator) -> np.ndarray:
    toks = [int(rng.choice(attribute_token_ids(cfg, a, v))) for a, v in enumerate(concept.as_tuple())]
    fill = filler_ids(cfg)
    if fill:
        extra = int(rng.integers(1, min(4, cfg.max_len - 4) + 1)) if cfg.max_len > 4 else 0
        toks += [int(t) for t in rng.choice(fill, size=extra)]
    toks = [toks[i] for i in rng.permutation(len(toks))]
    return np.asarray(toks, dtype=np.uint32)


def _sample_concepts(cfg: DataConfig, count: int, rng: np.random.Generator) -> list[Concept]:
    allc = [Concept(*t) for t in itertools.product(*(range(k) for k in cfg.attribute_sizes))]
    picks: list[int] = []
    while len(picks) < count:
        picks += rng.permutation(len(allc))[: count - len(picks)].tolist()
    return [allc[i] for i in picks]


def _make_split(cfg: DataConfig, world: _World, count: int, rng: np.random.Generator) -> list[ShapeRecord]:
    out = []
    for i, concept in enumerate(_sample_concepts(cfg, count, rng)):
        out.append(ShapeRecord(
            id=i,
            points=build_points(concept, cfg, world, rng),
            views=build_views(concept, cfg, world, rng),
            captions=[build_caption(concept, cfg, rng) for _ in range(cfg.captions)],
            concept=concept,
            size=concept.size(cfg),
        ))
    return out


def synthesize(cfg: DataConfig = DataConfig(), seed: int = 0) -> dict[str, "InMemoryDataset"]:
    """Generate the train and test splits in memory."""
    world = _make_world(cfg, np.random.default_rng([seed, 0]))
    meta = {"seed": seed}
    return {
        split: InMemoryDataset(_make_split(cfg, world, n, np.random.default_rng([seed, k])), cfg, split, meta)
        for k, (split, n) in enumerate((("train", cfg.train_shapes), ("test", cfg.test_shapes)), start=1)
    }


# ------------------------------------------------------------- datasets


class ShapeDataset:
    """Common read interface; subclass and implement ``_read`` to plug in other sources."""

    def __init__(self, cfg: DataConfig, split: str, size: int, meta: dict | None = None):
        self.cfg = cfg
        self.split = split
        self._size = size
        self.meta = dict(meta or {})
        self._cache: dict[int, ShapeRecord] = {}
        self._arrays = None

    def __len__(self) -> int:
        return self._size

    def _read(self, i: int) -> ShapeRecord:
        raise NotImplementedError

    def record(self, i: int) -> ShapeRecord:
        if not 0 <= i < self._size:
            raise IndexError(f"record {i} out of range for {self._size} shapes")
        if i not in self._cache:
            self._cache[i] = self._read(i)
        return self._cache[i]

    def __iter__(self) -> Iterator[ShapeRecord]:
        return (self.record(i) for i in range(self._size))

    @property
    def vocabulary(self) -> list[str]:
        return vocabulary(self.cfg)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, list[list[np.ndarray]]]:
        """Stacked points ``(n, n_p, 6)``, views ``(n, M, d_v)`` and caption lists."""
        if self._arrays is None:
            recs = list(self)
            self._arrays = (
                np.stack([r.points for r in recs]),
                np.stack([r.views for r in recs]),
                [r.captions for r in recs],
            )
        return self._arrays


class InMemoryDataset(ShapeDataset):
    def __init__(self, records: list[ShapeRecord], cfg: DataConfig, split: str, meta: dict | None = None):
        super().__init__(cfg, split, len(records), meta)
        self._records = records

    def _read(self, i: int) -> ShapeRecord:
        return self._records[i]


# ------------------------------------------------------------- file format


def _record_fields(cfg: DataConfig) -> list[dict]:
    return [
        {"name": "id", "dtype": "<u4", "shape": [1]},
        {"name": "concept", "dtype": "<u4", "shape": [4]},
        {"name": "size", "dtype": "<f4", "shape": [1]},
        {"name": "points", "dtype": "<f4", "shape": [cfg.n_points, 6]},
        {"name": "views", "dtype": "<f4", "shape": [cfg.views, cfg.d_v]},
        {"name": "n_captions", "dtype": "<u4", "shape": [1]},
        {"name": "captions", "dtype": "<u4", "shape": ["n_captions x (length, tokens...)"]},
    ]


def encode_record(rec: ShapeRecord) -> bytes:
    parts = [
        struct.pack("<5I", rec.id, *rec.concept.as_tuple()),
        struct.pack("<f", rec.size),
        np.asarray(rec.points, dtype="<f4").tobytes(),
        np.asarray(rec.views, dtype="<f4").tobytes(),
        struct.pack("<I", len(rec.captions)),
    ]
    for cap in rec.captions:
        parts.append(struct.pack("<I", len(cap)))
        parts.append(np.asarray(cap, dtype="<u4").tobytes())
    return b"".join(parts)


def decode_record(buf: bytes, cfg: DataConfig) -> ShapeRecord:
    rid, cat, color, size_id, parts = struct.unpack_from("<5I", buf, 0)
    (size,) = struct.unpack_from("<f", buf, 20)
    pos = 24
    n_pts = cfg.n_points * 6
    points = np.frombuffer(buf, dtype="<f4", count=n_pts, offset=pos).reshape(cfg.n_points, 6)
    pos += 4 * n_pts
    n_v = cfg.views * cfg.d_v
    views = np.frombuffer(buf, dtype="<f4", count=n_v, offset=pos).reshape(cfg.views, cfg.d_v)
    pos += 4 * n_v
    (n_caps,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    caps = []
    for _ in range(n_caps):
        (length,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        caps.append(np.frombuffer(buf, dtype="<u4", count=length, offset=pos).astype(np.uint32))
        pos += 4 * length
    if pos != len(buf):
        raise DatasetTruncatedError(f"record {rid}: decoded {pos} bytes of a {len(buf)}-byte extent")
    return ShapeRecord(
        id=rid,
        points=points.astype(np.float32),
        views=views.astype(np.float32),
        captions=caps,
        concept=Concept(cat, color, size_id, parts),
        size=float(size),
    )


def write_split(ds: ShapeDataset, out_dir: Path, name: str, counts: dict, seed: int | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    blob = bytearray(MAGIC + struct.pack("<I", len(ds)))
    records = []
    for rec in ds:
        payload = encode_record(rec)
        records.append({"id": rec.id, "offset": len(blob), "length": len(payload)})
        blob += payload
    blob_path = out_dir / f"{name}.blob"
    blob_path.write_bytes(bytes(blob))
    manifest = {
        "version": VERSION,
        "split": ds.split,
        "blob": blob_path.name,
        "blob_bytes": len(blob),
        "counts": counts,
        "seed": seed,
        "config": ds.cfg.to_dict(),
        "fields": _record_fields(ds.cfg),
        "vocabulary": ds.vocabulary,
        "records": records,
    }
    path = out_dir / f"{name}.manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def generate(cfg: DataConfig, seed: int, out_dir) -> dict[str, Path]:
    """Write ``train`` and ``test`` manifest/blob pairs; returns manifest paths."""
    splits = synthesize(cfg, seed)
    counts = {"train": cfg.train_shapes, "test": cfg.test_shapes}
    return {name: write_split(ds, Path(out_dir), name, counts, seed) for name, ds in splits.items()}


class DatasetHandle(ShapeDataset):
    """Read-only view of one manifest/blob pair, decoded record by record."""

    def __init__(self, manifest_path):
        self.path = Path(manifest_path)
        try:
            manifest = json.loads(self.path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetError(f"cannot read manifest {self.path}: {exc}") from exc
        if manifest.get("version") != VERSION:
            raise DatasetVersionError(f"manifest version {manifest.get('version')!r}, expected {VERSION!r}")
        cfg = DataConfig.from_dict(manifest["config"])
        super().__init__(cfg, manifest["split"], len(manifest["records"]), {"seed": manifest.get("seed")})
        self.manifest = manifest
        self._blob = (self.path.parent / manifest["blob"]).read_bytes()
        if self._blob[:4] != MAGIC:
            raise DatasetVersionError(f"{manifest['blob']}: bad magic {self._blob[:4]!r}")
        self._check_extents()
        self._validate_sample()

    def _check_extents(self) -> None:
        size = len(self._blob)
        prev = HEADER_BYTES - 1
        for rec in self.manifest["records"]:
            off, length = rec["offset"], rec["length"]
            if off <= prev or off < HEADER_BYTES:
                raise DatasetOffsetError(f"record {rec['id']}: offset {off} not increasing")
            if off >= size:
                raise DatasetOffsetError(f"record {rec['id']}: offset {off} beyond blob of {size} bytes")
            if off + length > size:
                raise DatasetTruncatedError(
                    f"record {rec['id']} truncated: needs bytes up to {off + length}, blob has {size}"
                )
            prev = off

    def _validate_sample(self) -> None:
        n = len(self)
        step = max(1, n // max(1, n // 100))
        for i in range(0, n, step):
            validate_record(self.record(i), self.cfg)

    def _read(self, i: int) -> ShapeRecord:
        rec = self.manifest["records"][i]
        buf = self._blob[rec["offset"] : rec["offset"] + rec["length"]]
        out = decode_record(buf, self.cfg)
        if out.id != rec["id"]:
            raise DatasetOffsetError(f"record at offset {rec['offset']} has id {out.id}, manifest says {rec['id']}")
        return out


def load(manifest_path) -> DatasetHandle:
    return DatasetHandle(manifest_path)


def validate_record(rec: ShapeRecord, cfg: DataConfig) -> None:
    if rec.points.shape != (cfg.n_points, 6) or rec.views.shape != (cfg.views, cfg.d_v):
        raise DatasetError(f"record {rec.id}: bad array shapes")
    if not (np.all(np.abs(rec.points[:, :3]) <= 1.0) and np.all((rec.points[:, 3:] >= 0) & (rec.points[:, 3:] <= 1))):
        raise DatasetError(f"record {rec.id}: point values out of range")
    if not rec.captions or any(len(c) == 0 or int(c.max()) >= cfg.vocab for c in rec.captions):
        raise DatasetError(f"record {rec.id}: empty caption or token outside vocabulary")
    for a, (v, k) in enumerate(zip(rec.concept.as_tuple(), cfg.attribute_sizes)):
        if not 0 <= v < k:
            raise DatasetError(f"record {rec.id}: attribute {a} value {v} out of range")


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    ids: np.ndarray
    points: np.ndarray  # n x n_p x 6
    views: np.ndarray  # n x M x d_v
    captions: list[np.ndarray]
    caption_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __len__(self) -> int:
        return len(self.ids)


def make_batches(ds: ShapeDataset, n: int, epoch_seed: int) -> list[Batch]:
    """Shuffle shapes, pair each with one uniformly drawn caption, drop the short tail."""
    if n < 2:
        raise ValueError("batch size must be at least 2 for contrastive training")
    if len(ds) < n:
        raise ValueError(f"dataset of {len(ds)} shapes is smaller than batch size {n}")
    rng = np.random.default_rng(epoch_seed)
    order = rng.permutation(len(ds))
    points, views, captions = ds.arrays()
    choice = np.array([rng.integers(len(captions[i])) for i in range(len(ds))])
    out = []
    for b in range(len(ds) // n):
        ids = order[b * n : (b + 1) * n]
        out.append(Batch(
            ids=ids,
            points=points[ids],
            views=views[ids],
            captions=[captions[i][choice[i]] for i in ids],
            caption_index=choice[ids],
        ))
    return out
