"""Synthetic table/chair dataset with templated descriptions and hashed text embeddings.

Voxel grids are float32 arrays [4, D, H, W]: channels 0-2 are RGB, channel 3 is
occupancy. Axis H (index 2) points up. Empty voxels are all zero.
"""
from __future__ import annotations

import hashlib
import io
import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import TensorFormatError, read_tensor, write_tensor

EMBED_DIM = 128
OCCUPANCY = 3
CATEGORIES = ("table", "chair")

PALETTE = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.2, 0.7, 0.25),
    "blue": (0.15, 0.3, 0.85),
    "yellow": (0.9, 0.8, 0.2),
    "purple": (0.55, 0.25, 0.7),
    "brown": (0.5, 0.32, 0.15),
}

# discrete style levels, as fractions of the grid side
LEG_LEVELS = {"short": 0.25, "medium": 0.375, "tall": 0.5}
TOP_LEVELS = {"thin": 0.0625, "thick": 0.125}
BACK_LEVELS = {"low": 0.25, "high": 0.375}

DATASET_MAGIC = b"VFD1"


@dataclass(frozen=True)
class StyleParams:
    leg_height: float
    top_thickness: float
    back_height: float
    color_rgb: tuple[float, float, float]

    def validate(self) -> None:
        if not 0.125 <= self.leg_height <= 0.5:
            raise ValueError(f"leg_height {self.leg_height} outside [0.125, 0.5]")
        if not 0.0625 <= self.top_thickness <= 0.25:
            raise ValueError(f"top_thickness {self.top_thickness} outside [0.0625, 0.25]")
        if not 0.0 <= self.back_height <= 0.5:
            raise ValueError(f"back_height {self.back_height} outside [0, 0.5]")
        if self.leg_height + self.top_thickness + self.back_height > 1.0 + 1e-9:
            raise ValueError("leg_height + top_thickness + back_height exceeds the grid")
        if len(self.color_rgb) != 3 or not all(0.0 <= c <= 1.0 for c in self.color_rgb):
            raise ValueError(f"color_rgb {self.color_rgb} must be three values in [0, 1]")


@dataclass(frozen=True)
class Sample:
    id: str
    category: str
    text: str
    embedding: np.ndarray
    low: np.ndarray
    high: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (self.id == other.id and self.category == other.category and self.text == other.text
                and np.array_equal(self.embedding, other.embedding)
                and np.array_equal(self.low, other.low) and np.array_equal(self.high, other.high))

    __hash__ = None

    @property
    def color(self) -> str:
        return parse_description(self.text)[1]


@dataclass
class DatasetSplit:
    train: list[str]
    validation: list[str]
    test: list[str]


@dataclass
class Dataset:
    samples: list[Sample]
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self._index = {s.id: i for i, s in enumerate(self.samples)}
        if len(self._index) != len(self.samples):
            raise ValueError("duplicate sample ids")

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, key) -> Sample:
        if isinstance(key, str):
            return self.samples[self._index[key]]
        return self.samples[key]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def subset(self, ids: Sequence[str]) -> "Dataset":
        return Dataset([self[i] for i in ids])

    @property
    def low_res(self) -> int:
        return self.samples[0].low.shape[1]

    @property
    def high_res(self) -> int:
        return self.samples[0].high.shape[1]


# ---------------------------------------------------------------------------
# shapes
# ---------------------------------------------------------------------------

def block_average(grid: np.ndarray, factor: int = 2) -> np.ndarray:
    c, d, h, w = grid.shape
    if d % factor or h % factor or w % factor:
        raise ValueError(f"grid {grid.shape} not divisible by {factor}")
    blocks = grid.reshape(c, d // factor, factor, h // factor, factor, w // factor, factor)
    return blocks.mean(axis=(2, 4, 6), dtype=np.float64).astype(np.float32)


def generate_shape(category: str, style: StyleParams, high_res: int = 16, seed: int = 0):
    """Rasterize an axis-aligned table (4 legs + top) or chair (table + back).

    The seed jitters the footprint margins. Returns ``(high, low)`` where ``low``
    is the 2x block average of ``high``.
    """
    if category not in CATEGORIES:
        raise ValueError(f"unknown category {category!r}")
    if high_res < 8 or high_res % 8:
        raise ValueError("high_res must be a positive multiple of 8")
    style.validate()
    rng = np.random.default_rng(seed)
    unit = high_res // 8
    # footprint margins in [unit/2, 3unit/2], leg width = unit
    lo_x, lo_z = (int(m) for m in rng.integers(max(1, unit // 2), unit + unit // 2 + 1, size=2))
    hi_x, hi_z = high_res - lo_x, high_res - lo_z
    leg = max(1, unit)
    leg_h = max(1, round(style.leg_height * high_res))
    top_t = max(1, round(style.top_thickness * high_res))
    back_h = round(style.back_height * high_res)

    occ = np.zeros((high_res,) * 3, dtype=np.float32)  # x, y(up), z
    occ[lo_x:hi_x, leg_h:leg_h + top_t, lo_z:hi_z] = 1
    for x0 in (lo_x, hi_x - leg):
        for z0 in (lo_z, hi_z - leg):
            occ[x0:x0 + leg, :leg_h, z0:z0 + leg] = 1
    if category == "chair" and back_h > 0:
        top = leg_h + top_t
        occ[lo_x:hi_x, top:top + back_h, lo_z:lo_z + leg] = 1

    high = np.zeros((4,) + occ.shape, dtype=np.float32)
    for ch, value in enumerate(style.color_rgb):
        high[ch] = occ * np.float32(value)
    high[OCCUPANCY] = occ
    return high, block_average(high)


# ---------------------------------------------------------------------------
# text
# ---------------------------------------------------------------------------

def _nearest(levels: dict[str, float], value: float) -> str:
    return min(levels, key=lambda k: abs(levels[k] - value))


def _color_name(rgb) -> str:
    return min(PALETTE, key=lambda k: sum((a - b) ** 2 for a, b in zip(PALETTE[k], rgb)))


def describe(category: str, style: StyleParams) -> str:
    """Template description, e.g. ``"a tall thin red chair with a high back"``."""
    words = ["a", _nearest(LEG_LEVELS, style.leg_height), _nearest(TOP_LEVELS, style.top_thickness),
             _color_name(style.color_rgb), category]
    if category == "chair" and style.back_height > 0:
        words += ["with", "a", _nearest(BACK_LEVELS, style.back_height), "back"]
    return " ".join(words)


def parse_description(text: str) -> tuple[str, str, StyleParams]:
    """Inverse of :func:`describe` on the discrete grid: ``(category, color, style)``."""
    tokens = text.split()
    if len(tokens) < 5 or tokens[0] != "a":
        raise ValueError(f"not a generated description: {text!r}")
    leg, top, color, category = tokens[1:5]
    back = 0.0
    if len(tokens) == 9 and tokens[5:7] == ["with", "a"] and tokens[8] == "back":
        back = BACK_LEVELS[tokens[7]]
    elif len(tokens) != 5:
        raise ValueError(f"not a generated description: {text!r}")
    style = StyleParams(LEG_LEVELS[leg], TOP_LEVELS[top], back, PALETTE[color])
    return category, color, style


def style_grid() -> list[tuple[str, StyleParams]]:
    """Every discrete (category, style) combination."""
    out = []
    for leg, top, color in itertools.product(LEG_LEVELS, TOP_LEVELS, PALETTE):
        out.append(("table", StyleParams(LEG_LEVELS[leg], TOP_LEVELS[top], 0.0, PALETTE[color])))
        for back in BACK_LEVELS:
            out.append(("chair", StyleParams(LEG_LEVELS[leg], TOP_LEVELS[top], BACK_LEVELS[back],
                                             PALETTE[color])))
    return out


_TOKEN_GROUPS = (
    (frozenset(CATEGORIES), 0, 16, 2.0),
    (frozenset(PALETTE), 16, 48, 1.5),
    (frozenset(LEG_LEVELS) | frozenset(TOP_LEVELS) | frozenset(BACK_LEVELS), 48, 96, 1.0),
)
_OTHER = (96, 128, 0.5)


def _bucket(token: str, lo: int, hi: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return lo + int.from_bytes(digest, "little") % (hi - lo)


def _vocab_slots() -> dict[str, tuple[int, float]]:
    # known words never share a slot: hash, then probe linearly within the range
    slots: dict[str, tuple[int, float]] = {}
    for vocab, lo, hi, weight in _TOKEN_GROUPS:
        taken: set[int] = set()
        for tok in sorted(vocab):
            i = _bucket(tok, lo, hi)
            while i in taken:
                i = lo + (i - lo + 1) % (hi - lo)
            taken.add(i)
            slots[tok] = (i, weight)
    return slots


_VOCAB_SLOTS = _vocab_slots()


def embed_text(text: str) -> np.ndarray:
    """Deterministic unit-norm 128-d bag-of-tokens embedding via feature hashing.

    Category, color and size words hash into their own index ranges with larger
    weights; any other token shares the last range.
    """
    tokens = text.lower().split()
    if not tokens:
        raise ValueError("cannot embed empty text")
    vec = np.zeros(EMBED_DIM, dtype=np.float64)
    for tok in tokens:
        if tok in _VOCAB_SLOTS:
            index, weight = _VOCAB_SLOTS[tok]
        else:
            lo, hi, weight = _OTHER
            index = _bucket(tok, lo, hi)
        vec[index] += weight
    return (vec / np.linalg.norm(vec)).astype(np.float32)


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------

def make_dataset(count: int, high_res: int = 16, seed: int = 0) -> Dataset:
    """``count`` samples drawn from the style grid, alternating tables and chairs."""
    if count < 2:
        raise ValueError("need at least 2 samples")
    rng = np.random.default_rng(seed)
    grid = style_grid()
    by_cat = {c: [g for g in grid if g[0] == c] for c in CATEGORIES}
    samples = []
    for i in range(count):
        category = CATEGORIES[i % 2]
        _, style = by_cat[category][int(rng.integers(len(by_cat[category])))]
        shape_seed = int(rng.integers(2**31))
        high, low = generate_shape(category, style, high_res, shape_seed)
        text = describe(category, style)
        samples.append(Sample(f"s{i:05d}", category, text, embed_text(text), low, high))
    return Dataset(samples)


def split_dataset(ids: Sequence[str], seed: int = 0) -> DatasetSplit:
    """Random 80/10/10 partition of ``ids``."""
    ids = list(ids)
    n = len(ids)
    if n < 10:
        raise ValueError(f"need at least 10 samples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_val = round(0.1 * n)
    n_test = round(0.1 * n)
    n_train = n - n_val - n_test
    pick = [ids[i] for i in order]
    return DatasetSplit(pick[:n_train], pick[n_train:n_train + n_val], pick[n_train + n_val:])


@dataclass
class BatchTriple:
    """Matched (t, s) pairs, mismatched (t, s) pairs, and embeddings for the fake term.

    ``s`` arrays are at the resolution requested from :func:`sample_batch`; both
    resolutions of the matched voxels are kept since StageII needs them.
    """
    matched_t: np.ndarray
    matched_s: np.ndarray
    matched_low: np.ndarray
    mismatched_t: np.ndarray
    mismatched_s: np.ndarray
    embeddings: np.ndarray
    matched_ids: list[str]
    mismatched_ids: list[tuple[str, str]]

    def __len__(self) -> int:
        return len(self.matched_ids)


def is_mismatch(a: Sample, b: Sample) -> bool:
    """True when b's voxels do not depict a's text: category or color differs."""
    return a.category != b.category or a.color != b.color


def sample_batch(train: Dataset, batch_size: int, seed: int, step: int,
                 resolution: str = "low") -> BatchTriple:
    """Batch composition is a pure function of ``(seed, step)``."""
    if len(train) < 2:
        raise ValueError("training set needs at least 2 samples")
    if resolution not in ("low", "high"):
        raise ValueError("resolution must be 'low' or 'high'")
    rng = np.random.default_rng([seed, step, 0x5EED])
    n = len(train)
    colors = [s.color for s in train.samples]
    matched = rng.integers(n, size=batch_size)
    mis_pairs = []
    for i in matched:
        a = train[int(i)]
        cands = [j for j in range(n) if train[j].category != a.category or colors[j] != colors[int(i)]]
        if not cands:
            raise ValueError("cannot form a mismatched pair: every sample has the same category and color")
        mis_pairs.append((int(i), cands[int(rng.integers(len(cands)))]))

    def vox(idx, res):
        return np.stack([getattr(train[j], res) for j in idx])

    t = np.stack([train[int(i)].embedding for i in matched])
    return BatchTriple(
        matched_t=t,
        matched_s=vox([int(i) for i in matched], resolution),
        matched_low=vox([int(i) for i in matched], "low"),
        mismatched_t=np.stack([train[i].embedding for i, _ in mis_pairs]),
        mismatched_s=vox([j for _, j in mis_pairs], resolution),
        embeddings=t,
        matched_ids=[train[int(i)].id for i in matched],
        mismatched_ids=[(train[i].id, train[j].id) for i, j in mis_pairs],
    )


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

def _write_str(fh, s: str) -> None:
    raw = s.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TensorFormatError(f"truncated dataset file: wanted {n} bytes, got {len(buf)}")
    return buf


def _read_str(fh) -> str:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    return _read_exact(fh, n).decode("utf-8")


def dataset_bytes(dataset: Dataset) -> bytes:
    fh = io.BytesIO()
    fh.write(DATASET_MAGIC)
    fh.write(struct.pack("<I", len(dataset)))
    for s in dataset.samples:
        _write_str(fh, s.id)
        fh.write(struct.pack("<B", CATEGORIES.index(s.category)))
        _write_str(fh, s.text)
        write_tensor(fh, s.embedding)
        write_tensor(fh, s.low)
        write_tensor(fh, s.high)
    return fh.getvalue()


def save_dataset(dataset: Dataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(dataset))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DATASET_MAGIC:
            raise TensorFormatError(f"{path}: bad dataset magic {magic!r}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        samples = []
        for _ in range(count):
            sid = _read_str(fh)
            (cat,) = struct.unpack("<B", _read_exact(fh, 1))
            if cat >= len(CATEGORIES):
                raise TensorFormatError(f"{path}: bad category byte {cat}")
            text = _read_str(fh)
            emb, low, high = read_tensor(fh), read_tensor(fh), read_tensor(fh)
            if emb.shape != (EMBED_DIM,) or low.ndim != 4 or high.ndim != 4 or low.shape[0] != 4:
                raise TensorFormatError(f"{path}: sample {sid} has malformed tensors")
            if low.min() < 0 or low.max() > 1 or high.min() < 0 or high.max() > 1:
                raise TensorFormatError(f"{path}: sample {sid} voxel values outside [0, 1]")
            samples.append(Sample(sid, CATEGORIES[cat], text, emb, low, high))
        if fh.read(1):
            raise TensorFormatError(f"{path}: trailing bytes")
    return Dataset(samples)
