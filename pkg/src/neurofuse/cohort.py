"""Synthetic cohorts, the volume file format, and stratified fold splitting.

Every generated subject is built from the same recipe: per-ROI baseline
levels, a mean-zero two-level texture inside each ROI, and (depending on the
mode) class evidence that is visible to only one of the two views:

``easy``
    Class 1 adds a constant shift to every voxel. Both views see it.
``img_only``
    Each ROI carries an intensity ramp along its longest axis; class 1
    reflects every ROI along that axis.  Reflection permutes voxels inside
    each ROI, so ROI-level statistics are identical across classes.
``roi_only``
    Spatially distant pairs of ROIs act as carriers.  In class 1 both members
    of a pair share one texture fraction; in class 0 the partner takes a
    different level.  Each ROI's fraction is uniform over the same levels in
    both classes, and the pairs are far enough apart that no imaging
    receptive field spans both members.  Pair members sit at opposite hub
    levels, so a strong correlation edge pulls their propagated features
    toward zero, which is what a graph encoder can detect.
``complementary``
    Each subject's label is written into one randomly chosen view; the other
    view carries an unrelated bit (ROI view) or a scrambled ramp (imaging
    view), so each single view resolves only part of the cohort.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import CapacityError, FormatError, InputError, StratificationError

MODES = ("easy", "img_only", "roi_only", "complementary")

BASELINE_HALF_RANGE = 0.1
TEXTURE_AMP = 1.0
TEXTURE_FRACTIONS = (0.15, 0.38, 0.62, 0.85)
RAMP_AMP = 1.0
HUB_LEVEL = 10.0
N_PAIRS = 4
EASY_SHIFT = 1.0
# an imaging receptive field (two k=3 stride-2 convs) spans 7 voxels per axis
MIN_PAIR_GAP = 6


@dataclass
class Volume:
    """A 3D intensity array indexed ``[x, y, z]``."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or min(self.data.shape) <= 0:
            raise FormatError(f"volume must be 3D with positive dims, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise FormatError("volume contains non-finite values")

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)

    def __eq__(self, other):
        return isinstance(other, Volume) and np.array_equal(self.data, other.data)


@dataclass
class AtlasLabelMap:
    """Integer ROI labels per voxel; 0 is background, ROIs are ``1..R``."""

    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 3:
            raise FormatError(f"atlas must be 3D, got {self.labels.shape}")
        present = np.unique(self.labels[self.labels > 0])
        r = int(present.max()) if present.size else 0
        if present.size != r:
            missing = sorted(set(range(1, r + 1)) - set(present.tolist()))
            from .errors import ParcellationError
            raise ParcellationError(f"ROI ids must be contiguous from 1; missing {missing}")
        self._index = [np.flatnonzero(self.labels.ravel(order="F") == i) for i in range(1, r + 1)]

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.labels.shape)

    @property
    def n_rois(self) -> int:
        return len(self._index)

    def roi_indices(self, roi: int) -> np.ndarray:
        """Flat (x-fastest) voxel indices of ROI ``roi`` (1-based)."""
        return self._index[roi - 1]

    def roi_boxes(self) -> List[Tuple[Tuple[int, int], ...]]:
        """Bounding box ``((x0,x1),(y0,y1),(z0,z1))`` of each ROI, half-open."""
        boxes = []
        for roi in range(1, self.n_rois + 1):
            idx = np.nonzero(self.labels == roi)
            boxes.append(tuple((int(a.min()), int(a.max()) + 1) for a in idx))
        return boxes


@dataclass
class SubjectRecord:
    id: str
    volume: Volume
    label: int
    meta: Dict[str, int] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.label not in (0, 1):
            raise InputError(f"label must be 0 or 1, got {self.label}")


@dataclass
class Cohort:
    subjects: List[SubjectRecord]
    atlas: AtlasLabelMap
    mode: str = "external"
    seed: Optional[int] = None
    noise: float = 0.0

    @property
    def ids(self) -> List[str]:
        return [s.id for s in self.subjects]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.subjects], dtype=int)

    def volumes(self) -> np.ndarray:
        """Stack of all volumes, shape ``[n, X, Y, Z]``."""
        return np.stack([s.volume.data for s in self.subjects])

    def __eq__(self, other):
        if not isinstance(other, Cohort):
            return NotImplemented
        return (self.mode == other.mode and self.seed == other.seed
                and np.array_equal(self.atlas.labels, other.atlas.labels)
                and self.subjects == other.subjects)


# ---------------------------------------------------------------------------
# atlas tiling
# ---------------------------------------------------------------------------

def _capacity(ext: Sequence[int]) -> int:
    return int(np.prod([e // 2 for e in ext]))


def _split_box(lo, hi, r) -> List[Tuple[Tuple[int, ...], Tuple[int, ...]]]:
    if r == 1:
        return [(tuple(lo), tuple(hi))]
    ext = [h - l for l, h in zip(lo, hi)]
    r1, r2 = r // 2, r - r // 2
    axes = sorted(range(3), key=lambda a: (-ext[a], a))
    for ax in axes:
        length = ext[ax]
        target = length * r1 / r
        for cut in sorted(range(2, length - 1), key=lambda c: (abs(c - target), c)):
            e1 = list(ext)
            e1[ax] = cut
            e2 = list(ext)
            e2[ax] = length - cut
            if _capacity(e1) >= r1 and _capacity(e2) >= r2:
                mid_hi = list(hi)
                mid_hi[ax] = lo[ax] + cut
                mid_lo = list(lo)
                mid_lo[ax] = lo[ax] + cut
                return _split_box(lo, mid_hi, r1) + _split_box(mid_lo, hi, r2)
    raise CapacityError(f"cannot split box of extent {ext} into {r} tiles")


def tile_atlas(dims: Sequence[int], r: int) -> AtlasLabelMap:
    """Partition a volume into ``r`` rectangular ROIs by recursive bisection.

    Every tile is at least 2 voxels wide along each axis, so at most
    ``prod(d // 2)`` tiles fit.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 2:
        raise CapacityError(f"dims must be three extents >= 2, got {dims}")
    if r < 1:
        raise CapacityError(f"need at least one ROI, got r={r}")
    cap = _capacity(dims)
    if r > cap:
        raise CapacityError(f"r={r} exceeds the {cap} tiles that fit in {dims}")
    labels = np.zeros(dims, dtype=np.int64)
    for i, (lo, hi) in enumerate(_split_box((0, 0, 0), dims, r), start=1):
        labels[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = i
    return AtlasLabelMap(labels)


def _gap(a: Tuple[int, int], b: Tuple[int, int]) -> int:
    return max(b[0] - a[1], a[0] - b[1], 0)


def distant_pairs(atlas: AtlasLabelMap) -> List[Tuple[int, int]]:
    """Disjoint ROI pairs (1-based) that no imaging receptive field can span.

    Pairs are ranked by their largest per-axis gap, then by center distance,
    and picked greedily.  If no pair is separated by ``MIN_PAIR_GAP`` voxels
    the single farthest pair is returned.
    """
    boxes = atlas.roi_boxes()
    centers = [np.array([(l + h) / 2 for l, h in b]) for b in boxes]
    ranked = []
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            sep = max(_gap(boxes[i][a], boxes[j][a]) for a in range(3))
            dist = float(np.sum((centers[i] - centers[j]) ** 2))
            ranked.append((-sep, -dist, i + 1, j + 1))
    ranked.sort()
    if not ranked:
        return []
    if -ranked[0][0] < MIN_PAIR_GAP:
        return [ranked[0][2:]]
    used, pairs = set(), []
    for neg_sep, _, a, b in ranked:
        if -neg_sep < MIN_PAIR_GAP:
            break
        if a not in used and b not in used:
            pairs.append((a, b))
            used.update((a, b))
    return pairs


# ---------------------------------------------------------------------------
# subject synthesis
# ---------------------------------------------------------------------------

def _texture(n: int, rng: np.random.Generator, fraction: float) -> np.ndarray:
    # mean-zero two-level texture: m voxels high, n - m low
    m = int(np.clip(round(fraction * n), 1, n - 1))
    w = m / n
    values = np.full(n, -TEXTURE_AMP * w)
    values[:m] = TEXTURE_AMP * (1.0 - w)
    return rng.permutation(values)


def _ramp(box) -> Tuple[int, np.ndarray]:
    ext = [h - l for l, h in box]
    axis = int(np.argmax(ext))
    pos = np.arange(ext[axis]) / (ext[axis] - 1) - 0.5
    shape = [1, 1, 1]
    shape[axis] = ext[axis]
    return axis, np.broadcast_to(RAMP_AMP * pos.reshape(shape), ext).copy()


def synthesize_volume(atlas: AtlasLabelMap, mode: str, label: int, noise: float,
                      rng: np.random.Generator) -> Tuple[np.ndarray, Dict[str, int]]:
    """Render one subject's volume.

    Randomness is consumed identically for both labels, so two calls with
    equal generator states differ only in the class-dependent construction.
    """
    if mode not in MODES:
        raise InputError(f"unknown mode {mode!r}; valid modes are {', '.join(MODES)}")
    r = atlas.n_rois
    boxes = atlas.roi_boxes()
    pairs = distant_pairs(atlas)
    vol = np.zeros(atlas.dims)

    baseline = rng.uniform(-BASELINE_HALF_RANGE, BASELINE_HALF_RANGE, size=r)
    fractions = rng.choice(TEXTURE_FRACTIONS, size=r)
    partner_offsets = rng.integers(1, len(TEXTURE_FRACTIONS), size=r)
    texture_rngs = rng.spawn(r)
    scramble_rngs = rng.spawn(r)
    selector = int(rng.integers(2))      # complementary: 0 -> imaging carries label
    spare_bit = int(rng.integers(2))
    noise_field = rng.standard_normal(atlas.dims)

    meta: Dict[str, int] = {}
    roi_shared = None
    ramp_state = None   # None: no ramps, 0/1: orientation, -1: scrambled
    if mode == "img_only":
        ramp_state = label
    elif mode == "roi_only":
        roi_shared = label
    elif mode == "complementary":
        meta["selector"] = selector
        if selector == 0:
            ramp_state, roi_shared = label, spare_bit
        else:
            ramp_state, roi_shared = -1, label
        meta["b_img"] = ramp_state
        meta["b_roi"] = roi_shared

    carriers = set()
    if roi_shared is not None:
        levels = len(TEXTURE_FRACTIONS)
        for a, b in pairs[:N_PAIRS]:
            ia = TEXTURE_FRACTIONS.index(fractions[a - 1])
            # independent partners take a different level, so every level stays
            # equally likely for each ROI in both classes
            ib = ia if roi_shared else (ia + partner_offsets[b - 1]) % levels
            fractions[b - 1] = TEXTURE_FRACTIONS[ib]
            baseline[a - 1] = HUB_LEVEL
            baseline[b - 1] = -HUB_LEVEL
            carriers.update((a, b))

    for roi in range(1, r + 1):
        box = boxes[roi - 1]
        sl = tuple(slice(l, h) for l, h in box)
        ext = [h - l for l, h in box]
        n = int(np.prod(ext))
        block = baseline[roi - 1] + _texture(n, texture_rngs[roi - 1],
                                             fractions[roi - 1]).reshape(ext)
        # ramps would blur the carriers' quantile profiles, so they skip them
        if ramp_state is not None and roi not in carriers:
            axis, ramp = _ramp(box)
            block = block + ramp
            if ramp_state == 1:
                block = np.flip(block, axis=axis)
            elif ramp_state == -1:
                block = scramble_rngs[roi - 1].permutation(block.ravel()).reshape(ext)
        if mode == "easy" and label == 1:
            block = block + EASY_SHIFT
        vol[sl] = block

    vol = vol + noise * noise_field
    # keep values exactly representable in the on-disk f32 format
    return vol.astype(np.float32).astype(np.float64), meta


def generate_cohort(n: int, r: int = 16, dims: Sequence[int] = (16, 16, 16),
                    mode: str = "easy", noise: float = 0.1, seed: int = 0) -> Cohort:
    """Generate a balanced synthetic cohort; deterministic in ``seed``."""
    if mode not in MODES:
        raise InputError(f"unknown mode {mode!r}; valid modes are {', '.join(MODES)}")
    if n < 2:
        raise InputError(f"need n >= 2 subjects, got {n}")
    if r < 2:
        raise InputError(f"need r >= 2 ROIs, got {r}")
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 8:
        raise InputError(f"dims must be three extents >= 8, got {dims}")
    if not 0 <= noise < 0.5:
        raise InputError(f"noise must lie in [0, 0.5), got {noise}")
    atlas = tile_atlas(dims, r)
    ss = np.random.SeedSequence(seed)
    label_seq, subj_seq = ss.spawn(2)
    labels = np.array([i % 2 for i in range(n)])
    labels = np.random.default_rng(label_seq).permutation(labels)
    width = len(str(n - 1))
    subjects = []
    for i, child in enumerate(subj_seq.spawn(n)):
        data, meta = synthesize_volume(atlas, mode, int(labels[i]), noise,
                                       np.random.default_rng(child))
        subjects.append(SubjectRecord(f"sub-{i:0{width}d}", Volume(data), int(labels[i]), meta))
    return Cohort(subjects, atlas, mode=mode, seed=seed, noise=noise)


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

_DTYPES = {"f32": np.dtype("<f4"), "i32": np.dtype("<i4")}


def _write_array(path, arr: np.ndarray, dtype: str) -> None:
    header = {"dims": [int(d) for d in arr.shape], "dtype": dtype, "order": "x-fastest"}
    payload = np.asarray(arr).astype(_DTYPES[dtype]).ravel(order="F").tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(payload)


def _read_array(path, expect: str) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
        dims = [int(d) for d in header["dims"]]
        dtype = header["dtype"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: unparseable header ({exc})") from exc
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise FormatError(f"{path}: dims must be three positive ints, got {dims}")
    if dtype != expect:
        raise FormatError(f"{path}: expected dtype {expect}, found {dtype}")
    if header.get("order", "x-fastest") != "x-fastest":
        raise FormatError(f"{path}: unsupported order {header.get('order')}")
    dt = _DTYPES[dtype]
    payload = raw[nl + 1:]
    expected = int(np.prod(dims)) * dt.itemsize
    if len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=dt).reshape(dims, order="F")


def write_volume(path, volume: Volume) -> None:
    _write_array(path, volume.data, "f32")


def read_volume(path) -> Volume:
    return Volume(_read_array(path, "f32").astype(np.float64))


def write_atlas(path, atlas: AtlasLabelMap) -> None:
    _write_array(path, atlas.labels, "i32")


def read_atlas(path) -> AtlasLabelMap:
    return AtlasLabelMap(_read_array(path, "i32").astype(np.int64))


def save_cohort(cohort: Cohort, directory) -> Path:
    """Write ``manifest.json``, ``atlas.vol`` and one ``.vol`` per subject."""
    directory = Path(directory)
    (directory / "volumes").mkdir(parents=True, exist_ok=True)
    write_atlas(directory / "atlas.vol", cohort.atlas)
    manifest = []
    for s in cohort.subjects:
        rel = f"volumes/{s.id}.vol"
        write_volume(directory / rel, s.volume)
        manifest.append({"id": s.id, "volume_path": rel, "label": s.label})
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    with open(directory / "generator.json", "w") as fh:
        json.dump({"mode": cohort.mode, "seed": cohort.seed, "noise": cohort.noise,
                   "n": len(cohort.subjects), "r": cohort.atlas.n_rois,
                   "dims": list(cohort.atlas.dims)}, fh, indent=1)
        fh.write("\n")
    return directory


def load_cohort(directory) -> Cohort:
    directory = Path(directory)
    try:
        with open(directory / "manifest.json") as fh:
            manifest = json.load(fh)
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read cohort manifest in {directory}: {exc}") from exc
    atlas = read_atlas(directory / "atlas.vol")
    meta = {}
    if (directory / "generator.json").exists():
        with open(directory / "generator.json") as fh:
            meta = json.load(fh)
    subjects = []
    for entry in manifest:
        vol = read_volume(directory / entry["volume_path"])
        if vol.dims != atlas.dims:
            raise FormatError(f"{entry['id']}: volume dims {vol.dims} != atlas {atlas.dims}")
        subjects.append(SubjectRecord(str(entry["id"]), vol, int(entry["label"])))
    return Cohort(subjects, atlas, mode=meta.get("mode", "external"),
                  seed=meta.get("seed"), noise=meta.get("noise", 0.0))


# ---------------------------------------------------------------------------
# stratified folds
# ---------------------------------------------------------------------------

def stratified_split(ids: Sequence[str], labels: Sequence[int], k: int,
                     seed: int, strict: bool = True) -> List[Tuple[List[str], List[str]]]:
    """Shuffle each class with ``seed`` and deal round-robin into ``k`` folds.

    Dealing continues from where the previous class stopped, which keeps
    total fold sizes within one of each other as well as per-class counts.
    With ``strict=False`` a class smaller than ``k`` is still dealt (some
    folds get none of it); only fewer than ``k`` subjects overall is an error.
    """
    if k < 2:
        raise StratificationError(f"need k >= 2 folds, got {k}")
    ids = list(ids)
    labels = np.asarray(labels)
    if len(ids) != len(labels):
        raise InputError("ids and labels differ in length")
    if len(ids) < k:
        raise StratificationError(f"{len(ids)} subjects cannot fill k={k} folds")
    rng = np.random.default_rng(seed)
    assign = {}
    slot = 0
    for cls in sorted(set(labels.tolist())):
        members = [i for i, y in zip(ids, labels) if y == cls]
        if strict and len(members) < k:
            raise StratificationError(f"class {cls} has {len(members)} members, fewer than k={k}")
        for sid in rng.permutation(members):
            assign[str(sid)] = slot % k
            slot += 1
    folds = []
    for f in range(k):
        test = [i for i in ids if assign[i] == f]
        train = [i for i in ids if assign[i] != f]
        folds.append((train, test))
    return folds


def stratified_folds(cohort: Cohort, k: int = 5, seed: int = 0):
    """``k`` (train-ids, test-ids) pairs that partition the cohort."""
    return stratified_split(cohort.ids, cohort.labels, k, seed)
