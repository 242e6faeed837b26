"""Synthetic sub-population benchmark generator.

Datasets are mixtures of axis-aligned Gaussian blobs clipped to [0,1]^d:

* ``main`` blobs carry the bulk of each class and are kept far apart so a
  small MLP can classify them robustly,
* ``atypical_benign`` blobs are near-singletons planted away from every main
  blob (and nearest to a wrong class), learnable only by memorization,
* ``atypical_poisoning`` blobs are correctly labeled singletons placed inside
  another class's main blob region.

Every sample carries ground-truth blob annotations so estimator quality can be
measured against the planted structure.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DatasetParseError, SpecificationError

KIND_MAIN = "main"
KIND_BENIGN = "atypical_benign"
KIND_POISON = "atypical_poisoning"
_KINDS = (KIND_MAIN, KIND_BENIGN, KIND_POISON)

MAIN_SEPARATION_FACTOR = 6.0       # min l-inf gap between main blobs, in spreads
POISON_PROXIMITY_FACTOR = 2.0      # max l-inf offset of a poisoning center, in spreads


@dataclass(frozen=True)
class SubPopSpec:
    """Blueprint of one sub-population blob."""

    class_id: int
    center: tuple[float, ...]
    spread: float
    train_count: int
    test_count: int
    kind: str
    poison_target_class: Optional[int] = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise SpecificationError(f"unknown blob kind {self.kind!r}")
        if self.train_count < 0 or self.test_count < 0:
            raise SpecificationError("blob sample counts must be >= 0")
        if self.spread <= 0:
            raise SpecificationError("blob spread must be > 0")
        if self.kind == KIND_POISON:
            if self.poison_target_class is None:
                raise SpecificationError("poisoning blob needs poison_target_class")
            if self.poison_target_class == self.class_id:
                raise SpecificationError(
                    "poisoning blob must target a class other than its own")


@dataclass
class LabeledDataset:
    """Feature matrix in [0,1]^d with labels and ground-truth annotations."""

    features: np.ndarray
    labels: np.ndarray
    subpop_id: np.ndarray
    kind: np.ndarray
    split: str
    mem: Optional[np.ndarray] = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.subpop_id = np.asarray(self.subpop_id, dtype=np.int64)
        self.kind = np.asarray(self.kind)
        if self.features.ndim != 2:
            raise DatasetParseError("features must be a [n x d] matrix")
        n = self.features.shape[0]
        if not (len(self.labels) == len(self.subpop_id) == len(self.kind) == n):
            raise DatasetParseError("per-sample columns have inconsistent lengths")
        if n and (self.features.min() < 0.0 or self.features.max() > 1.0):
            raise DatasetParseError("feature values must lie in [0, 1]")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices)
        return LabeledDataset(
            features=self.features[indices],
            labels=self.labels[indices],
            subpop_id=self.subpop_id[indices],
            kind=self.kind[indices],
            split=self.split,
            mem=None if self.mem is None else self.mem[indices],
            provenance=dict(self.provenance),
        )


def validate_specs(specs: Sequence[SubPopSpec], dim: int) -> None:
    """Check placement invariants before any sampling."""
    if not specs:
        raise SpecificationError("spec list must be non-empty")
    for s in specs:
        if len(s.center) != dim:
            raise SpecificationError(
                f"blob center has {len(s.center)} coordinates, expected {dim}")
        if min(s.center) < 0.0 or max(s.center) > 1.0:
            raise SpecificationError("blob centers must lie in [0,1]^d")

    mains = [s for s in specs if s.kind == KIND_MAIN]
    main_center = {}
    for s in mains:
        main_center.setdefault(s.class_id, np.asarray(s.center))
    for i, a in enumerate(mains):
        for b in mains[i + 1:]:
            if a.class_id == b.class_id:
                continue
            gap = np.abs(np.asarray(a.center) - np.asarray(b.center)).max()
            need = MAIN_SEPARATION_FACTOR * max(a.spread, b.spread)
            if gap < need:
                raise SpecificationError(
                    f"main blobs of classes {a.class_id} and {b.class_id} are "
                    f"{gap:.4f} apart in l-inf; need >= {need:.4f}")

    for s in specs:
        if s.kind != KIND_POISON:
            continue
        target = main_center.get(s.poison_target_class)
        if target is None:
            raise SpecificationError(
                f"poisoning blob targets class {s.poison_target_class} "
                "which has no main blob")
        offset = np.abs(np.asarray(s.center) - target).max()
        limit = POISON_PROXIMITY_FACTOR * s.spread + 1e-12
        if offset > limit:
            raise SpecificationError(
                f"poisoning blob for class {s.class_id} sits {offset:.4f} from "
                f"its target center; must be within {limit:.4f}")


def _blob_rng(seed: int, spec: SubPopSpec, ordinal: int) -> np.random.Generator:
    """Per-blob stream keyed by (seed, class, kind, ordinal).

    Independent of list position, so dropping a tail of poisoning blobs leaves
    every remaining blob's draws unchanged across poisoning fractions.
    """
    kind_code = _KINDS.index(spec.kind)
    return np.random.default_rng(
        np.random.SeedSequence([seed, spec.class_id, kind_code, ordinal]))


def generate_dataset(specs: Sequence[SubPopSpec], dim: int,
                     seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Sample train and test splits from the blob blueprint.

    Per blob: Gaussian draws around the center, clipped to [0,1]^d; train rows
    come first from the blob stream, then test rows, so the two splits share a
    distribution but never a sample.
    """
    validate_specs(specs, dim)
    train_rows, test_rows = [], []
    ordinals: dict[tuple[int, str], int] = {}
    for blob_id, spec in enumerate(specs):
        key = (spec.class_id, spec.kind)
        ordinal = ordinals.get(key, 0)
        ordinals[key] = ordinal + 1
        rng = _blob_rng(seed, spec, ordinal)
        center = np.asarray(spec.center, dtype=np.float64)
        for count, bucket in ((spec.train_count, train_rows),
                              (spec.test_count, test_rows)):
            if count == 0:
                continue
            draws = rng.normal(loc=center, scale=spec.spread, size=(count, dim))
            np.clip(draws, 0.0, 1.0, out=draws)
            bucket.append((draws, spec.class_id, blob_id, spec.kind))

    def assemble(rows, split):
        if rows:
            feats = np.concatenate([r[0] for r in rows])
            labels = np.concatenate([np.full(len(r[0]), r[1]) for r in rows])
            sub = np.concatenate([np.full(len(r[0]), r[2]) for r in rows])
            kind = np.concatenate([np.full(len(r[0]), r[3], dtype=object) for r in rows])
        else:
            feats = np.zeros((0, dim))
            labels = sub = np.zeros(0, dtype=np.int64)
            kind = np.zeros(0, dtype=object)
        return LabeledDataset(feats, labels, sub, kind.astype(str), split,
                              provenance={
                                  "seed": seed,
                                  "dim": dim,
                                  "split": split,
                                  "specs": [spec_to_dict(s) for s in specs],
                              })

    train = assemble(train_rows, "train")
    test = assemble(test_rows, "test")
    _assert_poisoning_placement(specs, train)
    _assert_poisoning_placement(specs, test)
    return train, test


def _assert_poisoning_placement(specs: Sequence[SubPopSpec],
                                ds: LabeledDataset) -> None:
    """Every poisoning sample must be nearer (l2) to its target's main center
    than to its own class's main center."""
    main_center = {}
    for s in specs:
        if s.kind == KIND_MAIN and s.class_id not in main_center:
            main_center[s.class_id] = np.asarray(s.center)
    for idx in np.flatnonzero(ds.kind == KIND_POISON):
        blob = specs[ds.subpop_id[idx]]
        x = ds.features[idx]
        d_target = np.linalg.norm(x - main_center[blob.poison_target_class])
        d_own = np.linalg.norm(x - main_center[blob.class_id])
        if d_target >= d_own:
            raise SpecificationError(
                f"poisoning sample {idx} is not closer to its target class "
                f"center ({d_target:.4f} vs {d_own:.4f})")


# -- default benchmark ---------------------------------------------------


@dataclass(frozen=True)
class BenchmarkLayout:
    """Counts and geometry of one benchmark profile.

    Benign singletons sit on a shell around a wrong class's main blob: far
    enough that only memorization can classify them, close enough that the
    epsilon ball around their test twins reaches contested territory (their
    adversarial robustness does not generalize). Poisoning singletons sit just
    off a wrong class's center, offset along a random subset of dimensions so
    their epsilon ball covers a real fraction of that blob's mass.
    """

    num_classes: int = 4
    dim: int = 16
    main_train: int = 200
    main_test: int = 50
    spread: float = 0.02
    benign_blobs_per_class: int = 6
    benign_train_counts: tuple[int, ...] = (1, 1, 1, 1, 2, 2)
    benign_test_count: int = 1
    benign_spread: float = 0.012
    benign_offset: float = 0.20        # per-dim offset from the host center
    benign_offset_dims: int = 2        # dims carrying that offset
    benign_benign_gap: float = 0.08    # min l-inf between benign anchors
    poison_blobs_per_class: int = 50
    main_low: float = 0.2
    main_high: float = 0.8
    min_main_gap: float = 0.3


PROFILES = {
    "small": BenchmarkLayout(),
    "medium": BenchmarkLayout(main_train=800, main_test=200,
                              benign_blobs_per_class=24,
                              benign_train_counts=(1, 1, 1, 1, 2, 2) * 4,
                              poison_blobs_per_class=200),
}


def default_benchmark(profile: str, seed: int, poisoning_fraction: float = 1.0
                      ) -> tuple[LabeledDataset, LabeledDataset]:
    """Standard benchmark pair with a parameterized poisoning fraction.

    The fraction keeps a per-class prefix of the canonical poisoning blobs, so
    the 20% dataset is an exact subset of the 100% one and the main/benign
    samples are identical across fractions.
    """
    if profile not in PROFILES:
        raise SpecificationError(
            f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    if not 0.0 <= poisoning_fraction <= 1.0:
        raise SpecificationError("poisoning_fraction must be in [0, 1]")
    layout = PROFILES[profile]
    specs = benchmark_specs(layout, seed, poisoning_fraction)
    train, test = generate_dataset(specs, layout.dim, seed)
    for ds in (train, test):
        ds.provenance.update({
            "profile": profile,
            "poisoning_fraction": poisoning_fraction,
        })
    return train, test


def benchmark_specs(layout: BenchmarkLayout, seed: int,
                    poisoning_fraction: float) -> list[SubPopSpec]:
    placement = np.random.default_rng(np.random.SeedSequence([seed, 7**5]))
    dim, spread = layout.dim, layout.spread

    main_centers = _place_main_centers(placement, layout)
    specs: list[SubPopSpec] = [
        SubPopSpec(class_id=c, center=tuple(main_centers[c]), spread=spread,
                   train_count=layout.main_train, test_count=layout.main_test,
                   kind=KIND_MAIN)
        for c in range(layout.num_classes)
    ]

    benign_centers: list[np.ndarray] = []
    for c in range(layout.num_classes):
        for b in range(layout.benign_blobs_per_class):
            host = (c + 1 + b % (layout.num_classes - 1)) % layout.num_classes
            center = _place_benign_center(placement, layout, main_centers,
                                          benign_centers, host=host)
            benign_centers.append(center)
            train_count = layout.benign_train_counts[
                b % len(layout.benign_train_counts)]
            specs.append(SubPopSpec(
                class_id=c, center=tuple(center), spread=layout.benign_spread,
                train_count=train_count, test_count=layout.benign_test_count,
                kind=KIND_BENIGN))

    keep = int(round(layout.poison_blobs_per_class * poisoning_fraction))
    for c in range(layout.num_classes):
        for b in range(layout.poison_blobs_per_class):
            target = (c + 1 + b % (layout.num_classes - 1)) % layout.num_classes
            offset = _poison_offset(placement, layout)
            center = np.clip(main_centers[target] + offset, 0.0, 1.0)
            if b >= keep:
                continue
            specs.append(SubPopSpec(
                class_id=c, center=tuple(center), spread=spread,
                train_count=1, test_count=0, kind=KIND_POISON,
                poison_target_class=target))
    return specs


def _poison_offset(rng, layout: BenchmarkLayout) -> np.ndarray:
    """Near-cap displacement in every dimension with random signs.

    Keeps the anchor inside the proximity cap (l-inf exactly at 2*spread for
    the largest dims) while the all-dims pattern puts it at the blob shell in
    l2, where a memorization island is geometrically cheap.
    """
    cap = POISON_PROXIMITY_FACTOR * layout.spread
    signs = rng.choice([-1.0, 1.0], size=layout.dim)
    magnitude = rng.uniform(0.6 * cap, cap, size=layout.dim)
    return signs * magnitude


def _place_main_centers(rng, layout: BenchmarkLayout) -> list[np.ndarray]:
    centers: list[np.ndarray] = []
    while len(centers) < layout.num_classes:
        cand = rng.uniform(layout.main_low, layout.main_high, size=layout.dim)
        if all(np.abs(cand - c).max() >= layout.min_main_gap for c in centers):
            centers.append(cand)
    return centers


def _place_benign_center(rng, layout: BenchmarkLayout, main_centers,
                         benign_centers, host: int) -> np.ndarray:
    """Anchor offset from the host main center along a few dimensions.

    The per-dim offset exceeds the host samples' adversarial reach (mass edge
    plus attack radius), so the anchor's own epsilon ball is uncontested and a
    memorization island survives adversarial training; it is still far closer
    to the host than to any other structure, so excluding it from training
    flips its prediction to the host class.
    """
    host_center = main_centers[host]
    while True:
        cand = host_center.copy()
        dims = rng.choice(layout.dim, size=layout.benign_offset_dims, replace=False)
        signs = rng.choice([-1.0, 1.0], size=layout.benign_offset_dims)
        jitter = rng.uniform(-0.008, 0.008, size=layout.dim)
        jitter[dims] = 0.0  # keep the full clearance on the offset dims
        cand[dims] += signs * layout.benign_offset
        cand += jitter
        if cand.min() < 0.02 or cand.max() > 0.98:
            continue
        if benign_centers and min(np.abs(cand - m).max()
                                  for m in benign_centers) < layout.benign_benign_gap:
            continue
        return cand


# -- persistence ---------------------------------------------------------


def spec_to_dict(spec: SubPopSpec) -> dict:
    return {
        "class_id": spec.class_id,
        "center": list(spec.center),
        "spread": spec.spread,
        "train_count": spec.train_count,
        "test_count": spec.test_count,
        "kind": spec.kind,
        "poison_target_class": spec.poison_target_class,
    }


def spec_from_dict(d: dict) -> SubPopSpec:
    return SubPopSpec(class_id=d["class_id"], center=tuple(d["center"]),
                      spread=d["spread"], train_count=d["train_count"],
                      test_count=d["test_count"], kind=d["kind"],
                      poison_target_class=d.get("poison_target_class"))


def save_dataset(ds: LabeledDataset, csv_path, manifest_hash: Optional[str] = None) -> None:
    """Write the sample table as CSV plus a JSON sidecar with the provenance.

    Floats are written with ``repr``, which is decimal-lossless for float64, so
    load(save(ds)) reproduces the arrays bit-exactly.
    """
    csv_path = str(csv_path)
    d = ds.dim
    header = [f"feature_{i}" for i in range(d)] + ["label", "subpop_id", "kind"]
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(len(ds)):
            row = [repr(float(v)) for v in ds.features[i]]
            row += [str(int(ds.labels[i])), str(int(ds.subpop_id[i])), str(ds.kind[i])]
            writer.writerow(row)
    sidecar = {
        "split": ds.split,
        "provenance": ds.provenance,
        "n_samples": len(ds),
        "dim": d,
        "csv_sha256": _file_sha256(csv_path),
    }
    if manifest_hash is not None:
        sidecar["manifest_hash"] = manifest_hash
    with open(csv_path + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2)


def load_dataset(csv_path) -> LabeledDataset:
    csv_path = str(csv_path)
    with open(csv_path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetParseError(f"{csv_path}: file is empty") from None
        feature_cols = [h for h in header if h.startswith("feature_")]
        d = len(feature_cols)
        expected = [f"feature_{i}" for i in range(d)] + ["label", "subpop_id", "kind"]
        for col in expected:
            if col not in header:
                raise DatasetParseError(f"{csv_path}: missing column {col!r}")
        if header != expected:
            raise DatasetParseError(
                f"{csv_path}: unexpected column order {header!r}")
        feats, labels, subs, kinds = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(expected):
                raise DatasetParseError(
                    f"{csv_path}:{lineno}: expected {len(expected)} fields, got {len(row)}")
            try:
                vec = [float(v) for v in row[:d]]
            except ValueError as e:
                raise DatasetParseError(f"{csv_path}:{lineno}: bad feature value ({e})") from None
            for j, v in enumerate(vec):
                if not 0.0 <= v <= 1.0:
                    raise DatasetParseError(
                        f"{csv_path}:{lineno}: feature_{j}={v!r} outside [0, 1]")
            try:
                labels.append(int(row[d]))
                subs.append(int(row[d + 1]))
            except ValueError as e:
                raise DatasetParseError(f"{csv_path}:{lineno}: bad integer field ({e})") from None
            if row[d + 2] not in _KINDS:
                raise DatasetParseError(
                    f"{csv_path}:{lineno}: unknown kind {row[d + 2]!r}")
            feats.append(vec)
            kinds.append(row[d + 2])

    sidecar_path = csv_path + ".json"
    split, provenance = "train", {}
    try:
        with open(sidecar_path, "r", encoding="utf-8") as fh:
            sidecar = json.load(fh)
        split = sidecar.get("split", split)
        provenance = sidecar.get("provenance", {})
    except FileNotFoundError:
        pass
    return LabeledDataset(
        features=np.asarray(feats, dtype=np.float64).reshape(len(feats), d),
        labels=np.asarray(labels, dtype=np.int64),
        subpop_id=np.asarray(subs, dtype=np.int64),
        kind=np.asarray(kinds),
        split=split,
        provenance=provenance,
    )


def dataset_hash(ds: LabeledDataset) -> str:
    """Stable content hash over the sample table."""
    h = hashlib.sha256()
    h.update(str(ds.dim).encode())
    for i in range(len(ds)):
        h.update((",".join(repr(float(v)) for v in ds.features[i])).encode())
        h.update(f",{int(ds.labels[i])},{int(ds.subpop_id[i])},{ds.kind[i]}".encode())
    return h.hexdigest()


def _file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()
