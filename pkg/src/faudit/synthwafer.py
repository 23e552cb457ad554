"""Synthetic wafer-map dataset: five spatial defect classes on a 32x32 disc.

Pixel values are exactly {0.0 background, 0.5 normal die, 1.0 defect}.  Each
sample carries a binary defect mask covering the *patterned* defect only;
off-pattern noise flips additional die pixels to 1.0 but never enters the
mask.  ``dead_rate`` flips a fraction of normal dies to 0.0 ("dead" dies):
they carry no class signal, but their presence puts the zero value inside
the wafer, so zero-fill perturbations probe evidence removal instead of
out-of-distribution shock.  Generation is a pure function of (spec,
per-sample seed): no global RNG is touched, so identical specs reproduce
identical bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint

CLASSES = ("none", "center", "ring", "edge_loc", "scratch")
SPLITS = ("train", "val", "test")


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    image_size: int = 32
    counts: dict = field(default_factory=lambda: {"train": 40, "val": 10, "test": 10})
    noise_rate: float = 0.05
    dead_rate: float = 0.0  # fraction of normal dies flipped dark (dead die)
    seed: int = 0
    wafer_margin: float = 1.5  # disc radius = image_size/2 - margin
    center_radius: tuple = (2.5, 5.5)
    ring_inner: tuple = (8.0, 10.5)
    ring_width: tuple = (2.0, 3.5)
    edge_band: float = 3.5
    edge_arc: tuple = (0.5, 1.6)  # radians subtended by the cluster
    scratch_len: tuple = (10, 20)
    scratch_wobble: float = 0.18

    def validate(self) -> None:
        if self.image_size < 8:
            raise DatasetError("image size too small")
        if not 0.0 <= self.noise_rate <= 0.2:
            raise DatasetError(f"noise_rate {self.noise_rate} outside [0, 0.2]")
        if not 0.0 <= self.dead_rate <= 0.3:
            raise DatasetError(f"dead_rate {self.dead_rate} outside [0, 0.3]")
        for split in self.counts:
            if split not in SPLITS:
                raise DatasetError(f"unknown split {split!r}")
            if self.counts[split] < 0:
                raise DatasetError("negative sample count")

    @property
    def radius(self) -> float:
        return self.image_size / 2.0 - self.wafer_margin


@dataclass
class WaferSample:
    sample_id: str
    image: np.ndarray  # [1, s, s] float64 in {0, 0.5, 1}
    mask: np.ndarray  # [s, s] float64 in {0, 1}
    label: str
    split: str
    seed: int

    @property
    def label_index(self) -> int:
        return CLASSES.index(self.label)


def _grid(size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    c = (size - 1) / 2.0
    ys, xs = np.mgrid[0:size, 0:size]
    dist = np.sqrt((ys - c) ** 2 + (xs - c) ** 2)
    ang = np.arctan2(ys - c, xs - c)
    return dist, ang, np.array([c, c])


def _pattern(label: str, spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    size = spec.image_size
    dist, ang, center = _grid(size)
    die = dist <= spec.radius
    mask = np.zeros((size, size), dtype=bool)
    if label == "none":
        return mask
    if label == "center":
        r = rng.uniform(*spec.center_radius)
        return die & (dist <= r)
    if label == "ring":
        inner = rng.uniform(*spec.ring_inner)
        width = rng.uniform(*spec.ring_width)
        outer = min(inner + width, spec.radius - 0.5)
        return die & (dist >= inner) & (dist <= outer)
    if label == "edge_loc":
        theta = rng.uniform(-math.pi, math.pi)
        arc = rng.uniform(*spec.edge_arc)
        band = die & (dist >= spec.radius - spec.edge_band)
        delta = np.angle(np.exp(1j * (ang - theta)))
        return band & (np.abs(delta) <= arc / 2.0)
    if label == "scratch":
        # 1-px random walk clipped to the die area; retried (deterministically)
        # until it is long enough to be recognisable
        for _ in range(16):
            mask[:] = False
            length = int(rng.integers(spec.scratch_len[0], spec.scratch_len[1] + 1))
            y, x = center + rng.uniform(-0.55, 0.55, size=2) * spec.radius
            heading = rng.uniform(0, 2 * math.pi)
            placed = 0
            for _step in range(length):
                iy, ix = int(round(y)), int(round(x))
                if not (0 <= iy < size and 0 <= ix < size) or not die[iy, ix]:
                    break
                mask[iy, ix] = True
                placed += 1
                heading += rng.normal(0.0, spec.scratch_wobble)
                y += math.sin(heading)
                x += math.cos(heading)
            if placed >= max(4, spec.scratch_len[0] // 2):
                return mask
        raise DatasetError("could not place a scratch inside the wafer")
    raise DatasetError(f"unknown label {label!r}")


def _render(label: str, spec: DatasetSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    size = spec.image_size
    dist, _, _ = _grid(size)
    die = dist <= spec.radius
    pattern = _pattern(label, spec, rng)
    image = np.where(die, 0.5, 0.0)
    image[pattern] = 1.0
    if spec.noise_rate > 0:
        flips = die & ~pattern & (rng.random((size, size)) < spec.noise_rate)
        image[flips] = 1.0
    if spec.dead_rate > 0:
        # only normal dies die: never the defect pattern, never bright noise
        dead = (image == 0.5) & (rng.random((size, size)) < spec.dead_rate)
        image[dead] = 0.0
    return image[None].astype(np.float64), pattern.astype(np.float64)


def _sample_seed(master: int, label: str, split: str, index: int) -> int:
    ss = np.random.SeedSequence(
        [master, CLASSES.index(label), SPLITS.index(split), index]
    )
    return int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFFFFFFFFFFFFFF)


def generate(spec: DatasetSpec) -> list[WaferSample]:
    """All samples for every split, stratified per class by construction."""
    spec.validate()
    samples = []
    for split in SPLITS:
        per_class = spec.counts.get(split, 0)
        for label in CLASSES:
            for i in range(per_class):
                seed = _sample_seed(spec.seed, label, split, i)
                image, mask = _render(label, spec, seed)
                samples.append(
                    WaferSample(
                        sample_id=f"{split}-{label}-{i:05d}",
                        image=image,
                        mask=mask,
                        label=label,
                        split=split,
                        seed=seed,
                    )
                )
    return samples


def split_of(samples: list[WaferSample], split: str) -> list[WaferSample]:
    return [s for s in samples if s.split == split]


def stratified_split(
    samples: list[WaferSample], ratios: tuple[float, float, float], seed: int
) -> list[WaferSample]:
    """Reassign splits with per-class proportions within +-1 sample."""
    if len(ratios) != len(SPLITS):
        raise DatasetError(f"need {len(SPLITS)} ratios")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError("split ratios must sum to 1")
    rng = np.random.default_rng(seed)
    out: list[WaferSample] = []
    for label in CLASSES:
        group = [s for s in samples if s.label == label]
        if not group:
            continue
        order = rng.permutation(len(group))
        n = len(group)
        # largest-remainder apportionment keeps every class within +-1
        exact = [r * n for r in ratios]
        base = [int(math.floor(e)) for e in exact]
        rem = n - sum(base)
        by_frac = sorted(range(len(ratios)), key=lambda i: exact[i] - base[i], reverse=True)
        for i in by_frac[:rem]:
            base[i] += 1
        pos = 0
        for split, count in zip(SPLITS, base):
            for j in range(count):
                s = group[order[pos + j]]
                out.append(
                    WaferSample(s.sample_id, s.image, s.mask, s.label, split, s.seed)
                )
            pos += count
    return out


def balanced_eval_subset(
    samples: list[WaferSample], n_per_class: int, seed: int
) -> list[WaferSample]:
    """Deterministic subset with exactly n_per_class samples of every class."""
    rng = np.random.default_rng(seed)
    chosen = []
    for label in CLASSES:
        group = [s for s in samples if s.label == label]
        if len(group) < n_per_class:
            raise DatasetError(
                f"not enough {label!r} samples: need {n_per_class}, have {len(group)}"
            )
        order = rng.permutation(len(group))[:n_per_class]
        chosen.extend(group[i] for i in order)
    return chosen


def stack_images(samples: list[WaferSample]) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples])
    labels = np.array([s.label_index for s in samples], dtype=np.int64)
    return images, labels


def save_dataset(out_dir, samples: list[WaferSample], spec: DatasetSpec) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "spec": asdict(spec),
        "seed": spec.seed,
        "counts": {},
        "samples": [],
    }
    for split in SPLITS:
        group = split_of(samples, split)
        manifest["counts"][split] = len(group)
        arrays: dict[str, np.ndarray] = {}
        for s in group:
            arrays[f"{s.sample_id}:image"] = s.image
            arrays[f"{s.sample_id}:mask"] = s.mask
            manifest["samples"].append(
                {"id": s.sample_id, "label": s.label, "split": split, "seed": s.seed}
            )
        save_checkpoint(out_dir / f"{split}.bin", arrays)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dataset(in_dir) -> tuple[list[WaferSample], DatasetSpec]:
    in_dir = Path(in_dir)
    manifest = json.loads((in_dir / "manifest.json").read_text())
    spec_dict = dict(manifest["spec"])
    for key in ("counts",):
        spec_dict[key] = dict(spec_dict[key])
    for key in ("center_radius", "ring_inner", "ring_width", "edge_arc", "scratch_len"):
        spec_dict[key] = tuple(spec_dict[key])
    spec = DatasetSpec(**spec_dict)
    arrays_by_split = {}
    samples = []
    for entry in manifest["samples"]:
        split = entry["split"]
        if split not in arrays_by_split:
            arrays_by_split[split], _ = load_checkpoint(in_dir / f"{split}.bin")
        arrays = arrays_by_split[split]
        samples.append(
            WaferSample(
                sample_id=entry["id"],
                image=arrays[f"{entry['id']}:image"],
                mask=arrays[f"{entry['id']}:mask"],
                label=entry["label"],
                split=split,
                seed=entry["seed"],
            )
        )
    return samples, spec
