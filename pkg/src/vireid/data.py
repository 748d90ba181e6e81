"""Synthetic two-modality identity data, augmentation and Q x K batch sampling.

Every identity is a procedurally drawn figure: a head, a torso carrying a
stripe or blob pattern, and legs, each region in one of three palette
colours. The visible rendering shows the colours. The infrared rendering
is a single intensity channel: a luminance with its own channel weights
passed through a compressive curve, replicated to three channels, so hue
is lost while the pattern structure survives.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import ContractError
from .model import Modality, modality_array
from .numerics.serialize import tensor_from_bytes, tensor_to_bytes

SPLITS = ("train", "query", "gallery", "test")
_IR_WEIGHTS = np.array([0.5, 0.4, 0.1])


@dataclass(frozen=True)
class SyntheticIdentitySpec:
    identity: int
    pattern_seed: int
    pattern: str  # "stripes" or "blobs"
    frequency: float
    angle: float
    blobs: tuple  # ((cy, cx, radius), ...) in torso-relative units
    palette: tuple  # three RGB triples: torso base, pattern, legs
    leg_split: float
    torso_width: float
    jitter: tuple = (3, 2)  # max |dy|, |dx| translation in pixels


@dataclass
class Image:
    pixels: np.ndarray  # (3, H, W) in [0, 1]
    modality: Modality
    identity: int


def _derive_rng(*keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def _palette(rng) -> tuple:
    # resample until base and pattern colours differ in infrared intensity
    while True:
        cols = rng.uniform(0.05, 0.95, size=(3, 3))
        ir = cols @ _IR_WEIGHTS
        if abs(ir[0] - ir[1]) > 0.3 and abs(ir[0] - ir[2]) > 0.15:
            return tuple(tuple(float(x) for x in c) for c in cols)


def make_identity_spec(identity: int, seed: int) -> SyntheticIdentitySpec:
    rng = _derive_rng(seed, identity, 7919)
    pattern = "stripes" if rng.random() < 0.5 else "blobs"
    blobs = tuple(
        (float(rng.uniform(0.15, 0.85)), float(rng.uniform(0.15, 0.85)), float(rng.uniform(0.12, 0.25)))
        for _ in range(int(rng.integers(1, 4)))
    )
    return SyntheticIdentitySpec(
        identity=identity,
        pattern_seed=int(rng.integers(0, 2**31 - 1)),
        pattern=pattern,
        frequency=float(rng.uniform(2.0, 6.0)),
        angle=float(rng.choice([0.0, math.pi / 2, math.pi / 4, -math.pi / 4])),
        blobs=blobs,
        palette=_palette(rng),
        leg_split=float(rng.uniform(0.5, 0.6)),
        torso_width=float(rng.uniform(0.5, 0.75)),
    )


def _layout(spec: SyntheticIdentitySpec, h: int, w: int, rng):
    """Region label map (0 bg, 1 head, 2 torso base, 3 torso pattern, 4 legs)."""
    yy, xx = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    width = spec.torso_width * rng.uniform(0.92, 1.08)
    labels = np.zeros((h, w), dtype=np.int64)
    head = ((yy - 0.1) / 0.08) ** 2 + ((xx - 0.5) / 0.16) ** 2 <= 1.0
    top, split = 0.19, spec.leg_split
    torso = (yy >= top) & (yy < split) & (np.abs(xx - 0.5) <= width / 2)
    legs = (yy >= split) & (yy < 0.97) & (np.abs(xx - 0.5) <= width / 2 - 0.04) & (np.abs(xx - 0.5) >= 0.03)
    labels[head] = 1
    labels[torso] = 2
    labels[legs] = 4
    ty = (yy - top) / (split - top)
    tx = (xx - (0.5 - width / 2)) / width
    if spec.pattern == "stripes":
        proj = ty * math.cos(spec.angle) + tx * math.sin(spec.angle)
        mark = np.sin(2 * math.pi * spec.frequency * proj) > 0.2
    else:
        mark = np.zeros_like(torso)
        for cy, cx, r in spec.blobs:
            mark |= (ty - cy) ** 2 + (tx - cx) ** 2 <= r * r
    labels[torso & mark] = 3
    return labels


def render(spec: SyntheticIdentitySpec, modality, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """One (3, H, W) image of ``spec`` in ``modality`` using jitter draws from ``rng``."""
    modality = Modality.parse(modality)
    labels = _layout(spec, h, w, rng)
    dy = int(rng.integers(-spec.jitter[0], spec.jitter[0] + 1))
    dx = int(rng.integers(-spec.jitter[1], spec.jitter[1] + 1))
    gain = rng.uniform(0.85, 1.15)
    noise = rng.normal(0.0, 0.03, size=(h, w))
    colours = np.array([(0.45, 0.45, 0.45), (0.8, 0.62, 0.5)] + [spec.palette[0], spec.palette[1], spec.palette[2]])
    rgb = colours[labels].transpose(2, 0, 1)  # (3, H, W)
    rgb = np.pad(rgb, ((0, 0), (abs(dy), abs(dy)), (abs(dx), abs(dx))), mode="edge")
    rgb = rgb[:, abs(dy) - dy: abs(dy) - dy + h, abs(dx) - dx: abs(dx) - dx + w]
    if modality is Modality.VISIBLE:
        out = rgb * gain + noise[None]
    else:
        heat = np.tensordot(_IR_WEIGHTS, rgb, axes=1)
        ir = 0.1 + 0.8 * np.power(np.clip(heat, 0.0, 1.0), 0.7)
        out = np.repeat((ir * gain + noise)[None], 3, axis=0)
    return np.clip(out, 0.0, 1.0)


@dataclass
class Dataset:
    images: np.ndarray  # (n, 3, H, W)
    labels: np.ndarray
    modalities: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.modalities = modality_array(self.modalities) if len(self.modalities) else np.zeros(0, np.int64)
        if self.split not in SPLITS:
            raise ContractError(f"unknown split {self.split!r}")
        if not len(self.images) == len(self.labels) == len(self.modalities):
            raise ContractError("images, labels and modalities differ in length")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> Image:
        return Image(self.images[i], Modality(int(self.modalities[i])), int(self.labels[i]))

    @property
    def identities(self) -> np.ndarray:
        return np.unique(self.labels)

    def subset(self, index, split: Optional[str] = None) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.images[index], self.labels[index], self.modalities[index], split or self.split)

    def by_modality(self, m, split: Optional[str] = None) -> "Dataset":
        return self.subset(np.flatnonzero(self.modalities == int(Modality.parse(m))), split)

    def channel_mean(self) -> np.ndarray:
        return self.images.mean(axis=(0, 2, 3))

    def counts(self) -> dict:
        """{identity: (visible count, infrared count)}"""
        out = {}
        for q in self.identities:
            m = self.modalities[self.labels == q]
            out[int(q)] = (int((m == 0).sum()), int((m == 1).sum()))
        return out


def synth_generate(num_ids: int, images_per_id_per_modality: int, img_h: int = 64, img_w: int = 32,
                   seed: int = 0, id_offset: int = 0, split: str = "train", patch: int = 8) -> Dataset:
    """Render ``num_ids`` identities, each with the given number of images per modality.

    Identities are numbered ``id_offset .. id_offset + num_ids - 1``. Output
    order is identity-major, visible before infrared, then image index.
    """
    if num_ids < 2:
        raise ContractError("need at least two identities")
    if images_per_id_per_modality < 1:
        raise ContractError("need at least one image per identity and modality")
    if img_h < 2 * patch or img_w < 2 * patch:
        raise ContractError(f"image {img_h}x{img_w} too small for patch {patch}")
    n = num_ids * 2 * images_per_id_per_modality
    images = np.empty((n, 3, img_h, img_w))
    labels = np.empty(n, dtype=np.int64)
    mods = np.empty(n, dtype=np.int64)
    k = 0
    for q in range(id_offset, id_offset + num_ids):
        spec = make_identity_spec(q, seed)
        for m in (Modality.VISIBLE, Modality.INFRARED):
            for i in range(images_per_id_per_modality):
                images[k] = render(spec, m, img_h, img_w, _derive_rng(seed, q, int(m), i))
                labels[k] = q
                mods[k] = int(m)
                k += 1
    return Dataset(images, labels, mods, split)


def toy_benchmark(seed: int = 0, num_train_ids: int = 20, num_test_ids: int = 10, per_modality: int = 12,
                  img_h: int = 64, img_w: int = 32):
    """(train, test) pair with disjoint identities; train labels are 0..num_train_ids-1."""
    train = synth_generate(num_train_ids, per_modality, img_h, img_w, seed, 0, "train")
    test = synth_generate(num_test_ids, per_modality, img_h, img_w, seed, num_train_ids, "test")
    return train, test


def augment(img, flip_prob: float = 0.5, erase_prob: float = 0.5, erase_area_range=(0.02, 0.4),
            seed: Union[int, np.random.Generator, None] = None, fill=None, aspect_range=(0.3, 3.3)):
    """Random horizontal flip, then random erasing filled with ``fill`` (per-channel).

    Accepts an :class:`Image` or a (3, H, W) array and returns the same kind.
    The erased rectangle covers exactly floor(fraction * H * W) pixels
    whenever that count factors into sides fitting the image.
    """
    for p in (flip_prob, erase_prob):
        if not 0.0 <= p <= 1.0:
            raise ContractError("probabilities must lie in [0, 1]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pixels = img.pixels if isinstance(img, Image) else np.asarray(img, dtype=np.float64)
    out = pixels.copy()
    if rng.random() < flip_prob:
        out = out[:, :, ::-1].copy()
    if rng.random() < erase_prob:
        c, h, w = out.shape
        frac = rng.uniform(*erase_area_range)
        aspect = math.exp(rng.uniform(math.log(aspect_range[0]), math.log(aspect_range[1])))
        eh, ew = erase_box(h, w, frac, aspect)
        top = int(rng.integers(0, h - eh + 1))
        left = int(rng.integers(0, w - ew + 1))
        fill_v = np.zeros(c) if fill is None else np.asarray(fill, dtype=np.float64)
        out[:, top:top + eh, left:left + ew] = fill_v[:, None, None]
    if isinstance(img, Image):
        return Image(out, img.modality, img.identity)
    return out


def erase_box(h: int, w: int, frac: float, aspect: float = 1.0) -> tuple:
    """Rectangle sides (eh, ew) for an erase of ``frac`` of an h x w image."""
    target = max(1, int(math.floor(frac * h * w)))
    want = math.sqrt(target * aspect)
    pairs = [(d, target // d) for d in range(1, h + 1) if target % d == 0 and target // d <= w]
    if pairs:
        return min(pairs, key=lambda p: (abs(math.log(p[0] / want)), p[0]))
    eh = min(h, max(1, int(round(want))))
    return eh, min(w, max(1, int(round(target / eh))))


@dataclass(frozen=True)
class BatchSpec:
    q: int = 8
    k: int = 8

    def __post_init__(self):
        if self.k < 2 or self.k % 2:
            raise ContractError("K must be even and at least 2")
        if self.q < 2:
            raise ContractError("Q must be at least 2 so every anchor has negatives")

    @property
    def size(self) -> int:
        return self.q * self.k


@dataclass
class LabeledBatch:
    images: np.ndarray
    labels: np.ndarray
    modalities: np.ndarray
    indices: np.ndarray


def sample_batch(dataset: Dataset, spec: BatchSpec, seed: Union[int, np.random.Generator, None] = None) -> LabeledBatch:
    """Q identities without replacement, then K/2 images per modality each, without replacement.

    Batch order is identity-major with visible images before infrared.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    half = spec.k // 2
    pools = {}
    for q in dataset.identities:
        mask = dataset.labels == q
        vis = np.flatnonzero(mask & (dataset.modalities == 0))
        ir = np.flatnonzero(mask & (dataset.modalities == 1))
        if len(vis) < half or len(ir) < half:
            raise ContractError(f"identity {q} has {len(vis)} visible / {len(ir)} infrared images, need {half} each")
        pools[int(q)] = (vis, ir)
    ids = np.array(sorted(pools))
    if len(ids) < spec.q:
        raise ContractError(f"dataset has {len(ids)} identities, batch needs {spec.q}")
    chosen = rng.choice(ids, size=spec.q, replace=False)
    idx = []
    for q in chosen:
        vis, ir = pools[int(q)]
        idx.extend(rng.choice(vis, size=half, replace=False))
        idx.extend(rng.choice(ir, size=half, replace=False))
    idx = np.array(idx, dtype=np.int64)
    return LabeledBatch(dataset.images[idx], dataset.labels[idx], dataset.modalities[idx], idx)


def write_manifest(datasets, out_dir) -> Path:
    """Write ``manifest.jsonl`` plus one tensor blob per image under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "blobs").mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.jsonl"
    k = 0
    with open(path, "w") as fh:
        for ds in datasets:
            for i in range(len(ds)):
                blob = f"blobs/{k:06d}.bin"
                (out_dir / blob).write_bytes(tensor_to_bytes(ds.images[i]))
                rec = {"blob": blob, "identity": int(ds.labels[i]),
                       "modality": Modality(int(ds.modalities[i])).short, "split": ds.split}
                fh.write(json.dumps(rec) + "\n")
                k += 1
    return path


def read_manifest(path) -> dict:
    """Inverse of :func:`write_manifest`: {split: Dataset}."""
    path = Path(path)
    grouped: dict = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            arr, _ = tensor_from_bytes((path.parent / rec["blob"]).read_bytes())
            grouped.setdefault(rec["split"], []).append((arr, rec["identity"], rec["modality"]))
    return {
        split: Dataset(np.stack([r[0] for r in rows]), [r[1] for r in rows], [r[2] for r in rows], split)
        for split, rows in grouped.items()
    }
