"""Optimization loop: AdamW, step-decay schedule, epochs of Q x K batches,
per-epoch checkpoints with exact resume.

All randomness comes from ``TrainConfig.seed``: model initialization, loss
head initialization and the sampler (batch choice plus augmentation) each
get their own derived stream. The sampler's generator state is stored in
every checkpoint so a resumed run replays the remaining steps exactly.
"""
from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import numerics as nx
from .data import BatchSpec, Dataset, augment, sample_batch
from .errors import ContractError, TrainingDiverged
from .losses import BatchFeatures, DistanceMetric, LossHeads, LossSettings, LossWeights, PhiMode, overall_loss
from .model import CrossModalityTransformer, ModelConfig
from .numerics.serialize import tensor_from_bytes, tensor_to_bytes

STEP_COLUMNS = ("step", "epoch", "lr", "L_ID", "L_WRT", "L_MAC", "L_MAID", "total", "grad_norm")
CKPT_MAGIC = b"VRCK"
CKPT_VERSION = 1
FROZEN_WHEN_ME_OFF = ("me_vis", "me_ir")


# -- optimizer ---------------------------------------------------------------
@dataclass
class OptimizerState:
    lr: float = 1e-3
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: Optional[float] = None) -> None:
    """One in-place AdamW update of ``params`` (name -> Tensor).

    Parameters absent from ``grads`` (or with a None gradient) are left
    untouched, including their weight decay.
    """
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ContractError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.shape:
            raise ContractError(f"{name}: moment shape {m.shape} != parameter shape {p.shape}")
        p.data -= lr * state.weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- schedule ----------------------------------------------------------------
@dataclass(frozen=True)
class Schedule:
    base_lr: float = 1e-3
    decay: float = 0.1
    decay_epochs: tuple = (10, 20)
    total_epochs: int = 30

    def __post_init__(self):
        de = tuple(int(e) for e in self.decay_epochs)
        object.__setattr__(self, "decay_epochs", de)
        if any(b <= a for a, b in zip(de, de[1:])):
            raise ContractError("decay epochs must be strictly increasing")
        if de and (de[0] < 0 or de[-1] >= self.total_epochs):
            raise ContractError("decay epochs must lie in [0, total_epochs)")
        if self.total_epochs < 0 or self.base_lr < 0:
            raise ContractError("total epochs and base lr must be non-negative")

    @classmethod
    def full_scale(cls) -> "Schedule":
        return cls(1e-3, 0.1, (15, 30), 70)


def lr_at(epoch: int, schedule: Schedule) -> float:
    if not 0 <= epoch < max(schedule.total_epochs, 1):
        raise ContractError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    passed = sum(1 for e in schedule.decay_epochs if e <= epoch)
    return schedule.base_lr * schedule.decay ** passed


# -- configuration -----------------------------------------------------------
@dataclass
class TrainConfig:
    """Everything that determines a training run.

    Loss toggles: ``use_me`` adds the learnable modality embeddings (frozen
    at zero when off); ``extra`` picks the additional constraint (``mae``
    for the modality-aware losses, or the ``center`` / ``hc`` baselines, or
    ``none``); ``use_mac`` / ``use_maid`` select the MAE parts.
    """

    # data and model
    img_h: int = 64
    img_w: int = 32
    patch: int = 8
    stride: int = 4
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    # batches
    q: int = 8
    k: int = 8
    # objective
    use_me: bool = True
    extra: str = "mae"
    use_mac: bool = True
    use_maid: bool = True
    lam: float = 4.0
    constraint_weight: float = 0.1
    phi_mode: str = "identity"
    shared_phi: bool = False
    metric: str = "cosine"
    shared_center: bool = False
    # optimization
    epochs: int = 30
    base_lr: float = 1e-3
    lr_decay: float = 0.1
    decay_epochs: tuple = (10, 20)
    weight_decay: float = 5e-4
    clip_norm: Optional[float] = None
    flip_prob: float = 0.5
    erase_prob: float = 0.5
    seed: int = 1

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if self.extra not in ("none", "center", "hc", "mae"):
            raise ContractError(f"unknown extra constraint {self.extra!r}")
        if self.extra == "mae" and (self.use_mac or self.use_maid) and not self.use_me:
            raise ContractError("MAC / MAID need modality embeddings (use_me=True)")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ContractError("clip_norm must be positive")
        if self.lam < 0:
            raise ContractError("lambda must be non-negative")
        PhiMode(self.phi_mode)
        DistanceMetric(self.metric)
        BatchSpec(self.q, self.k)
        self.schedule  # validates decay epochs
        self.model_config(1)  # validates geometry and width

    @property
    def batch_spec(self) -> BatchSpec:
        return BatchSpec(self.q, self.k)

    @property
    def schedule(self) -> Schedule:
        # decay points beyond a shortened run are dropped
        decays = tuple(e for e in self.decay_epochs if e < self.epochs)
        return Schedule(self.base_lr, self.lr_decay, decays, self.epochs)

    @property
    def mae_active(self) -> bool:
        return self.extra == "mae" and self.lam > 0 and (self.use_mac or self.use_maid)

    def model_config(self, num_ids: int) -> ModelConfig:
        return ModelConfig(num_ids=num_ids, img_h=self.img_h, img_w=self.img_w, patch=self.patch,
                           stride=self.stride, dim=self.dim, depth=self.depth, heads=self.heads,
                           mlp_ratio=self.mlp_ratio)

    def loss_settings(self) -> LossSettings:
        return LossSettings(self.use_mac, self.use_maid, self.metric, self.shared_center, self.extra)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lam, self.constraint_weight)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["decay_epochs"] = list(self.decay_epochs)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def derive_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(stream)]).generate_state(1)[0])


def steps_per_epoch(num_images: int, spec: BatchSpec) -> int:
    return math.ceil(num_images / spec.size)


# -- run state and checkpoints ----------------------------------------------
@dataclass
class TrainState:
    config: TrainConfig
    model: CrossModalityTransformer
    heads: LossHeads
    optimizer: OptimizerState
    rng: np.random.Generator
    label_map: dict  # dataset label -> classifier index
    epoch: int = 0  # completed epochs
    step: int = 0  # completed steps

    def trainable(self) -> dict:
        params = dict(self.model.named_parameters())
        if not self.config.use_me:
            for name in FROZEN_WHEN_ME_OFF:
                params.pop(name)
        params.update(self.heads.named_parameters())
        return params

    def all_parameters(self) -> dict:
        out = dict(self.model.named_parameters())
        out.update(self.heads.named_parameters())
        return out


def init_state(config: TrainConfig, dataset: Dataset) -> TrainState:
    ids = [int(q) for q in dataset.identities]
    label_map = {q: i for i, q in enumerate(ids)}
    model = CrossModalityTransformer(config.model_config(len(ids)), seed=derive_seed(config.seed, 0))
    heads = LossHeads(config.dim, len(ids), config.phi_mode, config.shared_phi,
                      with_centers=config.extra == "center", seed=derive_seed(config.seed, 1))
    opt = OptimizerState(lr=config.base_lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(derive_seed(config.seed, 2))
    return TrainState(config, model, heads, opt, rng, label_map)


def save_checkpoint(state: TrainState, path) -> Path:
    """Binary container: magic, u32 manifest length, JSON manifest, tensor blobs.

    The manifest embeds the resolved training config, counters, the label
    map, the sampler generator state and the ordered list of tensor names.
    """
    tensors = {}
    for name, p in state.all_parameters().items():
        tensors[f"param/{name}"] = p.data
    for name, b in state.model.named_buffers().items():
        tensors[f"buffer/{name}"] = b
    for name in sorted(state.optimizer.m):
        tensors[f"adam_m/{name}"] = state.optimizer.m[name]
        tensors[f"adam_v/{name}"] = state.optimizer.v[name]
    manifest = {
        "version": CKPT_VERSION,
        "config": state.config.to_dict(),
        "model": state.model.config.to_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "optimizer_step": state.optimizer.step,
        "label_map": [[k, v] for k, v in sorted(state.label_map.items())],
        "sampler_state": state.rng.bit_generator.state,
        "tensors": list(tensors),
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", len(head)) + head)
        for arr in tensors.values():
            fh.write(tensor_to_bytes(arr))
    return path


def read_checkpoint(path):
    """Returns (manifest, {tensor name: ndarray})."""
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise ContractError(f"{path} is not a checkpoint")
    (n,) = struct.unpack_from("<I", blob, 4)
    manifest = json.loads(blob[8:8 + n])
    if manifest.get("version") != CKPT_VERSION:
        raise ContractError(f"unsupported checkpoint version {manifest.get('version')}")
    offset = 8 + n
    tensors = {}
    for name in manifest["tensors"]:
        tensors[name], offset = tensor_from_bytes(blob, offset)
    return manifest, tensors


def load_state(path, expect: Optional[TrainConfig] = None) -> TrainState:
    """Rebuild the full training state stored at ``path``.

    With ``expect`` given, the stored config must match it except for the
    epoch count (so a run can be extended).
    """
    manifest, tensors = read_checkpoint(path)
    config = TrainConfig.from_dict(manifest["config"])
    if expect is not None:
        a, b = config.to_dict(), expect.to_dict()
        a.pop("epochs")
        b.pop("epochs")
        if a != b:
            diff = sorted(k for k in a if a[k] != b[k])
            raise ContractError(f"checkpoint config differs from requested config in {diff}")
        config = expect
    label_map = {int(k): int(v) for k, v in manifest["label_map"]}
    model = CrossModalityTransformer(config.model_config(len(label_map)), seed=0)
    heads = LossHeads(config.dim, len(label_map), config.phi_mode, config.shared_phi,
                      with_centers=config.extra == "center", seed=0)
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    buffers = {k[len("buffer/"):]: v for k, v in tensors.items() if k.startswith("buffer/")}
    model.load_state(params, buffers)
    for name, p in heads.named_parameters().items():
        if name not in params or params[name].shape != p.shape:
            raise ContractError(f"checkpoint does not match loss head parameter {name}")
        p.data = params[name].copy()
    opt = OptimizerState(lr=config.base_lr, weight_decay=config.weight_decay, step=manifest["optimizer_step"])
    for k, arr in tensors.items():
        if k.startswith("adam_m/"):
            opt.m[k[len("adam_m/"):]] = arr.copy()
        elif k.startswith("adam_v/"):
            opt.v[k[len("adam_v/"):]] = arr.copy()
    rng = np.random.default_rng()
    rng.bit_generator.state = manifest["sampler_state"]
    return TrainState(config, model, heads, opt, rng, label_map, manifest["epoch"], manifest["step"])


# -- training ----------------------------------------------------------------
@dataclass
class TrainResult:
    state: TrainState
    steps: list  # one dict per step, keys STEP_COLUMNS
    checkpoints: list

    @property
    def model(self) -> CrossModalityTransformer:
        return self.state.model

    @property
    def final_loss(self) -> float:
        return self.steps[-1]["total"] if self.steps else float("nan")


def steps_to_csv(steps) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STEP_COLUMNS)
    for row in steps:
        w.writerow([row["step"], row["epoch"]] + [repr(float(row[c])) for c in STEP_COLUMNS[2:]])
    return buf.getvalue()


def _global_norm(grads: dict) -> float:
    total = 0.0
    for name in sorted(grads):
        total += float(np.sum(grads[name] * grads[name]))
    return math.sqrt(total)


def _batch_images(state: TrainState, dataset: Dataset, fill: np.ndarray):
    cfg = state.config
    batch = sample_batch(dataset, cfg.batch_spec, state.rng)
    images = batch.images
    if cfg.flip_prob > 0 or cfg.erase_prob > 0:
        images = np.stack([augment(img, cfg.flip_prob, cfg.erase_prob, seed=state.rng, fill=fill)
                           for img in images])
    labels = np.array([state.label_map[int(q)] for q in batch.labels], dtype=np.int64)
    return images, labels, batch.modalities


def train_step(state: TrainState, images, labels, modalities, lr: float) -> dict:
    """Forward, overall loss, backward, clip (optional) and one AdamW update."""
    cfg = state.config
    params = state.trainable()
    for p in state.all_parameters().values():
        p.grad = None
    with nx.Tape() as tape:
        v, f, logits = state.model.forward(images, modalities, training=True)
        out = overall_loss(BatchFeatures(v, f, labels, modalities), logits, state.model.tables, state.heads,
                           cfg.loss_weights(), cfg.loss_settings())
    comps = out.components
    if not np.isfinite(comps["total"]):
        raise TrainingDiverged(
            f"non-finite loss at step {state.step}",
            {"step": state.step, "epoch": state.epoch, "components": dict(comps),
             "grad_norms": {}, "lr": lr},
        )
    tape.backward(out.total)
    grads = {name: p.grad for name, p in params.items() if p.grad is not None}
    norm = _global_norm(grads)
    if not math.isfinite(norm):
        raise TrainingDiverged(
            f"non-finite gradient at step {state.step}",
            {"step": state.step, "epoch": state.epoch, "components": dict(comps), "lr": lr,
             "grad_norms": {k: float(np.linalg.norm(g)) for k, g in grads.items()}},
        )
    if cfg.clip_norm is not None and norm > cfg.clip_norm:
        scale = cfg.clip_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    adamw_step(params, grads, state.optimizer, lr)
    return {"L_ID": comps["L_ID"], "L_WRT": comps["L_WRT"], "L_MAC": comps["L_MAC"],
            "L_MAID": comps["L_MAID"], "total": comps["total"], "grad_norm": norm}


def train(config: TrainConfig, dataset: Dataset, out_dir=None, resume_from=None, log=None) -> TrainResult:
    """Train for ``config.epochs`` epochs of ceil(len(dataset) / (Q*K)) steps.

    Writes ``ckpt_epoch{N}`` after every epoch (``ckpt_epoch0`` holds the
    initialization) and ``steps.csv`` under ``out_dir`` when given. With
    ``resume_from`` the run continues from that checkpoint's state.
    """
    if dataset.split != "train":
        raise ContractError("training needs a train-split dataset")
    state = load_state(resume_from, config) if resume_from is not None else init_state(config, dataset)
    if set(state.label_map) != {int(q) for q in dataset.identities}:
        raise ContractError("dataset identities differ from the checkpoint's label map")
    # sampler preconditions are checked once, up front
    sample_batch(dataset, config.batch_spec, np.random.default_rng(0))
    out = Path(out_dir) if out_dir is not None else None
    fill = dataset.channel_mean()
    per_epoch = steps_per_epoch(len(dataset), config.batch_spec)
    schedule = config.schedule
    steps, ckpts = [], []
    if out is not None and resume_from is None:
        ckpts.append(save_checkpoint(state, out / "ckpt_epoch0"))
    try:
        for epoch in range(state.epoch, config.epochs):
            lr = lr_at(epoch, schedule)
            for _ in range(per_epoch):
                images, labels, mods = _batch_images(state, dataset, fill)
                row = train_step(state, images, labels, mods, lr)
                row = {"step": state.step, "epoch": epoch, "lr": lr, **row}
                steps.append(row)
                state.step += 1
                if log is not None:
                    log(row)
            state.epoch = epoch + 1
            if out is not None:
                ckpts.append(save_checkpoint(state, out / f"ckpt_epoch{state.epoch}"))
    except TrainingDiverged as err:
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / "diverged.json").write_text(json.dumps(err.snapshot, indent=2, sort_keys=True))
            (out / "steps.csv").write_text(steps_to_csv(steps))
        raise
    if out is not None:
        (out / "steps.csv").write_text(steps_to_csv(steps))
    return TrainResult(state, steps, ckpts)
