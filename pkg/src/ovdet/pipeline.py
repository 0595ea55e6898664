"""Two-phase training: contrastive pre-training, then fine-tuning with the
classifier replaced by frozen text prototypes."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import container
from .align import AlignBatch, AlignConfig, pretrain_loss, sample_candidates
from .datakit import DatasetIndex, load_annotations, load_images, train_val_split
from .detector.core import detection_loss, finetune_forward, global_feature, infer, region_embeddings
from .detector.model import DetectorConfig, DetectorNet, preprocess
from .evalkit import Detection, write_results
from .taxonomy import SplitSpec, load_taxonomy
from .textspace import EncoderSpec, PrototypeBank, background_init, build_prototype_bank

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class Phase(str, enum.Enum):
    PRETRAIN = "Pretrain"
    FINETUNE = "Finetune"
    SCRATCH = "Scratch"


def lr_at(schedule: Sequence[tuple[int, float]], step: int) -> float:
    """Piecewise-constant learning rate.

    Stage ``i`` covers steps in ``[threshold_{i-1}, threshold_i)``; a step
    equal to a threshold already belongs to the next stage, and steps past
    the last threshold keep the last rate.
    """
    if not schedule:
        raise ConfigError("lr schedule is empty")
    if step < 0:
        raise ValueError("step must be >= 0")
    for i, (threshold, _) in enumerate(schedule):
        if step < threshold:
            return float(schedule[i][1])
    return float(schedule[-1][1])


def default_schedule(max_steps: int, base_lr: float = 5e-3) -> list[tuple[int, float]]:
    """Drops by 10x at 60% and 90% of the run."""
    return [
        (max(1, round(0.6 * max_steps)), base_lr),
        (max(2, round(0.9 * max_steps)), base_lr / 10),
        (max(3, max_steps), base_lr / 100),
    ]


@dataclass(frozen=True)
class RunConfig:
    phase: Phase
    output_dir: str
    annotations: str = ""
    taxonomy: str = ""
    split: str = ""
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    lr_schedule: tuple[tuple[int, float], ...] = ()
    max_steps: int = 1000
    batch_size: int = 8
    seed: int = 0
    data_seed: int = 0
    train_fraction: float = 0.8
    momentum: float = 0.9
    weight_decay: float = 1e-4
    checkpoint_in: str | None = None
    from_scratch_ablation: bool = False
    resume: bool = False
    checkpoint_every: int = 0
    log_every: int = 10
    hflip: bool = True
    threads: int = 1
    grad_clip: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "phase", Phase(self.phase))
        for k, cls in (("encoder", EncoderSpec), ("detector", DetectorConfig), ("align", AlignConfig)):
            v = getattr(self, k)
            if isinstance(v, dict):
                object.__setattr__(self, k, cls.from_json(v) if hasattr(cls, "from_json") else cls(**v))
        sched = tuple((int(t), float(lr)) for t, lr in self.lr_schedule) or tuple(
            default_schedule(max(self.max_steps, 1))
        )
        object.__setattr__(self, "lr_schedule", sched)
        lrs = [lr for _, lr in sched]
        if any(lr <= 0 for lr in lrs):
            raise ConfigError("learning rates must be positive")
        if any(b > a for a, b in zip(lrs, lrs[1:])):
            raise ConfigError("learning rates must be non-increasing across thresholds")
        if any(b <= a for (a, _), (b, _) in zip(sched, sched[1:])):
            raise ConfigError("lr thresholds must be strictly increasing")
        if self.max_steps < 0 or self.batch_size < 1:
            raise ConfigError("max_steps must be >= 0 and batch_size >= 1")
        if self.phase is Phase.FINETUNE and not self.checkpoint_in and not self.from_scratch_ablation:
            raise ConfigError("Finetune needs checkpoint_in unless from_scratch_ablation is set")
        if not 0 < self.train_fraction <= 1:
            raise ConfigError("train_fraction must lie in (0, 1]")
        if self.encoder.d != self.detector.feature_dim:
            raise ConfigError("encoder dimension must equal detector feature_dim")

    def to_json(self) -> dict:
        d = {
            "version": CONFIG_VERSION,
            "phase": self.phase.value,
            "encoder": self.encoder.to_json(),
            "detector": self.detector.to_json(),
            "align": asdict(self.align),
            "lr_schedule": [list(s) for s in self.lr_schedule],
        }
        for f in (
            "output_dir annotations taxonomy split max_steps batch_size seed data_seed train_fraction momentum "
            "weight_decay checkpoint_in from_scratch_ablation resume checkpoint_every log_every hflip threads grad_clip"
        ).split():
            d[f] = getattr(self, f)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        obj = dict(obj)
        version = obj.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version}")
        if "encoder" in obj:
            obj["encoder"] = EncoderSpec.from_json(obj["encoder"])
        if "detector" in obj:
            obj["detector"] = DetectorConfig.from_json(obj["detector"])
        if "align" in obj:
            obj["align"] = AlignConfig(**obj["align"])
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class TrainState:
    step: int
    phase: Phase
    net: DetectorNet
    optimizer: torch.optim.Optimizer
    seed: int
    background: torch.nn.Parameter | None = None
    best_metric: dict = field(default_factory=dict)

    def parameters(self) -> dict[str, torch.Tensor]:
        out = {f"param/{k}": v for k, v in self.net.state_dict().items()}
        if self.background is not None:
            out["param/background"] = self.background.detach()
        return out


def _named_params(net: DetectorNet, background) -> list[tuple[str, torch.nn.Parameter]]:
    named = list(net.named_parameters())
    if background is not None:
        named.append(("background", background))
    return named


def save_checkpoint(path, state: TrainState, config: RunConfig, bank: PrototypeBank | None = None) -> Path:
    arrays = {k: v.detach().cpu().numpy().astype(np.float32) for k, v in state.parameters().items()}
    named = dict(_named_params(state.net, state.background))
    key_of = {id(p): n for n, p in named.items()}
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            buf = state.optimizer.state.get(p, {}).get("momentum_buffer")
            if buf is not None:
                arrays[f"momentum/{key_of[id(p)]}"] = buf.detach().numpy().astype(np.float32)
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "phase": state.phase.value,
        "step": state.step,
        "seed": state.seed,
        "config": config.to_json(),
        "detector": config.detector.to_json(),
        "encoder": config.encoder.to_json(),
        "lr_schedule": [list(s) for s in config.lr_schedule],
        "tau": config.align.tau,
        "bank_digest": bank.digest() if bank is not None else None,
        "bank_categories": list(bank.categories) if bank is not None else None,
        "best_metric": state.best_metric,
    }
    return container.write(path, meta, arrays)


@dataclass
class Checkpoint:
    meta: dict
    arrays: dict[str, np.ndarray]

    @property
    def phase(self) -> Phase:
        return Phase(self.meta["phase"])

    @property
    def step(self) -> int:
        return int(self.meta["step"])

    @property
    def detector_config(self) -> DetectorConfig:
        return DetectorConfig.from_json(self.meta["detector"])

    @property
    def encoder(self) -> EncoderSpec:
        return EncoderSpec.from_json(self.meta["encoder"])

    def params(self, prefix="param/") -> dict[str, torch.Tensor]:
        return {k[len(prefix) :]: torch.from_numpy(v) for k, v in self.arrays.items() if k.startswith(prefix)}

    def build_net(self) -> DetectorNet:
        net = DetectorNet(self.detector_config)
        p = self.params()
        p.pop("background", None)
        net.load_state_dict(p)
        net.eval()
        return net

    def background(self) -> np.ndarray | None:
        bg = self.arrays.get("param/background")
        return None if bg is None else bg.astype(np.float64)

    def save(self, path) -> Path:
        return container.write(path, self.meta, self.arrays)

    def bank(self, categories: Sequence[str] | None = None) -> PrototypeBank:
        """Bank for ``categories`` (default: the training vocabulary) with the learned background row."""
        cats = list(categories or self.meta["bank_categories"] or [])
        bank = build_prototype_bank(cats, self.encoder)
        bg = self.background()
        return bank if bg is None else bank.with_background(bg)


def load_checkpoint(path) -> Checkpoint:
    meta, arrays = container.read(path)
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise TrainingError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
    return Checkpoint(meta, arrays)


# --------------------------------------------------------------------------
# data


@dataclass
class TrainData:
    images: torch.Tensor  # (N, H, W, 3) uint8
    boxes: list[torch.Tensor]
    labels: list[torch.Tensor]  # indices into ``vocabulary``
    vocabulary: list[str]
    image_ids: list[str]

    @classmethod
    def from_index(cls, index: DatasetIndex, vocabulary: Sequence[str]) -> "TrainData":
        vocab = list(vocabulary)
        pos = {c: i for i, c in enumerate(vocab)}
        pixels = load_images(index)
        imgs, boxes, labels, ids = [], [], [], []
        for im in index.images:
            if im.dominant_category not in pos:
                raise TrainingError(f"image {im.image_id} has category {im.dominant_category!r} outside the vocabulary")
            imgs.append(pixels[im.image_id])
            boxes.append(torch.tensor([b.as_tuple() for b in im.boxes], dtype=torch.float32))
            labels.append(torch.full((len(im.boxes),), pos[im.dominant_category], dtype=torch.long))
            ids.append(im.image_id)
        if not imgs:
            raise TrainingError("training set is empty")
        return cls(torch.from_numpy(np.stack(imgs)), boxes, labels, vocab, ids)

    def batch(self, step: int, batch_size: int, seed: int, hflip: bool):
        """Stateless sampling: the batch is a pure function of (seed, step)."""
        rng = np.random.default_rng([seed, step, 7919])
        idx = rng.choice(len(self.image_ids), size=batch_size, replace=len(self.image_ids) < batch_size)
        flips = rng.random(batch_size) < 0.5 if hflip else np.zeros(batch_size, dtype=bool)
        x = preprocess(self.images[torch.from_numpy(idx)])
        W = x.shape[-1]
        targets = []
        for j, (i, f) in enumerate(zip(idx, flips)):
            b = self.boxes[i]
            if f:
                x[j] = x[j].flip(-1)
                b = torch.stack([W - b[:, 2], b[:, 1], W - b[:, 0], b[:, 3]], dim=1)
            targets.append((b, self.labels[i]))
        return x, targets, [self.vocabulary[int(self.labels[i][0])] for i in idx]


def _step_generator(seed: int, step: int) -> torch.Generator:
    h = hashlib.sha256(f"{seed}:{step}".encode()).digest()
    return torch.Generator().manual_seed(int.from_bytes(h[:8], "little") & ((1 << 63) - 1))


def _seeded_net(cfg: DetectorConfig, seed: int) -> DetectorNet:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return DetectorNet(cfg)


def _optimizer(params, config: RunConfig) -> torch.optim.SGD:
    return torch.optim.SGD(params, lr=lr_at(config.lr_schedule, 0), momentum=config.momentum, weight_decay=config.weight_decay)


def _restore_momentum(opt, named, ckpt: Checkpoint):
    bufs = ckpt.params("momentum/")
    for name, p in named:
        if name in bufs:
            opt.state[p]["momentum_buffer"] = bufs[name].clone()


class MetricsLog:
    def __init__(self, path: Path, append: bool = False):
        self.path = path
        self._fh = open(path, "a" if append else "w", encoding="utf-8")

    def write(self, record: dict):
        record = {**record, "timestamp": round(time.time(), 3)}
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


def read_metrics(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def _round(v: float) -> float:
    return float(f"{v:.8g}")


# --------------------------------------------------------------------------
# phases


def _dataset(config: RunConfig, split: SplitSpec | None = None):
    if not config.annotations:
        raise ConfigError("config.annotations is required")
    path = Path(config.annotations)
    if not path.exists():
        raise FileNotFoundError(f"dataset missing: {path}")
    index = load_annotations(path)
    if config.train_fraction >= 1.0:
        return index, index, DatasetIndex((), root=index.root)
    train, val = train_val_split(index, config.train_fraction, config.data_seed)
    return index, train, val


def _run(config: RunConfig, init: Checkpoint | None, data: TrainData, bank: PrototypeBank, step_fn, background: bool):
    torch.set_num_threads(config.threads)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    resume = init is not None and config.resume and init.phase is config.phase
    net = _seeded_net(config.detector, config.seed)
    bg = None
    if background:
        bg = torch.nn.Parameter(torch.tensor(bank.background, dtype=torch.float32))
    start = 0
    if init is not None:
        p = init.params()
        init_bg = p.pop("background", None)
        net.load_state_dict(p)
        if resume:
            start = init.step
            if bg is not None and init_bg is not None:
                bg.data.copy_(init_bg)
    named = _named_params(net, bg)
    opt = _optimizer([p for _, p in named], config)
    if resume:
        _restore_momentum(opt, named, init)
    state = TrainState(start, config.phase, net, opt, config.seed, bg)

    log = MetricsLog(out / "metrics.jsonl", append=resume)
    init_path = out / "init.ckpt"
    if start == 0:
        save_checkpoint(init_path, state, config, bank)
    last_good = init_path if start == 0 else Path(config.checkpoint_in)
    net.train()
    try:
        for step in range(start, config.max_steps):
            lr = lr_at(config.lr_schedule, step)
            for g in opt.param_groups:
                g["lr"] = lr
            parts, names = step_fn(net, bg, step)
            total = parts["total"]
            if not torch.isfinite(total):
                raise TrainingError(f"non-finite loss at step {step}; last good checkpoint: {last_good}")
            opt.zero_grad(set_to_none=True)
            total.backward()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_([p for _, p in named], config.grad_clip)
            opt.step()
            state.step = step + 1
            if config.log_every and (step % config.log_every == 0 or step + 1 == config.max_steps):
                rec = {"step": step, "phase": config.phase.value, "lr": lr}
                rec.update({k: _round(float(v.detach())) for k, v in parts.items()})
                rec["batch_categories"] = sorted(set(names))
                log.write(rec)
            if config.checkpoint_every and state.step % config.checkpoint_every == 0 and state.step < config.max_steps:
                last_good = save_checkpoint(out / f"step{state.step:06d}.ckpt", state, config, bank)
    finally:
        log.close()
    net.eval()
    final = save_checkpoint(out / "final.ckpt", state, config, bank)
    return final, state


def run_pretrain(config: RunConfig) -> Path:
    """Optimise region + image contrastive losses over the backbone and region head.

    The caption of each image (and of each of its boxes) is its category
    name; the text side is the frozen encoder.
    """
    if config.phase is not Phase.PRETRAIN:
        raise ConfigError("run_pretrain needs phase=Pretrain")
    index, train, _ = _dataset(config)
    vocab = index.categories
    bank = build_prototype_bank(vocab, config.encoder)
    protos = torch.tensor(bank.matrix, dtype=torch.float32)
    data = TrainData.from_index(train, vocab)
    init = load_checkpoint(config.checkpoint_in) if config.checkpoint_in else None

    def step_fn(net, _bg, step):
        x, targets, names = data.batch(step, config.batch_size, config.seed, config.hflip)
        gen = _step_generator(config.seed, step)
        fmap = net.features(x)
        emb, _, _ = region_embeddings(net, fmap, [b for b, _ in targets])
        rows = torch.cat([lab for _, lab in targets])
        cands, pos = sample_candidates(rows, protos, config.align.negatives, gen)
        img = global_feature(net, fmap)
        captions = protos[torch.tensor([t[1][0] for t in targets])]
        parts = pretrain_loss(AlignBatch(emb, pos, cands, img, captions), config.align)
        return parts, names

    final, _ = _run(config, init, data, bank, step_fn, background=False)
    return final


def _split_vocab(config: RunConfig):
    if not config.split:
        return None, None, None
    split = SplitSpec.load(config.split)
    registry = load_taxonomy(config.taxonomy) if config.taxonomy else None
    if split.class_level and registry is None:
        raise ConfigError("a ClassLevel split needs config.taxonomy")
    if registry is not None:
        if split.source_digest != registry.digest():
            raise ConfigError("split was generated from a different taxonomy")
        seen, unseen = split.seen_categories(registry), split.unseen_categories(registry)
    else:
        seen, unseen = sorted(split.seen), sorted(split.unseen)
    return split, seen, unseen


def run_finetune(config: RunConfig) -> Path:
    """Fine-tune on seen categories with the frozen seen-vocabulary bank plus a learnable background row."""
    if config.phase not in (Phase.FINETUNE, Phase.SCRATCH):
        raise ConfigError("run_finetune needs phase=Finetune (or Scratch)")
    index, train, _ = _dataset(config)
    split, seen, _ = _split_vocab(config)
    if seen is None:
        seen = index.categories
    unknown = [c for c in seen if c not in set(index.categories)]
    if unknown:
        raise ConfigError(f"split references categories missing from the dataset: {unknown[:5]}")
    seen_set = set(seen)
    train = train.filter_categories(seen_set)
    data = TrainData.from_index(train, seen)
    bank = build_prototype_bank(seen, config.encoder, include_background=True)
    frozen = torch.tensor(bank.matrix, dtype=torch.float32)
    init = None
    if config.checkpoint_in:
        init = load_checkpoint(config.checkpoint_in)
        if init.detector_config.feature_dim != bank.d:
            raise ConfigError("checkpoint feature dim does not match the prototype bank")

    observed: set[str] = set()

    def step_fn(net, bg, step):
        x, targets, names = data.batch(step, config.batch_size, config.seed, config.hflip)
        observed.update(names)
        leak = set(names) - seen_set
        if leak:
            raise TrainingError(f"vocabulary leak: {sorted(leak)} in a fine-tuning batch")
        gen = _step_generator(config.seed, step)
        protos = torch.cat([frozen, bg[None, :]], dim=0)
        pred, tgt = finetune_forward(net, x, targets, protos, gen)
        return detection_loss(pred, tgt, net.cfg), names

    final, _ = _run(config, init, data, bank, step_fn, background=True)
    audit = {"seen": sorted(seen_set), "observed": sorted(observed), "leak": sorted(observed - seen_set)}
    (Path(config.output_dir) / "vocab_audit.json").write_text(json.dumps(audit, indent=1) + "\n", encoding="utf-8")
    return final


# --------------------------------------------------------------------------
# inference over a dataset


def predict_index(ckpt: Checkpoint, index: DatasetIndex, bank: PrototypeBank, batch_size: int = 32) -> list[Detection]:
    net = ckpt.build_net()
    pixels = load_images(index)
    dets: list[Detection] = []
    ids = [im.image_id for im in index.images]
    for lo in range(0, len(ids), batch_size):
        chunk = ids[lo : lo + batch_size]
        x = torch.from_numpy(np.stack([pixels[i] for i in chunk]))
        for per_image in infer(net, x, bank, image_ids=chunk):
            dets.extend(per_image)
    return dets


def run_predict(checkpoint, annotations, categories: Sequence[str], out_path) -> Path:
    ckpt = load_checkpoint(checkpoint)
    index = load_annotations(annotations) if not isinstance(annotations, DatasetIndex) else annotations
    bank = ckpt.bank(categories)
    return write_results(predict_index(ckpt, index, bank), out_path)
