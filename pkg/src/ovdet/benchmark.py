"""Synthetic open-vocabulary benchmark: held-out colour x shape compositions.

The target domain is textured-background images over a colour x shape grid
with one composition per shape held out. Pre-training uses a separate
plain-background corpus over a wider colour palette that never contains a
held-out composition, so unseen detection cannot come from leakage.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .container import canonical_json
from .datakit import ALL_COLORS, SynthConfig, gen_synthetic, load_annotations, train_val_split
from .detector.model import DetectorConfig
from .evalkit import EvalResult, evaluate, write_results
from .pipeline import Phase, RunConfig, load_checkpoint, predict_index, run_finetune, run_pretrain
from .taxonomy import Protocol, SplitParams, gen_split
from .textspace import EncoderSpec

logger = logging.getLogger(__name__)


def diagonal_holdout(colors: Sequence[str], shapes: Sequence[str]) -> list[str]:
    """One held-out composition per shape, each with a different colour."""
    return [f"{colors[i % len(colors)]} {s}" for i, s in enumerate(shapes)]


@dataclass(frozen=True)
class BenchmarkConfig:
    colors: tuple[str, ...] = ("red", "green", "blue", "yellow")
    shapes: tuple[str, ...] = ("circle", "square", "triangle", "diamond")
    pretrain_extra_colors: tuple[str, ...] = ("purple", "orange", "cyan", "white")
    images_per_category: int = 20
    pretrain_images_per_category: int = 30
    image_size: int = 64
    data_seed: int = 0
    pretrain_steps: int = 2000
    finetune_steps: int = 600
    batch_size: int = 8
    pretrain_lr: float = 0.02
    finetune_lr: float = 0.02
    tau: float = 0.07
    feature_dim: int = 64
    cls_temperature: float = 0.07
    detector: DetectorConfig = field(default_factory=lambda: DetectorConfig(backbone_channels=(16, 24, 32, 48), head_dim=128, pool_size=5))

    def __post_init__(self):
        object.__setattr__(self, "detector", replace(
            self.detector, feature_dim=self.feature_dim, image_size=self.image_size, cls_temperature=self.cls_temperature))

    def to_json(self) -> dict:
        d = asdict(self)
        d["detector"] = self.detector.to_json()
        return d

    def digest(self, phase: str) -> str:
        """Short hash of the fields a phase depends on, used to key cached runs."""
        d = self.to_json()
        if phase == "pretrain":
            for k in ("images_per_category", "finetune_steps", "finetune_lr", "cls_temperature"):
                d.pop(k)
            d["detector"].pop("cls_temperature")
        return hashlib.sha256(canonical_json(d).encode()).hexdigest()[:10]

    @property
    def held_out(self) -> list[str]:
        return diagonal_holdout(self.colors, self.shapes)

    def target_synth(self) -> SynthConfig:
        return SynthConfig(
            colors={c: ALL_COLORS[c] for c in self.colors},
            shapes=self.shapes,
            images_per_category=self.images_per_category,
            image_size=self.image_size,
            background="textured",
            seed=self.data_seed,
        )

    def pretrain_synth(self) -> SynthConfig:
        cols = (*self.colors, *self.pretrain_extra_colors)
        return SynthConfig(
            colors={c: ALL_COLORS[c] for c in cols},
            shapes=self.shapes,
            images_per_category=self.pretrain_images_per_category,
            image_size=self.image_size,
            background="plain",
            distractor_rate=0.0,
            exclude=tuple(self.held_out),
            seed=self.data_seed + 1000,
        )


@dataclass
class Benchmark:
    root: Path
    config: BenchmarkConfig

    @property
    def target_dir(self) -> Path:
        return self.root / "target"

    @property
    def pretrain_dir(self) -> Path:
        return self.root / "pretrain_corpus"

    @property
    def split_path(self) -> Path:
        return self.root / "split.json"

    def prepare(self) -> "Benchmark":
        self.root.mkdir(parents=True, exist_ok=True)
        if not (self.target_dir / "manifest.json").exists():
            gen_synthetic(self.config.target_synth(), self.target_dir)
        if not (self.pretrain_dir / "manifest.json").exists():
            gen_synthetic(self.config.pretrain_synth(), self.pretrain_dir)
        if not self.split_path.exists():
            from .taxonomy import load_taxonomy

            reg = load_taxonomy(self.target_dir / "taxonomy.json")
            split = gen_split(reg, Protocol.HELD_OUT, SplitParams(unseen_categories=self.config.held_out), seed=0)
            split.save(self.split_path)
        return self

    def encoder(self, kind: str) -> EncoderSpec:
        return EncoderSpec(kind=kind, d=self.config.feature_dim, seed=0)

    def _run_dir(self, kind: str, seed: int, tag: str) -> Path:
        key = self.config.digest("pretrain" if tag == "pretrain" else "finetune")
        return self.root / "runs" / f"{kind.lower()}_s{seed}" / f"{tag}_{key}"

    def pretrain(self, kind: str, seed: int) -> Path:
        c = self.config
        out = self._run_dir(kind, seed, "pretrain")
        ckpt = out / "final.ckpt"
        if ckpt.exists():
            return ckpt
        rc = RunConfig(
            phase=Phase.PRETRAIN,
            output_dir=str(out),
            annotations=str(self.pretrain_dir / "annotations.json"),
            encoder=self.encoder(kind),
            detector=c.detector,
            lr_schedule=[(round(0.8 * c.pretrain_steps), c.pretrain_lr), (c.pretrain_steps, c.pretrain_lr / 10)],
            max_steps=c.pretrain_steps,
            batch_size=c.batch_size,
            seed=seed,
            data_seed=c.data_seed,
        )
        out.parent.mkdir(parents=True, exist_ok=True)
        rc.save(out.parent / f"{out.name}_config.json")
        return run_pretrain(rc)

    def finetune(self, kind: str, seed: int, from_scratch: bool = False) -> Path:
        c = self.config
        tag = "scratch" if from_scratch else "finetune"
        out = self._run_dir(kind, seed, tag)
        ckpt = out / "final.ckpt"
        if ckpt.exists():
            return ckpt
        init = None if from_scratch else str(self.pretrain(kind, seed))
        M = c.finetune_steps
        rc = RunConfig(
            phase=Phase.FINETUNE,
            output_dir=str(out),
            annotations=str(self.target_dir / "annotations.json"),
            taxonomy=str(self.target_dir / "taxonomy.json"),
            split=str(self.split_path),
            encoder=self.encoder(kind),
            detector=c.detector,
            lr_schedule=[(round(0.6 * M), c.finetune_lr), (round(0.9 * M), c.finetune_lr / 10), (M, c.finetune_lr / 100)],
            max_steps=M,
            batch_size=c.batch_size,
            seed=seed,
            data_seed=c.data_seed,
            checkpoint_in=init,
            from_scratch_ablation=from_scratch,
        )
        out.parent.mkdir(parents=True, exist_ok=True)
        rc.save(out.parent / f"{out.name}_config.json")
        return run_finetune(rc)

    def evaluate(self, ckpt_path: Path, out_dir: Path | None = None) -> EvalResult:
        """Evaluate on the target val split with the seen + unseen vocabulary."""
        from .taxonomy import SplitSpec, load_taxonomy

        index = load_annotations(self.target_dir / "annotations.json")
        _, val = train_val_split(index, 0.8, self.config.data_seed)
        split = SplitSpec.load(self.split_path)
        reg = load_taxonomy(self.target_dir / "taxonomy.json")
        vocab = split.seen_categories(reg) + split.unseen_categories(reg)
        ckpt = load_checkpoint(ckpt_path)
        dets = predict_index(ckpt, val, ckpt.bank(vocab))
        res = evaluate(dets, val, split, reg)
        out_dir = out_dir or Path(ckpt_path).parent
        write_results(dets, out_dir / "detections.json")
        (out_dir / "metrics.json").write_text(res.dumps(), encoding="utf-8")
        return res

    def run(self, kind: str, seed: int, from_scratch: bool = False) -> EvalResult:
        return self.evaluate(self.finetune(kind, seed, from_scratch))


def summary_line(res: EvalResult) -> str:
    return f"seen {res.map50_seen:.3f} unseen {res.map50_unseen:.3f} all {res.map50_all:.3f}"


def main(argv=None):
    import argparse
    import time

    ap = argparse.ArgumentParser()
    ap.add_argument("root")
    ap.add_argument("--kind", default="Compositional")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--scratch", action="store_true")
    ap.add_argument("--set", nargs="*", default=[], help="BenchmarkConfig overrides key=json")
    a = ap.parse_args(argv)
    kw = {k: json.loads(v) for k, v in (s.split("=", 1) for s in a.set)}
    cfg = BenchmarkConfig(**kw)
    b = Benchmark(Path(a.root), cfg).prepare()
    t = time.time()
    res = b.run(a.kind, a.seed, a.scratch)
    print(a.kind, a.seed, "scratch" if a.scratch else "pretrained", summary_line(res), f"{time.time() - t:.0f}s")
    print(json.dumps(res.to_json()["per_category_ap"], indent=0))


if __name__ == "__main__":
    main()
