"""Estimator-style facade over the fine-tune/infer pipeline."""

from __future__ import annotations

import tempfile
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .datakit import DatasetIndex, load_annotations, write_annotations
from .detector.core import infer
from .detector.model import DetectorConfig
from .evalkit import EvalResult, evaluate
from .pipeline import Phase, RunConfig, default_schedule, load_checkpoint, predict_index, run_finetune
from .taxonomy import Protocol, SplitSpec
from .textspace import EncoderSpec, PrototypeBank, swap_vocabulary


def check_index(X) -> DatasetIndex:
    """Accept a DatasetIndex or a path to an annotation file."""
    if isinstance(X, DatasetIndex):
        return X
    if isinstance(X, (str, Path)):
        return load_annotations(X)
    raise TypeError(f"expected a DatasetIndex or an annotation path, got {type(X).__name__}")


def check_images(X, image_size: int) -> torch.Tensor:
    """uint8 (B, H, W, 3) with H = W = image_size; a single (H, W, 3) image is promoted."""
    x = np.asarray(X)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ValueError(f"expected images shaped (B, H, W, 3), got {x.shape}")
    if x.shape[1:3] != (image_size, image_size):
        raise ValueError(f"expected {image_size}x{image_size} images, got {x.shape[1]}x{x.shape[2]}")
    if x.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {x.dtype}")
    return torch.from_numpy(np.ascontiguousarray(x))


def check_is_fitted(est, attr: str = "checkpoint_path_"):
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")


class OpenVocabularyDetector(BaseEstimator):
    """Fine-tune a detector whose classifier is a frozen text-prototype bank.

    ``fit`` trains on every image of ``X`` with the categories of ``X`` as
    the vocabulary; ``set_vocabulary`` swaps in any other list of names
    without touching the weights; ``predict`` returns per-image detections.
    ``checkpoint_in`` (a pre-trained checkpoint) is optional: without one
    the run is the from-scratch ablation.
    """

    def __init__(
        self,
        encoder_kind: str = "Compositional",
        feature_dim: int = 64,
        max_steps: int = 600,
        lr: float = 0.02,
        batch_size: int = 8,
        seed: int = 0,
        checkpoint_in: str | None = None,
        detector: DetectorConfig | None = None,
        cls_temperature: float = 0.07,
        work_dir: str | None = None,
    ):
        self.encoder_kind = encoder_kind
        self.feature_dim = feature_dim
        self.max_steps = max_steps
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed
        self.checkpoint_in = checkpoint_in
        self.detector = detector
        self.cls_temperature = cls_temperature
        self.work_dir = work_dir

    def _run_config(self, work: Path, annotations: Path, split: Path) -> RunConfig:
        det = replace(self.detector or DetectorConfig(), feature_dim=self.feature_dim, cls_temperature=self.cls_temperature)
        return RunConfig(
            phase=Phase.FINETUNE,
            output_dir=str(work / "finetune"),
            annotations=str(annotations),
            split=str(split),
            encoder=EncoderSpec(kind=self.encoder_kind, d=self.feature_dim, seed=0),
            detector=det,
            lr_schedule=default_schedule(max(self.max_steps, 3), self.lr),
            max_steps=self.max_steps,
            batch_size=self.batch_size,
            seed=self.seed,
            train_fraction=1.0,
            checkpoint_in=self.checkpoint_in,
            from_scratch_ablation=self.checkpoint_in is None,
        )

    def fit(self, X, y=None):
        index = check_index(X)
        if not index.images:
            raise ValueError("cannot fit on an empty dataset")
        work = Path(self.work_dir or tempfile.mkdtemp(prefix="ovdet-"))
        work.mkdir(parents=True, exist_ok=True)
        absolute = DatasetIndex(tuple(replace(im, path=str(index.resolve(im))) for im in index.images))
        ann = write_annotations(absolute, work / "train_annotations.json")
        split = SplitSpec(Protocol.FULLY_SUPERVISED, index.categories, (), self.seed, "")
        split.save(work / "split.json")
        config = self._run_config(work, ann, work / "split.json")
        self.checkpoint_path_ = run_finetune(config)
        self._ckpt = load_checkpoint(self.checkpoint_path_)
        self.vocabulary_ = list(index.categories)
        self.bank_: PrototypeBank = self._ckpt.bank(self.vocabulary_)
        return self

    def set_vocabulary(self, categories: Sequence[str]):
        """Swap the prototype bank; weights are untouched."""
        check_is_fitted(self)
        self.bank_ = swap_vocabulary(self.bank_, list(categories))
        self.vocabulary_ = list(categories)
        return self

    def predict(self, X):
        """Detections per image: a list of lists of :class:`~ovdet.evalkit.Detection`."""
        check_is_fitted(self)
        if isinstance(X, (DatasetIndex, str, Path)):
            index = check_index(X)
            dets = predict_index(self._ckpt, index, self.bank_)
            by_id = {im.image_id: [] for im in index.images}
            for d in dets:
                by_id[d.image_id].append(d)
            return list(by_id.values())
        x = check_images(X, self._ckpt.detector_config.image_size)
        return infer(self._ckpt.build_net(), x, self.bank_)

    def evaluate(self, X, split: SplitSpec) -> EvalResult:
        check_is_fitted(self)
        index = check_index(X)
        return evaluate(predict_index(self._ckpt, index, self.bank_), index, split)

    def score(self, X, y=None) -> float:
        """mAP50 over the current vocabulary on ``X``."""
        index = check_index(X)
        split = SplitSpec(Protocol.FULLY_SUPERVISED, self.vocabulary_, (), self.seed, "")
        return self.evaluate(index, split).map50_all
