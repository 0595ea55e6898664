"""Frozen text prototypes that stand in for a detector's classifier weights."""

from __future__ import annotations

import enum
import hashlib
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import container

# External encoders register here: name -> callable(str) -> 1-D array.
_ADAPTERS: dict[str, Callable[[str], np.ndarray]] = {}


class EncoderError(ValueError):
    pass


class EncoderKind(str, enum.Enum):
    COMPOSITIONAL = "Compositional"
    HASHED = "Hashed"
    EXTERNAL = "External"


@dataclass(frozen=True)
class EncoderSpec:
    kind: EncoderKind = EncoderKind.COMPOSITIONAL
    d: int = 64
    seed: int = 0
    prompt_template: str = "a photo of a {name}"
    vocabulary: tuple[str, ...] | None = None
    adapter: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", EncoderKind(self.kind))
        if self.d < 8:
            raise EncoderError("embedding dimension must be >= 8")
        if self.prompt_template.count("{name}") != 1:
            raise EncoderError("prompt template must contain exactly one {name} slot")
        if self.vocabulary is not None:
            object.__setattr__(self, "vocabulary", tuple(self.vocabulary))

    def to_json(self) -> dict:
        return {
            "kind": self.kind.value,
            "d": self.d,
            "seed": self.seed,
            "prompt_template": self.prompt_template,
            "vocabulary": None if self.vocabulary is None else list(self.vocabulary),
            "adapter": self.adapter,
        }

    @classmethod
    def from_json(cls, obj) -> "EncoderSpec":
        return cls(**obj)


def register_adapter(name: str, fn: Callable[[str], np.ndarray]) -> None:
    """Register a frozen external text encoder (string in, vector out)."""
    _ADAPTERS[name] = fn


def unregister_adapter(name: str) -> None:
    _ADAPTERS.pop(name, None)


def normalize(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(n == 0) or not np.all(np.isfinite(v)):
        raise EncoderError("cannot normalize a zero or non-finite vector")
    return v / n


def _seeded_unit(token: str, d: int, seed: int, salt: str) -> np.ndarray:
    h = hashlib.sha256(f"{salt}|{seed}|{token}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(h[:8], "little"))
    return normalize(rng.standard_normal(d))


def token_vector(token: str, spec: EncoderSpec) -> np.ndarray:
    return _seeded_unit(token, spec.d, spec.seed, "token")


def encode_category(name: str, spec: EncoderSpec) -> np.ndarray:
    """Unit-norm embedding of a category name.

    Compositional: normalize(e(first token) + e(second token)), so unseen
    pairings inherit structure from seen parts. Hashed: one independent
    seeded vector per full name. External: the registered adapter.
    """
    if not isinstance(name, str) or not name.strip():
        raise EncoderError("category name must be non-empty")
    if spec.kind is EncoderKind.COMPOSITIONAL:
        tokens = name.split()
        if len(tokens) != 2:
            raise EncoderError(f"compositional names need two tokens, got {name!r}")
        if spec.vocabulary is not None:
            unknown = [t for t in tokens if t not in spec.vocabulary]
            if unknown:
                raise EncoderError(f"unknown token(s) {unknown} in {name!r}")
        return normalize(token_vector(tokens[0], spec) + token_vector(tokens[1], spec))
    if spec.kind is EncoderKind.HASHED:
        return _seeded_unit(name, spec.d, spec.seed, "name")
    fn = _ADAPTERS.get(spec.adapter or "")
    if fn is None:
        raise EncoderError(f"external adapter {spec.adapter!r} is not registered")
    v = np.asarray(fn(spec.prompt_template.format(name=name)), dtype=np.float64).ravel()
    if v.shape != (spec.d,):
        raise EncoderError(f"adapter returned shape {v.shape}, expected ({spec.d},)")
    return normalize(v)


class FrozenBankError(RuntimeError):
    pass


def _unit_rows(m: np.ndarray) -> np.ndarray:
    # rows already unit-norm are kept bit-exact
    n = np.linalg.norm(m, axis=1, keepdims=True)
    if np.all(np.abs(n - 1) <= 1e-9):
        return m.copy()
    return normalize(m)


class PrototypeBank:
    """Row-aligned category names and unit-norm text embeddings."""

    def __init__(self, categories, matrix, spec: EncoderSpec, background=None, frozen=True):
        categories = list(categories)
        if not categories:
            raise EncoderError("a prototype bank needs at least one category")
        if len(set(categories)) != len(categories):
            dupes = sorted({c for c in categories if categories.count(c) > 1})
            raise EncoderError(f"duplicate category names: {dupes}")
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape != (len(categories), spec.d):
            raise EncoderError(f"matrix shape {matrix.shape} does not match ({len(categories)}, {spec.d})")
        self._categories = tuple(categories)
        self._matrix = _unit_rows(matrix)
        self._matrix.setflags(write=False)
        self._background = None
        if background is not None:
            self._background = normalize(np.asarray(background, dtype=np.float64).ravel())
            self._background.setflags(write=False)
        self.spec = spec
        self._frozen = bool(frozen)

    @property
    def categories(self) -> tuple[str, ...]:
        return self._categories

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    @property
    def background(self) -> np.ndarray | None:
        return self._background

    @property
    def frozen(self) -> bool:
        return self._frozen

    @property
    def d(self) -> int:
        return self.spec.d

    def __len__(self):
        return len(self._categories)

    def __setattr__(self, key, value):
        if getattr(self, "_frozen", False) and key != "_frozen":
            raise FrozenBankError("frozen prototype banks cannot be mutated")
        super().__setattr__(key, value)

    def index(self, name: str) -> int:
        return self._categories.index(name)

    def full_matrix(self) -> np.ndarray:
        """Category rows plus the background row (if any) as the last row."""
        if self._background is None:
            return self._matrix
        return np.vstack([self._matrix, self._background[None, :]])

    def with_background(self, background) -> "PrototypeBank":
        return PrototypeBank(self._categories, self._matrix, self.spec, background, frozen=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def to_bytes(self) -> bytes:
        meta = {
            "categories": list(self._categories),
            "d": self.spec.d,
            "kind": self.spec.kind.value,
            "seed": self.spec.seed,
            "template": self.spec.prompt_template,
            "encoder": self.spec.to_json(),
            "has_background": self._background is not None,
        }
        arrays = {"matrix": self._matrix.astype(np.float32)}
        if self._background is not None:
            arrays["background"] = self._background.astype(np.float32)
        return container.encode(meta, arrays)

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PrototypeBank":
        meta, arrays = container.read(path)
        spec = EncoderSpec.from_json(meta["encoder"])
        return cls(meta["categories"], arrays["matrix"], spec, arrays.get("background"), frozen=True)


def background_init(spec: EncoderSpec) -> np.ndarray:
    return _seeded_unit("__background__", spec.d, spec.seed, "background")


def build_prototype_bank(categories: Sequence[str], spec: EncoderSpec, include_background: bool = False) -> PrototypeBank:
    categories = list(categories)
    if not categories:
        raise EncoderError("categories must be non-empty")
    if len(set(categories)) != len(categories):
        raise EncoderError("duplicate category names")
    matrix = np.stack([encode_category(c, spec) for c in categories])
    bg = background_init(spec) if include_background else None
    return PrototypeBank(categories, matrix, spec, bg, frozen=True)


def swap_vocabulary(bank: PrototypeBank, new_categories: Sequence[str], spec: EncoderSpec | None = None) -> PrototypeBank:
    """New bank over ``new_categories``; the background row is carried over."""
    if not bank.frozen:
        raise FrozenBankError("only frozen banks can be swapped")
    new_categories = list(new_categories)
    if not new_categories:
        raise EncoderError("new vocabulary is empty")
    spec = spec or bank.spec
    fresh = build_prototype_bank(new_categories, spec, include_background=False)
    if bank.background is None:
        return fresh
    if spec.d != bank.d:
        raise EncoderError("cannot carry a background row across embedding dimensions")
    return fresh.with_background(bank.background)


class TextPrototypeEncoder(TransformerMixin, BaseEstimator):
    """Transformer view of :func:`encode_category`: names in, unit rows out."""

    def __init__(self, kind="Compositional", d=64, seed=0, prompt_template="a photo of a {name}", adapter=None):
        self.kind = kind
        self.d = d
        self.seed = seed
        self.prompt_template = prompt_template
        self.adapter = adapter

    def fit(self, X=None, y=None):
        self.spec_ = EncoderSpec(self.kind, self.d, self.seed, self.prompt_template, adapter=self.adapter)
        if X is not None and self.spec_.kind is EncoderKind.COMPOSITIONAL:
            vocab = sorted({t for name in X for t in str(name).split()})
            self.vocabulary_ = tuple(vocab)
        return self

    def transform(self, X):
        if not hasattr(self, "spec_"):
            self.fit()
        return np.stack([encode_category(str(name), self.spec_) for name in X])
