"""Hierarchical category registry and seen/unseen split protocols."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

from .container import canonical_json

logger = logging.getLogger(__name__)

RANKS = ("Kingdom", "Phylum", "Class", "Order", "Family", "Genus", "Species")


class TaxonomyError(ValueError):
    pass


@dataclass(frozen=True)
class CategoryRecord:
    name: str
    common_name: str | None = None
    ranks: Mapping[str, str | None] = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name.strip():
            raise TaxonomyError("category name must be a non-empty string")
        unknown = set(self.ranks) - set(RANKS)
        if unknown:
            raise TaxonomyError(f"{self.name!r}: unknown rank keys {sorted(unknown)}")
        full = {r: (self.ranks.get(r) or None) for r in RANKS}
        object.__setattr__(self, "ranks", MappingProxyType(full))

    @property
    def undefined(self) -> bool:
        return self.ranks["Class"] is None

    @property
    def klass(self) -> str | None:
        return self.ranks["Class"]

    def to_json(self) -> dict:
        out = {"name": self.name, "common_name": self.common_name}
        for r in RANKS:
            out[r.lower()] = self.ranks[r]
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "CategoryRecord":
        if not isinstance(obj, Mapping) or "name" not in obj:
            raise TaxonomyError(f"taxonomy record without a name: {obj!r}")
        ranks = {r: obj.get(r.lower()) for r in RANKS}
        for r, v in ranks.items():
            if v is not None and not isinstance(v, str):
                raise TaxonomyError(f"{obj['name']!r}: rank {r} must be a string or null")
        return cls(name=obj["name"], common_name=obj.get("common_name"), ranks=ranks)


class TaxonomyRegistry:
    """Ordered, immutable collection of category records indexed by Class."""

    def __init__(self, records: Iterable[CategoryRecord] = ()):
        recs = tuple(records)
        seen: set[str] = set()
        index: dict[str, list[str]] = {}
        for rec in recs:
            if rec.name in seen:
                raise TaxonomyError(f"duplicate category name {rec.name!r}")
            seen.add(rec.name)
            if not rec.undefined:
                index.setdefault(rec.klass, []).append(rec.name)
        self._records = recs
        self._by_name = {r.name: r for r in recs}
        self._class_index = MappingProxyType({k: tuple(v) for k, v in index.items()})

    @property
    def records(self) -> tuple[CategoryRecord, ...]:
        return self._records

    @property
    def class_index(self) -> Mapping[str, tuple[str, ...]]:
        return self._class_index

    @property
    def classes(self) -> list[str]:
        return list(self._class_index)

    @property
    def names(self) -> list[str]:
        return [r.name for r in self._records]

    @property
    def defined(self) -> list[str]:
        return [r.name for r in self._records if not r.undefined]

    @property
    def undefined(self) -> list[str]:
        return [r.name for r in self._records if r.undefined]

    def __len__(self):
        return len(self._records)

    def __iter__(self):
        return iter(self._records)

    def __contains__(self, name):
        return name in self._by_name

    def __getitem__(self, name: str) -> CategoryRecord:
        return self._by_name[name]

    def __eq__(self, other):
        return isinstance(other, TaxonomyRegistry) and self.to_json() == other.to_json()

    def class_of(self, name: str) -> str | None:
        return self._by_name[name].klass

    def to_json(self) -> list[dict]:
        return [r.to_json() for r in self._records]

    def canonical_bytes(self) -> bytes:
        return canonical_json(self.to_json()).encode("utf-8")

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_bytes()).hexdigest()

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=1, ensure_ascii=False) + "\n", encoding="utf-8")
        return path


def load_taxonomy(path: str | os.PathLike) -> TaxonomyRegistry:
    """Read a taxonomy record file (JSON array) into a registry.

    Records whose Species is known but Class is not are kept, marked
    undefined, and logged as inconsistent.
    """
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        return TaxonomyRegistry()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TaxonomyError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(raw, list):
        raise TaxonomyError(f"{path}: expected a JSON array of records")
    records = []
    for obj in raw:
        rec = CategoryRecord.from_json(obj)
        if rec.undefined and rec.ranks["Species"] is not None:
            logger.warning("%r has a Species but no Class; treating it as undefined", rec.name)
        records.append(rec)
    return TaxonomyRegistry(records)


class Protocol(str, enum.Enum):
    INTRA_CLASS = "IntraClass"
    INTER_CLASS = "InterClass"
    CLASS_LEVEL = "ClassLevel"
    FULLY_SUPERVISED = "FullySupervised"
    HELD_OUT = "HeldOut"

    @classmethod
    def parse(cls, value) -> "Protocol":
        if isinstance(value, cls):
            return value
        norm = str(value).replace("-", "").replace("_", "").lower()
        for p in cls:
            if p.value.lower() == norm:
                return p
        raise TaxonomyError(f"unknown split protocol {value!r}; choose from {[p.value for p in cls]}")


@dataclass(frozen=True)
class SplitSpec:
    protocol: Protocol
    seen: frozenset
    unseen: frozenset
    seed: int
    source_digest: str

    def __post_init__(self):
        object.__setattr__(self, "protocol", Protocol.parse(self.protocol))
        object.__setattr__(self, "seen", frozenset(self.seen))
        object.__setattr__(self, "unseen", frozenset(self.unseen))

    @property
    def class_level(self) -> bool:
        return self.protocol is Protocol.CLASS_LEVEL

    def to_json(self) -> dict:
        return {
            "protocol": self.protocol.value,
            "seen": sorted(self.seen),
            "unseen": sorted(self.unseen),
            "seed": self.seed,
            "source_digest": self.source_digest,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "SplitSpec":
        return cls(obj["protocol"], obj["seen"], obj["unseen"], int(obj["seed"]), obj["source_digest"])

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SplitSpec":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def seen_categories(self, registry: TaxonomyRegistry) -> list[str]:
        """Category-level seen vocabulary, in registry order."""
        return _expand(self.seen, self, registry)

    def unseen_categories(self, registry: TaxonomyRegistry) -> list[str]:
        return _expand(self.unseen, self, registry)


def _expand(names, split: SplitSpec, registry: TaxonomyRegistry) -> list[str]:
    if split.class_level:
        return [n for n in registry.defined if registry.class_of(n) in names]
    return [n for n in registry.names if n in names]


@dataclass(frozen=True)
class SplitParams:
    seen_classes: Sequence[str] | None = None
    block: int = 4
    unseen_categories: Sequence[str] | None = None


def gen_split(
    registry: TaxonomyRegistry,
    protocol,
    params: SplitParams | None = None,
    seed: int = 0,
) -> SplitSpec:
    """Partition the registry into seen/unseen sets.

    InterClass sorts each Class's categories by name and marks 1-indexed
    positions divisible by ``params.block`` as unseen; Classes with fewer
    than ``block`` members are left out of both sides.
    HeldOut marks an explicit list of categories (``params.unseen_categories``)
    as unseen and every other defined category as seen.
    """
    protocol = Protocol.parse(protocol)
    params = params or SplitParams()
    digest = registry.digest()
    index = registry.class_index

    if protocol is Protocol.HELD_OUT:
        held = list(params.unseen_categories or ())
        missing = [n for n in held if n not in registry or registry[n].undefined]
        if not held or missing:
            raise TaxonomyError(f"HeldOut needs defined category names; bad: {missing or 'empty list'}")
        return SplitSpec(protocol, [n for n in registry.defined if n not in set(held)], held, seed, digest)

    if protocol is Protocol.FULLY_SUPERVISED:
        return SplitSpec(protocol, registry.names, (), seed, digest)

    if protocol is Protocol.INTER_CLASS:
        seen, unseen = [], []
        eligible = [c for c, members in index.items() if len(members) >= params.block]
        if not eligible:
            raise TaxonomyError(f"InterClass needs at least one Class with >= {params.block} categories")
        for c in eligible:
            for pos, name in enumerate(sorted(index[c]), start=1):
                (unseen if pos % params.block == 0 else seen).append(name)
        return SplitSpec(protocol, seen, unseen, seed, digest)

    if params.seen_classes is None:
        raise TaxonomyError(f"{protocol.value} requires a list of seen Classes")
    seen_classes = list(params.seen_classes)
    missing = [c for c in seen_classes if c not in index]
    if missing:
        raise TaxonomyError(f"unknown Class name(s) in seen list: {missing}")
    unseen_classes = [c for c in index if c not in set(seen_classes)]

    if protocol is Protocol.CLASS_LEVEL:
        return SplitSpec(protocol, seen_classes, unseen_classes, seed, digest)
    seen = [n for c in seen_classes for n in index[c]]
    unseen = [n for c in unseen_classes for n in index[c]]
    return SplitSpec(protocol, seen, unseen, seed, digest)


@dataclass
class ValidationReport:
    checks: list[tuple[str, bool, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(passed for _, passed, _ in self.checks)

    def failures(self) -> list[str]:
        return [name for name, passed, _ in self.checks if not passed]

    def lines(self) -> list[str]:
        return [f"[{'PASS' if p else 'FAIL'}] {n}: {d}" for n, p, d in self.checks]


def validate_split(split: SplitSpec, registry: TaxonomyRegistry) -> ValidationReport:
    report = ValidationReport()
    both = split.seen & split.unseen
    report.checks.append(("disjoint", not both, f"{len(both)} name(s) in both sets" if both else "seen and unseen are disjoint"))

    if split.protocol is Protocol.CLASS_LEVEL:
        universe = set(registry.classes)
    elif split.protocol is Protocol.FULLY_SUPERVISED:
        universe = set(registry.names)
    elif split.protocol is Protocol.INTER_CLASS:
        # Eligibility is monotone in Class size; the smallest touched Class recovers the block.
        sizes = [len(m) for m in registry.class_index.values() if set(m) & (split.seen | split.unseen)]
        floor = min(sizes, default=0)
        universe = {n for members in registry.class_index.values() if sizes and len(members) >= floor for n in members}
    else:
        universe = set(registry.defined)
    covered = split.seen | split.unseen
    stray = covered - universe
    gaps = universe - covered
    fine = not stray and not gaps
    report.checks.append(("coverage", fine, f"{len(stray)} unknown, {len(gaps)} uncovered"))
    if split.protocol is Protocol.FULLY_SUPERVISED:
        report.checks.append(("no-unseen", not split.unseen, f"{len(split.unseen)} unseen"))

    match = split.source_digest == registry.digest()
    report.checks.append(("digest", match, "registry digest matches" if match else "split was generated from a different registry"))
    return report
