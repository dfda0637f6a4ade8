"""Object / interaction / HOI-class vocabulary with the rare split."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

RARE_THRESHOLD = 10


class TaxonomyError(ValueError):
    pass


@dataclass(frozen=True)
class Taxonomy:
    """Ordered vocabularies and the HOI classes built from them.

    ``hoi_classes[h] = (object_index, interaction_index)``. The human
    category is one of ``objects`` (``human_object``), as in HICO-Det where
    "person" is also a valid interaction target.
    """

    objects: tuple[str, ...]
    interactions: tuple[str, ...]
    hoi_classes: tuple[tuple[int, int], ...]
    train_counts: tuple[int, ...]
    human_object: int = 0
    _by_object: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        _check_names(self.objects, "objects")
        _check_names(self.interactions, "interactions")
        if not 0 <= self.human_object < len(self.objects):
            raise TaxonomyError(f"human_object {self.human_object} out of range")
        if len(self.train_counts) != len(self.hoi_classes):
            raise TaxonomyError(
                f"train_counts has {len(self.train_counts)} entries for "
                f"{len(self.hoi_classes)} hoi classes")
        seen = set()
        for h, (o, i) in enumerate(self.hoi_classes):
            if not 0 <= o < len(self.objects):
                raise TaxonomyError(f"hoi class {h}: object index {o} out of range")
            if not 0 <= i < len(self.interactions):
                raise TaxonomyError(f"hoi class {h}: interaction index {i} out of range")
            if (o, i) in seen:
                raise TaxonomyError(f"duplicate hoi class ({self.objects[o]}, {self.interactions[i]})")
            seen.add((o, i))
        for c in self.train_counts:
            if c < 0:
                raise TaxonomyError("train_counts must be nonnegative")
        by_obj: list[list[int]] = [[] for _ in self.objects]
        for h, (o, _) in enumerate(self.hoi_classes):
            by_obj[o].append(h)
        object.__setattr__(self, "_by_object", tuple(tuple(x) for x in by_obj))

    @property
    def num_objects(self) -> int:
        return len(self.objects)

    @property
    def num_interactions(self) -> int:
        return len(self.interactions)

    @property
    def num_hoi(self) -> int:
        return len(self.hoi_classes)

    def classes_for_object(self, o: int) -> list[int]:
        if not 0 <= o < self.num_objects:
            raise IndexError(f"object index {o} out of range [0, {self.num_objects})")
        return list(self._by_object[o])

    def is_rare(self, h: int) -> bool:
        return self.train_counts[h] < RARE_THRESHOLD

    def split(self) -> tuple[frozenset[int], frozenset[int], frozenset[int]]:
        """Return ``(full, rare, non_rare)`` HOI index sets."""
        full = frozenset(range(self.num_hoi))
        rare = frozenset(h for h in full if self.is_rare(h))
        return full, rare, full - rare

    def one_hot(self, o: int) -> np.ndarray:
        if not 0 <= o < self.num_objects:
            raise IndexError(f"object index {o} out of range")
        v = np.zeros(self.num_objects)
        v[o] = 1.0
        return v

    def interaction_of(self) -> np.ndarray:
        """Interaction index of every HOI class, as an int array."""
        return np.array([i for _, i in self.hoi_classes], dtype=np.int64).reshape(-1)

    def object_of(self) -> np.ndarray:
        return np.array([o for o, _ in self.hoi_classes], dtype=np.int64).reshape(-1)

    def class_name(self, h: int) -> str:
        o, i = self.hoi_classes[h]
        return f"{self.objects[self.human_object]}-{self.interactions[i]}-{self.objects[o]}"

    def with_counts(self, counts: Sequence[int]) -> "Taxonomy":
        return Taxonomy(self.objects, self.interactions, self.hoi_classes,
                        tuple(int(c) for c in counts), self.human_object)

    def to_dict(self) -> dict:
        return {
            "objects": list(self.objects),
            "interactions": list(self.interactions),
            "hoi_classes": [[self.objects[o], self.interactions[i]] for o, i in self.hoi_classes],
            "train_counts": list(self.train_counts),
            "human_object": self.objects[self.human_object],
        }

    def content_hash(self) -> str:
        """Hash of the vocabulary structure; train counts are excluded."""
        d = self.to_dict()
        d.pop("train_counts")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "Taxonomy":
        try:
            objects = tuple(d["objects"])
            interactions = tuple(d["interactions"])
            pairs = d["hoi_classes"]
            counts = d.get("train_counts")
        except (KeyError, TypeError) as e:
            raise TaxonomyError(f"taxonomy missing field: {e}") from None
        _check_names(objects, "objects")
        _check_names(interactions, "interactions")
        o_idx = {n: k for k, n in enumerate(objects)}
        i_idx = {n: k for k, n in enumerate(interactions)}
        classes = []
        for p in pairs:
            if not isinstance(p, (list, tuple)) or len(p) != 2:
                raise TaxonomyError(f"hoi class entry must be [object, interaction], got {p!r}")
            if p[0] not in o_idx:
                raise TaxonomyError(f"hoi class references unknown object {p[0]!r}")
            if p[1] not in i_idx:
                raise TaxonomyError(f"hoi class references unknown interaction {p[1]!r}")
            classes.append((o_idx[p[0]], i_idx[p[1]]))
        if counts is None:
            counts = [0] * len(classes)
        human = d.get("human_object", objects[0] if objects else None)
        if human not in o_idx:
            raise TaxonomyError(f"human_object {human!r} is not an object name")
        return cls(objects, interactions, tuple(classes), tuple(int(c) for c in counts), o_idx[human])


def _check_names(names: Sequence[str], what: str) -> None:
    if len(names) == 0:
        raise TaxonomyError(f"{what} must be nonempty")
    for n in names:
        if not isinstance(n, str) or not n:
            raise TaxonomyError(f"{what} entries must be non-empty strings, got {n!r}")
    if len(set(names)) != len(names):
        raise TaxonomyError(f"{what} names must be unique")


def load_taxonomy(path: str | Path) -> Taxonomy:
    with open(path) as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as e:
            raise TaxonomyError(f"{path}: invalid JSON: {e}") from None
    return Taxonomy.from_dict(d)


def save_taxonomy(tax: Taxonomy, path: str | Path) -> None:
    with open(path, "w") as f:
        json.dump(tax.to_dict(), f, indent=2)
        f.write("\n")


def hico_shaped_taxonomy() -> Taxonomy:
    """Placeholder vocabulary with HICO-Det dimensions: 80 objects, 117 interactions, 600 classes.

    Names are synthetic; the class layout spreads 600 (object, interaction)
    pairs over the grid deterministically so every object has at least one class.
    """
    objects = tuple(["person"] + [f"object_{k:02d}" for k in range(1, 80)])
    interactions = tuple(["no_interaction"] + [f"interaction_{k:03d}" for k in range(1, 117)])
    classes: list[tuple[int, int]] = []
    seen = set()
    # every object: "no_interaction" plus a stride through the interaction list
    k = 0
    while len(classes) < 600:
        o = k % 80
        i = 0 if k < 80 else (1 + (k * 37 + o * 11) % 116)
        if (o, i) not in seen:
            seen.add((o, i))
            classes.append((o, i))
        k += 1
    return Taxonomy(objects, interactions, tuple(classes), tuple([0] * 600), 0)
