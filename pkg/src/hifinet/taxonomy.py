"""Four-level forgery-attribute hierarchy.

A taxonomy document is UTF-8 JSON::

    {
      "level1": ["fully_synthesized", "partial_manipulated"],
      "level2": [...], "level3": [...], "level4": ["real", ...],
      "parents": {"child": "parent", ...},
      "real_parent_prob": 0.0
    }

``parents`` maps every class at levels 2-4 (except ``real``) to a class one
level up.  ``real_parent_prob`` is the constant used in place of a parent
probability for the ``real`` leaf when scaling level-4 logits (0 keeps its
multiplier at exactly 1).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from typing import Sequence

import numpy as np

from . import tensor as tc

REAL = "real"
NUM_LEVELS = 4


class TaxonomyError(ValueError):
    pass


@dataclass(frozen=True)
class LabelPath:
    leaf: int
    per_level: tuple  # four entries, None where the level does not apply

    def at(self, level: int) -> int | None:
        return self.per_level[level - 1]


@dataclass(frozen=True)
class TaxonomyTree:
    levels: tuple[tuple[str, ...], ...]
    parent_of: tuple[tuple[int, ...], ...]  # -1 for level 1 and for real
    real_index: int
    real_parent_prob: float = 0.0

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(lv) for lv in self.levels)

    @property
    def leaves(self) -> tuple[str, ...]:
        return self.levels[-1]

    def index(self, level: int, name: str) -> int:
        try:
            return self.levels[level - 1].index(name)
        except ValueError:
            raise TaxonomyError(f"unknown class {name!r} at level {level}") from None

    def leaf_index(self, name: str) -> int:
        return self.index(NUM_LEVELS, name)

    def forgery_leaves(self) -> list[str]:
        return [n for i, n in enumerate(self.leaves) if i != self.real_index]

    def path_of(self, leaf: int | str) -> LabelPath:
        if isinstance(leaf, str):
            leaf = self.leaf_index(leaf)
        if not 0 <= leaf < len(self.leaves):
            raise TaxonomyError(f"unknown leaf index {leaf}")
        if leaf == self.real_index:
            return LabelPath(leaf, (None, None, None, leaf))
        path = [leaf]
        cur = leaf
        for lvl in range(NUM_LEVELS, 1, -1):
            cur = self.parent_of[lvl - 1][cur]
            path.append(cur)
        return LabelPath(leaf, tuple(reversed(path)))

    def path_names(self, leaf: int | str) -> list[str | None]:
        p = self.path_of(leaf)
        return [None if i is None else self.levels[b][i] for b, i in enumerate(p.per_level)]

    def children(self, level: int, index: int) -> list[int]:
        """Indices at ``level + 1`` whose parent is ``index``."""
        return [j for j, p in enumerate(self.parent_of[level]) if p == index]

    def broadcast_index(self, level: int) -> np.ndarray:
        """For each class at ``level``, the parent index to copy; real maps to
        one past the parent range (the appended constant)."""
        if level not in (2, 3, 4):
            raise TaxonomyError(f"level {level} has no parent level")
        idx = np.array(self.parent_of[level - 1], dtype=np.intp)
        if level == NUM_LEVELS:
            idx[self.real_index] = self.sizes[level - 2]
        return idx

    def broadcast_parent_probs(self, level: int, parent_probs):
        """Repeat each parent probability onto its children at ``level``.

        Accepts a 1-D/2-D ndarray or a :class:`Tensor` (differentiable); the
        last axis indexes parent classes.
        """
        idx = self.broadcast_index(level)
        k_parent = self.sizes[level - 2]
        data = parent_probs.data if isinstance(parent_probs, tc.Tensor) else np.asarray(parent_probs, float)
        if data.shape[-1] != k_parent:
            raise TaxonomyError(f"level {level - 1} has {k_parent} classes, got {data.shape[-1]} probabilities")
        if not np.allclose(data.sum(axis=-1), 1.0, rtol=0, atol=1e-9):
            raise TaxonomyError("parent probabilities must sum to 1")
        const_shape = data.shape[:-1] + (1,)
        const = np.full(const_shape, self.real_parent_prob)
        if isinstance(parent_probs, tc.Tensor):
            ext = tc.concat([parent_probs, tc.Tensor(const)], axis=-1)
            return tc.take(ext, idx, axis=-1)
        return np.take(np.concatenate([data, const], axis=-1), idx, axis=-1)

    def to_document(self) -> dict:
        doc: dict = {f"level{b + 1}": list(names) for b, names in enumerate(self.levels)}
        parents = {}
        for b in range(1, NUM_LEVELS):
            for j, p in enumerate(self.parent_of[b]):
                if p >= 0:
                    parents[self.levels[b][j]] = self.levels[b - 1][p]
        doc["parents"] = parents
        doc["real_parent_prob"] = self.real_parent_prob
        return doc

    def dumps(self) -> str:
        return json.dumps(self.to_document(), indent=2, ensure_ascii=False) + "\n"

    def digest(self) -> str:
        canon = json.dumps(self.to_document(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _no_dupes(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise TaxonomyError(f"duplicate key {k!r} in taxonomy document")
        out[k] = v
    return out


def load_taxonomy(document: str | dict) -> TaxonomyTree:
    """Parse and validate a taxonomy document (JSON text or decoded dict)."""
    if isinstance(document, str):
        try:
            doc = json.loads(document, object_pairs_hook=_no_dupes)
        except json.JSONDecodeError as exc:
            raise TaxonomyError(f"taxonomy is not valid JSON: {exc}") from None
    else:
        doc = document

    levels: list[tuple[str, ...]] = []
    seen: dict[str, int] = {}
    for b in range(1, NUM_LEVELS + 1):
        names = doc.get(f"level{b}")
        if not isinstance(names, list) or not names:
            raise TaxonomyError(f"missing or empty section 'level{b}'")
        for n in names:
            if not isinstance(n, str) or not n:
                raise TaxonomyError(f"level{b}: class names must be non-empty strings, got {n!r}")
            if n in seen:
                raise TaxonomyError(f"duplicate class name {n!r} (levels {seen[n]} and {b})")
            if n == REAL and b != NUM_LEVELS:
                raise TaxonomyError(f"'real' declared at level {b}; it may only appear at level 4")
            seen[n] = b
        levels.append(tuple(names))
    if REAL not in levels[-1]:
        raise TaxonomyError("level4 must contain the 'real' class")
    sizes = [len(lv) for lv in levels]
    for b in range(1, NUM_LEVELS):
        if sizes[b] < sizes[b - 1]:
            raise TaxonomyError(f"level{b + 1} has fewer classes ({sizes[b]}) than level{b} ({sizes[b - 1]})")

    parents = doc.get("parents", {})
    if not isinstance(parents, dict):
        raise TaxonomyError("'parents' must map child names to parent names")
    for child, parent in parents.items():
        if child not in seen:
            raise TaxonomyError(f"parents: unknown class {child!r}")
        if child == REAL:
            raise TaxonomyError("parents: 'real' must not have a parent")
        if parent not in seen:
            raise TaxonomyError(f"parents: {child!r} points to unknown class {parent!r}")
        if seen[child] == 1:
            raise TaxonomyError(f"parents: level-1 class {child!r} cannot have a parent")
        if seen[parent] != seen[child] - 1:
            kind = "cycle" if seen[parent] >= seen[child] else "level skip"
            raise TaxonomyError(
                f"parents: {child!r} (level {seen[child]}) -> {parent!r} (level {seen[parent]}) is a {kind}; "
                "parents must sit exactly one level up")

    parent_of: list[tuple[int, ...]] = [tuple([-1] * sizes[0])]
    for b in range(1, NUM_LEVELS):
        row = []
        for n in levels[b]:
            if n == REAL:
                row.append(-1)
                continue
            if n not in parents:
                raise TaxonomyError(f"orphan class {n!r} at level {b + 1} has no parent")
            row.append(levels[b - 1].index(parents[n]))
        parent_of.append(tuple(row))
    for b in range(NUM_LEVELS - 1):
        used = set(parent_of[b + 1])
        for i, n in enumerate(levels[b]):
            if i not in used:
                raise TaxonomyError(f"class {n!r} at level {b + 1} has no children; the tree must reach level 4")

    rpp = float(doc.get("real_parent_prob", 0.0))
    if not 0.0 <= rpp <= 1.0:
        raise TaxonomyError(f"real_parent_prob must lie in [0, 1], got {rpp}")
    return TaxonomyTree(tuple(levels), tuple(parent_of), levels[-1].index(REAL), rpp)


def builtin(name: str) -> TaxonomyTree:
    """Load a shipped taxonomy: ``mini`` (desk scale) or ``full`` (the complete 2/4/6/14 tree)."""
    text = resources.files("hifinet.data").joinpath(f"taxonomy_{name}.json").read_text(encoding="utf-8")
    return load_taxonomy(text)


def load_taxonomy_file(path) -> TaxonomyTree:
    with open(path, encoding="utf-8") as fh:
        return load_taxonomy(fh.read())


def leaf_levels(tree: TaxonomyTree, leaves: Sequence[int]) -> np.ndarray:
    """[N, 4] array of per-level targets, -1 where a level does not apply."""
    out = np.full((len(leaves), NUM_LEVELS), -1, dtype=np.int64)
    for r, leaf in enumerate(leaves):
        for b, v in enumerate(tree.path_of(int(leaf)).per_level):
            if v is not None:
                out[r, b] = v
    return out
