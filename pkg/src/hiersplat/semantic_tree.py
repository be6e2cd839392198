"""Hierarchical symbolic label tree and the compact semantic codecs.

A tree organizes the original (flat) semantic classes as leaves of a
multi-level hierarchy. Each class is identified by its root-to-leaf path.
Paths are stored as per-level child indices: entry 0 indexes the level-0
node set, entry l > 0 indexes the chosen node within the children of the
level-(l-1) choice. Encoding a path one-hot per level needs only
max-branching-many slots per level, which is what makes the embedding
narrower than a flat one-hot over all classes.

Two codecs are provided: per-level one-hot concatenation, and per-level
little-endian binary codes of ceil(log2 n) bits.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import LevelOutOfRange, PathLevelMismatch, UnknownClass


@dataclass(frozen=True)
class TreeNode:
    name: str
    parent: int | None  # index into the previous level; None at level 0


@dataclass(frozen=True)
class HierPath:
    """Per-level child indices of one root-to-leaf path."""

    node_index_per_level: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.node_index_per_level)


class SemanticTree:
    """Immutable multi-level hierarchy over a set of original class ids.

    Within a level, nodes are numbered in file order ("global" index).
    A node's child index is its rank among the children of its parent,
    again in file order. Both numberings are exposed because codecs work
    in child indices while rendering and mIoU work in global node ids.
    """

    def __init__(self, levels: list[list[TreeNode]], leaf_classes: dict[int, int]):
        if not levels or not levels[0]:
            raise ValueError("tree needs at least one non-empty level")
        self.levels = [list(lv) for lv in levels]
        self.leaf_classes = dict(leaf_classes)  # class id -> leaf node index at level L
        self._validate()
        self._build_indexes()

    # -- construction ------------------------------------------------------

    def _validate(self):
        for node in self.levels[0]:
            if node.parent is not None:
                raise ValueError("level-0 nodes cannot have parents")
        for l in range(1, len(self.levels)):
            for node in self.levels[l]:
                if node.parent is None or not (0 <= node.parent < len(self.levels[l - 1])):
                    raise ValueError(f"bad parent at level {l}: {node}")
        n_leaves = len(self.levels[-1])
        seen = set()
        for cid, leaf in self.leaf_classes.items():
            if not (0 <= leaf < n_leaves):
                raise ValueError(f"class {cid} maps to missing leaf {leaf}")
            if leaf in seen:
                raise ValueError(f"leaf {leaf} claimed by more than one class")
            seen.add(leaf)

    def _build_indexes(self):
        L1 = len(self.levels)
        # children grouped per parent, preserving file order within a group
        self.children: list[list[list[int]]] = []
        self.child_rank: list[np.ndarray] = [np.arange(len(self.levels[0]))]
        for l in range(1, L1):
            groups = [[] for _ in self.levels[l - 1]]
            rank = np.zeros(len(self.levels[l]), dtype=np.int64)
            for i, node in enumerate(self.levels[l]):
                rank[i] = len(groups[node.parent])
                groups[node.parent].append(i)
            self.children.append(groups)
            self.child_rank.append(rank)
        self.class_ids = sorted(self.leaf_classes)
        self.flat_index = {cid: i for i, cid in enumerate(self.class_ids)}
        self.leaf_to_class = {leaf: cid for cid, leaf in self.leaf_classes.items()}
        # per-level codec width: number of roots at level 0, max branching below
        widths = [len(self.levels[0])]
        for l in range(1, L1):
            widths.append(max(len(g) for g in self.children[l - 1] if g) if self.levels[l] else 0)
        self.level_widths = tuple(widths)

    # -- basic queries -----------------------------------------------------

    @property
    def depth(self) -> int:
        """Index of the deepest level (levels run 0..depth)."""
        return len(self.levels) - 1

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def num_classes(self) -> int:
        return len(self.leaf_classes)

    def node_name(self, level: int, index: int) -> str:
        return self.levels[level][index].name

    def nodes_of_path(self, path: HierPath) -> tuple[int, ...]:
        """Resolve child indices to global node indices per level."""
        if len(path) != self.num_levels:
            raise PathLevelMismatch(f"path has {len(path)} levels, tree has {self.num_levels}")
        first = path.node_index_per_level[0]
        if not (0 <= first < len(self.levels[0])):
            raise PathLevelMismatch(f"root index {first} invalid")
        out = [first]
        for l in range(1, self.num_levels):
            kids = self.children[l - 1][out[-1]]
            ci = path.node_index_per_level[l]
            if not (0 <= ci < len(kids)):
                raise PathLevelMismatch(f"child index {ci} invalid at level {l}")
            out.append(kids[ci])
        return tuple(out)


def path_of(tree: SemanticTree, class_id: int) -> HierPath:
    """Root-to-leaf path of a class, as per-level child indices."""
    if class_id not in tree.leaf_classes:
        raise UnknownClass(f"class id {class_id} has no leaf in the tree")
    node = tree.leaf_classes[class_id]
    rev = []
    for l in range(tree.depth, 0, -1):
        rev.append(int(tree.child_rank[l][node]))
        node = tree.levels[l][node].parent
    rev.append(int(node))
    return HierPath(tuple(reversed(rev)))


# -- layouts ---------------------------------------------------------------


@dataclass(frozen=True)
class OneHotLayout:
    per_level_width: tuple[int, ...]
    offsets: tuple[int, ...] = field(init=False)
    total_width: int = field(init=False)

    def __post_init__(self):
        if any(w < 1 for w in self.per_level_width):
            raise ValueError("one-hot level widths must be >= 1")
        offs, acc = [], 0
        for w in self.per_level_width:
            offs.append(acc)
            acc += w
        object.__setattr__(self, "offsets", tuple(offs))
        object.__setattr__(self, "total_width", acc)


@dataclass(frozen=True)
class BinaryLayout:
    per_level_bits: tuple[int, ...]
    per_level_width: tuple[int, ...]  # node counts the bit widths were derived from
    offsets: tuple[int, ...] = field(init=False)
    total_width: int = field(init=False)

    def __post_init__(self):
        for k, n in zip(self.per_level_bits, self.per_level_width):
            if 2**k < n:
                raise ValueError(f"{k} bits cannot index {n} nodes")
        offs, acc = [], 0
        for k in self.per_level_bits:
            offs.append(acc)
            acc += k
        object.__setattr__(self, "offsets", tuple(offs))
        object.__setattr__(self, "total_width", acc)


def one_hot_layout(tree: SemanticTree) -> OneHotLayout:
    return OneHotLayout(tree.level_widths)


def binary_layout(tree: SemanticTree) -> BinaryLayout:
    bits = tuple(int(math.ceil(math.log2(n))) if n > 1 else 0 for n in tree.level_widths)
    return BinaryLayout(bits, tree.level_widths)


def bits_of_index(index: int, k: int) -> np.ndarray:
    """Little-endian bit expansion of an index into k slots."""
    return np.array([(index >> b) & 1 for b in range(k)], dtype=np.float64)


# -- encoding --------------------------------------------------------------


def encode_one_hot(layout: OneHotLayout, path: HierPath) -> np.ndarray:
    if len(path) != len(layout.per_level_width):
        raise PathLevelMismatch(
            f"path has {len(path)} levels, layout has {len(layout.per_level_width)}"
        )
    vec = np.zeros(layout.total_width)
    for l, idx in enumerate(path.node_index_per_level):
        if not (0 <= idx < layout.per_level_width[l]):
            raise PathLevelMismatch(f"index {idx} outside level {l} width")
        vec[layout.offsets[l] + idx] = 1.0
    return vec


def encode_binary(layout: BinaryLayout, path: HierPath) -> np.ndarray:
    if len(path) != len(layout.per_level_bits):
        raise PathLevelMismatch(
            f"path has {len(path)} levels, layout has {len(layout.per_level_bits)}"
        )
    vec = np.zeros(layout.total_width)
    for l, idx in enumerate(path.node_index_per_level):
        if not (0 <= idx < layout.per_level_width[l]):
            raise PathLevelMismatch(f"index {idx} outside level {l} width")
        k = layout.per_level_bits[l]
        vec[layout.offsets[l] : layout.offsets[l] + k] = bits_of_index(idx, k)
    return vec


# -- decoding --------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _hamming_repair_table(k: int, n: int) -> np.ndarray:
    """table[idx, c-1] = valid child index closest in bit pattern to idx.

    idx ranges over [0, n) (post-clamp decoded indices), c over [1, n]
    (actual child counts). Ties resolve to the lowest index.
    """
    size = max(n, 1)
    patterns = np.array([[(i >> b) & 1 for b in range(k)] for i in range(size)])
    table = np.zeros((size, size), dtype=np.int64)
    for idx in range(size):
        for c in range(1, size + 1):
            d = np.abs(patterns[:c] - patterns[idx]).sum(axis=1)
            table[idx, c - 1] = int(np.argmin(d))
    return table


def decode_one_hot(
    tree: SemanticTree, layout: OneHotLayout, embedding: np.ndarray
) -> tuple[int, tuple[int, ...]]:
    """Greedy top-down constrained decode of a (possibly noisy) embedding.

    Returns (class id, global node index per level). At each level the
    argmax is restricted to slots that correspond to actual children of
    the previous choice; ties break toward the lowest index.
    """
    embedding = np.asarray(embedding, dtype=np.float64)
    if embedding.shape != (layout.total_width,):
        raise PathLevelMismatch(f"embedding width {embedding.shape} != {layout.total_width}")
    sl = embedding[layout.offsets[0] : layout.offsets[0] + layout.per_level_width[0]]
    node = int(np.argmax(sl[: len(tree.levels[0])]))
    nodes = [node]
    for l in range(1, tree.num_levels):
        kids = tree.children[l - 1][node]
        sl = embedding[layout.offsets[l] : layout.offsets[l] + layout.per_level_width[l]]
        child = int(np.argmax(sl[: len(kids)]))
        node = kids[child]
        nodes.append(node)
    return tree.leaf_to_class[node], tuple(nodes)


def decode_binary(
    tree: SemanticTree, layout: BinaryLayout, embedding: np.ndarray
) -> tuple[int, tuple[int, ...]]:
    """Thresholded binary decode with child-constraint repair.

    Bits come from a logistic squashing thresholded strictly above 0.5,
    the per-level index is clamped to the level width, and indices that
    do not name an actual child are replaced by the valid child whose bit
    pattern is closest in Hamming distance (ties toward the lowest index).
    """
    embedding = np.asarray(embedding, dtype=np.float64)
    if embedding.shape != (layout.total_width,):
        raise PathLevelMismatch(f"embedding width {embedding.shape} != {layout.total_width}")
    node = None
    nodes = []
    for l in range(tree.num_levels):
        k = layout.per_level_bits[l]
        n = layout.per_level_width[l]
        sl = embedding[layout.offsets[l] : layout.offsets[l] + k]
        bits = (_sigmoid(sl) > 0.5).astype(np.int64)
        idx = int((bits << np.arange(k)).sum()) if k else 0
        idx = min(idx, n - 1)
        count = len(tree.levels[0]) if l == 0 else len(tree.children[l - 1][node])
        if idx >= count:
            table = _repair_table_cached(tree, l, k, n)
            idx = int(table[idx, count - 1])
        node = idx if l == 0 else tree.children[l - 1][node][idx]
        nodes.append(node)
    return tree.leaf_to_class[node], tuple(nodes)


_repair_cache: dict[tuple[int, int], np.ndarray] = {}


def _repair_table_cached(tree: SemanticTree, level: int, k: int, n: int) -> np.ndarray:
    key = (k, n)
    if key not in _repair_cache:
        _repair_cache[key] = _hamming_repair_table(k, n)
    return _repair_cache[key]


def level_label(tree: SemanticTree, per_level_nodes: tuple[int, ...], level: int) -> int:
    """Global node index of a decoded path at the requested level."""
    if not (0 <= level < tree.num_levels):
        raise LevelOutOfRange(f"level {level} outside 0..{tree.depth}")
    return per_level_nodes[level]


# -- batch decoding (image-sized embeddings) --------------------------------


def decode_batch(
    tree: SemanticTree,
    layout: OneHotLayout | BinaryLayout,
    embeddings: np.ndarray,
    mode: str,
) -> np.ndarray:
    """Decode (..., width) embeddings to (L+1, ...) global node indices.

    Vectorized equivalent of decode_one_hot / decode_binary over a batch;
    the scalar decoders are the reference implementation.
    """
    flat = np.asarray(embeddings, dtype=np.float64).reshape(-1, layout.total_width)
    B = flat.shape[0]
    nodes = np.zeros((tree.num_levels, B), dtype=np.int64)
    # per-level CSR over children in file order
    for l in range(tree.num_levels):
        if l == 0:
            counts = np.full(B, len(tree.levels[0]), dtype=np.int64)
            bases = None
        else:
            groups = tree.children[l - 1]
            counts_per_parent = np.array([len(g) for g in groups], dtype=np.int64)
            flat_children = np.array(
                [c for g in groups for c in g] or [0], dtype=np.int64
            )
            starts = np.concatenate([[0], np.cumsum(counts_per_parent)])[:-1]
            counts = counts_per_parent[nodes[l - 1]]
            bases = starts[nodes[l - 1]]
        if mode == "binary":
            k = layout.per_level_bits[l]
            n = layout.per_level_width[l]
            sl = flat[:, layout.offsets[l] : layout.offsets[l] + k]
            bits = (_sigmoid(sl) > 0.5).astype(np.int64)
            idx = bits @ (1 << np.arange(k, dtype=np.int64)) if k else np.zeros(B, dtype=np.int64)
            idx = np.minimum(idx, n - 1)
            bad = idx >= counts
            if bad.any():
                table = _repair_table_cached(tree, l, k, n)
                idx[bad] = table[idx[bad], counts[bad] - 1]
        else:
            w = layout.per_level_width[l]
            sl = flat[:, layout.offsets[l] : layout.offsets[l] + w]
            masked = np.where(np.arange(w)[None, :] < counts[:, None], sl, -np.inf)
            idx = np.argmax(masked, axis=1)
        nodes[l] = idx if l == 0 else flat_children[bases + idx]
    return nodes.reshape((tree.num_levels,) + np.asarray(embeddings).shape[:-1])


def decoded_class_ids(tree: SemanticTree, leaf_nodes: np.ndarray) -> np.ndarray:
    """Map decoded leaf node indices to original class ids."""
    lut = np.zeros(len(tree.levels[-1]), dtype=np.int64)
    for leaf, cid in tree.leaf_to_class.items():
        lut[leaf] = cid
    return lut[leaf_nodes]


# -- degenerate (flat) tree --------------------------------------------------


def flat_tree(class_names: dict[int, str]) -> SemanticTree:
    """Single-level tree: the flat label space as a degenerate hierarchy."""
    ids = sorted(class_names)
    nodes = [TreeNode(class_names[c], None) for c in ids]
    return SemanticTree([nodes], {c: i for i, c in enumerate(ids)})


# -- file format -------------------------------------------------------------


def tree_to_dict(tree: SemanticTree) -> dict:
    return {
        "levels": [
            [{"name": n.name, "parent": n.parent} for n in lv] for lv in tree.levels
        ],
        "classes": {str(cid): leaf for cid, leaf in sorted(tree.leaf_classes.items())},
    }


def tree_from_dict(d: dict) -> SemanticTree:
    levels = [
        [TreeNode(n["name"], n["parent"]) for n in lv] for lv in d["levels"]
    ]
    classes = {int(cid): leaf for cid, leaf in d["classes"].items()}
    return SemanticTree(levels, classes)


def save_tree(tree: SemanticTree, path: str | Path):
    Path(path).write_text(json.dumps(tree_to_dict(tree), indent=2) + "\n", encoding="utf-8")


def load_tree(path: str | Path) -> SemanticTree:
    return tree_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
