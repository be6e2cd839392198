"""Builds a semantic hierarchy from a flat class list.

Stages: size grouping (LLM), one or more functional grouping passes (LLM),
geometric clustering of per-class shape embeddings (k-means++), LLM
summarization of the clusters into named shape groups, and finally the
original classes as leaves. Every LLM stage runs under a loop-based critic
that re-prompts for omitted classes and scrubs invented or duplicate
members until the grouping covers the input exactly.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CriticBudgetExhausted,
    DegenerateVarianceWarning,
    TooFewPoints,
    UnparseableResponse,
)
from .llm_client import TEMPLATES, parse_group_json, serialize_grouping
from .semantic_tree import SemanticTree, TreeNode


@dataclass(frozen=True)
class ShapeEmbedding:
    """Quantized geometric embedding of one class: an (F, 2) face matrix."""

    class_id: int
    vector: np.ndarray

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.vector, dtype=np.float64))
        if v.shape[0] < 1 or v.shape[1] != 2:
            raise ValueError(f"shape embedding must be (F, 2), got {v.shape}")
        object.__setattr__(self, "vector", v)

    def averaged(self) -> np.ndarray:
        """Mean over faces: the (2,) per-class embedding."""
        return self.vector.mean(axis=0)


@dataclass
class GroupingResult:
    groups: dict[str, list[str]]
    provenance: str  # size | function | geometry

    def members(self) -> list[str]:
        return [m for g in self.groups.values() for m in g]


@dataclass
class BuilderConfig:
    function_levels: int = 1
    geometric_k: int | None = None  # None: ceil(sqrt(group size))
    llm_retries: int = 3
    critic_max_rounds: int = 5
    max_in_flight: int = 1


@dataclass
class ValidationReport:
    duplicate_leaves: list[str] = field(default_factory=list)
    missing_classes: list[str] = field(default_factory=list)
    empty_nodes: list[str] = field(default_factory=list)
    orphan_nodes: list[str] = field(default_factory=list)

    def ok(self) -> bool:
        return not (
            self.duplicate_leaves or self.missing_classes or self.empty_nodes or self.orphan_nodes
        )

    def summary(self) -> str:
        if self.ok():
            return "tree valid"
        parts = []
        if self.duplicate_leaves:
            parts.append(f"duplicates: {self.duplicate_leaves}")
        if self.missing_classes:
            parts.append(f"missing: {self.missing_classes}")
        if self.empty_nodes:
            parts.append(f"empty nodes: {self.empty_nodes}")
        if self.orphan_nodes:
            parts.append(f"orphans: {self.orphan_nodes}")
        return "; ".join(parts)


# -- shape embedding providers ------------------------------------------------


class FileShapeProvider:
    """Reads precomputed embeddings from `class_id,face_index,e0,e1` lines."""

    def __init__(self, path):
        rows: dict[int, list[tuple[int, float, float]]] = {}
        with open(path, "r", encoding="utf-8") as fh:
            for raw in fh:
                line = raw.strip()
                if not line or line.startswith("#") or line.startswith("class_id"):
                    continue
                cid, face, e0, e1 = line.split(",")
                rows.setdefault(int(cid), []).append((int(face), float(e0), float(e1)))
        self._table = {}
        for cid, faces in rows.items():
            faces.sort()
            self._table[cid] = np.array([[e0, e1] for _, e0, e1 in faces])

    def embedding(self, class_id: int, class_name: str) -> ShapeEmbedding:
        if class_id not in self._table:
            raise KeyError(f"no shape embedding rows for class {class_id}")
        return ShapeEmbedding(class_id, self._table[class_id])


class SyntheticShapeProvider:
    """Deterministic pseudo-embeddings hashed from the class name.

    Stands in for a generative shape model so the clustering stages can be
    exercised end to end without one.
    """

    def __init__(self, seed: int = 0, faces: int = 16):
        self.seed = seed
        self.faces = faces

    def embedding(self, class_id: int, class_name: str) -> ShapeEmbedding:
        digest = hashlib.sha256(f"{self.seed}:{class_name}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        center = rng.uniform(-3.0, 3.0, size=2)
        faces = center + rng.normal(0.0, 0.25, size=(self.faces, 2))
        return ShapeEmbedding(class_id, faces)


# -- numeric stages ------------------------------------------------------------


def average_and_normalize(embeddings: list[ShapeEmbedding]) -> np.ndarray:
    """Per-class face averages, standardized column-wise to zero mean, unit sd.

    A constant column is reported via DegenerateVarianceWarning and left at
    zero (unit variance substituted).
    """
    if len(embeddings) < 2:
        raise TooFewPoints("need at least 2 classes to normalize")
    avg = np.stack([e.averaged() for e in embeddings])
    mean = avg.mean(axis=0)
    var = avg.var(axis=0)
    degenerate = var < 1e-12
    if degenerate.any():
        warnings.warn(
            f"constant shape-embedding column(s) {np.nonzero(degenerate)[0].tolist()}",
            DegenerateVarianceWarning,
        )
    sd = np.where(degenerate, 1.0, np.sqrt(var))
    return (avg - mean) / sd


def kmeans_pp(points: np.ndarray, k: int, seed: int) -> np.ndarray:
    """K-means++ seeding followed by Lloyd iterations to a fixpoint.

    Returns the cluster index per point. Deterministic for a given seed.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k < 1 or n < k:
        raise TooFewPoints(f"{n} points cannot form {k} clusters")
    rng = np.random.default_rng(seed)
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = points[rng.integers(n)]
        else:
            centers[j] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((points - centers[j]) ** 2, axis=1))
    assign = np.full(n, -1, dtype=np.int64)
    for _it in range(100):
        dists = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(dists, axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            sel = assign == j
            if sel.any():
                centers[j] = points[sel].mean(axis=0)
    return assign


def within_cluster_ss(points: np.ndarray, assign: np.ndarray) -> float:
    total = 0.0
    for j in np.unique(assign):
        sel = points[assign == j]
        total += float(((sel - sel.mean(axis=0)) ** 2).sum())
    return total


# -- LLM stages ----------------------------------------------------------------


def _query_groups(llm, template, bindings, retries) -> dict[str, list[str]]:
    last: Exception = UnparseableResponse("no attempt")
    for _ in range(retries):
        text = llm.complete(template, bindings)
        try:
            return parse_group_json(text)
        except UnparseableResponse as exc:
            last = exc
    raise last


def _scrub(groups: dict[str, list[str]], expected: list[str]) -> tuple[dict, list[str]]:
    """Drop invented members and duplicates; report what is still missing."""
    allowed = set(expected)
    seen: set[str] = set()
    cleaned: dict[str, list[str]] = {}
    for name, members in groups.items():
        kept = []
        for m in members:
            if m in allowed and m not in seen:
                kept.append(m)
                seen.add(m)
        if kept:
            cleaned.setdefault(name, []).extend(kept)
    missing = [c for c in expected if c not in seen]
    return cleaned, missing


def critic_loop(
    proposed: GroupingResult,
    expected_members: list[str],
    llm,
    max_rounds: int = 5,
    reprompt=None,
) -> GroupingResult:
    """Iterate until the grouping covers expected_members exactly once each.

    Each round scrubs invented/duplicate members, then feeds the omissions
    back through `reprompt` (a callable of the missing class list returning
    a GroupingResult) and merges the answer by group name. Raises
    CriticBudgetExhausted with the remaining omissions once the round
    budget runs out.
    """
    if max_rounds < 1:
        raise ValueError("max_rounds must be >= 1")
    groups, missing = _scrub(proposed.groups, expected_members)
    for _ in range(max_rounds):
        if not missing:
            return GroupingResult(groups, proposed.provenance)
        if reprompt is None:
            break
        patch = reprompt(missing)
        patched, _ = _scrub(patch.groups, missing)
        for name, members in patched.items():
            groups.setdefault(name, []).extend(members)
        covered = {m for g in groups.values() for m in g}
        missing = [c for c in expected_members if c not in covered]
    raise CriticBudgetExhausted(
        f"{len(missing)} classes still missing after {max_rounds} rounds", missing
    )


def _format_items(classes: list[str]) -> str:
    return ", ".join(classes)


def group_by_size(classes: list[str], llm, config: BuilderConfig | None = None) -> GroupingResult:
    """Partition classes into size groups via the size prompt + critic loop."""
    config = config or BuilderConfig()
    if not classes:
        raise ValueError("empty class list")
    if len(classes) == 1:
        return GroupingResult({classes[0]: list(classes)}, "size")
    template = TEMPLATES["size"]

    def ask(items: list[str]) -> GroupingResult:
        groups = _query_groups(
            llm, template, {"classes input": _format_items(items)}, config.llm_retries
        )
        return GroupingResult(groups, "size")

    return critic_loop(ask(classes), classes, llm, config.critic_max_rounds, reprompt=ask)


def group_by_function(
    group: list[str], llm, size_name: str = "", config: BuilderConfig | None = None
) -> GroupingResult:
    """Sub-partition one group by functional similarity."""
    config = config or BuilderConfig()
    if not group:
        raise ValueError("empty group")
    if len(group) == 1:
        return GroupingResult({group[0]: list(group)}, "function")
    template = TEMPLATES["function"]

    def ask(items: list[str]) -> GroupingResult:
        groups = _query_groups(
            llm,
            template,
            {"classes input": _format_items(items), "size": size_name},
            config.llm_retries,
        )
        return GroupingResult(groups, "function")

    return critic_loop(ask(group), group, llm, config.critic_max_rounds, reprompt=ask)


def summarize_clusters(
    clusters: list[list[str]], llm, config: BuilderConfig | None = None
) -> GroupingResult:
    """Name geometric clusters (and let the prompt rebalance them)."""
    config = config or BuilderConfig()
    members = [m for c in clusters for m in c]
    if not members:
        raise ValueError("empty clusters")
    template = TEMPLATES["geometry_summarize"]
    formatted = serialize_grouping({f"cluster_{i}": c for i, c in enumerate(clusters)})

    def ask_full(_missing=None) -> GroupingResult:
        groups = _query_groups(
            llm, template, {"formatted_clusters": formatted}, config.llm_retries
        )
        return GroupingResult(groups, "geometry")

    def ask_missing(missing: list[str]) -> GroupingResult:
        payload = serialize_grouping({"cluster_0": missing})
        groups = _query_groups(
            llm, template, {"formatted_clusters": payload}, config.llm_retries
        )
        return GroupingResult(groups, "geometry")

    return critic_loop(ask_full(), members, llm, config.critic_max_rounds, reprompt=ask_missing)


# -- full pipeline -------------------------------------------------------------


def validate_tree(tree: SemanticTree, classes: list[int]) -> ValidationReport:
    """Structural audit: duplicates, omissions, empty and orphan nodes."""
    report = ValidationReport()
    leaf_owner: dict[int, int] = {}
    for cid, leaf in tree.leaf_classes.items():
        if leaf in leaf_owner:
            report.duplicate_leaves.append(f"leaf {leaf}: classes {leaf_owner[leaf]}, {cid}")
        leaf_owner[leaf] = cid
    for cid in classes:
        if cid not in tree.leaf_classes:
            report.missing_classes.append(str(cid))
    claimed = set(tree.leaf_classes.values())
    for i in range(len(tree.levels[-1])):
        if i not in claimed:
            report.orphan_nodes.append(f"level {tree.depth} node {i} ({tree.node_name(tree.depth, i)})")
    for l in range(tree.depth):
        for p, kids in enumerate(tree.children[l]):
            if not kids:
                report.empty_nodes.append(f"level {l} node {p} ({tree.node_name(l, p)})")
    return report


def build_tree(
    classes: dict[int, str],
    config: BuilderConfig,
    llm,
    shape_provider,
    seed: int = 0,
) -> SemanticTree:
    """Run the full pipeline: size, function passes, geometry, leaves.

    `classes` maps original class ids to names. Names must be unique; they
    are what the prompts and groupings operate on.
    """
    if not classes:
        raise ValueError("no classes")
    names = [classes[cid] for cid in sorted(classes)]
    if len(set(names)) != len(names):
        raise ValueError("class names must be unique")
    name_to_id = {v: k for k, v in classes.items()}

    levels: list[list[TreeNode]] = []
    # groups at the frontier: (parent index in previous level, member names)
    size_result = group_by_size(names, llm, config)
    levels.append([TreeNode(g, None) for g in size_result.groups])
    frontier: list[tuple[int, str, list[str]]] = [
        (i, g, members) for i, (g, members) in enumerate(size_result.groups.items())
    ]

    for _ in range(config.function_levels):
        nodes: list[TreeNode] = []
        next_frontier: list[tuple[int, str, list[str]]] = []

        def job(item):
            parent, gname, members = item
            return parent, group_by_function(members, llm, size_name=gname, config=config)

        if config.max_in_flight > 1:
            with ThreadPoolExecutor(max_workers=config.max_in_flight) as pool:
                results = list(pool.map(job, frontier))
        else:
            results = [job(item) for item in frontier]
        for parent, res in results:
            for gname, members in res.groups.items():
                next_frontier.append((len(nodes), gname, members))
                nodes.append(TreeNode(gname, parent))
        levels.append(nodes)
        frontier = next_frontier

    # geometric level: cluster shape embeddings within each group, then name
    nodes = []
    next_frontier = []
    for parent, gname, members in frontier:
        if len(members) == 1:
            named = GroupingResult({members[0]: list(members)}, "geometry")
        else:
            embs = [ShapeEmbedding(name_to_id[m], shape_provider.embedding(name_to_id[m], m).vector) for m in members]
            points = average_and_normalize(embs)
            k = config.geometric_k or max(1, math.ceil(math.sqrt(len(members))))
            k = min(k, len(members))
            assign = kmeans_pp(points, k, seed)
            clusters = [
                [members[i] for i in range(len(members)) if assign[i] == j]
                for j in range(k)
            ]
            clusters = [c for c in clusters if c]
            named = summarize_clusters(clusters, llm, config)
        for cname, cmembers in named.groups.items():
            next_frontier.append((len(nodes), cname, cmembers))
            nodes.append(TreeNode(cname, parent))
    levels.append(nodes)
    frontier = next_frontier

    # leaves: the original classes
    leaves: list[TreeNode] = []
    leaf_classes: dict[int, int] = {}
    for parent, _gname, members in frontier:
        for m in members:
            leaf_classes[name_to_id[m]] = len(leaves)
            leaves.append(TreeNode(m, parent))
    levels.append(leaves)

    tree = SemanticTree(levels, leaf_classes)
    report = validate_tree(tree, sorted(classes))
    if not report.ok():
        raise CriticBudgetExhausted(f"built tree failed validation: {report.summary()}")
    return tree
