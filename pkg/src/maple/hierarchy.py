"""Label taxonomy: loading, validation, queries and node prompts.

A hierarchy is a layered DAG. Level 1 holds the top tier of labelled nodes
(the drawing "Root" is never materialised) and every edge connects a node to
a child exactly one level deeper.
"""
from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

ROOT_PHRASE = "the root taxonomy"
MAX_PROMPT_CHILDREN = 6


class HierarchyError(ValueError):
    """Raised when a hierarchy document is malformed or violates the layering."""

    def __init__(self, message: str, node: str | None = None):
        super().__init__(message if node is None else f"{message} (node {node!r})")
        self.node = node


@dataclass(frozen=True)
class LabelNode:
    id: int
    name: str
    level: int
    parent_ids: tuple[int, ...] = ()
    child_ids: tuple[int, ...] = ()

    @property
    def is_leaf(self) -> bool:
        return not self.child_ids


@dataclass(frozen=True)
class LabelHierarchy:
    nodes: tuple[LabelNode, ...]
    num_levels: int
    _by_name: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self._by_name.update({n.name: n.id for n in self.nodes})

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def names(self) -> list[str]:
        return [n.name for n in self.nodes]

    @property
    def leaf_ids(self) -> list[int]:
        return [n.id for n in self.nodes if n.is_leaf]

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [(p, n.id) for n in self.nodes for p in n.parent_ids]

    def node(self, key: int | str) -> LabelNode:
        if isinstance(key, str):
            if key not in self._by_name:
                raise KeyError(f"unknown node name {key!r}")
            return self.nodes[self._by_name[key]]
        if not 0 <= key < len(self.nodes):
            raise KeyError(f"unknown node id {key}")
        return self.nodes[key]

    def id_of(self, name: str) -> int:
        return self.node(name).id

    def digest(self) -> str:
        """Stable SHA-256 over names, levels and edges."""
        payload = json.dumps(to_dict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


# ---------------------------------------------------------------- building

def from_dict(doc: dict) -> LabelHierarchy:
    """Build and validate a hierarchy from the parsed YAML structure."""
    if not isinstance(doc, dict) or "levels" not in doc or "nodes" not in doc:
        raise HierarchyError("document needs top-level 'levels' and 'nodes' keys")
    num_levels = doc["levels"]
    if not isinstance(num_levels, int) or num_levels < 1:
        raise HierarchyError(f"'levels' must be a positive integer, got {num_levels!r}")
    entries = doc["nodes"]
    if not isinstance(entries, list) or not entries:
        raise HierarchyError("'nodes' must be a non-empty list")

    seen: dict[str, dict] = {}
    ordered = []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or "name" not in entry or "level" not in entry:
            raise HierarchyError(f"node entry #{i} needs 'name' and 'level'")
        name = entry["name"]
        if not isinstance(name, str) or not name.strip():
            raise HierarchyError(f"node entry #{i} has an empty name")
        if name in seen:
            raise HierarchyError("duplicate name", name)
        level = entry["level"]
        if not isinstance(level, int) or not 1 <= level <= num_levels:
            raise HierarchyError(f"level {level!r} outside [1, {num_levels}]", name)
        parents = entry.get("parents") or []
        if isinstance(parents, str):
            parents = [parents]
        if level == 1 and parents:
            raise HierarchyError("level-1 nodes cannot have parents", name)
        if level > 1 and not parents:
            raise HierarchyError("orphan: non-root-level node without parents", name)
        if len(set(parents)) != len(parents):
            raise HierarchyError("parent listed twice", name)
        seen[name] = {"name": name, "level": level, "parents": list(parents), "pos": i}
        ordered.append(seen[name])

    # level-major, document order within a level
    ordered.sort(key=lambda e: (e["level"], e["pos"]))
    ids = {e["name"]: k for k, e in enumerate(ordered)}
    children: list[list[int]] = [[] for _ in ordered]
    for e in ordered:
        for p in e["parents"]:
            if p not in ids:
                raise HierarchyError(f"orphan: parent {p!r} not defined", e["name"])
            if p == e["name"]:
                raise HierarchyError("cycle: node is its own parent", e["name"])
            plevel = seen[p]["level"]
            if plevel != e["level"] - 1:
                raise HierarchyError(
                    f"level skip: parent {p!r} is level {plevel}, child is level {e['level']}",
                    e["name"],
                )
            children[ids[p]].append(ids[e["name"]])

    nodes = tuple(
        LabelNode(
            id=k,
            name=e["name"],
            level=e["level"],
            parent_ids=tuple(ids[p] for p in e["parents"]),
            child_ids=tuple(sorted(children[k])),
        )
        for k, e in enumerate(ordered)
    )
    h = LabelHierarchy(nodes=nodes, num_levels=num_levels)
    _check_structure(h)
    return h


def _check_structure(h: LabelHierarchy) -> None:
    for n in h.nodes:
        for c in n.child_ids:
            if n.id not in h.nodes[c].parent_ids:
                raise HierarchyError("parent/child lists disagree", n.name)
            if h.nodes[c].level != n.level + 1:
                raise HierarchyError("child not exactly one level deeper", h.nodes[c].name)
    # Kahn's algorithm; the level rule already forbids cycles, this guards hand-built objects
    indeg = [len(n.parent_ids) for n in h.nodes]
    queue = deque(i for i, d in enumerate(indeg) if d == 0)
    visited = 0
    while queue:
        v = queue.popleft()
        visited += 1
        if h.nodes[v].level != 1 and not h.nodes[v].parent_ids:
            raise HierarchyError("unreachable from level 1", h.nodes[v].name)
        for c in h.nodes[v].child_ids:
            indeg[c] -= 1
            if indeg[c] == 0:
                queue.append(c)
    if visited != len(h.nodes):
        raise HierarchyError("cycle detected")
    for lvl in range(1, h.num_levels + 1):
        if not any(n.level == lvl for n in h.nodes):
            raise HierarchyError(f"level {lvl} has no nodes")


def load_hierarchy(path: str | Path) -> LabelHierarchy:
    """Parse and validate a hierarchy YAML file."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise HierarchyError(f"cannot parse {path}: {exc}") from exc
    return from_dict(doc)


def load_fixture(name: str) -> LabelHierarchy:
    """Load one of the bundled hierarchies: aid, mured, dfc15, corine_ship."""
    res = resources.files("maple.fixtures").joinpath(f"{name}.yaml")
    if not res.is_file():
        raise FileNotFoundError(f"no bundled hierarchy named {name!r}")
    with resources.as_file(res) as p:
        return load_hierarchy(p)


def to_dict(h: LabelHierarchy) -> dict:
    nodes = []
    for n in h.nodes:
        entry: dict = {"name": n.name, "level": n.level}
        if n.parent_ids:
            entry["parents"] = [h.nodes[p].name for p in n.parent_ids]
        nodes.append(entry)
    return {"levels": h.num_levels, "nodes": nodes}


def dump_hierarchy(h: LabelHierarchy) -> str:
    return yaml.safe_dump(to_dict(h), sort_keys=False, allow_unicode=True)


# ---------------------------------------------------------------- queries

def ancestors(h: LabelHierarchy, node_id: int) -> set[int]:
    """All nodes reachable by following parent edges, excluding ``node_id``."""
    out: set[int] = set()
    stack = list(h.node(node_id).parent_ids)
    while stack:
        p = stack.pop()
        if p not in out:
            out.add(p)
            stack.extend(h.nodes[p].parent_ids)
    return out


def level_partition(h: LabelHierarchy) -> tuple[list[list[int]], list[int]]:
    levels: list[list[int]] = [[] for _ in range(h.num_levels)]
    for n in h.nodes:
        levels[n.level - 1].append(n.id)
    return levels, h.leaf_ids


def _as_bits(h: LabelHierarchy, y: Sequence[int] | np.ndarray) -> np.ndarray:
    bits = np.asarray(y)
    if bits.ndim != 1 or bits.shape[0] != len(h):
        raise ValueError(f"label vector has length {bits.shape}, hierarchy has {len(h)} nodes")
    return bits != 0


def is_consistent(h: LabelHierarchy, y: Sequence[int] | np.ndarray) -> bool:
    """True iff each positive non-root-level node has at least one positive parent."""
    bits = _as_bits(h, y)
    for n in h.nodes:
        if bits[n.id] and n.parent_ids and not any(bits[p] for p in n.parent_ids):
            return False
    return True


def close_upward(h: LabelHierarchy, y: Sequence[int] | np.ndarray) -> np.ndarray:
    """Add the full ancestor closure of every positive node."""
    bits = _as_bits(h, y).copy()
    for i in np.flatnonzero(bits):
        for a in ancestors(h, int(i)):
            bits[a] = True
    return bits.astype(np.int8)


def label_vector(h: LabelHierarchy, names: Iterable[str]) -> np.ndarray:
    y = np.zeros(len(h), dtype=np.int8)
    for name in names:
        y[h.id_of(name)] = 1
    return y


def _join_and(items: list[str]) -> str:
    if len(items) == 1:
        return items[0]
    if len(items) == 2:
        return f"{items[0]} and {items[1]}"
    return ", ".join(items[:-1]) + f", and {items[-1]}"


def contextual_description(h: LabelHierarchy, node_id: int) -> str:
    """Natural-language prompt placing a node among its parents and children.

    Leaf prompts end with a period. Prompts with an ``includes`` clause carry
    no terminal period, matching the published parent-node example exactly.
    """
    n = h.node(node_id)
    if n.parent_ids:
        parent = ", ".join(h.nodes[p].name for p in n.parent_ids)
    else:
        parent = ROOT_PHRASE
    text = f"The category '{n.name}' which is a subcategory of {parent}"
    if n.is_leaf:
        return text + "."
    kids = [h.nodes[c].name for c in n.child_ids[:MAX_PROMPT_CHILDREN]]
    return f"{text} and includes subcategories like {_join_and(kids)}"
