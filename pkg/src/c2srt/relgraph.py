"""Inter-category relation mining and relation graphs.

Each category's in-neighbourhood is a set of seen categories. Neighbours come
from LLM answers (prompt -> structured text -> strengths -> averaged metric ->
top-n selection) or from the random / text-similarity baselines. Every node
also gets an implicit self-edge.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from .dataio import rng_stream

logger = logging.getLogger(__name__)


class Strength(enum.IntEnum):
    ABSENT = 0
    LOW = 1
    MEDIUM = 2
    HIGH = 3

    @classmethod
    def parse(cls, text: str) -> "Strength":
        key = text.strip().strip("*_` .").upper()
        if key not in ("HIGH", "MEDIUM", "LOW"):
            raise ValueError(f"unknown association strength {text!r}")
        return cls[key]


class GraphError(ValueError):
    pass


PROMPT_TEMPLATE = """\
Based on the following list of known categories, please identify all categories that have a direct relationship with the new category {new_category}. For each related category, provide the type of relationship, the association strength (High, Medium, Low), and an explanation.

Types of Relationships

1. Synonymy/Similarity: Two categories are conceptually very similar or synonymous.
2. Is-a/Hypernym: One category is a superordinate or subordinate concept of the other.
3. Functional Relationship: The function or use of one category is related to the other.
4. Co-occurrence: Two categories often appear in the same context or environment.
5. Part-Whole Relationship: One category is a component of the other.

Instructions

Please provide the information for each relevant category in the following format:

Related Category [Number]: [Category Name]
- Type of Relationship: [Relationship Type]
- Association Strength: High / Medium / Low
- Explanation: [Brief explanation of the relationship and the reason for the assigned strength]

Example

New Category: Nature

List of Seen Categories: natural, fauna, wildlife, flora, scenic, outdoors, cliff, blossoms, insect, wild, plant, scenery, blooms, gardens, landscapes

Example Output:

Related Category 1: natural
- Type of Relationship: Synonymy/Similarity
- Association Strength: High
- Explanation: "Natural" is conceptually very similar to "nature" as both refer to elements of the physical world not created by humans.

Related Category 2: fauna
- Type of Relationship: Is-a/Hypernym
- Association Strength: High
- Explanation: "Fauna" represents the animal life of a region, which is a fundamental part of "nature."

...

Using the format and example provided above, identify all categories from the list of known categories that have a direct relationship with the new category {new_category}. For each related category, specify:

List of Seen Categories: {seen_categories}

Focus on associations that would be most relevant for understanding or classifying {new_category} within this domain.
"""


def build_prompt(target: str, seen: Sequence[str]) -> str:
    if not target or not target.strip():
        raise ValueError("empty target category name")
    if not seen:
        raise ValueError("seen category list is empty")
    if any(not s or not s.strip() for s in seen):
        raise ValueError("empty seen category name")
    return PROMPT_TEMPLATE.format(new_category=target, seen_categories=", ".join(seen))


def prompt_key(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:16]


# -- response parsing ---------------------------------------------------------

_HEADER = re.compile(r"related\s+category\s*\d*\s*[:\-]\s*(?P<name>.+)", re.IGNORECASE)
_STRENGTH = re.compile(r"association\s+strength\s*[:\-]\s*(?P<level>.+)", re.IGNORECASE)
# list bullets, headings, bold/code marks; underscores only as emphasis, not inside names
_DECOR = re.compile(r"^[\s>*\-•·#]+|[*`]+|(?<!\w)_+|_+(?!\w)")


@dataclass
class ParseDiagnostics:
    skipped_blocks: int = 0
    unmatched_names: List[str] = field(default_factory=list)


def _clean(line: str) -> str:
    return _DECOR.sub("", line).strip()


def parse_response(text: str, seen: Optional[Sequence[str]] = None) -> Tuple[List[Tuple[str, Strength]], ParseDiagnostics]:
    """Extract ``(category, strength)`` pairs in order of appearance.

    A block starts at a "Related Category N: name" line and needs exactly one
    usable "Association Strength" line; anything else is skipped and counted.
    When ``seen`` is given, names are matched case-insensitively after
    trimming and mapped to their canonical spelling; unknown names are dropped.
    """
    diag = ParseDiagnostics()
    blocks: List[List[str]] = []
    for raw in text.splitlines():
        line = _clean(raw)
        if _HEADER.fullmatch(line):
            blocks.append([line])
        elif blocks and line:
            blocks[-1].append(line)

    lookup = {s.strip().lower(): s for s in seen} if seen is not None else None
    pairs: List[Tuple[str, Strength]] = []
    for block in blocks:
        name = _HEADER.fullmatch(block[0]).group("name").strip().strip("\"'")
        levels = [m.group("level") for m in map(_STRENGTH.fullmatch, block[1:]) if m]
        try:
            if len(levels) != 1 or not name:
                raise ValueError("block needs one name and one strength")
            level = Strength.parse(levels[0])
        except ValueError:
            diag.skipped_blocks += 1
            continue
        if lookup is not None:
            canonical = lookup.get(name.lower())
            if canonical is None:
                diag.unmatched_names.append(name)
                continue
            name = canonical
        pairs.append((name, level))
    return pairs, diag


def aggregate_strengths(responses: Sequence[Sequence[Tuple[str, Strength]]], seen: Sequence[str]) -> Dict[str, float]:
    """Mean strength per seen category over all responses (absent counts 0).

    A category named twice in one response keeps its strongest mention.
    """
    if not responses:
        raise ValueError("need at least one response")
    totals = dict.fromkeys(seen, 0.0)
    for pairs in responses:
        best: Dict[str, int] = {}
        for name, level in pairs:
            if name in totals:
                best[name] = max(best.get(name, 0), int(level))
        for name, val in best.items():
            totals[name] += val
    return {name: tot / len(responses) for name, tot in totals.items()}


def aggregate_and_select(responses, seen: Sequence[str], n_adj: int) -> List[str]:
    if n_adj < 1:
        raise ValueError("n_adj must be at least 1")
    if n_adj > len(seen):
        logger.warning("n_adj=%d exceeds %d seen categories; clamped", n_adj, len(seen))
        n_adj = len(seen)
    avg = aggregate_strengths(responses, seen)
    ranked = sorted((name for name, a in avg.items() if a > 0), key=lambda n: (-avg[n], n))
    return ranked[:n_adj]


# -- graphs -------------------------------------------------------------------

@dataclass
class RelationGraph:
    """In-neighbourhoods over ``categories`` (seen first, then unseen).

    ``neighbors[c]`` holds non-self seen indices; the self-edge is implicit.
    """

    categories: List[str]
    n_seen: int
    neighbors: List[List[int]]
    n_adj: int

    def __post_init__(self):
        if len(self.neighbors) != len(self.categories):
            raise GraphError("one neighbour list per category required")
        for c, nbrs in enumerate(self.neighbors):
            for j in nbrs:
                if not 0 <= j < self.n_seen:
                    raise GraphError(
                        f"{self.categories[c]!r} lists {self.categories[j] if 0 <= j < len(self.categories) else j!r}, "
                        "which is not a seen category")
                if j == c:
                    raise GraphError("self-edges are implicit and must not be listed")

    def in_neighborhood(self, c: int) -> List[int]:
        return [c] + list(self.neighbors[c])

    def restrict(self, n_nodes: int) -> "RelationGraph":
        """Subgraph on the first ``n_nodes`` categories (e.g. the seen ones)."""
        return RelationGraph(self.categories[:n_nodes], min(self.n_seen, n_nodes),
                             [list(n) for n in self.neighbors[:n_nodes]], self.n_adj)

    def edge_arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(targets, sources, segment_starts)`` sorted by target, self-edge first."""
        tgt, src, starts = [], [], []
        for c in range(len(self.categories)):
            starts.append(len(tgt))
            for j in self.in_neighborhood(c):
                tgt.append(c)
                src.append(j)
        return np.array(tgt), np.array(src), np.array(starts)

    def dense_mask(self) -> np.ndarray:
        n = len(self.categories)
        mask = np.zeros((n, n), dtype=bool)
        for c in range(n):
            mask[c, self.in_neighborhood(c)] = True
        return mask

    def to_json(self) -> str:
        edges = {self.categories[c]: [self.categories[j] for j in nbrs]
                 for c, nbrs in enumerate(self.neighbors)}
        return json.dumps({"n_adj": self.n_adj, "n_seen": self.n_seen,
                           "categories": self.categories, "edges": edges}, indent=2) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


def build_graph(neighbor_names: Dict[str, Sequence[str]], seen: Sequence[str],
                unseen: Sequence[str] = (), n_adj: Optional[int] = None) -> RelationGraph:
    """Directed graph from per-target neighbour names (duplicates and self dropped)."""
    cats = list(seen) + list(unseen)
    index = {n: i for i, n in enumerate(cats)}
    n_seen = len(seen)
    neighbors: List[List[int]] = []
    for c, name in enumerate(cats):
        out: List[int] = []
        for nb in neighbor_names.get(name, ()):
            if nb not in index:
                raise GraphError(f"unknown neighbour {nb!r} for {name!r}")
            j = index[nb]
            if j == c:
                continue
            if j >= n_seen:
                raise GraphError(f"neighbour {nb!r} of {name!r} is an unseen category")
            if j not in out:
                out.append(j)
        neighbors.append(out)
    if n_adj is None:
        n_adj = max((len(n) for n in neighbors), default=0)
    return RelationGraph(cats, n_seen, neighbors, n_adj)


def graph_from_json(text: str) -> RelationGraph:
    obj = json.loads(text)
    cats = obj["categories"]
    n_seen = obj.get("n_seen")
    if n_seen is None:
        raise GraphError("graph file lacks n_seen")
    edges = obj.get("edges", {})
    return build_graph(edges, cats[:n_seen], cats[n_seen:], obj["n_adj"])


def load_graph(path) -> RelationGraph:
    return graph_from_json(Path(path).read_text(encoding="utf-8"))


def graph_from_indices(categories: Sequence[str], n_seen: int, neighbors: Sequence[Sequence[int]],
                       n_adj: int) -> RelationGraph:
    return RelationGraph(list(categories), n_seen, [list(n) for n in neighbors], n_adj)


def baseline_graph(kind: str, categories: Sequence[str], n_seen: int, n_adj: int,
                   seed: int = 0, text: Optional[np.ndarray] = None) -> RelationGraph:
    """Random or text-similarity neighbours for every category."""
    C = len(categories)
    neighbors: List[List[int]] = []
    if kind == "random":
        rng = rng_stream(seed, "graph")
        for c in range(C):
            cand = np.array([j for j in range(n_seen) if j != c])
            k = min(n_adj, len(cand))
            neighbors.append(sorted(rng.choice(cand, size=k, replace=False).tolist()))
    elif kind == "similarity":
        if text is None:
            raise ValueError("similarity graph needs the text bank")
        unit = text / np.linalg.norm(text, axis=1, keepdims=True)
        sims = unit @ unit[:n_seen].T
        for c in range(C):
            cand = [j for j in range(n_seen) if j != c]
            neighbors.append(sorted(cand, key=lambda j: (-sims[c, j], j))[:n_adj])
    else:
        raise ValueError(f"unknown baseline kind {kind!r}")
    return RelationGraph(list(categories), n_seen, neighbors, n_adj)


# -- LLM clients ----------------------------------------------------------------

class LLMClient(Protocol):
    def complete(self, prompt: str, query_index: int) -> str: ...


class MissingTranscriptError(FileNotFoundError):
    pass


class ReplayClient:
    """Answers prompts from transcript files named ``<prompt-hash>_<query>.txt``."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def path_for(self, prompt: str, query_index: int) -> Path:
        return self.directory / f"{prompt_key(prompt)}_{query_index}.txt"

    def complete(self, prompt: str, query_index: int) -> str:
        path = self.path_for(prompt, query_index)
        if not path.exists():
            raise MissingTranscriptError(f"no transcript {path.name} for query {query_index}")
        return path.read_text(encoding="utf-8")


_LEVEL_WORD = {Strength.HIGH: "High", Strength.MEDIUM: "Medium", Strength.LOW: "Low"}


def format_response(pairs: Sequence[Tuple[str, Strength]], relation: str = "Co-occurrence") -> str:
    lines = []
    for k, (name, level) in enumerate(pairs, 1):
        lines += [f"**Related Category {k}: {name}**",
                  f"- **Type of Relationship**: {relation}",
                  f"- **Association Strength**: {_LEVEL_WORD[level]}",
                  f"- **Explanation**: {name} is related to the target.", ""]
    return "\n".join(lines)


class OracleClient:
    """Stand-in LLM that answers from known neighbour lists.

    True neighbours are reported High or Medium (occasionally dropped), plus a
    few Low-strength decoys, all varying with the query index.
    """

    def __init__(self, truth: Dict[str, Sequence[str]], seen: Sequence[str], seed: int = 0,
                 drop: float = 0.1, decoys: int = 2):
        self.truth = truth
        self.seen = list(seen)
        self.seed = seed
        self.drop = drop
        self.decoys = decoys

    def answer(self, target: str, query_index: int) -> str:
        rng = rng_stream(self.seed, f"oracle/{target}/{query_index}")
        true = list(self.truth.get(target, ()))
        pairs = []
        for rank, name in enumerate(true):
            if rng.random() < self.drop:
                continue
            pairs.append((name, Strength.HIGH if rank < max(1, len(true) // 2) or rng.random() < 0.5
                          else Strength.MEDIUM))
        others = [s for s in self.seen if s not in true and s != target]
        if others and self.decoys:
            for i in rng.choice(len(others), size=min(self.decoys, len(others)), replace=False):
                pairs.append((others[i], Strength.LOW))
        return format_response(pairs)

    def complete(self, prompt: str, query_index: int) -> str:
        m = re.search(r"with the new category (.+?)\. For each", prompt)
        if not m:
            raise ValueError("prompt does not name a target category")
        return self.answer(m.group(1), query_index)


def candidate_seen(target: str, seen: Sequence[str]) -> List[str]:
    return [s for s in seen if s != target]


@dataclass
class MiningResult:
    neighbors: Dict[str, List[str]]
    diagnostics: Dict[str, ParseDiagnostics]


def mine_relations(client: LLMClient, seen: Sequence[str], unseen: Sequence[str] = (),
                   n_adj: int = 16, queries: int = 3) -> MiningResult:
    neighbors, diags = {}, {}
    for target in list(seen) + list(unseen):
        cand = candidate_seen(target, seen)
        prompt = build_prompt(target, cand)
        responses = []
        diag = ParseDiagnostics()
        for q in range(queries):
            pairs, d = parse_response(client.complete(prompt, q), cand)
            diag.skipped_blocks += d.skipped_blocks
            diag.unmatched_names += d.unmatched_names
            responses.append(pairs)
        neighbors[target] = aggregate_and_select(responses, cand, min(n_adj, len(cand)))
        diags[target] = diag
    return MiningResult(neighbors, diags)


def write_transcripts(directory, client: LLMClient, seen: Sequence[str], unseen: Sequence[str] = (),
                      queries: int = 3) -> int:
    """Record ``client`` answers as replay fixtures; returns the file count."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    replay = ReplayClient(directory)
    n = 0
    for target in list(seen) + list(unseen):
        prompt = build_prompt(target, candidate_seen(target, seen))
        for q in range(queries):
            replay.path_for(prompt, q).write_text(client.complete(prompt, q), encoding="utf-8")
            n += 1
    return n
