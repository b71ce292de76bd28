"""Prompt-conditioned open-category alignment.

Routing-unit embeddings and prompt embeddings are projected into a shared
space, scored by dot product, and matched one-to-one with the Hungarian
algorithm.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import DimensionError, InfeasibleError, ValidationError
from .nn import Module
from .tensor import Tensor

TEXT_DIM = 32
SHARED_DIM = 32
PROMPT_BUDGET = 16
PAD_SCORE = -1e6
DEFAULT_THRESHOLD = 0.25
TIGHT_TOL = 1e-9


@dataclass(frozen=True)
class PromptEmbedding:
    text: str
    vector: np.ndarray
    frozen: bool = True


def embed_prompt(text: str, dim: int = TEXT_DIM) -> PromptEmbedding:
    """Deterministic stand-in for a frozen text encoder."""
    if not text:
        raise ValidationError("prompt text must be non-empty")
    seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")
    v = np.random.default_rng(seed).standard_normal(dim)
    return PromptEmbedding(text, v / np.linalg.norm(v))


@dataclass(frozen=True)
class Prompt:
    text: str
    tag: str | None = None


def read_prompt_file(path) -> list[Prompt]:
    """One prompt per line; an optional tab-separated ``seen``/``unseen`` tag."""
    prompts = []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        if not raw.strip():
            continue
        text, _, tag = raw.partition("\t")
        tag = tag.strip() or None
        if tag not in (None, "seen", "unseen"):
            raise ValidationError(f"bad prompt tag {tag!r} in {path}")
        prompts.append(Prompt(text.strip(), tag))
    return prompts


def write_prompt_file(path, prompts: list[Prompt]) -> None:
    lines = [p.text if p.tag is None else f"{p.text}\t{p.tag}" for p in prompts]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def sample_prompts(rng: np.random.Generator, prompts: list, budget: int = PROMPT_BUDGET) -> list:
    """Uniform sample without replacement down to ``budget``; order preserved."""
    if len(prompts) <= budget:
        return list(prompts)
    keep = np.sort(rng.choice(len(prompts), size=budget, replace=False))
    return [prompts[i] for i in keep]


class Projection(Module):
    """Linear map into the shared space followed by L2 normalization."""

    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int = SHARED_DIM, identity: bool = False):
        if identity:
            if n_in != n_out:
                raise DimensionError("identity projection needs a square head")
            w = np.eye(n_in)
        else:
            w = rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_in, n_out))
        self.weight = T.parameter(w)

    def __call__(self, x: Tensor) -> tuple[Tensor, np.ndarray]:
        if x.shape[-1] != self.weight.shape[0]:
            raise DimensionError(f"projection expects dim {self.weight.shape[0]}, got {x.shape[-1]}")
        return T.l2_normalize(T.matmul(x, self.weight))


def project(x, head: Projection) -> tuple[Tensor, np.ndarray]:
    """Project and normalize; returns (vectors, degenerate-row flags)."""
    return head(T.as_tensor(x))


def similarity(vs: Tensor, ts: Tensor) -> Tensor:
    """R x M matrix of dot products between projected visual and text vectors."""
    return T.matmul(vs, T.transpose(ts))


# -- assignment ---------------------------------------------------------------


def _min_cost_square(cost: list[list[float]]) -> tuple[list[int], list[float], list[float]]:
    """Shortest-augmenting-path Hungarian method on a square cost matrix.

    Returns (row -> column, row potentials, column potentials).
    """
    n = len(cost)
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    owner = [0] * (n + 1)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = owner[j0]
            row = cost[i0 - 1]
            ui = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - ui - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[owner[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    assignment = [0] * n
    for j in range(1, n + 1):
        assignment[owner[j] - 1] = j - 1
    return assignment, u[1:], v[1:]


def _has_perfect_matching(adj: list[list[int]], rows: list[int], cols: set[int]) -> bool:
    match: dict[int, int] = {}

    def augment(r: int, seen: set[int]) -> bool:
        for c in adj[r]:
            if c in cols and c not in seen:
                seen.add(c)
                if c not in match or augment(match[c], seen):
                    match[c] = r
                    return True
        return False

    return all(augment(r, set()) for r in rows)


def _lexicographic_optimum(cost, assignment, u, v) -> list[int]:
    """Smallest optimal assignment in row-major lexicographic order.

    With optimal duals fixed, the optimal assignments are exactly the
    perfect matchings of the tight-edge graph.
    """
    n = len(cost)
    tight = [[j for j in range(n) if abs(cost[i][j] - u[i] - v[j]) <= TIGHT_TOL * (1 + abs(cost[i][j]))]
             for i in range(n)]
    free = set(range(n))
    result = []
    on_witness = True
    for i in range(n):
        rest = list(range(i + 1, n))
        for j in tight[i]:
            if j not in free:
                continue
            if on_witness and j == assignment[i]:
                chosen = j
                break
            if _has_perfect_matching(tight, rest, free - {j}):
                chosen = j
                on_witness = False
                break
        else:
            chosen = assignment[i]
        result.append(chosen)
        free.discard(chosen)
    return result


def hungarian(scores) -> list[int]:
    """Score-maximizing injection of rows into columns.

    Rows (routing units) must not outnumber columns (prompts). Rectangular
    inputs are padded to square with ``PAD_SCORE``. Among optimal
    assignments the lexicographically smallest is returned.
    """
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=np.float64)
    if s.ndim != 2:
        raise DimensionError(f"hungarian expects a matrix, got shape {s.shape}")
    r, m = s.shape
    if r > m:
        raise InfeasibleError(f"{r} routing units cannot each receive one of {m} prompts")
    if r == 0:
        return []
    padded = np.full((m, m), PAD_SCORE)
    padded[:r] = s
    cost = (-padded).tolist()
    assignment, u, v = _min_cost_square(cost)
    lex = _lexicographic_optimum(cost, assignment, u, v)[:r]
    best = assignment[:r]
    if assignment_score(s, lex) < assignment_score(s, best) - 1e-9:
        return best
    return lex


def assignment_score(scores, assignment: list[int]) -> float:
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores)
    return float(sum(s[i, j] for i, j in enumerate(assignment)))


def greedy_top1_baseline(scores) -> list[int]:
    """Each row in order takes its best still-unclaimed column."""
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=np.float64)
    r, m = s.shape
    if r > m:
        raise InfeasibleError(f"{r} routing units cannot each receive one of {m} prompts")
    taken: set[int] = set()
    out = []
    for i in range(r):
        best = max((j for j in range(m) if j not in taken), key=lambda j: (s[i, j], -j))
        taken.add(best)
        out.append(best)
    return out


def alignment_loss(scores: Tensor, assignment: list[int]) -> Tensor:
    """Negative total score of the matched pairs; the matching is a constant."""
    pi = np.zeros(scores.shape)
    pi[np.arange(len(assignment)), assignment] = 1.0
    return -T.tsum(scores * Tensor(pi))


# -- open-category inference ----------------------------------------------------


@dataclass
class OpenCategoryMatch:
    unit: int
    prompt: int
    score: float


def open_category_infer(scores, threshold: float = DEFAULT_THRESHOLD, units: list[int] | None = None) -> list[OpenCategoryMatch]:
    """Match units to prompts and keep pairs scoring above ``threshold``.

    ``scores`` is the R x M similarity of one image; ``units`` names the
    routing unit of each row.
    """
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] == 0:
        raise ValidationError("open-category inference needs a non-empty prompt set")
    if s.shape[1] > PROMPT_BUDGET:
        raise ValidationError(f"at most {PROMPT_BUDGET} prompts per image, got {s.shape[1]}")
    units = list(range(s.shape[0])) if units is None else list(units)
    rows = s.shape[0]
    if rows > s.shape[1]:
        # more units than prompts: keep the rows with the strongest best match
        keep = np.argsort(-s.max(axis=1), kind="stable")[: s.shape[1]]
        keep = np.sort(keep)
        s, units = s[keep], [units[k] for k in keep]
    matches = []
    for row, col in enumerate(hungarian(s)):
        if s[row, col] > threshold:
            matches.append(OpenCategoryMatch(units[row], col, float(s[row, col])))
    return matches
