"""Caption-quality metrics: BLEU, METEOR and GLEU against a single reference.

All scores are computed on lowercase whitespace tokens. Corpus aggregation
reports a population mean and standard deviation per metric.
"""

from __future__ import annotations

import csv
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

Tokens = Sequence[str]


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def modified_precision(cand: Tokens, ref: Tokens, n: int) -> tuple[int, int]:
    """Clipped n-gram matches and the number of candidate n-grams."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cand_counts = ngrams(cand, n)
    ref_counts = ngrams(ref, n)
    clipped = sum(min(count, ref_counts[gram]) for gram, count in cand_counts.items())
    return clipped, max(0, len(cand) - n + 1)


def brevity_penalty(c: int, r: int) -> float:
    if c > r:
        return 1.0
    if c == 0:
        return 0.0 if r > 0 else 1.0
    return math.exp(1.0 - r / c)


@dataclass(frozen=True)
class BleuConfig:
    max_n: int = 4
    weights: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.max_n < 1:
            raise ValueError("max_n must be >= 1")
        if self.weights is None:
            object.__setattr__(self, "weights", tuple([1.0 / self.max_n] * self.max_n))
        weights = tuple(float(w) for w in self.weights)
        if len(weights) != self.max_n:
            raise ValueError(f"expected {self.max_n} weights, got {len(weights)}")
        if any(w < 0 for w in weights):
            raise ValueError("weights must be non-negative")
        if abs(math.fsum(weights) - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1, got {math.fsum(weights)}")
        object.__setattr__(self, "weights", weights)


def bleu(cand: Tokens, ref: Tokens, cfg: BleuConfig | None = None) -> float:
    """Single-reference BLEU without smoothing; any zero precision gives 0."""
    cfg = cfg or BleuConfig()
    if not cand:
        return 0.0
    log_sum = 0.0
    for n, w in zip(range(1, cfg.max_n + 1), cfg.weights):
        clipped, total = modified_precision(cand, ref, n)
        if clipped == 0:
            return 0.0
        log_sum += w * math.log(clipped / total)
    return brevity_penalty(len(cand), len(ref)) * math.exp(log_sum)


# ---------------------------------------------------------------------------
# METEOR
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MeteorStats:
    u_m: int
    c_m: int
    r_m: int
    chunks: int
    alignment: tuple[tuple[int, int], ...] = ()
    exact: bool = True

    def __post_init__(self) -> None:
        if not (0 <= self.chunks <= self.u_m <= min(self.c_m, self.r_m)):
            raise ValueError(f"inconsistent METEOR counts: {self}")


def count_chunks(alignment: Iterable[tuple[int, int]]) -> int:
    """Number of runs contiguous in both sequences, ordered by candidate index."""
    links = sorted(alignment)
    chunks = 0
    prev = None
    for i, j in links:
        if prev is None or not (i == prev[0] + 1 and j == prev[1] + 1):
            chunks += 1
        prev = (i, j)
    return chunks


class _ChunkSearch:
    """Branch and bound over exact-match alignments of maximal size.

    Minimizing chunks is the same as maximizing the number of links whose
    successor link ``(i+1, j+1)`` is also present. Candidate positions are
    decided left to right; a bound from unused bigram matches prunes.
    """

    def __init__(self, cand: Tokens, ref: Tokens, node_budget: int):
        self.cand = list(cand)
        self.ref = list(ref)
        self.budget = node_budget
        self.nodes = 0
        self.exhausted = False
        positions: dict[str, list[int]] = defaultdict(list)
        for j, tok in enumerate(self.ref):
            positions[tok].append(j)
        self.positions = positions
        cc, rc = Counter(self.cand), Counter(self.ref)
        self.skips = {w: cc[w] - min(cc[w], rc[w]) for w in cc}
        self.u_m = sum(min(cc[w], rc[w]) for w in cc)
        # each adjacency pairs one cand bigram with one equal ref bigram
        self.ref_bigrams = Counter(zip(self.ref, self.ref[1:]))
        n = len(self.cand)
        # suffix bound: max adjacencies achievable among cand pairs (k-1, k), k >= i
        self.suffix = [0] * (n + 2)
        for i in range(n - 1, -1, -1):
            tail = Counter(zip(self.cand[max(i - 1, 0) :], self.cand[max(i, 1) :]))
            self.suffix[i] = sum(min(c, self.ref_bigrams[b]) for b, c in tail.items())
        self.best_adj = -1
        self.best: list[tuple[int, int]] = []

    def run(self) -> tuple[list[tuple[int, int]], bool]:
        if self.u_m == 0:
            return [], True
        self._dfs(0, [], set(), 0, -2, dict(self.skips))
        return self.best, not self.exhausted

    def _dfs(self, i, links, used, adj, prev_j, skips):
        if self.nodes >= self.budget:
            self.exhausted = True
            return
        self.nodes += 1
        if i == len(self.cand):
            if adj > self.best_adj:
                self.best_adj = adj
                self.best = list(links)
            return
        if adj + self.suffix[i] <= self.best_adj:
            return
        tok = self.cand[i]
        options = [j for j in self.positions.get(tok, ()) if j not in used]
        if prev_j + 1 in options:
            options.remove(prev_j + 1)
            options.insert(0, prev_j + 1)
        for j in options:
            used.add(j)
            links.append((i, j))
            self._dfs(i + 1, links, used, adj + (1 if j == prev_j + 1 and prev_j >= 0 else 0), j, skips)
            links.pop()
            used.discard(j)
            if self.best_adj >= self.suffix[0] or self.exhausted:
                return
        if skips.get(tok, 0) > 0:
            skips[tok] -= 1
            self._dfs(i + 1, links, used, adj, -2, skips)
            skips[tok] += 1


def meteor_stats(cand: Tokens, ref: Tokens, node_budget: int = 200_000) -> MeteorStats:
    """Alignment with the most exact matches and, among those, fewest chunks.

    If the search exceeds ``node_budget`` nodes the best alignment found so
    far is returned and ``exact`` is False.
    """
    links, exact = _ChunkSearch(cand, ref, node_budget).run()
    return MeteorStats(
        u_m=len(links),
        c_m=len(cand),
        r_m=len(ref),
        chunks=count_chunks(links),
        alignment=tuple(links),
        exact=exact,
    )


def meteor_from_stats(stats: MeteorStats) -> float:
    if stats.u_m == 0:
        return 0.0
    precision = stats.u_m / stats.c_m
    recall = stats.u_m / stats.r_m
    f_mean = 10 * precision * recall / (recall + 9 * precision)
    penalty = 0.5 * (stats.chunks / stats.u_m) ** 3
    return f_mean * (1 - penalty)


def meteor(cand: Tokens, ref: Tokens) -> float:
    return meteor_from_stats(meteor_stats(cand, ref))


# ---------------------------------------------------------------------------
# GLEU
# ---------------------------------------------------------------------------


def gleu(cand: Tokens, ref: Tokens, n_lo: int = 1, n_hi: int = 4) -> float:
    """min(precision, recall) of n-gram matches pooled over orders n_lo..n_hi."""
    if not (1 <= n_lo <= n_hi):
        raise ValueError(f"need 1 <= n_lo <= n_hi, got {n_lo}, {n_hi}")
    matches = cand_total = ref_total = 0
    for n in range(n_lo, n_hi + 1):
        cand_counts, ref_counts = ngrams(cand, n), ngrams(ref, n)
        matches += sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
        cand_total += sum(cand_counts.values())
        ref_total += sum(ref_counts.values())
    precision = matches / cand_total if cand_total else 0.0
    recall = matches / ref_total if ref_total else 0.0
    return min(precision, recall)


# ---------------------------------------------------------------------------
# Corpus reporting
# ---------------------------------------------------------------------------


def corpus_summary(scores: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation."""
    if len(scores) == 0:
        raise ValueError("cannot summarize an empty list of scores")
    n = len(scores)
    mean = math.fsum(scores) / n
    var = math.fsum((s - mean) ** 2 for s in scores) / n
    return mean, math.sqrt(var)


@dataclass
class MetricReport:
    per_item: list[tuple[str, str, float]] = field(default_factory=list)

    def add(self, item_id: str, metric: str, score: float) -> None:
        self.per_item.append((item_id, metric, float(score)))

    def metrics(self) -> list[str]:
        seen: dict[str, None] = {}
        for _, metric, _ in self.per_item:
            seen.setdefault(metric, None)
        return list(seen)

    def scores(self, metric: str) -> list[float]:
        return [s for _, m, s in self.per_item if m == metric]

    @property
    def summary(self) -> dict[str, tuple[float, float]]:
        return {m: corpus_summary(self.scores(m)) for m in self.metrics()}

    def write_csv(self, per_item_path, summary_path) -> None:
        with open(per_item_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["item_id", "metric", "score"])
            for item_id, metric, score in self.per_item:
                writer.writerow([item_id, metric, repr(score)])
        with open(summary_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["metric", "mean", "std"])
            for metric, (mean, std) in self.summary.items():
                writer.writerow([metric, f"{mean:.6f}", f"{std:.6f}"])


def score_caption(cand: Tokens, ref: Tokens, bleu_max_n: int = 4, gleu_lo: int = 1, gleu_hi: int = 4) -> dict[str, float]:
    """Every caption metric for one pair, keyed as in the summary table."""
    out = {f"BLEU-{n}": bleu(cand, ref, BleuConfig(n)) for n in range(1, bleu_max_n + 1)}
    out["GLEU"] = gleu(cand, ref, gleu_lo, gleu_hi)
    out["METEOR"] = meteor(cand, ref)
    return out
