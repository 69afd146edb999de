"""Independent reference implementations used as test oracles.

Each one is written from the metric's definition with the most naive
procedure available (explicit n-gram lists, exhaustive alignment search,
per-pixel loops), sharing no code with the package.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def grams(tokens, n):
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def clipped_matches(cand_grams, ref_grams):
    """Multiset intersection size by striking out matched reference grams."""
    pool = list(ref_grams)
    hits = 0
    for g in cand_grams:
        if g in pool:
            pool.remove(g)
            hits += 1
    return hits


def bleu_oracle(cand, ref, max_n=4):
    if not cand:
        return 0.0
    logs = []
    for n in range(1, max_n + 1):
        cg = grams(cand, n)
        hits = clipped_matches(cg, grams(ref, n))
        if hits == 0:
            return 0.0
        logs.append(math.log(hits / len(cg)))
    c, r = len(cand), len(ref)
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(sum(logs) / max_n)


def gleu_oracle(cand, ref, n_lo=1, n_hi=4):
    hits = nc = nr = 0
    for n in range(n_lo, n_hi + 1):
        cg, rg = grams(cand, n), grams(ref, n)
        hits += clipped_matches(cg, rg)
        nc += len(cg)
        nr += len(rg)
    p = hits / nc if nc else 0.0
    r = hits / nr if nr else 0.0
    return min(p, r)


def _chunks(links):
    links = sorted(links)
    return sum(1 for k, (i, j) in enumerate(links) if k == 0 or (i, j) != (links[k - 1][0] + 1, links[k - 1][1] + 1))


def all_alignments(cand, ref):
    """Every one-to-one exact-token alignment (including non-maximal ones)."""
    out = []

    def rec(i, used, links):
        if i == len(cand):
            out.append(tuple(links))
            return
        rec(i + 1, used, links)
        for j, tok in enumerate(ref):
            if tok == cand[i] and j not in used:
                rec(i + 1, used | {j}, links + [(i, j)])

    rec(0, frozenset(), [])
    return out


def meteor_oracle(cand, ref):
    """(u_m, chunks, score) from exhaustive alignment enumeration."""
    aligns = all_alignments(cand, ref)
    u_m = max(len(a) for a in aligns)
    if u_m == 0:
        return 0, 0, 0.0
    chunks = min(_chunks(a) for a in aligns if len(a) == u_m)
    p, r = u_m / len(cand), u_m / len(ref)
    f = 10 * p * r / (r + 9 * p)
    return u_m, chunks, f * (1 - 0.5 * (chunks / u_m) ** 3)


def mask_oracle(boxes, height, width):
    """Per-pixel enumeration: a pixel is set when its center lies in any half-open box."""
    mask = np.zeros((height, width), dtype=np.uint8)
    for r, c in itertools.product(range(height), range(width)):
        y, x = r + 0.5, c + 0.5
        for b in boxes:
            if b.cx - b.w / 2 <= x < b.cx + b.w / 2 and b.cy - b.h / 2 <= y < b.cy + b.h / 2:
                mask[r, c] = 1
                break
    return mask


def away_from_zero(rng, shape, margin=1e-3, scale=1.0):
    """Normal samples with every entry at least ``margin`` from 0 (relu kink)."""
    x = rng.normal(0.0, scale, size=shape)
    while np.any(np.abs(x) < margin):
        bad = np.abs(x) < margin
        x[bad] = rng.normal(0.0, scale, size=int(bad.sum()))
    return x


def distinct_values(rng, shape, gap=1e-3):
    """Shuffled, jittered grid values whose pairwise gaps all exceed ``gap``."""
    n = int(np.prod(shape))
    step = 4 * gap
    x = rng.permutation(n) * step + rng.uniform(0.0, step - 2 * gap, size=n)
    return (x - x.mean()).reshape(shape)
