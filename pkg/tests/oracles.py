"""Slow, literal metric implementations used only to cross-check the library."""

import math

import numpy as np

WORDS = list("abcdef")


def random_fixture(rng):
    """Up to 6 images, captions of up to 8 tokens, 1-4 references each."""
    n = int(rng.integers(2, 7))
    sent = lambda: [WORDS[i] for i in rng.integers(0, len(WORDS), size=int(rng.integers(1, 9)))]
    cands = [sent() for _ in range(n)]
    refs = [[sent() for _ in range(int(rng.integers(1, 5)))] for _ in range(n)]
    return cands, refs


def grams(tokens, n):
    out = {}
    for i in range(len(tokens) - n + 1):
        g = " ".join(tokens[i : i + n])
        out[g] = out.get(g, 0) + 1
    return out


def bleu4(candidates, references):
    clipped = [0] * 4
    totals = [0] * 4
    c_len = 0
    r_len = 0
    for cand, refs in zip(candidates, references):
        c_len += len(cand)
        best = None
        for r in refs:
            d = abs(len(r) - len(cand))
            if best is None or d < best[0] or (d == best[0] and len(r) < best[1]):
                best = (d, len(r))
        r_len += best[1]
        for n in range(1, 5):
            cg = grams(cand, n)
            for g, count in cg.items():
                most = 0
                for r in refs:
                    most = max(most, grams(r, n).get(g, 0))
                clipped[n - 1] += min(count, most)
            totals[n - 1] += max(0, len(cand) - n + 1)
    if c_len == 0 or min(clipped) == 0:
        return 0.0
    precisions = [clipped[i] / totals[i] for i in range(4)]
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    return bp * math.exp(sum(math.log(p) for p in precisions) / 4)


def cider(candidates, references):
    """Dense-vector CIDEr over the union of all n-grams; returns (mean, per image)."""
    n_images = len(candidates)
    scores = np.zeros(n_images)
    for n in range(1, 5):
        vocab = sorted(
            {g for refs in references for r in refs for g in grams(r, n)}
            | {g for c in candidates for g in grams(c, n)}
        )
        index = {g: i for i, g in enumerate(vocab)}
        df = np.zeros(len(vocab))
        for refs in references:
            present = set()
            for r in refs:
                present.update(grams(r, n))
            for g in present:
                df[index[g]] += 1
        idf = np.log(n_images) - np.log(np.maximum(df, 1.0))

        def vec(tokens):
            v = np.zeros(len(vocab))
            for g, count in grams(tokens, n).items():
                v[index[g]] = count
            return v * idf

        for i, (cand, refs) in enumerate(zip(candidates, references)):
            c = vec(cand)
            total = 0.0
            for r in refs:
                rv = vec(r)
                denom = np.linalg.norm(c) * np.linalg.norm(rv)
                total += float(c @ rv / denom) if denom > 0 else 0.0
            scores[i] += total / len(refs)
    per_image = list(10.0 * scores / 4)
    return float(np.mean(per_image)), per_image


def color_centroids(image, colors):
    """Recover (color of first shape, relation, color of second) from color centroids.

    Only meaningful when the two shapes have different colors.
    """
    centroids = {}
    for name, rgb in colors.items():
        mask = np.all(np.isclose(image, rgb), axis=-1)
        if mask.any():
            ys, xs = np.nonzero(mask)
            centroids[name] = (ys.mean(), xs.mean())
    return centroids


def relation_holds(relation, a, b):
    (ay, ax), (by, bx) = a, b
    return {
        "above": ay < by,
        "below": ay > by,
        "left of": ax < bx,
        "right of": ax > bx,
    }[relation]
