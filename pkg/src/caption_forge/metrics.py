"""Corpus BLEU_4 and CIDEr, plus the evaluation report.

CIDEr here is the plain (non-D) formulation: per n-gram order, TF-IDF
vectors with IDF ``log(N / df)`` where df counts the images whose reference
set contains the gram, cosine similarity against each reference, averaged
over references and over n = 1..4, then multiplied by 10.  That scale is
not a percentage; scores above 1 are normal.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

from .errors import ConfigError, ContractError

MAX_N = 4
CIDER_SCALE = 10.0

Tokens = Sequence[str]


def ngrams(tokens: Tokens, n: int) -> Counter:
    if not 1 <= n <= MAX_N:
        raise ContractError(f"n-gram order must be in 1..{MAX_N}, got {n}")
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(c: int, refs: Sequence[Tokens]) -> int:
    return min((abs(len(r) - c), len(r)) for r in refs)[1]


def _bleu_stats(cand: Tokens, refs: Sequence[Tokens]) -> tuple[list[int], list[int], int, int]:
    matched, total = [], []
    for n in range(1, MAX_N + 1):
        counts = ngrams(cand, n)
        max_ref: Counter = Counter()
        for r in refs:
            max_ref |= ngrams(r, n)
        matched.append(sum(min(c, max_ref[g]) for g, c in counts.items()))
        total.append(max(0, len(cand) - n + 1))
    return matched, total, len(cand), _closest_ref_len(len(cand), refs)


def _bleu_from(matched, total, c, r) -> float:
    if c == 0 or any(m == 0 for m in matched) or any(t == 0 for t in total):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / MAX_N
    return math.exp(min(0.0, 1.0 - r / c) + log_p)


def bleu4(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]]) -> float:
    """Corpus-level BLEU with uniform weights over n = 1..4 and a brevity penalty."""
    if not candidates:
        raise ContractError("BLEU needs at least one candidate")
    if len(candidates) != len(references):
        raise ContractError(f"{len(candidates)} candidates but {len(references)} reference sets")
    matched, total, c, r = [0] * MAX_N, [0] * MAX_N, 0, 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise ContractError("every candidate needs at least one reference")
        m, t, ci, ri = _bleu_stats(cand, refs)
        matched = [a + b for a, b in zip(matched, m)]
        total = [a + b for a, b in zip(total, t)]
        c += ci
        r += ri
    return _bleu_from(matched, total, c, r)


def sentence_bleu4(candidate: Tokens, refs: Sequence[Tokens]) -> float:
    return _bleu_from(*_bleu_stats(candidate, refs))


def _tfidf(counts: Counter, df: Counter, log_n: float) -> tuple[dict, float]:
    vec = {g: tf * (log_n - math.log(max(1.0, df[g]))) for g, tf in counts.items()}
    return vec, math.sqrt(sum(v * v for v in vec.values()))


def _cosine(a: tuple[dict, float], b: tuple[dict, float]) -> float:
    (va, na), (vb, nb) = a, b
    if na == 0.0 or nb == 0.0:
        return 0.0
    return sum(w * vb[g] for g, w in va.items() if g in vb) / (na * nb)


def cider(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]]) -> tuple[float, list[float]]:
    """Corpus CIDEr (mean of per-image scores) and the per-image scores."""
    if len(candidates) != len(references):
        raise ContractError(f"{len(candidates)} candidates but {len(references)} reference sets")
    if len(candidates) < 2:
        raise ConfigError("CIDEr needs at least 2 images: with one image every IDF is log(1/1) = 0")
    log_n = math.log(len(candidates))
    dfs = []
    for n in range(1, MAX_N + 1):
        df: Counter = Counter()
        for refs in references:
            df.update({g for r in refs for g in ngrams(r, n)})
        dfs.append(df)
    per_image = []
    for cand, refs in zip(candidates, references):
        if not refs:
            raise ContractError("every candidate needs at least one reference")
        score = 0.0
        for n, df in zip(range(1, MAX_N + 1), dfs):
            cv = _tfidf(ngrams(cand, n), df, log_n)
            score += sum(_cosine(cv, _tfidf(ngrams(r, n), df, log_n)) for r in refs) / len(refs)
        per_image.append(CIDER_SCALE * score / MAX_N)
    return sum(per_image) / len(per_image), per_image


@dataclass
class ImageResult:
    image_id: object
    candidate: str
    references: list[str]
    bleu4: float
    cider: float
    logprob: float | None = None


@dataclass
class EvalReport:
    bleu4: float
    cider: float
    n_images: int
    n_tokens: int
    images: list[ImageResult] = field(default_factory=list)
    beam: int | None = None
    cider_scale: str = "x10 protocol scale (not a percentage)"

    def summary_line(self) -> str:
        return f"BLEU_4={self.bleu4:.6f} CIDEr={self.cider:.6f} n={self.n_images}"

    def to_dict(self) -> dict:
        return {
            "corpus": {
                "bleu4": self.bleu4,
                "cider": self.cider,
                "cider_scale": self.cider_scale,
                "n_images": self.n_images,
                "n_tokens": self.n_tokens,
                "beam": self.beam,
            },
            "images": [asdict(r) for r in self.images],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def score_captions(image_ids: Sequence, candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]], beam=None, logprobs=None) -> EvalReport:
    """Score already-decoded candidates; both metrics, corpus and per image."""
    corpus_bleu = bleu4(candidates, references)
    corpus_cider, per_cider = cider(candidates, references)
    rows = [
        ImageResult(
            image_id,
            " ".join(cand),
            [" ".join(r) for r in refs],
            sentence_bleu4(cand, refs),
            per_cider[i],
            None if logprobs is None else logprobs[i],
        )
        for i, (image_id, cand, refs) in enumerate(zip(image_ids, candidates, references))
    ]
    return EvalReport(corpus_bleu, corpus_cider, len(rows), sum(len(c) for c in candidates), rows, beam)


def evaluate_corpus(model, split, beam_k: int = 20, max_len: int = 16) -> EvalReport:
    """Beam-decode every image of ``split`` and score against its references."""
    from .infer import beam_search

    refs_by_id = split.references()
    ids, cands, refs, lps = [], [], [], []
    for im in split.images:
        source = im.pixels if model.encoder.spec.kind != "passthrough" else im.feature
        try:
            feature = model.feature(source)
            hyp = beam_search(model, feature, k=beam_k, max_len=max_len)
        except Exception as e:
            e.args = (f"image {im.image_id!r}: {e}",) + e.args[1:]
            raise
        ids.append(im.image_id)
        cands.append(model.vocab.words(hyp.tokens))
        refs.append(refs_by_id[im.image_id])
        lps.append(hyp.logprob)
    return score_captions(ids, cands, refs, beam=beam_k, logprobs=lps)
