"""Caption generation (beam search, greedy) and sentence log-probability.

Any object with the incremental protocol below can be decoded, which lets
the tests drive the search with hand-written probability tables:

* ``vocab_size`` and ``stop_id`` attributes
* ``start(feature) -> (logp[V], state)``: log-probs of the first word
* ``advance(states, tokens) -> (logp[n×V], states)``: one batched step
* ``log_prob(feature, tokens) -> float``: full START..STOP sequence score
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .corpus import START
from .errors import ConfigError, ContractError


@dataclass
class BeamHypothesis:
    tokens: tuple[int, ...]  # after START; ends with STOP once finished
    logprob: float
    state: Any = field(default=None, repr=False)
    finished: bool = False

    def caption(self) -> tuple[int, ...]:
        return (START, *self.tokens)


def _validate(model, tokens: Sequence[int]) -> tuple[int, ...]:
    tokens = tuple(int(t) for t in getattr(tokens, "tokens", tokens))
    stop = model.stop_id
    if len(tokens) < 2 or tokens[0] != START or tokens[-1] != stop or stop in tokens[1:-1]:
        raise ContractError(f"malformed caption {tokens}: expected START, words, STOP")
    if any(t < 0 or t >= model.vocab_size for t in tokens):
        raise ContractError(f"caption {tokens} has ids outside the vocabulary")
    return tokens


def caption_log_prob(model, image_feature, caption) -> float:
    """``sum_t log p_t(S_t)`` over S_1..S_N, STOP included."""
    return model.log_prob(image_feature, _validate(model, caption))


def greedy_decode(model, image_feature, max_len: int = 16) -> BeamHypothesis:
    stop = model.stop_id
    logp, state = model.start(image_feature)
    tokens: tuple[int, ...] = ()
    total = 0.0
    while True:
        w = stop if len(tokens) >= max_len else int(np.argmax(logp))
        total += float(logp[w])
        tokens += (w,)
        if w == stop:
            return BeamHypothesis(tokens, total, state, finished=True)
        logps, states = model.advance([state], [w])
        logp, state = logps[0], states[0]


def _select(scores: np.ndarray, live: list[BeamHypothesis], k: int) -> list[tuple[float, tuple[int, ...], int, int]]:
    """Top-k (score, tokens, parent, word), ties broken by token sequence."""
    flat = scores.reshape(-1)
    finite = np.isfinite(flat)
    n = int(finite.sum())
    if n > k:
        threshold = np.partition(flat[finite], n - k)[n - k]
        picked = np.nonzero(finite & (flat >= threshold))[0]
    else:
        picked = np.nonzero(finite)[0]
    v = scores.shape[1]
    cands = [(float(flat[j]), live[j // v].tokens + (int(j % v),), j // v, int(j % v)) for j in picked]
    cands.sort(key=lambda c: (-c[0], c[1]))
    return cands[:k]


def beam_search(
    model,
    image_feature,
    k: int = 20,
    max_len: int = 16,
    length_norm: bool = False,
    keep_finished_in_beam: bool = False,
) -> BeamHypothesis:
    """Best finished hypothesis by summed log-prob.

    Each step expands every live hypothesis over the whole vocabulary and
    keeps the k best candidates.  By default a candidate ending in STOP
    moves to the finished pool and the next step again fills k live slots;
    with ``keep_finished_in_beam`` finished candidates keep competing for
    (and occupying) the k slots until none are live.  A hypothesis with
    ``max_len`` words may only continue with STOP.
    """
    if k < 1:
        raise ConfigError(f"beam width must be at least 1, got {k}")
    stop = model.stop_id
    logp0, state0 = model.start(image_feature)
    live = [BeamHypothesis((), 0.0, state0)]
    live_logp = logp0[None, :]
    finished: list[BeamHypothesis] = []
    while live:
        scores = np.array([h.logprob for h in live])[:, None] + live_logp
        for i, h in enumerate(live):
            if len(h.tokens) >= max_len:
                keep = scores[i, stop]
                scores[i, :] = -np.inf
                scores[i, stop] = keep
        if keep_finished_in_beam:
            cands = _select_with_finished(scores, live, finished, k)
            finished = [c for c in cands if isinstance(c, BeamHypothesis)]
            cands = [c for c in cands if not isinstance(c, BeamHypothesis)]
        else:
            cands = _select(scores, live, k)
        grow = []
        for score, tokens, parent, w in cands:
            if w == stop:
                finished.append(BeamHypothesis(tokens, score, live[parent].state, finished=True))
            else:
                grow.append((score, tokens, parent, w))
        if not grow:
            break
        live_logp, states = model.advance([live[p].state for _, _, p, _ in grow], [w for *_, w in grow])
        live = [BeamHypothesis(tokens, score, s) for (score, tokens, _, _), s in zip(grow, states)]

    def rank(h: BeamHypothesis):
        score = h.logprob / len(h.tokens) if length_norm else h.logprob
        return (-score, h.tokens)

    return min(finished, key=rank)


def _select_with_finished(scores, live, finished, k):
    cands = _select(scores, live, k)
    pool = [(c[0], c[1], c) for c in cands] + [(h.logprob, h.tokens, h) for h in finished]
    pool.sort(key=lambda e: (-e[0], e[1]))
    return [e[2] for e in pool[:k]]
