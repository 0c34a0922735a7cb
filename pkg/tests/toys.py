"""Hand-built models that speak the incremental decoding protocol."""

import itertools
import math

import numpy as np

STOP = 1


class TableModel:
    """Next-token log-probs drawn once per prefix from a seeded Dirichlet.

    The feature argument is ignored; the state is the prefix itself.
    """

    stop_id = STOP

    def __init__(self, vocab_size=3, seed=0, concentration=1.0):
        self.vocab_size = vocab_size
        self.seed = seed
        self.concentration = concentration
        self._cache = {}

    def table(self, prefix):
        prefix = tuple(prefix)
        if prefix not in self._cache:
            rng = np.random.default_rng([self.seed, len(prefix), *prefix])
            p = rng.dirichlet([self.concentration] * self.vocab_size)
            self._cache[prefix] = np.log(p)
        return self._cache[prefix]

    def start(self, feature):
        return self.table(()), ()

    def advance(self, states, tokens):
        new = [tuple(s) + (int(t),) for s, t in zip(states, tokens)]
        return np.stack([self.table(s) for s in new]), new

    def log_prob(self, feature, tokens):
        words = tokens[1:]
        return float(sum(self.table(words[:i])[w] for i, w in enumerate(words)))


def exhaustive_best(model, max_len):
    """Every caption with up to ``max_len`` words; best by score, then token order."""
    words = [w for w in range(model.vocab_size) if w != STOP]
    best = None
    for n in range(max_len + 1):
        for seq in itertools.product(words, repeat=n):
            tokens = seq + (STOP,)
            key = (-model.log_prob(None, (0,) + tokens), tokens)
            best = key if best is None or key < best else best
    return -best[0], best[1]


class MixtureModel:
    """First word from a blend of per-feature tables, then STOP with fixed probability.

    ``tables[j]`` is the first-word distribution for the one-hot feature e_j;
    a general feature f uses ``sum_j f_j * tables[j]``.  After the first word
    the next token is STOP with probability ``p_stop`` and word 3 otherwise.
    """

    stop_id = STOP

    def __init__(self, tables, p_stop=0.9):
        self.tables = np.asarray(tables, dtype=np.float64)
        self.vocab_size = self.tables.shape[1]
        self.p_stop = p_stop

    def first(self, feature):
        return np.log(np.asarray(feature, dtype=np.float64) @ self.tables)

    def after(self):
        p = np.full(self.vocab_size, 1e-300)
        p[STOP] = self.p_stop
        p[3] = 1.0 - self.p_stop
        return np.log(p)

    def start(self, feature):
        return self.first(feature), 1

    def advance(self, states, tokens):
        return np.stack([self.after() for _ in states]), [s + 1 for s in states]

    def log_prob(self, feature, tokens):
        words = tokens[1:]
        lp = self.first(feature)[words[0]]
        for w in words[1:]:
            lp += self.after()[w]
        return float(lp)


def ab_model():
    """Word 3 dominates on feature A = e_0, word 4 on B = e_1.

    Log-prob gaps between the one-word captions (3) and (4), both followed by STOP:
    on A, log(0.8/0.1) = ln 8; on B, log(0.6/0.3) = ln 2.
    """
    tables = [
        [1e-9, 0.1 - 2e-9, 1e-9, 0.8, 0.1],
        [1e-9, 0.1 - 2e-9, 1e-9, 0.3, 0.6],
    ]
    return MixtureModel(tables)


GAP_A = math.log(8.0)
GAP_B = math.log(2.0)
FEATURE_A = np.array([1.0, 0.0])
FEATURE_B = np.array([0.0, 1.0])
