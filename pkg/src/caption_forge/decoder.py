"""Word embedding + stacked LSTM + softmax head, and the caption NLL.

Unrolling for a caption S_0..S_N (S_0 = START, S_N = STOP): the image
feature is the LSTM input at t = -1 and its output distribution is thrown
away; at t = 0..N-1 the input is the embedded token S_t and the output is
the distribution for S_{t+1}.  Every timestep uses the same parameters.

Gate rows of each layer's weight matrix are ordered i, f, g, o.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .corpus import START
from .errors import DimensionError, VocabularyError
from .numcore import Tensor

INIT_RANGE = 0.08
FORGET_BIAS = 1.0
NLL_CLAMP = 1e-12

clamp_events = 0  # number of targets whose probability was clamped in sequence_nll


@dataclass
class DecoderParams:
    W_e: Tensor  # V×D
    layers: list[tuple[Tensor, Tensor]]  # per layer: W [4H×(in+H)], b [4H]
    head_W: Tensor  # H×V
    head_b: Tensor  # V

    @property
    def vocab_size(self) -> int:
        return self.W_e.shape[0]

    @property
    def embed_size(self) -> int:
        return self.W_e.shape[1]

    @property
    def hidden_size(self) -> int:
        return self.head_W.shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def named(self) -> dict[str, Tensor]:
        out = {"decoder.W_e": self.W_e}
        for i, (w, b) in enumerate(self.layers):
            out[f"decoder.lstm{i}.W"] = w
            out[f"decoder.lstm{i}.b"] = b
        out["decoder.head.W"] = self.head_W
        out["decoder.head.b"] = self.head_b
        return out


def init_decoder(vocab_size: int, embed_size: int = 512, hidden_size: int = 512, n_layers: int = 1, seed: int = 0) -> DecoderParams:
    if n_layers < 1:
        raise DimensionError("decoder needs at least one LSTM layer")

    def uniform(name, shape):
        rng = nc.make_rng(seed, "decoder", name)
        return Tensor(rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape), requires_grad=True, name=name)

    layers = []
    for i in range(n_layers):
        fan_in = embed_size if i == 0 else hidden_size
        w = uniform(f"decoder.lstm{i}.W", (4 * hidden_size, fan_in + hidden_size))
        b = uniform(f"decoder.lstm{i}.b", (4 * hidden_size,))
        b.data[hidden_size : 2 * hidden_size] = FORGET_BIAS
        layers.append((w, b))
    return DecoderParams(
        W_e=uniform("decoder.W_e", (vocab_size, embed_size)),
        layers=layers,
        head_W=uniform("decoder.head.W", (hidden_size, vocab_size)),
        head_b=uniform("decoder.head.b", (vocab_size,)),
    )


LstmState = list  # per layer (h, c), each Tensor[B×H]


def zero_state(params: DecoderParams, batch: int = 1) -> LstmState:
    h = params.hidden_size
    return [(Tensor(np.zeros((batch, h))), Tensor(np.zeros((batch, h)))) for _ in range(params.n_layers)]


def lstm_cell_step(W: Tensor, b: Tensor, x: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
    h, c = state
    hidden = h.shape[-1]
    if W.shape != (4 * hidden, x.shape[-1] + hidden) or b.shape != (4 * hidden,):
        raise DimensionError(f"lstm: weight {W.shape}/bias {b.shape} do not fit input {x.shape} and state {h.shape}")
    z = nc.linear(nc.concat([x, h], axis=-1), W, b)
    i = nc.sigmoid(nc.slice_last(z, 0, hidden))
    f = nc.sigmoid(nc.slice_last(z, hidden, 2 * hidden))
    g = nc.tanh(nc.slice_last(z, 2 * hidden, 3 * hidden))
    o = nc.sigmoid(nc.slice_last(z, 3 * hidden, 4 * hidden))
    c_new = nc.add(nc.mul(f, c), nc.mul(i, g))
    h_new = nc.mul(o, nc.tanh(c_new))
    return h_new, c_new


def _stack_step(params, x, state, masks=None):
    """One timestep through every layer; returns (distribution, new state)."""
    new_state = []
    inp = x
    for li, (w, b) in enumerate(params.layers):
        h, c = lstm_cell_step(w, b, inp, state[li])
        new_state.append((h, c))
        inp = h if masks is None else nc.mul(h, masks[li])
    logits = nc.add(nc.matmul(inp, params.head_W), params.head_b)
    return nc.softmax(logits), new_state


def _dropout_masks(params, batch, rate, rng_seed, rng_key, t):
    rng = nc.make_rng(rng_seed, "dropout", *rng_key, t + 1)
    return [nc.dropout_mask((batch, params.hidden_size), rate, rng) for _ in params.layers]


def decoder_forward_batch(
    params: DecoderParams,
    features: Tensor,
    tokens: np.ndarray,
    train_mode: bool = False,
    dropout: float = 0.5,
    rng_seed: int = 0,
    rng_key: tuple = (),
) -> list[Tensor]:
    """Teacher-forced unroll over a B×T token matrix; returns T-1 tensors of shape B×V.

    Entry t of the result is the distribution for ``tokens[:, t + 1]``.
    Dropout (train mode only) hits each layer's output before the next layer
    and before the head; the recurrent state itself is never dropped.  Masks
    come from the stream (rng_seed, "dropout", *rng_key, t + 1).
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2 or features.data.ndim != 2 or features.shape[0] != tokens.shape[0]:
        raise DimensionError(f"features {features.shape} and tokens {tokens.shape} disagree on batch size")
    if features.shape[1] != params.embed_size:
        raise DimensionError(f"image feature has size {features.shape[1]}, decoder expects {params.embed_size}")
    if np.any(tokens >= params.vocab_size) or np.any(tokens < 0):
        raise VocabularyError(f"token id outside vocabulary of size {params.vocab_size}")
    batch, steps = tokens.shape
    use_dropout = train_mode and dropout > 0

    def masks(t):
        return _dropout_masks(params, batch, dropout, rng_seed, rng_key, t) if use_dropout else None

    state = zero_state(params, batch)
    _, state = _stack_step(params, features, state, masks(-1))
    dists = []
    for t in range(steps - 1):
        x = nc.embed_lookup(params.W_e, tokens[:, t])
        p, state = _stack_step(params, x, state, masks(t))
        dists.append(p)
    return dists


def decoder_forward(params: DecoderParams, image_feature: Tensor, caption, train_mode: bool = False, rng_seed: int = 0, dropout: float = 0.5) -> list[Tensor]:
    """Single-caption unroll: one V-vector per prediction target S_1..S_N."""
    tokens = getattr(caption, "tokens", caption)
    if tokens[0] != START:
        raise VocabularyError("caption must begin with START")
    feat = nc.reshape(image_feature, (1, -1))
    dists = decoder_forward_batch(params, feat, np.asarray([tokens]), train_mode, dropout, rng_seed)
    return [nc.reshape(p, (params.vocab_size,)) for p in dists]


def sequence_nll(distributions: list[Tensor], tokens, mask=None) -> Tensor:
    """Sum (not mean) of -log p_t(S_t) over masked targets.

    ``tokens`` is the START..STOP sequence (or a B×T matrix); distribution t
    predicts ``tokens[..., t + 1]``.  ``mask`` has the token matrix's shape.
    """
    global clamp_events
    tokens = np.asarray(getattr(tokens, "tokens", tokens), dtype=np.int64)
    tok2 = tokens.reshape(1, -1) if tokens.ndim == 1 else tokens
    m2 = np.ones(tok2.shape, dtype=np.float32) if mask is None else np.asarray(mask).reshape(tok2.shape)
    if len(distributions) != tok2.shape[1] - 1:
        raise DimensionError(f"{len(distributions)} distributions for {tok2.shape[1] - 1} targets")
    total = None
    for t, p in enumerate(distributions):
        term, clamped = nc.nll_pick(p, tok2[:, t + 1], m2[:, t + 1], NLL_CLAMP)
        clamp_events += clamped
        total = term if total is None else nc.add(total, term)
    return total


def step_distribution(params: DecoderParams, state: LstmState | None, inp) -> tuple[Tensor, LstmState]:
    """One unrolled step for incremental decoding.

    ``inp`` is an image feature (Tensor of size D, or B×D) or a token id
    (int or int array).  Pass ``state=None`` for the zero state.  The
    distribution returned after the image step is meaningless by
    convention and callers discard it.
    """
    if isinstance(inp, Tensor):
        x = nc.reshape(inp, (1, -1)) if inp.data.ndim == 1 else inp
        if x.shape[1] != params.embed_size:
            raise DimensionError(f"image feature has size {x.shape[1]}, decoder expects {params.embed_size}")
    else:
        x = nc.embed_lookup(params.W_e, np.atleast_1d(np.asarray(inp, dtype=np.int64)))
    if state is None:
        state = zero_state(params, x.shape[0])
    if len(state) != params.n_layers:
        raise DimensionError(f"state has {len(state)} layers, decoder has {params.n_layers}")
    return _stack_step(params, x, state)
