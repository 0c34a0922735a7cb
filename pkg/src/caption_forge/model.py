"""Encoder + decoder + vocabulary bundled as one captioning model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import decoder as dec
from .corpus import START, STOP, Vocabulary
from .encoder import Encoder, EncoderSpec
from .numcore import Tensor

LOG_FLOOR = 1e-12


def log_probs(p: Tensor) -> np.ndarray:
    return np.log(np.maximum(p.data.astype(np.float64), LOG_FLOOR))


@dataclass
class CaptionModel:
    vocab: Vocabulary
    encoder: Encoder
    decoder: dec.DecoderParams

    @classmethod
    def build(
        cls,
        vocab: Vocabulary,
        encoder_spec: EncoderSpec | None = None,
        hidden_size: int = 512,
        n_layers: int = 1,
        seed: int = 0,
    ) -> "CaptionModel":
        spec = encoder_spec or EncoderSpec()
        decoder = dec.init_decoder(len(vocab), spec.embed_size, hidden_size, n_layers, seed=seed)
        return cls(vocab, Encoder(spec, seed=seed), decoder)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    stop_id = STOP

    def architecture(self) -> dict:
        return {
            "encoder": self.encoder.spec.to_dict(),
            "embed_size": self.decoder.embed_size,
            "hidden_size": self.decoder.hidden_size,
            "n_layers": self.decoder.n_layers,
            "vocab_size": self.vocab_size,
        }

    def named_tensors(self) -> dict[str, Tensor]:
        return {**self.encoder.params, **self.decoder.named()}

    def trainable(self) -> dict[str, Tensor]:
        return {**self.encoder.trainable(), **self.decoder.named()}

    def feature(self, image) -> np.ndarray:
        """Encoder output for one image (or passthrough feature) as a float32 vector."""
        return self.encoder.encode(image).data.copy()

    # -- incremental decoding protocol used by infer and video

    def start(self, feature) -> tuple[np.ndarray, list]:
        """Feed the image then START; return log-probs of the first word and the state."""
        feat = feature if isinstance(feature, Tensor) else Tensor(feature)
        _, state = dec.step_distribution(self.decoder, None, feat)
        p, state = dec.step_distribution(self.decoder, state, START)
        return log_probs(p)[0], _unstack(state)[0]

    def advance(self, states: list, tokens) -> tuple[np.ndarray, list]:
        stacked = [
            (Tensor(np.stack([s[li][0] for s in states])), Tensor(np.stack([s[li][1] for s in states])))
            for li in range(self.decoder.n_layers)
        ]
        p, new = dec.step_distribution(self.decoder, stacked, np.asarray(tokens, dtype=np.int64))
        return log_probs(p), _unstack(new)

    def log_prob(self, feature, tokens) -> float:
        feat = feature if isinstance(feature, Tensor) else Tensor(feature)
        dists = dec.decoder_forward(self.decoder, feat, tokens)
        return -dec.sequence_nll(dists, tokens).item()


def _unstack(state) -> list:
    batch = state[0][0].shape[0]
    return [[(h.data[b].copy(), c.data[b].copy()) for h, c in state] for b in range(batch)]
