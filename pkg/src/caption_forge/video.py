"""Frame-by-frame captioning with caption hysteresis and feature smoothing.

In ``raw`` mode every frame is captioned independently.  The hysteresis
modes keep the previous caption unless the new candidate beats it by more
than ``delta`` nats, both captions scored against the current frame.
``hysteresis+ema`` also runs an exponential moving average over the frame
features before decoding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .corpus import load_feature_sequence
from .errors import ConfigError, DimensionError, MissingFileError, ParseError, PreconditionError
from .infer import beam_search, caption_log_prob

MODES = ("raw", "hysteresis", "hysteresis+ema")


@dataclass(frozen=True)
class StabilizerConfig:
    delta: float = 1.0
    alpha: float = 0.3
    mode: str = "hysteresis"
    beam: int = 20
    max_len: int = 16

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.delta >= 0:
            raise ConfigError(f"delta must be >= 0, got {self.delta}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")

    @property
    def smooths(self) -> bool:
        return self.mode == "hysteresis+ema"


@dataclass
class StreamState:
    caption: tuple[int, ...] | None = None  # START..STOP
    logprob: float | None = None  # of ``caption`` under the frame it was last scored on
    smoothed: np.ndarray | None = None
    frame: int = 0


@dataclass
class FrameCaption:
    frame: int
    caption: tuple[int, ...]
    switched: bool
    advantage: float | None = None  # candidate minus previous, in nats

    def line(self, vocab) -> str:
        words = " ".join(vocab.words(self.caption))
        return f"{self.frame}\t{words}\t{int(self.switched)}"


@dataclass
class StreamResult:
    frames: list[FrameCaption] = field(default_factory=list)

    @property
    def switches(self) -> int:
        return sum(f.switched for f in self.frames)


def feature_ema(smoothed: np.ndarray | None, new_feature, alpha: float) -> np.ndarray:
    f = np.asarray(new_feature, dtype=np.float64)
    if smoothed is None:
        return f.copy()
    if smoothed.shape != f.shape:
        raise DimensionError(f"feature shape {f.shape} does not match the running average {smoothed.shape}")
    return (1.0 - alpha) * smoothed + alpha * f


def stabilize_step(state: StreamState, frame_feature, model, config: StabilizerConfig) -> tuple[FrameCaption, StreamState]:
    smoothed = feature_ema(state.smoothed, frame_feature, config.alpha) if config.smooths else None
    feature = np.asarray(frame_feature if smoothed is None else smoothed, dtype=np.float32)
    hyp = beam_search(model, feature, k=config.beam, max_len=config.max_len)
    candidate = hyp.caption()

    advantage = None
    if state.caption is None:
        caption, switched = candidate, False
    elif config.mode == "raw":
        caption, switched = candidate, candidate != state.caption
    elif candidate == state.caption:
        caption, switched, advantage = candidate, False, 0.0
    else:
        previous = caption_log_prob(model, feature, state.caption)
        advantage = caption_log_prob(model, feature, candidate) - previous
        switched = advantage > config.delta
        caption = candidate if switched else state.caption

    logprob = hyp.logprob if caption == candidate else caption_log_prob(model, feature, caption)
    out = FrameCaption(state.frame, caption, switched, advantage)
    return out, StreamState(caption, logprob, smoothed, state.frame + 1)


def caption_stream(features: Iterable, model, config: StabilizerConfig | None = None) -> StreamResult:
    """Caption each feature vector in order; images go through ``model.feature`` first."""
    config = config or StabilizerConfig()
    state = StreamState()
    result = StreamResult()
    for f in features:
        f = np.asarray(f)
        if f.ndim == 3:
            f = model.feature(f)
        step, state = stabilize_step(state, f, model, config)
        result.frames.append(step)
    if not result.frames:
        raise PreconditionError("empty frame stream")
    return result


def panning_frames(image: np.ndarray, n_frames: int, step: int = 2, axis: int = 1) -> Iterator[np.ndarray]:
    """Synthetic camera pan: the image rolled by ``step`` more pixels each frame."""
    for i in range(n_frames):
        yield np.roll(image, i * step, axis=axis)


def load_frames(path) -> list[np.ndarray]:
    """A directory of ``.npy`` frames in lexicographic order, or a feature-sequence document."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"frames not found: {path}")
    if not path.is_dir():
        return load_feature_sequence(path)
    files = sorted(path.glob("*.npy"))
    if not files:
        raise PreconditionError(f"{path}: no .npy frames")
    frames = []
    for f in files:
        try:
            frames.append(np.load(f).astype(np.float32))
        except ValueError as e:
            raise ParseError(f"{f}: {e}") from None
    return frames
