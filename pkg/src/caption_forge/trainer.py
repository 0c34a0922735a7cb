"""Optimization loop: Adam, step LR decay, element-wise gradient clipping,
checkpointing and transfer-learning restarts.

One iteration is one batch.  The loss minimized is the summed caption NLL
of the batch; logs report the per-token mean so curves compare across
caption lengths.
"""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import numcore as nc
from .corpus import DatasetSplit, Vocabulary, make_batches, pad_tokens
from .decoder import decoder_forward_batch, sequence_nll
from .encoder import EncoderSpec
from .errors import CheckpointError, ConfigError, MissingFileError, NumericError, ParseError, PreconditionError, VocabularyError
from .model import CaptionModel

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = b"CAPFORGE"


@dataclass
class TrainConfig:
    lr0: float = 4e-4
    decay_factor: float = 0.5
    decay_every: int = 50000
    batch_size: int = 16
    clip: float = 0.1
    max_seq_len: int = 16
    dropout: float = 0.5
    beam: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_iters: int = 3000
    seed: int = 0
    checkpoint_every: int = 500

    def __post_init__(self):
        for name in ("lr0", "decay_every", "batch_size", "clip", "max_seq_len", "beam", "eps", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ConfigError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("Adam betas must be in [0, 1)")
        if self.max_iters < 0 or self.seed < 0:
            raise ConfigError("max_iters and seed must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(config: TrainConfig, iteration: int) -> float:
    return config.lr0 * config.decay_factor ** (iteration // config.decay_every)


def clip_gradients(grads: dict[str, np.ndarray], clip: float = 0.1) -> dict[str, np.ndarray]:
    """Clamp every gradient element into [-clip, clip]."""
    if clip <= 0:
        raise ConfigError(f"clip must be positive, got {clip}")
    return {k: np.clip(g, -clip, clip) for k, g in grads.items()}


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, nc.Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update, in place, in ``params`` order."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in tensor {name!r}")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = np.array(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ConfigError(f"gradient for {name!r} has shape {g.shape}, tensor has {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        g *= g
        g *= 1.0 - beta2
        v += g
        # step = lr * (m / c1) / (sqrt(v / c2) + eps), built in one buffer
        step = np.multiply(v, 1.0 / c2)
        np.sqrt(step, out=step)
        step += eps
        np.divide(m, step, out=step)
        step *= lr / c1
        np.subtract(p.data, step, out=step)
        p.data[...] = step


@dataclass
class LossRecord:
    iteration: int
    loss: float  # per-token mean
    lr: float
    loss_sum: float = 0.0
    n_tokens: int = 0

    def line(self) -> str:
        return f"{self.iteration},{self.loss!r},{self.lr!r}"


def write_loss_log(history: list[LossRecord], path: str | Path) -> None:
    Path(path).write_text("".join(r.line() + "\n" for r in history))


def read_loss_log(path: str | Path) -> list[LossRecord]:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"loss log not found: {path}")
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            it, loss, lr = line.split(",")
            out.append(LossRecord(int(it), float(loss), float(lr)))
        except ValueError:
            raise ParseError(f"{path}:{lineno}: expected 'iteration,loss,lr', got {line!r}") from None
    return out


def _sources(model: CaptionModel, split: DatasetSplit) -> dict:
    if model.encoder.spec.kind == "passthrough":
        if any(im.feature is None for im in split.images):
            raise PreconditionError("passthrough encoder needs precomputed features for every image")
        return {im.image_id: im.feature for im in split.images}
    if not split.has_pixels:
        raise PreconditionError(f"{model.encoder.spec.kind} encoder needs pixel images but the split only has features")
    return {im.image_id: im.pixels for im in split.images}


def trunk_features(model: CaptionModel, split: DatasetSplit) -> dict:
    """Run the (frozen) conv trunk once per image."""
    return {k: model.encoder.trunk(src).data for k, src in _sources(model, split).items()}


def _check_vocab(model: CaptionModel, split: DatasetSplit) -> None:
    if split.vocab.id_to_token != model.vocab.id_to_token:
        raise VocabularyError(
            f"split vocabulary ({len(split.vocab)} tokens) differs from the model's ({len(model.vocab)}); "
            "re-encode the split with the model's vocabulary"
        )


def _batch_features(model: CaptionModel, batch, sources: dict) -> nc.Tensor:
    enc = model.encoder
    if enc.spec.finetune_top_only or enc.spec.kind == "passthrough":
        return enc.project(batch.features)
    unique = list(dict.fromkeys(batch.image_ids))
    encoded = [nc.reshape(enc.encode(sources[i]), (1, -1)) for i in unique]
    stacked = nc.concat(encoded, axis=0)
    return nc.gather_rows(stacked, [unique.index(i) for i in batch.image_ids])


def corpus_loss(model: CaptionModel, split: DatasetSplit, batch_size: int = 64) -> float:
    """Per-token NLL over every caption of ``split`` with dropout off."""
    feats = trunk_features(model, split)
    total, n = 0.0, 0
    caps = split.captions
    for lo in range(0, len(caps), batch_size):
        chunk = caps[lo : lo + batch_size]
        tokens, mask = pad_tokens(chunk)
        f = model.encoder.project(nc.Tensor(np.stack([feats[c.image_id] for c in chunk])))
        dists = decoder_forward_batch(model.decoder, f, tokens)
        total += sequence_nll(dists, tokens, mask).item()
        n += int(mask.sum())
    return total / n


def train(
    model: CaptionModel,
    split: DatasetSplit,
    config: TrainConfig,
    checkpoint_path: str | Path | None = None,
    start_iteration: int = 0,
    history: list[LossRecord] | None = None,
    callback: Callable[[LossRecord, CaptionModel], bool] | None = None,
) -> tuple[CaptionModel, list[LossRecord]]:
    """Train until ``config.max_iters`` (absolute iteration count).

    ``callback(record, model)`` runs after every iteration; returning True
    stops training early.  A checkpoint is written every
    ``config.checkpoint_every`` iterations and at the end.
    """
    _check_vocab(model, split)
    history = list(history or [])
    sources = _sources(model, split)
    frozen = model.encoder.spec.finetune_top_only or model.encoder.spec.kind == "passthrough"
    feats = trunk_features(model, split) if frozen else None
    params = model.trainable()
    adam = AdamState()
    it = start_iteration
    epoch = 0
    stop = False
    while it < config.max_iters and not stop:
        for batch in make_batches(split, config.batch_size, config.seed, feats, epoch=epoch):
            if it >= config.max_iters:
                break
            with nc.Graph() as g:
                f = _batch_features(model, batch, sources)
                dists = decoder_forward_batch(
                    model.decoder, f, batch.tokens, True, config.dropout, config.seed, rng_key=(it,)
                )
                loss = sequence_nll(dists, batch.tokens, batch.mask)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at iteration {it}")
            for p in params.values():
                p.grad = None
            nc.backward(g, loss, params=list(params.values()))
            grads = clip_gradients({k: p.grad for k, p in params.items()}, config.clip)
            lr = lr_at(config, it)
            adam_step(params, grads, adam, lr, config.beta1, config.beta2, config.eps)
            rec = LossRecord(it, value / batch.n_targets, lr, value, batch.n_targets)
            history.append(rec)
            it += 1
            if it % 100 == 0:
                log.info("iter %d loss/token %.4f lr %.3g", it, rec.loss, lr)
            if checkpoint_path is not None and it % config.checkpoint_every == 0:
                save_checkpoint(model, checkpoint_path, config, it, history)
            if callback is not None and callback(rec, model):
                stop = True
                break
        epoch += 1
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path, config, it, history)
    return model, history


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    model: CaptionModel
    config: TrainConfig | None
    iteration: int
    history: list[LossRecord]


def checkpoint_bytes(model: CaptionModel, config: TrainConfig | None = None, iteration: int = 0, history=()) -> bytes:
    tensors = model.named_tensors()
    directory, blobs, offset = [], [], 0
    for name, t in tensors.items():
        raw = t.data.astype("<f4").tobytes()
        directory.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "architecture": model.architecture(),
        "config": None if config is None else asdict(config),
        "vocabulary": {"tokens": list(model.vocab.id_to_token), "min_count": model.vocab.min_count},
        "tensors": directory,
        "iteration": iteration,
        "loss_history": [[r.iteration, r.loss, r.lr] for r in history],
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)


def save_checkpoint(model: CaptionModel, path: str | Path, config: TrainConfig | None = None, iteration: int = 0, history=()) -> None:
    """Write atomically: a crash mid-write leaves the previous checkpoint intact."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model, config, iteration, history))
    os.replace(tmp, path)


def _read(path: str | Path) -> tuple[dict, bytes]:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise ParseError(f"{path}: not a checkpoint file (bad magic or truncated header)")
    (n,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + n:
        raise ParseError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[16 : 16 + n])
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ParseError(f"{path}: corrupt manifest: {e}") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version} is not supported (expected {FORMAT_VERSION})")
    data = raw[16 + n :]
    need = sum(e["nbytes"] for e in manifest["tensors"])
    if len(data) != need:
        raise ParseError(f"{path}: tensor data is {len(data)} bytes, manifest expects {need}")
    return manifest, data


def _arrays(manifest: dict, data: bytes) -> dict[str, np.ndarray]:
    return {
        e["name"]: np.frombuffer(data, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"]).reshape(e["shape"])
        for e in manifest["tensors"]
    }


def load_weights(model: CaptionModel, path: str | Path) -> CaptionModel:
    """Copy checkpoint tensors into ``model`` after checking every name and shape."""
    manifest, data = _read(path)
    arrays = _arrays(manifest, data)
    expected = model.named_tensors()
    missing = sorted(set(expected) - set(arrays))
    extra = sorted(set(arrays) - set(expected))
    wrong = sorted(n for n in set(expected) & set(arrays) if tuple(arrays[n].shape) != expected[n].shape)
    if missing or extra or wrong:
        parts = []
        if missing:
            parts.append(f"missing {missing}")
        if extra:
            parts.append(f"unexpected {extra}")
        if wrong:
            parts.append("shape mismatch " + ", ".join(f"{n} {tuple(arrays[n].shape)} vs {expected[n].shape}" for n in wrong))
        raise CheckpointError(f"{path}: checkpoint does not fit the model: " + "; ".join(parts), missing + extra + wrong)
    for name, t in expected.items():
        t.data[...] = arrays[name]
    return model


def load_checkpoint(path: str | Path) -> Checkpoint:
    manifest, data = _read(path)
    arch = manifest["architecture"]
    vocab = Vocabulary(tuple(manifest["vocabulary"]["tokens"]), manifest["vocabulary"]["min_count"])
    model = CaptionModel.build(vocab, EncoderSpec.from_dict(arch["encoder"]), arch["hidden_size"], arch["n_layers"])
    load_weights(model, path)
    cfg = manifest.get("config")
    history = [LossRecord(int(i), float(l), float(r)) for i, l, r in manifest.get("loss_history", [])]
    return Checkpoint(model, None if cfg is None else TrainConfig.from_dict(cfg), manifest["iteration"], history)


def transfer_train(
    checkpoint_path: str | Path,
    new_split: DatasetSplit,
    config: TrainConfig,
    checkpoint_out: str | Path | None = None,
    callback=None,
) -> tuple[CaptionModel, list[LossRecord]]:
    """Start from a checkpoint's weights and keep training on ``new_split``.

    Adam state, iteration counter and LR schedule all start fresh.  The split
    must already be encoded with the checkpoint's vocabulary.
    """
    ckpt = load_checkpoint(checkpoint_path)
    if len(new_split.vocab) != len(ckpt.model.vocab):
        raise VocabularyError(
            f"corpus vocabulary has {len(new_split.vocab)} tokens, checkpoint has {len(ckpt.model.vocab)}"
        )
    return train(ckpt.model, new_split, config, checkpoint_out, callback=callback)
