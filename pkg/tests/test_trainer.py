import json
import math

import numpy as np
import pytest

from caption_forge import corpus, trainer
from caption_forge import numcore as nc
from caption_forge.encoder import EncoderSpec
from caption_forge.errors import CheckpointError, ConfigError, MissingFileError, NumericError, ParseError, VocabularyError
from caption_forge.model import CaptionModel
from caption_forge.trainer import TrainConfig


def small_model(split, seed=0, **kw):
    spec = EncoderSpec(embed_size=16, **kw)
    return CaptionModel.build(split.vocab, spec, hidden_size=16, seed=seed)


@pytest.fixture(scope="module")
def split():
    return corpus.gen_synthetic(4, 0)[0]


def test_training_defaults():
    c = TrainConfig()
    assert (c.lr0, c.decay_factor, c.decay_every, c.batch_size, c.clip, c.max_seq_len, c.dropout, c.beam) == (
        4e-4,
        0.5,
        50000,
        16,
        0.1,
        16,
        0.5,
        20,
    )


def test_config_validation():
    for bad in [dict(lr0=0), dict(dropout=1.0), dict(decay_factor=1.5), dict(batch_size=0), dict(beta1=1.0), dict(seed=-1)]:
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
    with pytest.raises(ConfigError, match="unknown"):
        TrainConfig.from_dict({"lr": 0.1})


def test_lr_schedule_steps():
    c = TrainConfig()
    assert trainer.lr_at(c, 0) == 4e-4
    assert trainer.lr_at(c, 49999) == 4e-4
    assert trainer.lr_at(c, 50000) == 2e-4
    assert trainer.lr_at(c, 100000) == 1e-4


def test_clip_is_elementwise():
    out = trainer.clip_gradients({"w": np.array([-1.0, 0.05, 0.3])}, 0.1)
    assert out["w"].tolist() == [-0.1, 0.05, 0.1]


def test_adam_matches_textbook_update():
    p = nc.Tensor([1.0, -2.0], requires_grad=True)
    state = trainer.AdamState()
    ref = p.data.astype(np.float64).copy()
    m = v = np.zeros(2)
    rng = np.random.default_rng(0)
    for t in range(1, 6):
        g = rng.normal(size=2)
        trainer.adam_step({"p": p}, {"p": g}, state, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        ref = ref.astype(np.float32).astype(np.float64)
    assert np.allclose(p.data, ref, atol=1e-7)


def test_adam_rejects_non_finite():
    p = nc.Tensor([1.0], requires_grad=True)
    with pytest.raises(NumericError, match="'p'"):
        trainer.adam_step({"p": p}, {"p": np.array([np.nan])}, trainer.AdamState(), 0.1)


def test_training_reduces_loss(split):
    model = small_model(split)
    before = trainer.corpus_loss(model, split)
    model, hist = trainer.train(model, split, TrainConfig(max_iters=200, dropout=0.0, lr0=3e-3))
    assert len(hist) == 200 and [r.iteration for r in hist] == list(range(200))
    assert trainer.corpus_loss(model, split) < 0.7 * before


def test_frozen_trunk_runs_once_per_image(split, monkeypatch):
    model = small_model(split)
    calls = []
    original = model.encoder.trunk
    monkeypatch.setattr(model.encoder, "trunk", lambda img: calls.append(1) or original(img))
    trainer.train(model, split, TrainConfig(max_iters=5))
    assert len(calls) == len(split.images)


def test_end_to_end_updates_trunk(split):
    model = small_model(split, finetune_top_only=False)
    before = model.encoder.params["encoder.conv0.w"].data.copy()
    trainer.train(model, split, TrainConfig(max_iters=3))
    assert not np.array_equal(before, model.encoder.params["encoder.conv0.w"].data)


def test_frozen_trunk_is_untouched(split):
    model = small_model(split)
    before = model.encoder.params["encoder.conv0.w"].data.copy()
    trainer.train(model, split, TrainConfig(max_iters=3))
    assert np.array_equal(before, model.encoder.params["encoder.conv0.w"].data)


def test_callback_stops_early(split):
    _, hist = trainer.train(small_model(split), split, TrainConfig(max_iters=50), callback=lambda rec, m: rec.iteration == 4)
    assert len(hist) == 5


def test_vocab_mismatch(split):
    other = corpus.gen_synthetic(3, 99)[0]
    model = small_model(other)
    if other.vocab.id_to_token != split.vocab.id_to_token:
        with pytest.raises(VocabularyError):
            trainer.train(model, split, TrainConfig(max_iters=1))


def test_checkpoint_round_trip(tmp_path, split):
    model, hist = trainer.train(small_model(split), split, TrainConfig(max_iters=4))
    path = tmp_path / "m.ckpt"
    trainer.save_checkpoint(model, path, TrainConfig(max_iters=4), 4, hist)
    ck = trainer.load_checkpoint(path)
    assert ck.iteration == 4 and len(ck.history) == 4
    assert ck.config == TrainConfig(max_iters=4)
    for name, t in model.named_tensors().items():
        assert np.array_equal(t.data, ck.model.named_tensors()[name].data)
    assert path.read_bytes() == trainer.checkpoint_bytes(ck.model, ck.config, ck.iteration, ck.history)
    assert not (tmp_path / "m.ckpt.tmp").exists()


def test_checkpoint_manifest_layout(tmp_path, split):
    model = small_model(split)
    path = tmp_path / "m.ckpt"
    trainer.save_checkpoint(model, path)
    raw = path.read_bytes()
    assert raw[:8] == b"CAPFORGE"
    n = int.from_bytes(raw[8:16], "little")
    manifest = json.loads(raw[16 : 16 + n])
    assert manifest["format_version"] == 1
    assert manifest["vocabulary"]["tokens"][:3] == list(corpus.RESERVED)
    assert sum(e["nbytes"] for e in manifest["tensors"]) == len(raw) - 16 - n


def test_checkpoint_corruption(tmp_path, split):
    model = small_model(split)
    path = tmp_path / "m.ckpt"
    trainer.save_checkpoint(model, path)
    raw = path.read_bytes()
    with pytest.raises(MissingFileError):
        trainer.load_checkpoint(tmp_path / "none.ckpt")
    (tmp_path / "bad").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(ParseError):
        trainer.load_checkpoint(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-10])
    with pytest.raises(ParseError):
        trainer.load_checkpoint(tmp_path / "short")
    n = int.from_bytes(raw[8:16], "little")
    manifest = json.loads(raw[16 : 16 + n])
    manifest["format_version"] = 2
    head = json.dumps(manifest).encode()
    (tmp_path / "v2").write_bytes(raw[:8] + len(head).to_bytes(8, "little") + head + raw[16 + n :])
    with pytest.raises(CheckpointError):
        trainer.load_checkpoint(tmp_path / "v2")


def test_load_weights_lists_mismatches(tmp_path, split):
    path = tmp_path / "m.ckpt"
    trainer.save_checkpoint(small_model(split), path)
    other = CaptionModel.build(split.vocab, EncoderSpec(embed_size=16), hidden_size=8)
    with pytest.raises(CheckpointError) as err:
        trainer.load_weights(other, path)
    assert "decoder.head.W" in err.value.names
    deeper = CaptionModel.build(split.vocab, EncoderSpec(embed_size=16), hidden_size=16, n_layers=2)
    with pytest.raises(CheckpointError, match="missing"):
        trainer.load_weights(deeper, path)


def test_resume_continues_iteration_count(tmp_path, split):
    path = tmp_path / "m.ckpt"
    cfg = TrainConfig(max_iters=6, checkpoint_every=3)
    trainer.train(small_model(split), split, cfg, path)
    ck = trainer.load_checkpoint(path)
    _, hist = trainer.train(ck.model, split, TrainConfig(max_iters=9), start_iteration=ck.iteration, history=ck.history)
    assert [r.iteration for r in hist] == list(range(9))


def test_transfer_requires_matching_vocab(tmp_path, split):
    path = tmp_path / "m.ckpt"
    trainer.save_checkpoint(small_model(split), path)
    other_vocab = corpus.build_vocab(["just two"])
    other = split.reencode(other_vocab)
    with pytest.raises(VocabularyError):
        trainer.transfer_train(path, other, TrainConfig(max_iters=1))
    model, hist = trainer.transfer_train(path, split, TrainConfig(max_iters=2))
    assert [r.iteration for r in hist] == [0, 1]


def test_loss_log_round_trip(tmp_path):
    recs = [trainer.LossRecord(i, 1.0 / (i + 1), 4e-4) for i in range(3)]
    trainer.write_loss_log(recs, tmp_path / "log")
    back = trainer.read_loss_log(tmp_path / "log")
    assert [(r.iteration, r.loss, r.lr) for r in back] == [(r.iteration, r.loss, r.lr) for r in recs]
    (tmp_path / "bad").write_text("1,2\n")
    with pytest.raises(ParseError, match=":1:"):
        trainer.read_loss_log(tmp_path / "bad")


def test_training_is_deterministic(split):
    a, ha = trainer.train(small_model(split), split, TrainConfig(max_iters=8))
    b, hb = trainer.train(small_model(split), split, TrainConfig(max_iters=8))
    assert trainer.checkpoint_bytes(a, None, 8, ha) == trainer.checkpoint_bytes(b, None, 8, hb)


def test_non_finite_loss_is_reported(split):
    model = small_model(split)
    model.decoder.head_W.data[...] = np.nan
    with pytest.raises(NumericError):
        trainer.train(model, split, TrainConfig(max_iters=1))
