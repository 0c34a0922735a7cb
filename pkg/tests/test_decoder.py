import numpy as np
import pytest

from caption_forge import decoder as dec
from caption_forge import numcore as nc
from caption_forge.corpus import START, STOP
from caption_forge.errors import DimensionError, VocabularyError
from caption_forge.numcore import Tensor


def params(V=7, D=5, H=4, L=1, seed=0):
    return dec.init_decoder(V, D, H, L, seed=seed)


def feature(D=5, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=D))


def test_init_layout():
    p = params(V=7, D=5, H=4, L=2)
    assert p.W_e.shape == (7, 5)
    assert p.layers[0][0].shape == (16, 9) and p.layers[1][0].shape == (16, 8)
    assert p.head_W.shape == (4, 7)
    for w, b in p.layers:
        assert np.all(b.data[4:8] == 1.0)
        assert np.all(np.abs(w.data) <= 0.08)
    assert sorted(p.named()) == sorted(
        ["decoder.W_e", "decoder.lstm0.W", "decoder.lstm0.b", "decoder.lstm1.W", "decoder.lstm1.b", "decoder.head.W", "decoder.head.b"]
    )
    with pytest.raises(DimensionError):
        params(L=0)


def _cell_reference(W, b, x, h, c):
    z = np.concatenate([x, h], axis=-1) @ W.T + b
    H = h.shape[-1]
    sig = lambda v: 1 / (1 + np.exp(-v))
    i, f, g, o = sig(z[..., :H]), sig(z[..., H : 2 * H]), np.tanh(z[..., 2 * H : 3 * H]), sig(z[..., 3 * H :])
    c2 = f * c + i * g
    return o * np.tanh(c2), c2


def test_lstm_cell_matches_reference():
    rng = np.random.default_rng(0)
    W, b = rng.normal(size=(12, 5)), rng.normal(size=12)
    x, h, c = rng.normal(size=(2, 2)), rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    h2, c2 = dec.lstm_cell_step(Tensor(W), Tensor(b), Tensor(x), (Tensor(h), Tensor(c)))
    rh, rc = _cell_reference(W, b, x, h, c)
    assert np.allclose(h2.data, rh, atol=1e-5) and np.allclose(c2.data, rc, atol=1e-5)
    with pytest.raises(DimensionError):
        dec.lstm_cell_step(Tensor(W), Tensor(b), Tensor(np.zeros((2, 3))), (Tensor(h), Tensor(c)))


def test_forward_yields_one_distribution_per_target():
    p = params()
    dists = dec.decoder_forward(p, feature(), [START, 3, 4, STOP])
    assert len(dists) == 3
    for d in dists:
        assert d.shape == (7,)
        assert abs(float(d.data.astype(np.float64).sum()) - 1.0) < 1e-6


def test_image_is_seen_only_at_minus_one():
    """Unrolling by hand: image step, then tokens, discarding the image step's output."""
    p = params(L=2)
    f = feature()
    tokens = [START, 3, STOP]
    _, state = dec.step_distribution(p, None, f)
    manual = []
    for t in tokens[:-1]:
        d, state = dec.step_distribution(p, state, t)
        manual.append(d.data[0])
    got = [d.data for d in dec.decoder_forward(p, f, tokens)]
    assert all(np.allclose(a, b, atol=1e-6) for a, b in zip(got, manual))
    other = [d.data for d in dec.decoder_forward(p, feature(seed=1), tokens)]
    assert not np.allclose(got[0], other[0])


def test_sequence_nll_is_a_sum():
    p = params()
    tokens = [START, 3, 5, STOP]
    dists = dec.decoder_forward(p, feature(), tokens)
    total = dec.sequence_nll(dists, tokens).item()
    manual = -sum(np.log(float(d.data[t])) for d, t in zip(dists, tokens[1:]))
    assert total == pytest.approx(manual, rel=1e-6)


def test_batch_matches_single_and_mask_skips_padding():
    p = params()
    feats = Tensor(np.stack([feature(seed=0).data, feature(seed=1).data]))
    tokens = np.array([[START, 3, 4, STOP], [START, 5, STOP, STOP]])
    mask = np.array([[0, 1, 1, 1], [0, 1, 1, 0]])
    batch = dec.sequence_nll(dec.decoder_forward_batch(p, feats, tokens), tokens, mask).item()
    singles = sum(
        dec.sequence_nll(dec.decoder_forward(p, feature(seed=i), list(seq)), list(seq)).item()
        for i, seq in enumerate([[START, 3, 4, STOP], [START, 5, STOP]])
    )
    assert batch == pytest.approx(singles, rel=1e-5)


def test_dropout_only_in_train_mode_and_seeded():
    p = params()
    feats = Tensor(np.stack([feature().data] * 3))
    tokens = np.array([[START, 3, 4, STOP]] * 3)
    evald = [d.data for d in dec.decoder_forward_batch(p, feats, tokens, train_mode=False, dropout=0.5)]
    a = [d.data for d in dec.decoder_forward_batch(p, feats, tokens, True, 0.5, rng_seed=1, rng_key=(0,))]
    b = [d.data for d in dec.decoder_forward_batch(p, feats, tokens, True, 0.5, rng_seed=1, rng_key=(0,))]
    c = [d.data for d in dec.decoder_forward_batch(p, feats, tokens, True, 0.5, rng_seed=1, rng_key=(1,))]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))
    assert not all(np.array_equal(x, y) for x, y in zip(a, evald))
    plain = [d.data for d in dec.decoder_forward_batch(p, feats, tokens, True, 0.0)]
    assert all(np.array_equal(x, y) for x, y in zip(plain, evald))


def test_errors():
    p = params()
    with pytest.raises(VocabularyError):
        dec.decoder_forward(p, feature(), [3, 4, STOP])
    with pytest.raises(VocabularyError):
        dec.decoder_forward(p, feature(), [START, 99, STOP])
    with pytest.raises(DimensionError):
        dec.decoder_forward(p, feature(D=6), [START, STOP])
    dists = dec.decoder_forward(p, feature(), [START, 3, STOP])
    with pytest.raises(DimensionError):
        dec.sequence_nll(dists, [START, 3, 3, STOP])


def test_clamp_events_counted():
    before = dec.clamp_events
    probs = [Tensor([[0.5, 0.0, 0.5]])]
    loss = dec.sequence_nll(probs, [START, STOP])
    assert dec.clamp_events == before + 1
    assert np.isfinite(loss.item())


@pytest.mark.parametrize("L", [1, 2, 4])
def test_gradients_every_depth(L):
    with nc.storage(np.float64):
        p = dec.init_decoder(6, 4, 3, L, seed=L)
        f = Tensor(np.random.default_rng(0).normal(size=4))
        tokens = [START, 3, 5, STOP]
        tensors = list(p.named().values())
        err = nc.finite_diff_check(lambda _: dec.sequence_nll(dec.decoder_forward(p, f, tokens), tokens), tensors, eps=1e-5, floor=1e-4)
    assert err < 1e-4
