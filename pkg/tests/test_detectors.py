import math
import warnings

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from mmrobust.autograd import Graph
from mmrobust.detectors import (DetectorConfig, dumps_checkpoint, evaluate, forward, init_params, load_checkpoint,
                                loads_checkpoint, per_sample_ce, save_checkpoint, train)
from mmrobust.errors import ArtifactIOError, UnknownSymbolError, ValidationError


@pytest.fixture(scope="module")
def attention_model(tiny_corpus):
    params, _ = train(DetectorConfig(fusion="attention", epochs=3, batch=32), tiny_corpus)
    return params


def loss64(params, image, text, label, embed_delta=None):
    """Per-sample loss from a float64 forward pass (finite-difference reference)."""
    ids, lengths = params.encode([text])
    g = Graph(dtype=np.float64)
    fwd = forward(g, params, image[None].astype(np.float64), ids, lengths, requires_grad=False,
                  embed_delta=embed_delta)
    z = fwd.logits.data[0]
    return float(np.logaddexp(z[0], z[1]) - z[label])


# -- configuration -------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [{"dropout": 1.0}, {"dropout": -0.1}, {"hidden": 0}, {"fusion": "sum"},
                                    {"optimizer": "rmsprop"}, {"slope": 0.0}])
def test_config_validation(kwargs):
    with pytest.raises(ValidationError):
        DetectorConfig(**kwargs)


def test_config_dict_round_trip():
    cfg = DetectorConfig(fusion="attention", event_head=True, image_channels=(2, 3))
    assert DetectorConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValidationError, match="unknown"):
        DetectorConfig.from_dict({"hiddn": 3})


# -- features ------------------------------------------------------------------

def test_concat_fusion_width_and_copy(tiny_model, tiny_corpus):
    fb = tiny_model.features(tiny_corpus.images[:10], tiny_corpus.texts[:10])
    assert fb.fused.shape == (10, 64)
    np.testing.assert_array_equal(fb.fused, np.concatenate([fb.text, fb.image], axis=1))
    assert fb.gate is None


def test_zero_image_path_gives_bias_only(tiny_corpus):
    params = init_params(DetectorConfig(), tiny_corpus.alphabet)
    bias = np.linspace(-1, 1, 32).astype(np.float32)
    for k in ("img_conv1", "img_conv1_b", "img_conv2", "img_conv2_b", "img_fc"):
        params.weights[k][...] = 0.0
    params.weights["img_fc_b"][...] = bias
    fb = params.features(np.zeros((1, 3, 32, 32), np.float32), ["abc"])
    np.testing.assert_allclose(fb.image[0], np.where(bias >= 0, bias, 0.01 * bias), rtol=1e-6)


def test_attention_gate_in_open_unit_interval(attention_model, corpus):
    fb = attention_model.features(corpus.images[:100], corpus.texts[:100])
    assert fb.gate.shape == (100,)
    assert np.all((fb.gate > 0) & (fb.gate < 1))
    np.testing.assert_allclose(fb.fused[:, 32:], fb.image * fb.gate[:, None], rtol=1e-6)


def test_unknown_symbol(tiny_model, tiny_corpus):
    with pytest.raises(UnknownSymbolError):
        tiny_model.predict(tiny_corpus.images[:1], ["ab中"])


def test_wrong_image_shape(tiny_model):
    with pytest.raises(ValidationError, match="images must be"):
        tiny_model.predict(np.zeros((1, 3, 16, 16), np.float32), ["abc"])


# -- inference -----------------------------------------------------------------

def test_probabilities_in_range_and_deterministic(tiny_model, tiny_corpus):
    imgs, txts = tiny_corpus.images, tiny_corpus.texts
    p = tiny_model.predict_proba(imgs, txts)
    assert np.all((p >= 0) & (p <= 1))
    np.testing.assert_array_equal(p, tiny_model.predict_proba(imgs, txts))
    dup = tiny_model.predict_proba(np.stack([imgs[0], imgs[0]]), [txts[0], txts[0]])
    assert dup[0] == dup[1]
    np.testing.assert_array_equal(tiny_model.predict(imgs, txts), (p >= 0.5).astype(int))


def test_shared_image_logits_match(tiny_model, tiny_corpus):
    img = tiny_corpus.images[0]
    texts = tiny_corpus.texts[:5]
    np.testing.assert_allclose(tiny_model.logits_shared_image(img, texts),
                               tiny_model.logits(np.repeat(img[None], 5, axis=0), texts), rtol=1e-5, atol=1e-6)


def test_trained_default_detector_generalises(clean_model, test_set):
    _, acc = evaluate(clean_model, test_set)
    assert acc >= 0.9


# -- training ------------------------------------------------------------------

def test_zero_epochs_returns_initial_params(tiny_corpus):
    params, report = train(DetectorConfig(epochs=0), tiny_corpus)
    fresh = init_params(DetectorConfig(), tiny_corpus.alphabet)
    assert report.epochs == [] and report.first_batch_loss is None
    assert all(np.array_equal(params.weights[k], fresh.weights[k]) for k in fresh.weights)


def test_first_batch_loss_near_ln2(tiny_corpus):
    _, report = train(DetectorConfig(epochs=1, batch=64), tiny_corpus)
    assert abs(report.first_batch_loss - math.log(2)) <= 0.1


def test_empty_training_set(tiny_corpus):
    with pytest.raises(ValidationError, match="empty"):
        train(DetectorConfig(epochs=1), tiny_corpus.subset([]))


def test_overlapping_validation_events_rejected(tiny_corpus):
    with pytest.raises(ValidationError, match="share events"):
        train(DetectorConfig(epochs=1), tiny_corpus, tiny_corpus)


def test_training_is_reproducible(tiny_corpus):
    a, _ = train(DetectorConfig(epochs=2, batch=32), tiny_corpus)
    b, _ = train(DetectorConfig(epochs=2, batch=32), tiny_corpus)
    assert dumps_checkpoint(a) == dumps_checkpoint(b)


def test_default_training_reduces_loss(zoo):
    _, report = zoo.trained()
    assert report.final_train_loss < report.epochs[0]["train_loss"]
    assert len(report.epochs) == 30 and all("train_acc" in e for e in report.epochs)


def test_gradient_reversal_negates_update_direction():
    # two parameters: extractor weight w and head weight v
    def grads(reverse):
        g = Graph(dtype=np.float64)
        w, v = g.leaf([[0.7]]), g.leaf([[-1.3]])
        feat = g.affine(g.constant([[2.0]]), w, g.constant([0.0]))
        if reverse:
            feat = g.grad_reverse(feat, 1.0)
        g.backward(g.sum(g.affine(feat, v, g.constant([0.5]))))
        return w.grad.item(), v.grad.item()

    (w_plain, v_plain), (w_rev, v_rev) = grads(False), grads(True)
    assert w_rev == -w_plain != 0
    assert v_rev == v_plain


@pytest.mark.slow
def test_event_head_training_stays_stable(zoo, test_set):
    plain, _ = zoo.trained()
    with_head, _ = zoo.trained(DetectorConfig(event_head=True))
    assert with_head.all_finite()
    assert evaluate(with_head, test_set)[1] >= evaluate(plain, test_set)[1] - 0.05


@pytest.mark.slow
def test_event_probe_on_validation_events(zoo, test_set):
    params, _ = zoo.trained(DetectorConfig(event_head=True))
    R, y = params.features(test_set.images, test_set.texts).fused, test_set.events
    order = np.random.default_rng(0).permutation(len(y))
    fit_idx, eval_idx = order[: len(y) // 2], order[len(y) // 2:]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        probe = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000)).fit(R[fit_idx], y[fit_idx])
    chance = 1.0 / len(set(y.tolist()))
    assert probe.score(R[eval_idx], y[eval_idx]) <= 2 * chance


# -- input gradients -----------------------------------------------------------

def test_zeroed_head_gives_zero_gradients(tiny_model, tiny_corpus):
    params = tiny_model.copy()
    params.weights["head2"][...] = 0.0
    params.weights["head2_b"][...] = 0.0
    _, img_grad, txt_grad = params.input_gradients(tiny_corpus.images[:4], tiny_corpus.texts[:4],
                                                   tiny_corpus.labels[:4])
    assert not img_grad.any()
    assert not any(t.any() for t in txt_grad)


def least_confident(model, ds):
    p = model.predict_proba(ds.images, ds.texts)
    return ds.samples[int(np.argmin(np.abs(p - 0.5)))]


def test_image_gradient_matches_finite_differences(clean_model, test_set, rng):
    # a saturated softmax leaves float32 gradients near 1e-9, so use an uncertain sample
    s = least_confident(clean_model, test_set)
    _, grad, _ = clean_model.input_gradients(s.image[None], [s.tokens], [s.label], text=False)
    scale = float(np.abs(grad).max())
    h = 1e-5
    for flat in rng.choice(s.image.size, size=10, replace=False):
        idx = np.unravel_index(flat, s.image.shape)
        plus, minus = s.image.astype(np.float64), s.image.astype(np.float64)
        plus[idx] += h
        minus[idx] -= h
        num = (loss64(clean_model, plus, s.tokens, s.label) - loss64(clean_model, minus, s.tokens, s.label)) / (2 * h)
        a = float(grad[0][idx])
        assert abs(a - num) <= 1e-3 * max(abs(a), abs(num)) + 1e-4 * scale, (idx, a, num)


def test_text_gradient_is_one_hot_derivative(clean_model, test_set):
    """``G[i, b] - G[i, a]`` is the derivative along the embedding move from symbol a to b."""
    s = least_confident(clean_model, test_set).with_(tokens="fake!")
    E = clean_model.weights["embed"].astype(np.float64)
    _, _, (G,) = clean_model.input_gradients(s.image[None], [s.tokens], [s.label])
    index = {ch: k for k, ch in enumerate(clean_model.alphabet)}
    h = 1e-5
    for pos, ch in enumerate(s.tokens):
        a = index[ch]
        for b in (index["x"], index["#"], index["Q"]):
            delta = np.zeros((1, len(s.tokens), E.shape[1]))
            delta[0, pos] = h * (E[b] - E[a])
            num = (loss64(clean_model, s.image, s.tokens, s.label, delta)
                   - loss64(clean_model, s.image, s.tokens, s.label, -delta)) / (2 * h)
            est = float(G[pos, b]) - float(G[pos, a])
            assert est == pytest.approx(num, rel=1e-3, abs=1e-5)


def test_text_gradient_ranks_single_flips_like_exhaustive_search(tiny_model, tiny_corpus):
    """The first-order winner on a 5-char input is among the best true single flips."""
    s = tiny_corpus.samples[0].with_(tokens="abcde")
    alphabet = tiny_model.alphabet
    _, _, (G,) = tiny_model.input_gradients(s.image[None], [s.tokens], [s.label])
    cur = np.array([alphabet.index(c) for c in s.tokens])
    est = G - G[np.arange(5), cur][:, None]
    est[np.arange(5), cur] = -np.inf
    pos, sym = np.unravel_index(int(np.argmax(est)), est.shape)
    texts, flips = [], []
    for p in range(5):
        for b, ch in enumerate(alphabet):
            if b != cur[p]:
                texts.append(s.tokens[:p] + ch + s.tokens[p + 1:])
                flips.append((p, b))
    true = per_sample_ce(tiny_model.logits(np.repeat(s.image[None], len(texts), 0), texts),
                         np.full(len(texts), s.label))
    rank = int(np.sum(true > true[flips.index((pos, sym))]))
    assert rank <= len(texts) // 20


# -- checkpoints ---------------------------------------------------------------

def test_checkpoint_round_trip_is_bitwise(tiny_model, tmp_path, tiny_corpus):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path)
    back = load_checkpoint(path)
    assert path.read_bytes()[:8] == b"MMRDET01"
    assert dumps_checkpoint(back) == path.read_bytes()
    assert back.config == tiny_model.config and back.alphabet == tiny_model.alphabet
    imgs, txts = tiny_corpus.images[:8], tiny_corpus.texts[:8]
    np.testing.assert_array_equal(back.logits(imgs, txts), tiny_model.logits(imgs, txts))


def test_checkpoint_errors(tiny_model, tmp_path):
    with pytest.raises(ArtifactIOError):
        load_checkpoint(tmp_path / "missing.ckpt")
    with pytest.raises(ValidationError, match="magic"):
        loads_checkpoint(b"NOTACKPT" + b"\0" * 16)
    with pytest.raises(ValidationError, match="truncated"):
        loads_checkpoint(dumps_checkpoint(tiny_model)[:-10])
