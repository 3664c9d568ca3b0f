import math

import mpmath
import numpy as np
import pytest

from protoprompt import autodiff as ad
from protoprompt import data as dk
from protoprompt import model as pm
from protoprompt.autodiff import Tensor, check_gradients
from protoprompt.errors import ContractError, NumericError


def make_bundle(clusters=2, categories=4, dim=16, per_category=8, seed=0):
    cfg = dk.SyntheticGmmConfig(
        clusters=clusters, categories=categories, dim=dim,
        per_category=per_category, separation=8.0, class_offset=0.5,
        noise=0.3, seed=seed,
    )
    train, test, catalog, _ = dk.gen_synthetic_gmm(cfg)
    return dk.DatasetBundle(train=train, test=test, catalog=catalog, name="mem")


def make_model(mode="bi", k=2, m=2, lam=1.0, d_tok=16, seed=0, **bundle_kw):
    bundle = make_bundle(**bundle_kw)
    episode = dk.sample_few_shot(bundle.train, 4, seed=seed, test=bundle.test)
    model = pm.build_ptp_model(bundle, episode, mode=mode, k=k, m=m, lam=lam,
                               d_tok=d_tok, seed=seed)
    return bundle, episode, model


# -- prototype similarity ----------------------------------------------------

def test_similarity_uniform_when_dots_equal():
    fx = np.zeros(5)
    protos = np.random.default_rng(0).standard_normal((4, 5))
    np.testing.assert_allclose(pm.similarity_weights(fx, protos), 0.25, atol=1e-15)


def test_similarity_analytic_case():
    fx = np.array([1.0, 0.0])
    protos = np.array([[0.0, 0.0], [0.0, 1.0], [math.log(2.0), 0.0]])
    np.testing.assert_allclose(
        pm.similarity_weights(fx, protos), [0.25, 0.25, 0.5], atol=1e-15
    )


def test_similarity_matches_high_precision_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        fx = rng.standard_normal(6) * 3
        protos = rng.standard_normal((5, 6)) * 3
        ours = pm.similarity_weights(fx, protos)
        with mpmath.workdps(50):
            dots = [mpmath.mpf(float(fx @ p)) for p in protos]
            es = [mpmath.e**d for d in dots]
            z = sum(es)
            oracle = np.array([float(e / z) for e in es])
        np.testing.assert_allclose(ours, oracle, atol=1e-12)


def test_similarity_rejects_nonfinite():
    with pytest.raises(NumericError):
        pm.similarity_weights(np.array([np.nan, 0.0]), np.zeros((2, 2)))


def test_similarity_weights_sum_to_one_and_scores_bounded():
    _, _, model = make_model(k=3)
    rng = np.random.default_rng(2)
    fx = rng.standard_normal((1000, 16)) * 4
    w = pm.similarity_weights(fx, model.prototypes.tensor.data)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-9)
    weights, rows, final = model.predict_scores(model.image_encoder._index.keys())
    assert np.all(final >= 0.0) and np.all(final <= 1.0)


# -- per-prompt probability rows ---------------------------------------------

def test_category_softmax_shift_invariance():
    rng = np.random.default_rng(3)
    matches = rng.standard_normal((4, 6))
    base = pm.category_softmax(matches, tau=0.01)
    shifted = pm.category_softmax(matches + 3.7, tau=0.01)
    np.testing.assert_allclose(base, shifted, atol=1e-12)


def test_category_softmax_single_category():
    np.testing.assert_array_equal(pm.category_softmax(np.array([[0.4]]), 0.01), [[1.0]])


def test_biencoder_row_matches_brute_force():
    bundle, _, model = make_model(k=2, categories=4, clusters=2)
    ex = int(bundle.test.ids[5])
    fx = model.image_encoder.encode_normalized(ex)
    for k in range(model.k):
        row = model.prompt_probability_row(ex, k)
        matches = []
        for j in range(len(bundle.catalog)):
            g = model.text_encoder.encode(
                model._prompt_view(k), bundle.catalog.ids_for(j)
            ).data
            matches.append(float(fx @ g))
        exps = [math.exp((s - max(matches)) / model.tau) for s in matches]
        # max-subtraction before /tau differs; redo exactly as spec formula
        exps = [math.exp((s / model.tau) - max(m_ / model.tau for m_ in matches))
                for s in matches]
        z = sum(exps)
        oracle = np.array([e / z for e in exps])
        np.testing.assert_allclose(row, oracle, atol=1e-12)
        np.testing.assert_allclose(row.sum(), 1.0, atol=1e-12)


def test_singleencoder_row_matches_brute_force():
    bundle, _, model = make_model(mode="single", k=2, m=2, categories=4,
                                  clusters=2)
    ex = int(bundle.test.ids[3])
    raw = model.image_encoder.raw_latent(ex)
    for k in range(model.k):
        row = model.prompt_probability_row(ex, k)
        oracle = []
        for j in range(len(bundle.catalog)):
            s = model.fusion_encoder.match(
                raw, model._prompt_view(k), bundle.catalog.ids_for(j)
            ).item()
            oracle.append(1.0 / (1.0 + math.exp(-s)))
        np.testing.assert_allclose(row, oracle, atol=1e-12)


def test_sigmoid_scoring_edges():
    assert pm._sigmoid(np.array([0.0]))[0] == 0.5
    assert pm._sigmoid(np.array([-50.0]))[0] < 1e-20


# -- mixture -----------------------------------------------------------------

def test_mixture_scores_matches_double_loop():
    rng = np.random.default_rng(4)
    for _ in range(50):
        k, c = rng.integers(1, 10, 2)
        w = rng.random(k)
        w /= w.sum()
        rows = rng.random((k, c))
        got = pm.mixture_scores(w, rows)
        oracle = np.zeros(c)
        for ki in range(k):
            for ci in range(c):
                oracle[ci] += w[ki] * rows[ki, ci]
        np.testing.assert_allclose(got, oracle, atol=1e-12)


def test_mixture_single_prototype_is_identity():
    bundle, _, model = make_model(k=1)
    ex = int(bundle.test.ids[0])
    breakdown = model.mixture_predict(ex)
    assert breakdown.weights[0] == 1.0
    np.testing.assert_array_equal(breakdown.final, breakdown.rows[0])


def test_mixture_tie_breaks_to_lowest_index():
    final = pm.mixture_scores(np.array([0.5, 0.5]),
                              np.array([[1.0, 0.0], [0.0, 1.0]]))
    np.testing.assert_allclose(final, [0.5, 0.5], atol=0)
    assert int(np.argmax(final)) == 0


def test_mixture_predict_consistent_with_breakdown():
    bundle, _, model = make_model(k=3, m=2)
    for ex in bundle.test.ids[:5]:
        b = model.mixture_predict(int(ex))
        np.testing.assert_allclose(b.weights.sum(), 1.0, atol=1e-9)
        oracle = np.zeros_like(b.final)
        for ki in range(model.k):
            for ci in range(len(bundle.catalog)):
                oracle[ci] += b.weights[ki] * b.rows[ki, ci]
        np.testing.assert_allclose(b.final, oracle, atol=1e-12)
        assert b.predicted == int(np.argmax(b.final))


def test_argmax_invariant_to_per_prompt_match_shift():
    rng = np.random.default_rng(5)
    matches = rng.standard_normal((3, 6))
    rows = pm.category_softmax(matches, 0.01)
    rows_shifted = rows.copy()
    rows_shifted[1] = pm.category_softmax(matches[1] + 0.42, 0.01)
    np.testing.assert_allclose(rows, rows_shifted, atol=1e-12)
    w = np.array([0.2, 0.5, 0.3])
    assert np.argmax(pm.mixture_scores(w, rows)) == \
        np.argmax(pm.mixture_scores(w, rows_shifted))


# -- regularizers ------------------------------------------------------------

def test_r1_zero_when_prototype_hits_latent():
    x = np.random.default_rng(6).standard_normal((5, 3))
    assert pm.regularizer_r1(x[2:3], x) == 0.0


def test_r1_r2_one_dimensional_examples():
    protos = np.array([[0.0], [4.0]])
    latents = np.array([[1.0], [3.0]])
    assert pm.regularizer_r1(protos, latents) == pytest.approx(1.0, abs=0)
    assert pm.regularizer_r2(protos, latents) == pytest.approx(1.0, abs=0)


def test_r2_k1_degenerates_to_mean_squared_distance():
    rng = np.random.default_rng(7)
    p = rng.standard_normal((1, 4))
    x = rng.standard_normal((6, 4))
    direct = float(np.mean(np.sum((x - p[0]) ** 2, axis=1)))
    assert pm.regularizer_r2(p, x) == pytest.approx(direct, abs=1e-12)


def test_regularizers_match_double_loop():
    rng = np.random.default_rng(8)
    for _ in range(50):
        k, n, d = rng.integers(1, 10, 3)
        p = rng.standard_normal((k, d))
        x = rng.standard_normal((n, d))
        r1_oracle = sum(
            min(float(np.sum((p[j] - x[i]) ** 2)) for i in range(n))
            for j in range(k)
        ) / k
        r2_oracle = sum(
            min(float(np.sum((x[i] - p[j]) ** 2)) for j in range(k))
            for i in range(n)
        ) / n
        assert pm.regularizer_r1(p, x) == pytest.approx(r1_oracle, abs=1e-12)
        assert pm.regularizer_r2(p, x) == pytest.approx(r2_oracle, abs=1e-12)


def test_regularizers_reject_empty_batch():
    with pytest.raises(ContractError):
        pm.regularizer_r1(np.zeros((2, 3)), np.zeros((0, 3)))


# -- losses -------------------------------------------------------------------

def test_loss_uniform_predictor_is_log_c():
    # identical category text rows force uniform rows regardless of prompts
    bundle = make_bundle(categories=4, clusters=2)
    bundle.text_matrix = np.tile(
        np.random.default_rng(9).standard_normal(16), (4, 1)
    )
    episode = dk.sample_few_shot(bundle.train, 2, seed=0, test=bundle.test)
    model = pm.build_ptp_model(bundle, episode, mode="real-offset", k=2,
                               lam=0.0, seed=0)
    loss, parts = model.loss_on_batch(episode.support.ids, episode.support.labels)
    assert loss.item() == pytest.approx(math.log(4), abs=1e-12)


def test_loss_lambda_zero_is_pure_error_term():
    _, episode, model = make_model(lam=0.0)
    loss, parts = model.loss_on_batch(episode.support.ids[:6],
                                      episode.support.labels[:6])
    assert loss.item() == parts["ce_or_bce"]


def test_biencoder_loss_matches_brute_force():
    bundle, episode, model = make_model(k=2, m=2, categories=3, clusters=3,
                                        lam=0.7)
    ids = episode.support.ids[:4]
    labels = episode.support.labels[:4]
    loss, parts = model.loss_on_batch(ids, labels)

    fx_raw = model.image_encoder.batch(ids)
    fx = model.image_encoder.batch_normalized(ids)
    protos = model.prototypes.tensor.data
    g = model.category_matrix()
    total = 0.0
    for i in range(len(ids)):
        w = pm.similarity_weights(fx_raw[i], protos)
        final = np.zeros(3)
        for k in range(model.k):
            row = pm.category_softmax(g[k] @ fx[i], model.tau)
            final += w[k] * row
        total += -math.log(max(final[labels[i]], 1e-12))
    ce = total / len(ids)
    r1 = pm.regularizer_r1(protos, fx_raw)
    r2 = pm.regularizer_r2(protos, fx_raw)
    assert loss.item() == pytest.approx(ce + 0.7 * (r1 + r2), abs=1e-10)


def test_bce_term_perfect_scores_near_zero():
    onehot = np.eye(3)
    final = Tensor(np.eye(3))
    loss, clamped = pm.binary_cross_entropy_term(final, onehot)
    assert loss.item() <= 3 * 1e-11
    assert clamped == 9  # all entries sit exactly on the clamp boundary


def test_bce_term_uniform_half_scores():
    c = 5
    onehot = np.zeros((2, c))
    onehot[:, 0] = 1.0
    final = Tensor(np.full((2, c), 0.5))
    loss, _ = pm.binary_cross_entropy_term(final, onehot)
    assert loss.item() == pytest.approx(c * math.log(2.0), abs=1e-12)


def test_singleencoder_loss_matches_brute_force():
    bundle, episode, model = make_model(mode="single", k=2, m=2, categories=3,
                                        clusters=3, lam=0.5)
    ids = episode.support.ids[:3]
    labels = episode.support.labels[:3]
    loss, parts = model.loss_on_batch(ids, labels)

    fx_raw = model.image_encoder.batch(ids)
    protos = model.prototypes.tensor.data
    total = 0.0
    for i, ex in enumerate(ids):
        w = pm.similarity_weights(fx_raw[i], protos)
        final = np.zeros(3)
        for k in range(model.k):
            final += w[k] * model.prompt_probability_row(int(ex), k)
        for j in range(3):
            t = 1.0 if labels[i] == j else 0.0
            s = min(max(final[j], 1e-12), 1 - 1e-12)
            total += -(t * math.log(s) + (1 - t) * math.log(1 - s))
    bce = total / len(ids)
    r1 = pm.regularizer_r1(protos, fx_raw)
    r2 = pm.regularizer_r2(protos, fx_raw)
    assert loss.item() == pytest.approx(bce + 0.5 * (r1 + r2), abs=1e-10)


# -- gradient integrity -------------------------------------------------------

def _loss_gradcheck(mode, k=2, categories=3, m=2, lam=1.0):
    bundle = make_bundle(categories=categories, clusters=1, dim=8,
                         per_category=4)
    if mode == "real-offset":
        bundle.text_matrix = np.random.default_rng(10).standard_normal(
            (categories, 8)
        )
    episode = dk.sample_few_shot(bundle.train, 2, seed=0, test=bundle.test)
    model = pm.build_ptp_model(bundle, episode, mode=mode, k=k, m=m, lam=lam,
                               d_tok=8, seed=0)
    ids = episode.support.ids
    labels = episode.support.labels

    def fn():
        loss, _ = model.loss_on_batch(ids, labels)
        return loss

    return check_gradients(fn, model.trainable_parameters(), eps=1e-5, tol=1e-4)


@pytest.mark.parametrize("mode", ["bi", "single", "real-offset"])
def test_full_loss_gradients_match_finite_differences(mode):
    report = _loss_gradcheck(mode)
    assert report.passed, report


def test_full_loss_gradients_all_finite():
    bundle, episode, model = make_model(k=2, m=2, categories=2, clusters=2)
    with ad.Tape() as tape:
        loss, _ = model.loss_on_batch(episode.support.ids, episode.support.labels)
        grads = tape.backward(loss)
    for p in model.trainable_parameters():
        assert np.all(np.isfinite(grads[p.tensor]))


# -- parameter accounting ------------------------------------------------------

def test_param_count_matches_published_formula():
    bundle = make_bundle(categories=4, clusters=2, dim=512)
    episode = dk.sample_few_shot(bundle.train, 2, seed=0, test=bundle.test)
    model = pm.build_ptp_model(bundle, episode, mode="bi", k=5, m=16,
                               d_tok=512, seed=0)
    assert model.param_count() == 16 * 512 * 5 + 5 * 512 == 43520


def test_param_count_minimal_model():
    bundle = make_bundle(categories=2, clusters=2, dim=2)
    episode = dk.sample_few_shot(bundle.train, 1, seed=0, test=bundle.test)
    model = pm.build_ptp_model(bundle, episode, mode="bi", k=1, m=1, d_tok=2,
                               seed=0)
    assert model.param_count() == 4


def test_param_count_real_offset_adds_k_dlat():
    bundle = make_bundle(categories=4, clusters=2, dim=16)
    bundle.text_matrix = np.random.default_rng(11).standard_normal((4, 16))
    episode = dk.sample_few_shot(bundle.train, 2, seed=0, test=bundle.test)
    model = pm.build_ptp_model(bundle, episode, mode="real-offset", k=3, m=2,
                               d_tok=8, seed=0)
    formula = 2 * 8 * 3 + 3 * 16
    enumerated = sum(p.size for p in model.trainable_parameters())
    assert enumerated == formula + 3 * 16
    names = {p.name for p in model.trainable_parameters()}
    assert names == {"image_prototypes", "prompt_vectors", "text_offsets"}


# -- persistence ----------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    bundle, episode, model = make_model(k=2, m=3)
    before = model.predict(bundle.test.ids[:10])
    pm.save_model(model, tmp_path / "ckpt")
    restored = pm.load_model(tmp_path / "ckpt", bundle)
    after = restored.predict(bundle.test.ids[:10])
    np.testing.assert_array_equal(before, after)
    assert restored.k == model.k and restored.m == model.m
