import numpy as np
import pytest

from protoprompt import autodiff as ad
from protoprompt import encoders as enc
from protoprompt.autodiff import Parameter, Tape, Tensor, check_gradients
from protoprompt.errors import ContractError, MissingExampleError


@pytest.fixture(scope="module")
def small_stack():
    return enc.build_synthetic_encoders("single", d_lat=16, d_tok=16,
                                        vocab_size=64, seed=0)


def test_lookup_mode_returns_exact_store_row():
    rng = np.random.default_rng(0)
    latents = rng.standard_normal((10, 8))
    ids = np.arange(10)
    image = enc.FrozenImageEncoder.lookup(ids, latents)
    assert np.array_equal(image.encode(7), latents[7])
    assert np.array_equal(image.encode(7), image.encode(7))
    with pytest.raises(MissingExampleError):
        image.encode(99)


def test_pooled_fusion_zero_latent_regression(small_stack):
    table, _, fusion = small_stack
    v1 = fusion.pool_image(np.zeros(16))
    v2 = fusion.pool_image(np.zeros(16))
    assert np.array_equal(v1, v2)
    assert np.all(np.isfinite(v1))
    assert v1.shape == (16,)
    # frozen regression fixture: first three pooler components, pinned from
    # a reference run of this seeded construction
    np.testing.assert_allclose(
        v1[:3],
        [0.532188473212563, 0.18117207041351074, -0.9546200817425053],
        atol=1e-12,
    )


def test_encode_text_unit_norm(small_stack):
    _, text, _ = small_stack
    rng = np.random.default_rng(1)
    for trial in range(5):
        prompt = Tensor(rng.normal(0, 0.02, (3, 16)))
        out = text.encode(prompt, [5 + trial])
        assert abs(np.linalg.norm(out.data) - 1.0) <= 1e-6


def test_encode_text_distinguishes_categories(small_stack):
    _, text, _ = small_stack
    prompt = Tensor(np.random.default_rng(2).normal(0, 0.02, (2, 16)))
    outs = text.encode_batch(prompt, [[3 + i] for i in range(25)]).data
    for i in range(25):
        for j in range(i + 1, 25):
            assert not np.allclose(outs[i], outs[j], atol=1e-8)


def test_encode_text_batch_matches_single(small_stack):
    _, text, _ = small_stack
    prompt = Tensor(np.random.default_rng(3).normal(0, 0.02, (2, 16)))
    batch = text.encode_batch(prompt, [[4], [9], [30]]).data
    for row, tok in zip(batch, [4, 9, 30]):
        single = text.encode(prompt, [tok]).data
        np.testing.assert_allclose(row, single, atol=1e-12)


def test_encode_text_variable_length_sequences(small_stack):
    _, text, _ = small_stack
    prompt = Tensor(np.random.default_rng(4).normal(0, 0.02, (2, 16)))
    out = text.encode_batch(prompt, [[4], [9, 10], [30]])
    assert out.shape == (3, 16)
    np.testing.assert_allclose(
        out.data[1], text.encode(prompt, [9, 10]).data, atol=1e-12
    )


def test_encode_text_empty_sequence_rejected(small_stack):
    _, text, _ = small_stack
    with pytest.raises(ContractError):
        text.encode(None, [])


def test_encode_text_gradient_only_prompt(small_stack):
    _, text, _ = small_stack
    prompt = Parameter("prompt", np.random.default_rng(5).normal(0, 0.02, (2, 16)))
    u = Tensor(np.random.default_rng(6).standard_normal((16, 1)))
    with Tape() as tape:
        g = text.encode_batch(prompt.tensor, [[7]])
        loss = ad.reduce_sum(ad.matmul(g, u))
        grads = tape.backward(loss)
    tracked = [t for t in grads if t is not g and t.shape == prompt.tensor.shape]
    assert prompt.tensor in grads
    # frozen weights never acquire gradients
    for lw in text.core.layers:
        for t in lw.values():
            assert t not in grads and t.grad is None
    assert text.out_proj not in grads


def test_encode_text_gradient_matches_finite_differences(small_stack):
    _, text, _ = small_stack
    prompt = Parameter("prompt", np.random.default_rng(7).normal(0, 0.02, (2, 16)))
    u = Tensor(np.random.default_rng(8).standard_normal((16, 1)))

    def fn():
        g = text.encode_batch(prompt.tensor, [[7]])
        return ad.reduce_sum(ad.matmul(g, u))

    report = check_gradients(fn, [prompt], eps=1e-5, tol=1e-4)
    assert report.passed, report


def test_fusion_match_deterministic(small_stack):
    _, _, fusion = small_stack
    rng = np.random.default_rng(9)
    latent = rng.standard_normal(16)
    prompt = Tensor(rng.normal(0, 0.02, (2, 16)))
    s1 = fusion.match(latent, prompt, [5]).data
    s2 = fusion.match(latent, prompt, [5]).data
    assert np.array_equal(s1, s2)


def test_fusion_match_sensitive_to_pseudo_token_order(small_stack):
    _, _, fusion = small_stack
    rng = np.random.default_rng(10)
    latent = rng.standard_normal((1, 16))
    pseudo = fusion._pseudo(latent)
    prompt = Tensor(rng.normal(0, 0.02, (2, 16)))
    base = fusion.match_from_pseudo(pseudo, prompt, [[5]]).data
    permuted = pseudo.copy()
    permuted[:, [0, 1]] = permuted[:, [1, 0]]
    swapped = fusion.match_from_pseudo(permuted, prompt, [[5]]).data
    assert abs(base[0, 0] - swapped[0, 0]) > 1e-9


def test_fusion_match_gradient_matches_finite_differences(small_stack):
    _, _, fusion = small_stack
    rng = np.random.default_rng(11)
    latents = rng.standard_normal((2, 16))
    prompt = Parameter("prompt", rng.normal(0, 0.02, (2, 16)))

    def fn():
        scores = fusion.match_batch(latents, prompt.tensor, [[5], [6]])
        return ad.mean(scores)

    report = check_gradients(fn, [prompt], eps=1e-5, tol=1e-4)
    assert report.passed, report


def test_seeded_construction_reproducible():
    a = enc.build_synthetic_encoders("single", d_lat=16, d_tok=16,
                                     vocab_size=64, seed=42)
    b = enc.build_synthetic_encoders("single", d_lat=16, d_tok=16,
                                     vocab_size=64, seed=42)
    assert enc.snapshot_bytes({**a[1].named_weights(), **a[2].named_weights()}) == \
        enc.snapshot_bytes({**b[1].named_weights(), **b[2].named_weights()})
    c = enc.build_synthetic_encoders("single", d_lat=16, d_tok=16,
                                     vocab_size=64, seed=43)
    assert enc.snapshot_bytes(a[1].named_weights()) != \
        enc.snapshot_bytes(c[1].named_weights())


def test_weight_snapshot_roundtrip(tmp_path, small_stack):
    _, text, _ = small_stack
    weights = text.named_weights()
    enc.save_weight_snapshot(tmp_path, weights)
    manifest = (tmp_path / "weights.json").read_text()
    assert "text.out_proj" in manifest
    from protoprompt.data import read_matrix
    stored = read_matrix(tmp_path / "text.out_proj.ptpe")
    np.testing.assert_allclose(
        stored, weights["text.out_proj"].astype(np.float32), atol=0
    )
