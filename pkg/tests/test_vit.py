import math
import time

import numpy as np
import pytest

from lusc import autodiff as ad
from lusc.autodiff import ShapeError, Tensor
from lusc.gradcheck import check_gradients
from lusc.training import cross_entropy
from lusc.vit import (
    EncoderBlock,
    ViTConfig,
    attention,
    build_vit,
    embed,
    encoder_block,
    msa,
    patchify,
    vit_b16,
    vit_forward,
    vit_tiny,
)

# exact count for the B/16 preset with a 10-way head; regression constant
VIT_B16_K10_PARAMS = 85_768_714


def naive_attention(q, k, v):
    T, dk = q.shape
    out = np.zeros_like(v)
    for i in range(T):
        s = np.array([sum(q[i, d] * k[j, d] for d in range(dk)) / math.sqrt(dk) for j in range(T)])
        w = np.exp(s - s.max())
        w /= w.sum()
        for j in range(T):
            out[i] += w[j] * v[j]
    return out


# -- patchify / embed ---------------------------------------------------------------

def test_224_by_16_gives_196_patches():
    assert patchify(np.zeros((224, 224, 3)), 16).shape == (196, 768)
    assert vit_b16(10).num_patches == 196


def test_one_patch_is_flattened_image(rng):
    img = rng.normal(size=(8, 8, 3))
    np.testing.assert_array_equal(patchify(img, 8).data[0], img.reshape(-1))


def test_patch_order_hand_enumerated():
    img = np.arange(1, 17, dtype=np.float32).reshape(4, 4, 1)
    out = patchify(img, 2).data
    np.testing.assert_array_equal(out, [[1, 2, 5, 6], [3, 4, 7, 8], [9, 10, 13, 14], [11, 12, 15, 16]])


def test_patchify_indivisible():
    with pytest.raises(ShapeError):
        patchify(np.zeros((10, 12, 3)), 4)


def test_embed_zero_and_additive_structure(rng):
    patches = Tensor(rng.normal(size=(4, 12)))
    z = embed(patches, Tensor(np.zeros((12, 6))), Tensor(np.zeros(6)), Tensor(np.zeros((5, 6))))
    assert z.shape == (5, 6) and np.all(z.data == 0)
    cls, pos = rng.normal(size=6), rng.normal(size=(5, 6))
    z = embed(Tensor(np.zeros((4, 12))), Tensor(rng.normal(size=(12, 6))), Tensor(cls), Tensor(pos))
    np.testing.assert_allclose(z.data[0], (cls + pos[0]).astype(np.float32), rtol=1e-6)
    np.testing.assert_allclose(z.data[1:], pos[1:].astype(np.float32), rtol=1e-6)


def test_embed_matches_naive_loop(rng):
    p, E, cls, pos = rng.normal(size=(4, 12)), rng.normal(size=(12, 6)), rng.normal(size=6), rng.normal(size=(5, 6))
    z = embed(Tensor(p, dtype=np.float64), Tensor(E, dtype=np.float64), Tensor(cls, dtype=np.float64),
              Tensor(pos, dtype=np.float64)).data
    for i in range(1, 5):
        for d in range(6):
            ref = sum(p[i - 1, j] * E[j, d] for j in range(12)) + pos[i, d]
            assert z[i, d] == pytest.approx(ref, abs=1e-12)


def test_embed_shape_mismatch():
    with pytest.raises(ShapeError):
        embed(Tensor(np.zeros((4, 12))), Tensor(np.zeros((12, 6))), Tensor(np.zeros(6)), Tensor(np.zeros((4, 6))))


# -- attention / msa -------------------------------------------------------------------

def test_attention_single_token(rng):
    v = rng.normal(size=(1, 4)).astype(np.float32)
    out = attention(Tensor(rng.normal(size=(1, 4))), Tensor(rng.normal(size=(1, 4))), Tensor(v))
    np.testing.assert_array_equal(out.data, v)


def test_attention_zero_query_averages_values(rng):
    v = rng.normal(size=(5, 3))
    out = attention(Tensor(np.zeros((5, 3))), Tensor(rng.normal(size=(5, 3))), Tensor(v, dtype=np.float64))
    np.testing.assert_allclose(out.data, np.tile(v.mean(0), (5, 1)), rtol=1e-12)


def test_attention_matches_naive(rng):
    q, k, v = (rng.normal(size=(3, 2)) for _ in range(3))
    out = attention(*(Tensor(a, dtype=np.float64) for a in (q, k, v))).data
    np.testing.assert_allclose(out, naive_attention(q, k, v), atol=1e-6)


def test_msa_single_head_reduces_to_attention(rng):
    z, wq, wk, wv, wo = (Tensor(rng.normal(size=s), dtype=np.float64) for s in [(3, 4)] + [(4, 4)] * 4)
    out = msa(z, wq, wk, wv, wo, 1).data
    ref = ad.matmul(attention(ad.matmul(z, wq), ad.matmul(z, wk), ad.matmul(z, wv)), wo).data
    np.testing.assert_allclose(out, ref, atol=1e-6)


def test_msa_zero_output_projection(rng):
    ws = [Tensor(rng.normal(size=(4, 4))) for _ in range(3)]
    out = msa(Tensor(rng.normal(size=(3, 4))), *ws, Tensor(np.zeros((4, 4))), 2)
    assert np.all(out.data == 0)


def test_msa_matches_per_head_enumeration(rng):
    z, wq, wk, wv, wo = (rng.normal(size=s) for s in [(3, 4)] + [(4, 4)] * 4)
    out = msa(*(Tensor(a, dtype=np.float64) for a in (z, wq, wk, wv, wo)), 2).data
    heads = []
    for h in range(2):
        cols = slice(2 * h, 2 * h + 2)
        heads.append(naive_attention(z @ wq[:, cols], z @ wk[:, cols], z @ wv[:, cols]))
    np.testing.assert_allclose(out, np.concatenate(heads, axis=1) @ wo, atol=1e-10)


def test_msa_indivisible():
    with pytest.raises(ShapeError):
        msa(*(Tensor(np.zeros(s)) for s in [(3, 5)] + [(5, 5)] * 4), 2)
    with pytest.raises(ValueError):
        vit_tiny(3, embed_dim=66).validate()


# -- encoder blocks --------------------------------------------------------------------------

def zero_block(cfg):
    block = EncoderBlock("b", cfg, np.random.default_rng(0))
    for p in block.params():
        p.data = np.zeros_like(p.data)
    return block


def test_zero_block_is_identity(rng):
    cfg = ViTConfig((8, 8), 4, 8, 1, 2, 16, 2)
    z = Tensor(rng.normal(size=(2, 5, 8)))
    np.testing.assert_array_equal(encoder_block(z, zero_block(cfg)).data, z.data)
    out = z
    for _ in range(4):
        out = encoder_block(out, zero_block(cfg))
    np.testing.assert_array_equal(out.data, z.data)


def test_block_gradient_double_precision():
    rng = np.random.default_rng(21)
    cfg = ViTConfig((8, 8), 4, 8, 1, 2, 16, 2)
    block = EncoderBlock("b", cfg, rng)
    for p in block.params():
        p.data = p.data.astype(np.float64) + rng.normal(0, 0.1, p.shape)
    z = Tensor(rng.normal(size=(5, 8)), requires_grad=True, dtype=np.float64)
    w = Tensor(rng.normal(size=(5, 8)), dtype=np.float64)
    probes = check_gradients(lambda: (block(z) * w).sum(), [z] + block.params(), 40, rng, stratify=True)
    assert len(probes) == 40
    assert max(p.rel_error for p in probes) < 1e-6


# -- full model ------------------------------------------------------------------------------

def tiny_param_count(K):
    # closed form from the layer shapes: embedding, blocks, final norm, head
    P, D, L, M, Np = 8, 64, 2, 128, 16
    embed_params = 3 * P * P * D + D + (Np + 1) * D
    block = 2 * (2 * D) + 4 * D * D + (D * M + M) + (M * D + D)
    return embed_params + L * block + 2 * D + (D * K + K)


def test_b16_parameter_count():
    t0 = time.perf_counter()
    model = build_vit(vit_b16(10))
    assert time.perf_counter() - t0 < 10
    n = model.num_parameters()
    assert 85_000_000 <= n <= 88_000_000
    assert n == VIT_B16_K10_PARAMS


def test_tiny_parameter_count_closed_form():
    for K in (3, 10):
        assert build_vit(vit_tiny(K)).num_parameters() == tiny_param_count(K)


def test_zero_head_gives_uniform_softmax(rng):
    model = build_vit(vit_tiny(4))
    model.head.weight.data[:] = 0
    logits = vit_forward(model, rng.normal(size=(2, 32, 32, 3)))
    assert np.all(logits.data == 0)
    np.testing.assert_allclose(ad.softmax(logits).data, 0.25)


def test_sequence_length_and_attention_rows(rng):
    model = build_vit(vit_tiny(3))
    model.attention_record = []
    for _ in range(5):
        model(rng.normal(size=(2, 32, 32, 3)), "train")
    assert len(model.attention_record) == 5 * 2
    for w in model.attention_record:
        assert w.shape == (2, 4, 17, 17)
        assert np.max(np.abs(w.sum(-1) - 1)) < 1e-5
    assert model.encode(Tensor(rng.normal(size=(1, 32, 32, 3)))).shape == (1, 17, 64)


def test_eval_determinism_and_input_check(rng):
    model = build_vit(vit_tiny(3), 3)
    x = rng.normal(size=(2, 32, 32, 3))
    assert model(x).data.tobytes() == model(x).data.tobytes()
    with pytest.raises(ShapeError):
        model(rng.normal(size=(2, 64, 64, 3)))


def _permutation_deviation(model, x, perm):
    """Max deviation between permute-then-encode and encode-then-permute."""
    cfg, e = model.config, model.embedding
    patches = patchify(Tensor(x), cfg.patch_size)
    out = []
    for pt in (patches, patches[:, perm, :]):
        z = embed(pt, e.proj.weight, e.cls, e.pos)
        for block in model.blocks:
            z = block(z)
        out.append(z.data)
    full = np.concatenate([[0], perm + 1])
    return np.max(np.abs(out[0][:, full, :] - out[1]))


def test_permutation_equivariance_requires_zero_positions(rng):
    model = build_vit(vit_tiny(3), 5)
    x = rng.normal(size=(2, 32, 32, 3))
    perm = rng.permutation(16)
    assert _permutation_deviation(model, x, perm) > 1e-3
    model.embedding.pos.data[:] = 0
    assert _permutation_deviation(model, x, perm) < 1e-5


def test_final_layernorm_knob(rng):
    with_ln, without = build_vit(vit_tiny(3)), build_vit(vit_tiny(3, final_layernorm=False))
    assert with_ln.num_parameters() - without.num_parameters() == 128
    assert without(rng.normal(size=(1, 32, 32, 3))).shape == (1, 3)


def test_tiny_end_to_end_gradient():
    model = build_vit(vit_tiny(3), 0).astype(np.float64)
    x = Tensor(np.random.default_rng(4).normal(size=(2, 32, 32, 3)), dtype=np.float64)
    probes = check_gradients(lambda: cross_entropy(model(x), [0, 2]), model.parameters(), 50,
                             np.random.default_rng(6), stratify=True)
    assert len(probes) == 50
    assert max(p.rel_error for p in probes) < 1e-6
