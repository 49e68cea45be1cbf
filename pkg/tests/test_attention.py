import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geotransfer import attention as attn
from geotransfer.attention import (
    Ablation,
    AttentionMode,
    AttentionTensors,
    DuplicateRecordError,
    EmptyKeySetError,
    KVRecord,
    KVRegistry,
    MissingRecordError,
    Mode,
    Router,
    Stream,
    geometry_preserving_attention,
    run_hooked,
    select_masked_kv,
    self_attention,
    softmax,
    texture_aligning_attention,
)
from oracles import naive_attention


def rand_tensors(rng, n=5, m=6, d=4, dv=None):
    dv = dv or d
    return AttentionTensors(rng.normal(size=(n, d)), rng.normal(size=(m, d)), rng.normal(size=(m, dv)))


class TestKernels:
    def test_identical_keys_average_values(self):
        v = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]])
        out = self_attention(AttentionTensors(np.ones((2, 2)), np.ones((3, 2)), v))
        np.testing.assert_allclose(out, np.tile(v.mean(axis=0), (2, 1)))

    def test_dominant_key_selects_value(self):
        q = np.array([[100.0, 0.0]])
        k = np.array([[1.0, 0.0], [-1.0, 0.0]])
        v = np.array([[3.0], [7.0]])
        np.testing.assert_allclose(self_attention(AttentionTensors(q, k, v)), [[3.0]], atol=1e-12)

    def test_scale_is_sqrt_d(self):
        q = np.array([[1.0, 1.0, 1.0, 1.0]])
        k = np.array([[1.0, 1.0, 1.0, 1.0], [0.0, 0.0, 0.0, 0.0]])
        v = np.array([[1.0], [0.0]])
        w = np.exp(2.0) / (np.exp(2.0) + 1.0)  # logit 4 / sqrt(4)
        np.testing.assert_allclose(self_attention(AttentionTensors(q, k, v)), [[w]])

    def test_softmax_stable(self):
        p = softmax(np.array([[1000.0, 1000.0, -1000.0]]))
        np.testing.assert_allclose(p, [[0.5, 0.5, 0.0]])

    def test_oracle_random(self, rng):
        for _ in range(40):
            n, m, m2, d, dv = rng.integers(1, 10, size=5)
            t = rand_tensors(rng, n, m, d, dv)
            k2, v2 = rng.normal(size=(m2, d)), rng.normal(size=(m2, dv))
            ref = naive_attention(t.Q, np.vstack([t.K, k2]), np.vstack([t.V, v2]))
            np.testing.assert_allclose(texture_aligning_attention(t, (k2, v2)), ref, atol=1e-10)
            np.testing.assert_allclose(geometry_preserving_attention(t, (k2, v2)), ref, atol=1e-10)
            np.testing.assert_allclose(self_attention(t), naive_attention(t.Q, t.K, t.V), atol=1e-10)

    def test_other_only(self, rng):
        t = rand_tensors(rng)
        k2, v2 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        np.testing.assert_allclose(texture_aligning_attention(t, (k2, v2), "other_only"),
                                   naive_attention(t.Q, k2, v2), atol=1e-10)

    def test_other_only_empty_raises(self, rng):
        t = rand_tensors(rng)
        with pytest.raises(EmptyKeySetError):
            geometry_preserving_attention(t, (np.zeros((0, 4)), np.zeros((0, 4))), Ablation.OTHER_ONLY)

    def test_empty_extra_is_self(self, rng):
        t = rand_tensors(rng)
        empty = (np.zeros((0, 4)), np.zeros((0, 4)))
        assert np.array_equal(texture_aligning_attention(t, empty), self_attention(t))
        assert np.array_equal(geometry_preserving_attention(t, empty), self_attention(t))

    def test_self_only_ignores_extra(self, rng):
        t = rand_tensors(rng)
        extra = (rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))
        assert np.array_equal(texture_aligning_attention(t, extra, "self_only"), self_attention(t))

    def test_multihead_matches_per_head(self, rng):
        q, k, v = rng.normal(size=(3, 5, 4)), rng.normal(size=(3, 6, 4)), rng.normal(size=(3, 6, 2))
        k2, v2 = rng.normal(size=(3, 2, 4)), rng.normal(size=(3, 2, 2))
        out = texture_aligning_attention(AttentionTensors(q, k, v), (k2, v2))
        for h in range(3):
            np.testing.assert_allclose(out[h], naive_attention(q[h], np.vstack([k[h], k2[h]]),
                                                               np.vstack([v[h], v2[h]])), atol=1e-10)

    def test_shape_errors(self, rng):
        with pytest.raises(ValueError):
            AttentionTensors(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 4)))
        with pytest.raises(ValueError):
            AttentionTensors(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((3, 3)))
        with pytest.raises(ValueError):
            texture_aligning_attention(rand_tensors(rng), (np.zeros((2, 5)), np.zeros((2, 4))))

    def test_empty_self_keys(self):
        with pytest.raises(EmptyKeySetError):
            self_attention(AttentionTensors(np.zeros((1, 2)), np.zeros((0, 2)), np.zeros((0, 2))))


@st.composite
def attention_case(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    n, m, d = draw(st.integers(1, 8)), draw(st.integers(1, 8)), draw(st.integers(1, 8))
    rng = np.random.default_rng(seed)
    return rand_tensors(rng, n, m, d), rng


@given(attention_case())
@settings(max_examples=60, deadline=None)
def test_convex_combination_of_values(case):
    t, _ = case
    out = self_attention(t)
    assert np.all(out <= t.V.max(axis=0) + 1e-9) and np.all(out >= t.V.min(axis=0) - 1e-9)
    p = softmax(t.Q @ t.K.T / np.sqrt(t.d))
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    assert np.all(p >= 0)


@given(attention_case())
@settings(max_examples=60, deadline=None)
def test_permutation_equivariance(case):
    t, rng = case
    qp = rng.permutation(t.Q.shape[0])
    kp = rng.permutation(t.K.shape[0])
    out = self_attention(t)
    permuted = self_attention(AttentionTensors(t.Q[qp], t.K[kp], t.V[kp]))
    np.testing.assert_allclose(permuted, out[qp], atol=1e-10)


def test_select_masked_kv(rng):
    k, v = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
    mask = np.array([0, 1, 1, 0, 0, 1])
    k2, v2 = select_masked_kv((k, v), mask)
    assert np.array_equal(k2, k[[1, 2, 5]]) and np.array_equal(v2, v[[1, 2, 5]])
    with pytest.raises(ValueError):
        select_masked_kv((k, v), np.ones(5))


class TestRegistry:
    def test_double_write(self):
        reg = KVRegistry()
        reg.put(KVRecord(Stream.TAR, 10, 0, np.zeros((1, 1)), np.zeros((1, 1))))
        with pytest.raises(DuplicateRecordError):
            reg.put(KVRecord("tar", 10, 0, np.zeros((1, 1)), np.zeros((1, 1))))

    def test_missing(self):
        reg = KVRegistry()
        with pytest.raises(MissingRecordError):
            reg.get("src", 1, 0)
        assert reg.missing_errors == 1

    def test_release(self):
        reg = KVRegistry()
        for t in (1, 2):
            reg.put(KVRecord("tar", t, 0, np.zeros((1, 1)), np.zeros((1, 1))))
        reg.release(1)
        assert len(reg) == 1 and ("tar", 2, 0, 0) in reg
        reg.release()
        assert len(reg) == 0

    def test_capture_disabled(self):
        reg = KVRegistry(capture_disabled=("tar",))
        reg.put(KVRecord("tar", 1, 0, np.zeros((1, 1)), np.zeros((1, 1))))
        assert len(reg) == 0


class TestRouting:
    def test_provider_must_run_first(self, rng):
        reg = KVRegistry()
        ta = AttentionMode(Mode.TEXTURE_ALIGNING)
        with pytest.raises(MissingRecordError):
            run_hooked(rand_tensors(rng), reg, ta, "geo", 5, 0)

    def test_texture_aligning_dispatch(self, rng):
        reg = KVRegistry()
        tar, geo = rand_tensors(rng), rand_tensors(rng)
        run_hooked(tar, reg, attn.STANDARD, "tar", 5, 0)
        out = run_hooked(geo, reg, AttentionMode(Mode.TEXTURE_ALIGNING), "geo", 5, 0)
        np.testing.assert_allclose(out, naive_attention(geo.Q, np.vstack([geo.K, tar.K]),
                                                        np.vstack([geo.V, tar.V])), atol=1e-10)
        assert reg.census == {("tar", "standard"): 1, ("geo", "texture_aligning"): 1}

    def test_geometry_preserving_filters_tokens(self, rng):
        reg = KVRegistry()
        src, out_t = rand_tensors(rng), rand_tensors(rng)
        run_hooked(src, reg, attn.STANDARD, "src", 3, 1)
        mask = np.array([1, 0, 0, 1, 0, 0])
        out = run_hooked(out_t, reg, AttentionMode(Mode.GEOMETRY_PRESERVING), "out", 3, 1, token_mask=mask)
        ref = naive_attention(out_t.Q, np.vstack([out_t.K, src.K[[0, 3]]]), np.vstack([out_t.V, src.V[[0, 3]]]))
        np.testing.assert_allclose(out, ref, atol=1e-10)

    def test_router_layer_override(self, rng):
        reg = KVRegistry()
        r = Router(reg, "geo", 7, route=AttentionMode(Mode.TEXTURE_ALIGNING), layers={1})
        t = rand_tensors(rng)
        assert np.array_equal(r(0, t), self_attention(t))  # layer 0 not routed, no tar record needed
        with pytest.raises(MissingRecordError):
            r(1, rand_tensors(rng))
        assert r.calls == 2

    def test_router_lazy_tensors(self, rng):
        t = rand_tensors(rng)
        r = Router(KVRegistry(), "tar", 1)
        assert np.array_equal(r(0, lambda: t), self_attention(t))

    def test_selftest_detects_corruption(self, monkeypatch):
        from geotransfer.selftest import check_attention_oracle

        assert check_attention_oracle(cases=20).ok
        orig = attn._attend
        monkeypatch.setattr(attn, "_attend", lambda q, k, v: orig(q, k, v) * 1.001)
        assert not check_attention_oracle(cases=20).ok
