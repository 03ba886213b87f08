import numpy as np
import pytest

from vlfuse import tensor as T
from vlfuse.encoders import (EncoderConfig, Encoders, FreezePlan, TextEncoder, TextInput, VideoEncoder, VideoInput,
                             add_time_embeddings, apply_freeze_plan, attach_adapter, encode_text, encode_video)
from vlfuse.errors import ConfigError, ContractError, DimensionError
from vlfuse.nn import AttentionAdapter


@pytest.fixture
def video_stack(small_cfg, rng):
    return VideoEncoder(small_cfg, rng, d_in=16, max_frames=8)


@pytest.fixture
def text_stack(small_cfg, rng):
    return TextEncoder(small_cfg, rng, vocab_size=40, max_len=24)


def frames(rng, n_v=3, k=5, d_in=16):
    return VideoInput(rng.normal(size=(n_v, k, d_in)))


def text(ids, n_pad=0):
    ids = list(ids) + [0] * n_pad
    mask = [True] * (len(ids) - n_pad) + [False] * n_pad
    return TextInput(np.array(ids), np.array(mask))


# -- video --------------------------------------------------------------------


def test_video_output_shape_has_no_class_token(rng):
    stack = VideoEncoder(EncoderConfig(d=32, heads=4, layers=1, ffn_mult=2), rng, d_in=32)
    out = encode_video(VideoInput(rng.normal(size=(4, 16, 32))), stack)
    assert out.shape == (4, 16, 32)


def test_video_frames_are_encoded_independently(video_stack, rng):
    v = frames(rng)
    perm = [2, 0, 1]
    a = encode_video(v, video_stack).data
    b = encode_video(VideoInput(v.frames[perm]), video_stack).data
    assert np.allclose(a[perm], b, rtol=0, atol=1e-12)


def test_video_too_many_frames_is_config_error(video_stack, rng):
    with pytest.raises(ConfigError):
        encode_video(frames(rng, n_v=9), video_stack)


def test_video_wrong_width_is_dimension_error(video_stack, rng):
    with pytest.raises(DimensionError):
        encode_video(frames(rng, d_in=15), video_stack)


def test_video_batch_axis_matches_unbatched(video_stack, rng):
    a, b = frames(rng), frames(rng)
    batched = encode_video(VideoInput(np.stack([a.frames, b.frames])), video_stack).data
    assert np.allclose(batched[1], encode_video(b, video_stack).data, rtol=0, atol=1e-12)


# -- time embeddings ----------------------------------------------------------------


def test_zero_time_table_is_identity(video_stack, rng):
    video_stack.time_embeddings.data[...] = 0.0
    feat = T.Tensor(rng.normal(size=(3, 5, 16)))
    assert np.array_equal(add_time_embeddings(feat, video_stack).data, feat.data)


def test_identical_frames_differ_by_time_rows(video_stack, rng):
    row = rng.normal(size=(1, 5, 16))
    feat = T.Tensor(np.repeat(row, 3, axis=0))
    out = add_time_embeddings(feat, video_stack).data
    te = video_stack.time_embeddings.data
    for i, j in [(0, 1), (2, 0)]:
        assert np.allclose(out[i] - out[j], np.broadcast_to(te[i] - te[j], (5, 16)), rtol=0, atol=1e-12)
    assert not np.allclose(out[0], out[1])


# -- text ---------------------------------------------------------------------------


def test_text_cls_only(text_stack):
    assert encode_text(text([1]), text_stack).shape == (1, 16)


def test_changing_pad_token_does_not_change_unpadded_rows(text_stack):
    a = encode_text(text([1, 7, 8, 9], n_pad=3), text_stack).data
    t = text([1, 7, 8, 9], n_pad=3)
    t.token_ids[5] = 33
    b = encode_text(t, text_stack).data
    assert np.array_equal(a[:4], b[:4])


def test_masked_positions_receive_zero_attention(text_stack):
    encode_text(text([1, 7, 8], n_pad=4), text_stack)
    for layer in text_stack.layers:
        w = layer.attn.last_weights
        assert w[..., 3:].max() == 0.0


def test_all_masked_row_is_contract_error(text_stack):
    with pytest.raises(ContractError):
        encode_text(TextInput(np.array([1, 2]), np.array([False, False])), text_stack)


def test_mask_length_mismatch_is_contract_error():
    with pytest.raises(ContractError):
        TextInput(np.array([1, 2, 3]), np.array([True, True]))


def test_text_too_long_is_config_error(text_stack):
    with pytest.raises(ConfigError):
        encode_text(text([1] + [5] * 30), text_stack)


# -- gradients -------------------------------------------------------------------------


def test_video_stack_gradient_check(video_stack, rng):
    v = frames(rng, n_v=2, k=3)
    w = rng.normal(size=(2, 3, 16))

    def f(*_):
        return T.sum(T.mul(add_time_embeddings(encode_video(v, video_stack), video_stack), T.Tensor(w)))

    report = T.grad_check(f, video_stack.parameters(), n_coords=60, rng=rng)
    assert report.passed, report


def test_text_stack_gradient_check(text_stack, rng):
    t = text([1, 4, 9, 12, 3], n_pad=2)
    w = rng.normal(size=(7, 16))

    def f(*_):
        return T.sum(T.mul(encode_text(t, text_stack), T.Tensor(w)))

    report = T.grad_check(f, text_stack.parameters(), n_coords=60, rng=rng)
    assert report.passed, report


# -- freezing ------------------------------------------------------------------------------


def _encoders(rng, layers=3):
    cfg = EncoderConfig(d=16, heads=2, layers=layers, ffn_mult=2)
    return Encoders(VideoEncoder(cfg, rng, d_in=16), TextEncoder(cfg, rng, vocab_size=40, max_len=24))


def _backprop(enc, rng):
    v = encode_video(frames(rng, n_v=2, k=3), enc.video)
    t = encode_text(text([1, 5, 6, 7]), enc.text)
    enc.zero_grad()
    T.backward(T.add(T.sum(T.mul(v, v)), T.sum(T.mul(t, t))))


def test_freeze_nothing_gives_every_parameter_gradient(rng):
    enc = _encoders(rng)
    apply_freeze_plan(enc, FreezePlan(0, 0))
    _backprop(enc, rng)
    for name, p in enc.named_parameters():
        if name.startswith("video.time_embeddings") or name.startswith("text.seg_emb"):
            continue
        assert p.requires_grad and np.abs(p.grad).sum() > 0, name


def test_freeze_bottom_layers_only(rng):
    enc = _encoders(rng)
    apply_freeze_plan(enc, FreezePlan(2, 1))
    assert [all(not p.requires_grad for p in lyr.parameters()) for lyr in enc.video.layers] == [True, True, False]
    assert [all(not p.requires_grad for p in lyr.parameters()) for lyr in enc.text.layers] == [True, False, False]
    assert all(p.requires_grad for p in enc.video.embedding_parameters())
    _backprop(enc, rng)
    for p in enc.video.layers[0].parameters():
        assert p.grad is None or not p.grad.any()


def test_full_freeze_includes_embeddings(rng):
    enc = _encoders(rng)
    apply_freeze_plan(enc, FreezePlan(3, 3))
    assert not any(p.requires_grad for p in enc.parameters())


def test_freeze_out_of_range_is_config_error(rng):
    with pytest.raises(ConfigError):
        apply_freeze_plan(_encoders(rng), FreezePlan(4, 0))


def test_freeze_does_not_change_forward(rng):
    enc = _encoders(rng)
    v = frames(rng, n_v=2, k=3)
    before = encode_video(v, enc.video).data
    apply_freeze_plan(enc, FreezePlan(2, 2))
    assert np.array_equal(before, encode_video(v, enc.video).data)


def test_deep_partial_freeze_plan_is_expressible(rng):
    cfg = EncoderConfig(d=8, heads=2, layers=12, ffn_mult=1)
    enc = Encoders(VideoEncoder(cfg, rng), TextEncoder(cfg, rng, vocab_size=16, max_len=8))
    apply_freeze_plan(enc, FreezePlan(9, 6))
    assert (enc.video.frozen_layers, enc.text.frozen_layers) == (9, 6)


# -- adapters ---------------------------------------------------------------------------------


def test_fresh_adapter_preserves_outputs_exactly(rng):
    enc = _encoders(rng)
    apply_freeze_plan(enc, FreezePlan(2, 2))
    v, t = frames(rng, n_v=2, k=3), text([1, 5, 6, 7], n_pad=1)
    before_v, before_t = encode_video(v, enc.video).data, encode_text(t, enc.text).data
    attach_adapter(enc.video, [0, 1], rng=rng)
    attach_adapter(enc.text, [1], rng=rng)
    assert np.array_equal(before_v, encode_video(v, enc.video).data)
    assert np.array_equal(before_t, encode_text(t, enc.text).data)


def test_adapter_default_bottleneck_is_quarter_width(rng):
    enc = _encoders(rng)
    apply_freeze_plan(enc, FreezePlan(1, 0))
    (adapter,) = attach_adapter(enc.video, [0], rng=rng)
    assert adapter.down.weight.shape == (16, 4)


def test_adapter_trains_while_host_stays_frozen(rng):
    enc = _encoders(rng)
    apply_freeze_plan(enc, FreezePlan(2, 0))
    (adapter,) = attach_adapter(enc.video, [0], rng=rng)
    _backprop(enc, rng)
    assert np.abs(adapter.up.weight.grad).sum() > 0
    for p in enc.video.layers[0].host_parameters():
        assert not p.requires_grad
        assert p.grad is None or not p.grad.any()


@pytest.mark.parametrize("site", [-1, 3])
def test_adapter_site_out_of_range(rng, site):
    enc = _encoders(rng)
    apply_freeze_plan(enc, FreezePlan(3, 0))
    with pytest.raises(ConfigError):
        attach_adapter(enc.video, [site], rng=rng)


def test_adapter_outside_frozen_region_is_rejected(rng):
    enc = _encoders(rng)
    apply_freeze_plan(enc, FreezePlan(1, 0))
    with pytest.raises(ConfigError):
        attach_adapter(enc.video, [2], rng=rng)


def test_uniform_gate_reduces_to_plain_adapter(rng):
    gated = AttentionAdapter(8, 4, rng)
    plain = AttentionAdapter(8, 4, rng, attention=False)
    plain.down.weight.data[...] = gated.down.weight.data
    plain.down.bias.data[...] = gated.down.bias.data
    plain.up.weight.data[...] = gated.up.weight.data = rng.normal(size=(4, 8))
    # zero gate weights and a large bias saturate the sigmoid to 1 on every channel
    gated.gate.weight.data[...] = 0.0
    gated.gate.bias.data[...] = 40.0
    x = T.Tensor(rng.normal(size=(5, 8)))
    assert np.allclose(gated(x).data, plain(x).data, rtol=0, atol=1e-12)


def test_adapter_gradient_check(rng):
    adapter = AttentionAdapter(8, 4, rng)
    adapter.up.weight.data[...] = rng.normal(size=(4, 8))
    x = T.Tensor(rng.normal(size=(5, 8)))
    w = rng.normal(size=(5, 8))
    report = T.grad_check(lambda *_: T.sum(T.mul(adapter(x), T.Tensor(w))), adapter.parameters())
    assert report.passed, report
