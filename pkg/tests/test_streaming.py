import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cleegn.data import Recording
from cleegn.model import CleegnConfig, build_model
from cleegn.streaming import (
    MergePolicy,
    StreamError,
    hop_size,
    offline_reconstruct,
    stream_init,
    stream_push,
)

FS = 32.0  # T = 128, hop = 16


@pytest.fixture(scope="module")
def model():
    m = build_model(CleegnConfig(4, FS), seed=5)
    rng = np.random.default_rng(5)
    for name in ("bn1", "bn2", "bn3", "bn4"):
        bn = getattr(m, name)
        bn.running_mean[:] = rng.normal(size=bn.running_mean.shape)
        bn.running_var[:] = rng.uniform(0.5, 2, size=bn.running_var.shape)
    return m


def recording(n, seed=0, c=4):
    x = np.random.default_rng(seed).normal(scale=10, size=(c, n))
    return Recording([f"c{i}" for i in range(c)], FS, x)


def push_all(model, x, cuts):
    state = stream_init(model, FS)
    pieces = [stream_push(state, x[:, a:b]) for a, b in zip([0, *cuts], [*cuts, x.shape[1]])]
    return np.concatenate(pieces, axis=1), state


def test_window_and_hop_sizes():
    assert hop_size(128.0) == 64 and hop_size(125.0) == 62
    state = stream_init(build_model(CleegnConfig(3, 128.0)), 128.0)
    assert (state.window, state.hop) == (512, 64)
    state = stream_init(build_model(CleegnConfig(3, 125.0)), 125.0)
    assert (state.window, state.hop) == (500, 62)


def test_fs_mismatch_rejected(model):
    with pytest.raises(StreamError, match="fs"):
        stream_init(model, 64.0)
    with pytest.raises(StreamError):
        offline_reconstruct(model, Recording(["a", "b", "c", "d"], 64.0, np.zeros((4, 600))))


def test_overlap_average_is_offline_only(model):
    state = stream_init(model, FS, MergePolicy.OVERLAP_AVERAGE)
    with pytest.raises(StreamError, match="offline"):
        stream_push(state, np.zeros((4, 10)))


def test_emission_schedule(model):
    T, H = 128, 16
    state = stream_init(model, FS)
    x = recording(400).samples
    assert stream_push(state, x[:, : T - 1]).shape == (4, 0)
    assert stream_push(state, x[:, T - 1:T]).shape == (4, H)
    assert stream_push(state, x[:, T:T + H - 1]).shape == (4, 0)
    assert stream_push(state, x[:, T + H - 1:T + H]).shape == (4, H)
    assert stream_push(state, x[:, T + H:T + 4 * H + 3]).shape == (4, 3 * H)
    assert state.emitted % H == 0 and state.emitted == 5 * H


def test_chunk_shape_checked(model):
    with pytest.raises(StreamError, match=r"\(4, m\)"):
        stream_push(stream_init(model, FS), np.zeros((3, 5)))


@settings(max_examples=15, deadline=None)
@given(cuts=st.lists(st.integers(1, 599), max_size=12, unique=True), seed=st.integers(0, 100))
def test_chunking_invariance(model, cuts, seed):
    x = recording(600, seed).samples
    whole, _ = push_all(model, x, [])
    parts, _ = push_all(model, x, sorted(cuts))
    assert whole.tobytes() == parts.tobytes()


@settings(max_examples=10, deadline=None)
@given(n=st.integers(128, 700), seed=st.integers(0, 100))
def test_offline_latest_hop_matches_stream(model, n, seed):
    rec = recording(n, seed)
    off = offline_reconstruct(model, rec)
    assert off.samples.shape == rec.samples.shape
    assert off.kind == "reconstructed"
    streamed, state = push_all(model, rec.samples.astype(np.float32), [])
    T, H = 128, 16
    region = off.samples[:, T - H:T - H + streamed.shape[1]]
    np.testing.assert_allclose(region, streamed, atol=1e-5)
    # warm-up comes from the first window
    first = model(rec.samples[None, :, :T, None].astype(np.float32))[0, :, :, 0]
    np.testing.assert_allclose(off.samples[:, : T - H], first[:, : T - H], atol=1e-5)


@pytest.mark.parametrize("p", [128, 200, 300, 301])
def test_emissions_never_depend_on_later_input(model, p):
    x = recording(500, 1).samples.astype(np.float32)
    y = x.copy()
    y[:, p:] += 50.0
    a_state, b_state = stream_init(model, FS), stream_init(model, FS)
    for t in range(x.shape[1]):
        a = stream_push(a_state, x[:, t:t + 1])
        b = stream_push(b_state, y[:, t:t + 1])
        # everything emitted once sample t has arrived may only see samples <= t
        if t < p:
            np.testing.assert_array_equal(a, b)
        elif a.size:
            assert not np.array_equal(a, b)


def test_exact_window_both_policies(model):
    rec = recording(128, 2)
    expected = model(rec.samples[None, :, :, None].astype(np.float32))[0, :, :, 0]
    for policy in MergePolicy:
        np.testing.assert_allclose(offline_reconstruct(model, rec, policy).samples, expected, atol=1e-5)


def test_zero_input_gives_tiled_zero_response(model):
    rec = recording(300).replace(samples=np.zeros((4, 300)))
    zero = model(np.zeros((1, 4, 128, 1), np.float32))[0, :, :, 0]
    out = offline_reconstruct(model, rec).samples
    for start in range(0, 300 - 128 + 1, 16):
        np.testing.assert_allclose(out[:, start + 112:start + 128], zero[:, 112:], atol=1e-5)


def test_overlap_average_means_covering_windows(model):
    rec = recording(160, 3)
    x = rec.samples.astype(np.float32)
    out = offline_reconstruct(model, rec, "overlap_average").samples
    starts = [0, 16, 32]
    ys = {s: model(x[None, :, s:s + 128, None])[0, :, :, 0] for s in starts}
    for t in (0, 20, 40, 130, 159):
        vals = [ys[s][:, t - s] for s in starts if s <= t < s + 128]
        np.testing.assert_allclose(out[:, t], np.mean(vals, axis=0), atol=1e-5)


def test_short_recording_rejected(model):
    with pytest.raises(StreamError, match="shorter"):
        offline_reconstruct(model, recording(127))
