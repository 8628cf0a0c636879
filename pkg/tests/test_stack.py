import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from psselect.stack import (
    FormatError, InterferogramStack, PixelMask, chunk, quantize_phase, read_mask, read_pgm,
    read_stack, stitch, wrap, write_mask, write_pgm, write_stack,
)
from conftest import random_stack


# ---------------------------------------------------------------- wrap

def test_wrap_examples():
    assert wrap(0.0) == 0.0
    assert wrap(3 * math.pi) == pytest.approx(math.pi, abs=1e-12)
    assert wrap(-3.5 * math.pi) == pytest.approx(0.5 * math.pi, abs=1e-12)


def test_wrap_boundary_maps_to_plus_pi():
    assert wrap(-math.pi) == math.pi
    assert wrap(math.pi) == math.pi


def test_wrap_rejects_non_finite():
    for bad in (np.nan, np.inf, -np.inf):
        with pytest.raises(ValueError):
            wrap(bad)
    with pytest.raises(ValueError):
        wrap(np.array([0.0, np.nan]))


finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)


@given(finite)
def test_wrap_range_and_idempotent(x):
    y = wrap(x)
    assert -math.pi < y <= math.pi
    assert wrap(y) == y


@given(st.floats(min_value=-50, max_value=50), st.integers(min_value=-10**6, max_value=10**6))
def test_wrap_periodic(x, k):
    a, b = wrap(x + 2 * math.pi * k), wrap(x)
    d = abs(a - b)
    assert min(d, 2 * math.pi - d) <= 1e-9


def test_quantize_phase_stays_inside_interval():
    q = quantize_phase(np.array([math.pi, -math.pi + 1e-9, 0.0]))
    assert q.dtype == np.float32
    assert np.all(q.astype(np.float64) > -math.pi)
    assert np.all(q.astype(np.float64) <= math.pi)


# ---------------------------------------------------------------- types

def test_stack_validation():
    s = random_stack()
    with pytest.raises(ValueError):
        InterferogramStack(s.phase[:1], s.amplitude[:1], s.perp_baseline[:1], s.k_factor)
    with pytest.raises(ValueError):
        InterferogramStack(s.phase, -s.amplitude - 1, s.perp_baseline, s.k_factor)
    with pytest.raises(ValueError):
        InterferogramStack(s.phase * 0 + 4.0, s.amplitude, s.perp_baseline, s.k_factor)
    with pytest.raises(ValueError):
        InterferogramStack(s.phase, s.amplitude[:, :-1], s.perp_baseline, s.k_factor)
    with pytest.raises(ValueError):
        InterferogramStack(s.phase, s.amplitude, s.perp_baseline, s.k_factor[:-1])


def test_stack_is_read_only(stack):
    with pytest.raises(ValueError):
        stack.phase[0, 0, 0] = 0.0
    assert stack.n_ifgs == 3 and stack.height == 12 and stack.width == 10


def test_mask_validation():
    m = PixelMask(np.array([[0, 1], [1, 0]]), "classical")
    assert m.count == 2 and m.labels.dtype == bool
    with pytest.raises(ValueError):
        PixelMask(np.zeros((2, 2)), "made_up")
    with pytest.raises(ValueError):
        PixelMask(np.full((2, 2), 2))


# ---------------------------------------------------------------- chunk / stitch

def _stack_of(h, w, n=2, seed=0):
    return random_stack(n=n, h=h, w=w, seed=seed)


@pytest.mark.parametrize("w,h,p,expected", [(300, 200, 100, 6), (250, 100, 100, 3), (100, 100, 100, 1)])
def test_chunk_counts(w, h, p, expected):
    ps = chunk(_stack_of(h, w), p)
    assert len(ps) == expected


def test_chunk_pads_last_tile():
    ps = chunk(_stack_of(100, 250), 100)
    last = ps.patches[-1]
    assert last.valid_cols == 50 and last.valid_rows == 100
    assert last.stack.width == 100


def test_chunk_rejects_bad_sizes():
    s = _stack_of(20, 30)
    with pytest.raises(ValueError):
        chunk(s, 7)
    with pytest.raises(ValueError):
        chunk(s, 21)


def test_stitch_shape_and_errors():
    s = _stack_of(200, 300)
    ps = chunk(s, 100)
    out = stitch([p.stack.phase[0] for p in ps.patches], ps)
    assert out.shape == (200, 300)
    with pytest.raises(ValueError):
        stitch([p.stack.phase[0] for p in ps.patches[:-1]], ps)
    with pytest.raises(ValueError):
        stitch([np.zeros((50, 50))] * len(ps), ps)


@pytest.mark.parametrize("policy", ["reflect", "zero"])
def test_zero_and_reflect_padding_stitch_exactly(policy):
    s = _stack_of(37, 53)
    ps = chunk(s, 16, pad_policy=policy)
    assert np.array_equal(stitch([p.stack.phase[1] for p in ps.patches], ps), s.phase[1])


@given(st.integers(8, 512), st.integers(8, 512), st.data())
def test_chunk_stitch_roundtrip(h, w, data):
    p = data.draw(st.integers(8, min(h, w)))
    img = np.arange(h * w, dtype=np.float64).reshape(h, w)
    fake = InterferogramStack(
        np.zeros((2, h, w)), np.ones((2, h, w)), np.zeros((2, h, w)), img,
    )
    ps = chunk(fake, p)
    back = stitch([pt.stack.k_factor for pt in ps.patches], ps)
    assert np.array_equal(back, img.astype(np.float32))


# ---------------------------------------------------------------- files

def test_stack_roundtrip_bitwise(tmp_path, stack):
    path = tmp_path / "s.ifg"
    write_stack(stack, path)
    back = read_stack(path)
    assert back == stack
    assert back.phase.tobytes() == stack.phase.tobytes()
    assert np.all(np.isfinite(back.phase))


@given(st.integers(2, 5), st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**32 - 1))
def test_stack_roundtrip_property(tmp_path_factory, n, h, w, seed):
    s = random_stack(n, h, w, seed)
    path = tmp_path_factory.mktemp("rt") / "s.ifg"
    write_stack(s, path)
    assert read_stack(path) == s


def test_stack_bad_magic(tmp_path, stack):
    path = tmp_path / "s.ifg"
    write_stack(stack, path)
    raw = bytearray(path.read_bytes())
    raw[0:3] = b"XXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_stack(path)


def test_stack_truncated(tmp_path, stack):
    path = tmp_path / "s.ifg"
    write_stack(stack, path)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(FormatError):
        read_stack(path)


def _with_header(path, header):
    import json
    raw = path.read_bytes()
    first = raw.index(b"\n")
    second = raw.index(b"\n", first + 1)
    path.write_bytes(raw[:first + 1] + json.dumps(header).encode() + raw[second:])


@pytest.mark.parametrize("n_ifgs", [0, 1, -3, "ten", 2**40])
def test_stack_bad_n_ifgs(tmp_path, stack, n_ifgs):
    path = tmp_path / "s.ifg"
    write_stack(stack, path)
    _with_header(path, {"width": stack.width, "height": stack.height, "n_ifgs": n_ifgs})
    with pytest.raises(FormatError):
        read_stack(path)


def test_stack_dimension_overflow(tmp_path, stack):
    path = tmp_path / "s.ifg"
    write_stack(stack, path)
    _with_header(path, {"width": 2**20, "height": 2**20, "n_ifgs": 3})
    with pytest.raises(FormatError):
        read_stack(path)


def test_stack_file_layout(tmp_path, stack):
    path = tmp_path / "s.ifg"
    write_stack(stack, path)
    raw = path.read_bytes()
    assert raw.startswith(b"IFGSTACK1\n")
    off = raw.index(b"\n", 10) + 1
    payload = np.frombuffer(raw[off:], dtype="<f4")
    plane = stack.n_ifgs * stack.height * stack.width
    assert np.array_equal(payload[:plane].reshape(stack.shape), stack.phase)
    assert np.array_equal(payload[3 * plane:].reshape(stack.height, stack.width), stack.k_factor)


def test_mask_roundtrip_and_errors(tmp_path):
    m = PixelMask(np.random.default_rng(1).random((7, 5)) < 0.3, "cnn_iss")
    path = tmp_path / "m.psm"
    write_mask(m, path)
    assert read_mask(path) == m
    raw = bytearray(path.read_bytes())
    raw[-1] = 7
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_mask(path)
    path.write_bytes(b"PSMASK2\n{}\n")
    with pytest.raises(FormatError):
        read_mask(path)


def test_pgm_roundtrip(tmp_path):
    p = np.array([[0.0, 0.5], [1.0, 0.25]])
    path = tmp_path / "p.pgm"
    write_pgm(p, path)
    assert path.read_bytes().startswith(b"P5\n2 2\n65535\n")
    assert np.allclose(read_pgm(path), p, atol=1 / 65535)
