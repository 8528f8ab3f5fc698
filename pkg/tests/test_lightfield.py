import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import tokenize_loops
from mlfsr.lightfield import (AUGMENTATIONS, LFBError, Layout, LightField4D, augment, augment_array,
                              export_pgm_grid, import_pgm_grid, macpi_to_sai, read_lfb, read_pgm,
                              reverse_sequence, sai_to_macpi, tokenize, untokenize, view_filename,
                              write_lfb, write_pgm)
from mlfsr.synth import LayerSpec, SceneSpec, TextureSpec, generate_lf
from mlfsr.tensor import Tensor

dims = st.integers(1, 4)


@settings(max_examples=120, deadline=None)
@given(dims, dims, dims, dims, dims, st.integers(1, 3), st.sampled_from(list(Layout)), st.integers(0, 2**31))
def test_tokenize_round_trip_and_shape_law(b, u, v, h, w, c, layout, seed):
    x = np.random.default_rng(seed).standard_normal((b, u, v, h, w, c))
    t = tokenize(x, layout)
    assert t.groups * t.length == b * u * v * h * w
    expected = {Layout.SPATIAL: (b * u * v, h * w), Layout.ANGULAR: (b * h * w, u * v),
                Layout.EPI_H: (b * v * w, u * h), Layout.EPI_W: (b * u * h, v * w)}[layout]
    assert (t.groups, t.length, t.channels) == expected + (c,)
    assert np.array_equal(untokenize(t), x)
    again = tokenize(untokenize(t), layout)
    assert np.array_equal(again.data, t.data)


@pytest.mark.parametrize("layout", list(Layout))
def test_tokenize_matches_loop_order(layout):
    x = np.random.default_rng(0).standard_normal((2, 2, 3, 3, 4, 2))
    assert np.array_equal(tokenize(x, layout).data, tokenize_loops(x, layout.value))


def test_epi_h_toy_order():
    x = np.zeros((1, 2, 2, 2, 2, 1))
    for idx in np.ndindex(2, 2, 2, 2):
        u, v, h, w = idx
        x[0, u, v, h, w, 0] = 1000 * u + 100 * v + 10 * h + w
    t = tokenize(x, "epi_h")
    assert (t.groups, t.length) == (4, 4)
    # group 0 is (v=0, w=0); tokens visit (u, h) = (0,0), (0,1), (1,0), (1,1)
    assert list(t.data[0, :, 0]) == [0, 10, 1000, 1010]


@pytest.mark.parametrize("layout", list(Layout))
def test_constant_field_tokens_constant(layout):
    t = tokenize(np.full((1, 2, 3, 4, 5, 1), 0.25), layout)
    assert np.all(t.data == 0.25)


def test_tokenize_tensor_path_and_gradient():
    x = Tensor(np.random.default_rng(1).standard_normal((1, 2, 2, 3, 3, 2)), requires_grad=True)
    t = tokenize(x, "epi_w")
    assert isinstance(t.data, Tensor)
    untokenize(t).sum().backward()
    assert np.array_equal(x.grad, np.ones(x.shape))


def test_untokenize_inconsistent_dims():
    t = tokenize(np.zeros((1, 2, 2, 2, 2, 1)), "spatial")
    bad = t.with_data(np.zeros((3, 4, 1)))
    with pytest.raises(ValueError, match="inconsistent"):
        untokenize(bad)


def test_reverse_sequence():
    t = tokenize(np.arange(3.0).reshape(1, 1, 1, 1, 3, 1), "spatial")
    assert list(reverse_sequence(t).data[0, :, 0]) == [2.0, 1.0, 0.0]
    assert np.array_equal(reverse_sequence(reverse_sequence(t)).data, t.data)
    single = tokenize(np.ones((1, 1, 1, 1, 1, 1)), "spatial")
    assert np.array_equal(reverse_sequence(single).data, single.data)


# --- MacPI ------------------------------------------------------------------------------------

def test_macpi_single_view():
    lf = np.random.default_rng(2).uniform(size=(1, 1, 4, 5, 1))
    assert np.array_equal(sai_to_macpi(lf), lf[0, 0])


def test_macpi_definition_and_round_trip():
    rng = np.random.default_rng(3)
    lf = rng.uniform(size=(2, 3, 4, 5, 1))
    img = sai_to_macpi(lf)
    for u, v, h, w in np.ndindex(2, 3, 4, 5):
        assert img[h * 2 + u, w * 3 + v, 0] == lf[u, v, h, w, 0]
    assert np.array_equal(macpi_to_sai(img, 2, 3), lf)


def test_macpi_four_single_pixel_views():
    lf = np.array([1.0, 2.0, 3.0, 4.0]).reshape(2, 2, 1, 1, 1)
    assert np.array_equal(sai_to_macpi(lf)[..., 0], [[1.0, 2.0], [3.0, 4.0]])


def test_macpi_not_divisible():
    with pytest.raises(ValueError, match="not divisible"):
        macpi_to_sai(np.zeros((5, 4)), 2, 2)


# --- augmentation ------------------------------------------------------------------------------------

def _shift_identity_holds(lf, d):
    """lf[u+1,v,h] == lf[u,v,h+d] and lf[u,v+1,:,w] == lf[u,v,:,w+d] away from a d-pixel margin."""
    m = abs(d)
    H, W = lf.shape[2:4]
    ok_u = np.array_equal(lf[1:, :, m:H - 2 * m], lf[:-1, :, m + d:H - 2 * m + d])
    ok_v = np.array_equal(lf[:, 1:, :, m:W - 2 * m], lf[:, :-1, :, m + d:W - 2 * m + d])
    return ok_u and ok_v


@pytest.mark.parametrize("d", [-2, -1, 1, 2])
def test_augment_preserves_disparity(d):
    spec = SceneSpec(seed=5, h_res=24, w_res=24, layers=[LayerSpec(TextureSpec(), float(d))])
    lf = generate_lf(spec).data
    assert _shift_identity_holds(lf, d)
    for op in AUGMENTATIONS:
        assert _shift_identity_holds(augment_array(lf, op), d), op


@pytest.mark.parametrize("op", AUGMENTATIONS)
def test_augment_inverse_exists(op):
    x = np.random.default_rng(6).standard_normal((3, 3, 4, 4, 1))
    inverse = {"rot90": "rot270", "rot270": "rot90"}.get(op, op)
    assert np.array_equal(augment_array(augment_array(x, op), inverse), x)


def test_hflip_reverses_v_and_w():
    x = np.random.default_rng(7).standard_normal((2, 3, 4, 5, 1))
    y = augment_array(x, "hflip")
    assert np.array_equal(y, x[:, ::-1, :, ::-1])
    assert np.array_equal(augment_array(x, "vflip"), x[::-1, :, ::-1])


def test_augment_commutes_with_nearest_downsampling():
    rng = np.random.default_rng(8)
    lr = rng.uniform(size=(3, 3, 6, 6, 1))
    hr = np.repeat(np.repeat(lr, 2, axis=2), 2, axis=3)  # axis-aligned 2x2 blocks
    for op in AUGMENTATIONS:
        a_lr, a_hr = augment(lr, hr, op)
        assert np.array_equal(a_hr[:, :, ::2, ::2], a_lr), op


def test_augment_unknown():
    with pytest.raises(ValueError, match="unknown augmentation"):
        augment_array(np.zeros((1, 1, 2, 2)), "shear")


# --- LFB ----------------------------------------------------------------------------------------------

def test_lfb_round_trip(tmp_path):
    lf = LightField4D(np.random.default_rng(9).uniform(size=(5, 5, 8, 6, 1)).astype(np.float32))
    write_lfb(tmp_path / "a.lfb", lf)
    back = read_lfb(tmp_path / "a.lfb")
    assert back == lf
    assert (back.u_res, back.v_res, back.h_res, back.w_res, back.channels) == (5, 5, 8, 6, 1)


def test_lfb_payload_size(tmp_path):
    write_lfb(tmp_path / "a.lfb", np.zeros((5, 5, 32, 32, 1), dtype=np.float32))
    raw = (tmp_path / "a.lfb").read_bytes()
    assert raw[:4] == b"LFB1"
    assert struct.unpack("<5H", raw[4:14]) == (5, 5, 32, 32, 1)
    assert len(raw) - 14 == 5 * 5 * 32 * 32 * 4


def test_lfb_errors(tmp_path):
    (tmp_path / "empty.lfb").write_bytes(b"")
    with pytest.raises(LFBError, match="bad magic"):
        read_lfb(tmp_path / "empty.lfb")
    write_lfb(tmp_path / "t.lfb", np.zeros((2, 2, 4, 4, 1)))
    raw = (tmp_path / "t.lfb").read_bytes()
    (tmp_path / "t.lfb").write_bytes(raw[:-4])
    with pytest.raises(LFBError, match="truncated"):
        read_lfb(tmp_path / "t.lfb")
    with pytest.raises(LFBError, match="overflow"):
        write_lfb(tmp_path / "big.lfb", np.zeros((70000, 1, 1, 1, 1)))


def test_light_field_rejects_bad_shape():
    with pytest.raises(ValueError):
        LightField4D(np.zeros((2, 2, 0, 2, 1)))


# --- PGM ----------------------------------------------------------------------------------------------

@pytest.mark.parametrize("maxval", [255, 65535])
def test_pgm_grid_round_trip(tmp_path, maxval):
    lf = np.random.default_rng(10).uniform(size=(2, 3, 5, 7, 1))
    export_pgm_grid(tmp_path, lf, maxval)
    back = import_pgm_grid(tmp_path, 2, 3).data
    assert back.shape == lf.shape
    assert np.max(np.abs(back - lf)) <= 0.5 / maxval + 1e-7


def test_pgm_single_view_is_plain_image(tmp_path):
    img = np.random.default_rng(11).uniform(size=(4, 6))
    export_pgm_grid(tmp_path, img[None, None])
    assert np.allclose(read_pgm(tmp_path / view_filename(0, 0)), import_pgm_grid(tmp_path, 1, 1).data[0, 0, :, :, 0])


def test_pgm_header_comments(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
    assert np.array_equal(read_pgm(p), [[0.0, 1.0]])


def test_pgm_grid_errors(tmp_path):
    export_pgm_grid(tmp_path, np.zeros((2, 2, 4, 4, 1)))
    write_pgm(tmp_path / view_filename(1, 1), np.zeros((3, 4)))
    with pytest.raises(ValueError, match="view_1_1.pgm"):
        import_pgm_grid(tmp_path, 2, 2)
    (tmp_path / view_filename(0, 1)).unlink()
    with pytest.raises(FileNotFoundError, match="view_0_1.pgm"):
        import_pgm_grid(tmp_path, 2, 2)
