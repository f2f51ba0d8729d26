"""Tests for feature extraction and parameter serialization."""

import numpy as np
import pytest

from attnmil import backbone as bb
from attnmil.autodiff import Tape, Tensor
from attnmil.data import VolumeSample
from attnmil.errors import (
    BadMagicError,
    DataFormatError,
    ShapeMismatchError,
    TruncatedFileError,
)
from test_autodiff import conv2d_loop_reference, finite_difference


def make_volume(voxels, label=1):
    voxels = np.asarray(voxels, dtype=np.float32)
    mask = np.zeros(voxels.shape, dtype=np.uint8)
    if label:
        mask[tuple(d // 2 for d in voxels.shape)] = 1
    return VolumeSample("t_0000", voxels, mask, label, bool(label))


class TestExtractFeatures:
    def test_zero_volume_zero_bias_gives_zero_features(self):
        rng = np.random.default_rng(0)
        params = bb.init_params(bb.BackboneConfig(channels=4), rng=rng)
        for _, bias in params.layers:
            bias.data[:] = 0.0
        volume = make_volume(np.zeros((3, 6, 6)), label=0)
        fm = bb.extract_features(volume, params, [0, 1, 2])
        np.testing.assert_array_equal(fm.values(), np.zeros((3 * 36, 4)))

    def test_single_slice_lattice_size(self):
        params = bb.init_params(bb.BackboneConfig(channels=4), seed=1)
        volume = make_volume(np.random.default_rng(1).uniform(size=(5, 7, 6)))
        fm = bb.extract_features(volume, params, [2])
        assert fm.num_locations == 7 * 6
        assert fm.values().shape == (42, 4)
        assert (fm.depth, fm.height, fm.width) == (1, 7, 6)

    def test_matches_straight_line_conv_relu_reference(self):
        rng = np.random.default_rng(42)
        params = bb.init_params(bb.BackboneConfig(channels=4), rng=rng)
        vox = np.random.default_rng(3).uniform(size=(2, 8, 8)).astype(np.float32)
        volume = make_volume(vox)
        fm = bb.extract_features(volume, params, [0, 1])

        ref_rows = []
        for z in range(2):
            x = vox[z].astype(np.float64)[None]  # [1, H, W]
            for i, (k, b) in enumerate(params.layers):
                x = conv2d_loop_reference(x, k.data, b.data)
                if i != len(params.layers) - 1:
                    x = np.maximum(x, 0.0)
            ref_rows.append(x.transpose(1, 2, 0).reshape(-1, 4))
        ref = np.concatenate(ref_rows, axis=0)
        np.testing.assert_allclose(fm.values(), ref, rtol=1e-12, atol=1e-12)

    def test_slice_order_must_increase(self):
        params = bb.init_params(bb.BackboneConfig(channels=4), seed=1)
        volume = make_volume(np.zeros((4, 10, 10)), label=0)
        with pytest.raises(ShapeMismatchError):
            bb.extract_features(volume, params, [2, 1])
        with pytest.raises(ShapeMismatchError):
            bb.extract_features(volume, params, [1, 1])
        with pytest.raises(ShapeMismatchError):
            bb.extract_features(volume, params, [])
        with pytest.raises(ShapeMismatchError):
            bb.extract_features(volume, params, [0, 4])

    def test_head_channel_mismatch_rejected(self):
        params = bb.init_params(bb.BackboneConfig(channels=4), seed=1)
        params.attention_head = Tensor(np.zeros(5))
        volume = make_volume(np.zeros((2, 6, 6)), label=0)
        with pytest.raises(ShapeMismatchError):
            bb.extract_features(volume, params, [0])

    def test_feature_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        config = bb.BackboneConfig(channels=3, layers=2)
        vox = rng.uniform(size=(2, 5, 5)).astype(np.float32)
        volume = make_volume(vox)
        proj = rng.uniform(-1, 1, size=(50, 3))

        tape = Tape()
        params = bb.init_params(config, seed=5, tape=tape)
        fm = bb.extract_features(volume, params, [0, 1])
        from attnmil import autodiff as ad

        ad.total(ad.mul(fm.features, Tensor(proj))).backward()

        flat_params = bb.init_params(config, seed=5)
        arrays = [t.data for t in flat_params.tensors()]

        def loss_at(*arrs):
            probe = bb.init_params(config, seed=5)
            for t, a in zip(probe.tensors(), arrs):
                t.data[:] = a
            out = bb.extract_features(volume, probe, [0, 1])
            return float((out.values() * proj).sum())

        numeric = finite_difference(loss_at, arrays)
        for t, ref in zip(params.tensors(), numeric):
            got = t.grad if t.grad is not None else np.zeros_like(t.data)
            denom = np.maximum(np.maximum(np.abs(got), np.abs(ref)), 1e-6)
            assert (np.abs(got - ref) / denom).max() < 1e-4


class TestParamsIO:
    def test_round_trip_bitwise(self, tmp_path):
        params = bb.init_params(bb.BackboneConfig(channels=5, layers=2), seed=9)
        path = tmp_path / "m.bin"
        bb.save_params(params, path)
        back = bb.load_params(path)
        assert back.config == params.config
        for (na, ta), (nb, tb) in zip(params.named_tensors(), back.named_tensors()):
            assert na == nb
            assert np.array_equal(ta.data, tb.data)

    def test_save_is_deterministic(self, tmp_path):
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        bb.save_params(bb.init_params(seed=3), a)
        bb.save_params(bb.init_params(seed=3), b)
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.bin"
        bb.save_params(bb.init_params(seed=1), path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"JUNK"
        path.write_bytes(bytes(blob))
        with pytest.raises(BadMagicError):
            bb.load_params(path)

    def test_truncation(self, tmp_path):
        path = tmp_path / "m.bin"
        bb.save_params(bb.init_params(seed=1), path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-10])
        with pytest.raises(TruncatedFileError):
            bb.load_params(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "m.bin"
        bb.save_params(bb.init_params(seed=1), path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(DataFormatError):
            bb.load_params(path)


class TestInit:
    def test_bounds_follow_fan_in(self):
        params = bb.init_params(bb.BackboneConfig(channels=16), seed=0)
        k0 = params.layers[0][0].data
        assert np.abs(k0).max() <= 1.0 / np.sqrt(1 * 9)
        k1 = params.layers[1][0].data
        assert np.abs(k1).max() <= 1.0 / np.sqrt(16 * 9)
        assert np.abs(params.attention_head.data).max() <= 1.0 / 4.0

    def test_seed_determinism(self):
        a = bb.init_params(seed=4)
        b = bb.init_params(seed=4)
        for ta, tb in zip(a.tensors(), b.tensors()):
            assert np.array_equal(ta.data, tb.data)

    def test_zero_grad_populates_buffers(self):
        params = bb.init_params(seed=0)
        params.zero_grad()
        for t in params.tensors():
            assert t.grad is not None and not t.grad.any()
