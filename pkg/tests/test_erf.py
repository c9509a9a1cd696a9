"""Effective receptive field maps, statistics, fragments and export."""

import json

import numpy as np
import pytest

from hyfusion import tensor as T
from hyfusion.erf import (TAGS, ErfMap, build_fragment, build_istl, erf_map, erf_stats, erf_suite, export,
                          fragment_config, read_csv, read_pgm, write_pgm)
from hyfusion.nn import Conv2d, parameter

EXTENT = 24


def conv3x3(seed=0) -> Conv2d:
    conv = Conv2d(2, 3, 3, np.random.default_rng(seed))
    # keep every tap nonzero so the support is exactly the kernel footprint
    conv.weight = parameter(np.random.default_rng(seed).uniform(0.5, 1.0, (3, 2, 3, 3)))
    return conv


class TestErfMap:
    def test_identity_is_delta(self):
        m = erf_map(lambda x: x, (3, 9, 11), samples=4)
        expected = np.zeros((9, 11))
        expected[4, 5] = 1.0
        assert np.array_equal(m.values, expected)
        assert m.center == (4, 5)

    def test_conv_support_is_kernel_footprint(self):
        m = erf_map(conv3x3(), (2, 12, 12), samples=3)
        support = np.argwhere(m.values > 0)
        assert len(support) == 9
        assert support.min(axis=0).tolist() == [5, 5] and support.max(axis=0).tolist() == [7, 7]

    def test_linear_fragment_ignores_inputs(self):
        # a linear map has input-independent gradients, so every sample contributes equally
        a = erf_map(conv3x3(), (2, 8, 8), samples=1, seed=0)
        b = erf_map(conv3x3(), (2, 8, 8), samples=5, seed=9)
        assert np.allclose(a.values, b.values, rtol=0, atol=1e-15)

    def test_normalised(self):
        m = erf_map(build_istl(True), (8, 16, 16), samples=2)
        assert m.values.min() >= 0 and m.values.max() == 1.0

    def test_deterministic(self):
        frag = build_fragment("c")
        a = erf_map(frag, (8, 16, 16), samples=2, seed=3)
        b = erf_map(frag, (8, 16, 16), samples=2, seed=3)
        assert np.array_equal(a.values, b.values)

    def test_rejects_zero_samples(self):
        with pytest.raises(ValueError):
            erf_map(lambda x: x, (1, 4, 4), samples=0)

    def test_rejects_extent_change(self):
        with pytest.raises(ValueError, match="extents"):
            erf_map(lambda x: x[:, :, :2, :2], (1, 4, 4), samples=1)

    @pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
    def test_non_finite_gradient(self):
        with pytest.raises(FloatingPointError):
            erf_map(lambda x: x * np.inf, (1, 4, 4), samples=1)

    def test_metadata_records_probe(self):
        meta = erf_map(lambda x: x, (1, 4, 4), samples=2, seed=1, tag="t").metadata()
        assert meta["tag"] == "t" and meta["samples"] == 2 and meta["seed"] == 1
        assert "N(0,1)" in meta["probe"]


class TestErfStats:
    def test_delta(self):
        v = np.zeros((7, 7))
        v[3, 3] = 1.0
        assert erf_stats(ErfMap(v, (3, 3))) == {"support_area": 1, "radius_p90": 0.0}

    def test_uniform(self):
        assert erf_stats(ErfMap(np.ones((5, 6)), (2, 3)))["support_area"] == 30

    def test_radius_of_ring(self):
        v = np.zeros((9, 9))
        v[4, 4] = 0.05
        v[4, 7] = v[4, 1] = v[1, 4] = v[7, 4] = 1.0
        assert erf_stats(ErfMap(v, (4, 4)))["radius_p90"] == 3.0

    @pytest.mark.parametrize("tau", [0.0, 1.0, -0.5])
    def test_threshold_range(self, tau):
        with pytest.raises(ValueError):
            erf_stats(ErfMap(np.ones((2, 2)), (1, 1)), tau)


class TestFragments:
    def test_unknown_tag(self):
        with pytest.raises(ValueError):
            build_fragment("d")

    @pytest.mark.parametrize("tag", TAGS)
    def test_preserves_extents(self, tag):
        x = T.Tensor(np.random.default_rng(0).standard_normal((1, 8, 16, 16)))
        assert build_fragment(tag)(x).shape == (1, 8, 16, 16)

    def test_weights_are_shared(self):
        a, b, c = (build_fragment(t, seed=4) for t in TAGS)
        for j in range(5):
            assert np.array_equal(b.proj[j].weight.data, c.proj[j].weight.data)
            assert np.array_equal(b.conv[j].weight.data[:, :, 0, 0], c.conv[j].weight.data[:, :, 1, 1])
            assert np.array_equal(a.proj[j].weight.data, c.proj[j].weight.data[:, -a.proj[j].weight.shape[1]:])
        assert [a.dense, b.dense, c.dense] == [False, True, True]

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_exact_supports_nest(self, seed):
        maps = erf_suite(EXTENT, samples=2, seed=seed)
        a, b, c = (maps[t].values > 0 for t in TAGS)
        assert np.all(a <= b) and np.all(b <= c)
        assert a.sum() < c.sum()

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_dense_block_contains_single_layer(self, seed):
        cfg = fragment_config()
        dims = (cfg.channels, EXTENT, EXTENT)
        w_only = erf_map(build_istl(False, cfg, seed), dims, 8, seed).support()
        both = erf_map(build_istl(True, cfg, seed), dims, 8, seed).support()
        block = erf_map(build_fragment("c", cfg, seed), dims, 8, seed).support()
        assert np.all(w_only <= both) and np.all(both <= block)
        assert w_only.sum() < both.sum() < block.sum()

    def test_residual_centre_is_peak(self):
        m = erf_suite(16, samples=2, tags=("c",))["c"]
        assert m.values[m.center] == 1.0


class TestExport:
    def test_files_and_round_trip(self, tmp_path):
        maps = erf_suite(12, samples=1, seed=0)
        stats = export(maps, tmp_path)
        for tag, m in maps.items():
            assert np.array_equal(read_csv(tmp_path / f"erf_{tag}.csv"), m.values)
            img = read_pgm(tmp_path / f"erf_{tag}.pgm")
            assert img.shape == m.values.shape and img.max() == 255
        on_disk = json.loads((tmp_path / "erf_stats.json").read_text())
        assert on_disk == json.loads(json.dumps(stats))
        assert on_disk["a"]["support_area"] == erf_stats(maps["a"])["support_area"]

    def test_pgm_gamma(self, tmp_path):
        write_pgm(ErfMap(np.array([[0.0, 0.25, 1.0]]), (0, 1)), tmp_path / "m.pgm")
        assert read_pgm(tmp_path / "m.pgm").tolist() == [[0, 128, 255]]

    def test_bad_pgm(self, tmp_path):
        (tmp_path / "x.pgm").write_bytes(b"P2\n1 1\n255\n0")
        with pytest.raises(ValueError):
            read_pgm(tmp_path / "x.pgm")
