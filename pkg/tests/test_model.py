"""Trunk geometry, aggregation heads, embeddings, and checkpoint I/O."""

import numpy as np
import pytest

from spkvlad import audio, model as m, tensor as t
from spkvlad.checks import TINY_MODEL, TINY_TRUNK, expected_time_chain, shape_check
from spkvlad.model import ModelConfig, TrunkConfig, VladParams
from spkvlad.tensor import Tensor


def naive_vlad(feats, w, b, c, k):
    """Triple-loop transcription of the aggregation formula, float64.

    assignment(t, j) = softmax over all rows of (w x_t + b);
    V[kk, j] = sum_t assignment(t, kk) * (x_t[j] - c[kk, j]) for real rows only,
    then per-row L2, flatten, global L2.
    """
    tt, d = feats.shape
    total = w.shape[0]
    v = np.zeros((k, d))
    for ti in range(tt):
        logits = np.array([w[kk] @ feats[ti] + b[kk] for kk in range(total)])
        e = np.exp(logits - logits.max())
        a = e / e.sum()
        for kk in range(k):
            for j in range(d):
                v[kk, j] += a[kk] * (feats[ti, j] - c[kk, j])
    for kk in range(k):
        norm = np.linalg.norm(v[kk])
        if norm > 1e-12:
            v[kk] /= norm
    flat = v.reshape(-1)
    norm = np.linalg.norm(flat)
    return flat / norm if norm > 1e-12 else flat


def tiny_vlad(kk, gg, dd, seed=0):
    return VladParams(kk, gg, dd, rng=np.random.default_rng(seed), dtype=np.float64)


class TestTrunkShapes:
    def test_table_extents_for_all_input_lengths(self):
        ok, lines = shape_check(frame_counts=(64, 128, 256))
        assert ok, "\n".join(lines)

    def test_250_frames_gives_8_descriptors(self):
        # time chain 250 -> 125 -> 63 -> 32 -> 16 -> 8
        chain = expected_time_chain(250)
        assert chain == {"stem": 250, "pool1": 125, "stage1": 125, "stage2": 63,
                         "stage3": 32, "stage4": 16, "pool2": 8, "proj": 8}
        ok, lines = shape_check(frame_counts=(250,))
        assert ok, "\n".join(lines)

    def test_input_too_short_raises(self):
        trunk = m.build_thin_resnet(TINY_TRUNK, np.random.default_rng(0), np.float32)
        x = Tensor(np.zeros((1, 257, 31, 1), dtype=np.float32))
        with pytest.raises(ValueError, match="needs >= 32"):
            trunk(x, training=False)

    def test_parameter_count_window(self):
        trunk = m.build_thin_resnet(TrunkConfig(), np.random.default_rng(0), np.float32)
        core = m.trunk_parameter_count(trunk)
        assert 2_500_000 <= core <= 4_500_000
        full = m.trunk_parameter_count(trunk, include_frame_projection=True)
        assert full > core

    def test_width_multiplier_scales_channels(self):
        cfg = TrunkConfig(width_multiplier=0.25)
        trunk = m.build_thin_resnet(cfg, np.random.default_rng(0), np.float32)
        assert trunk.frame_width == 128
        assert trunk.stem.conv.weight.shape == (7, 7, 1, 16)


class TestFrameFeatures:
    def _model(self, seed=0):
        return m.build_model(TINY_MODEL, seed=seed)

    def test_descriptor_counts_scale_with_length(self):
        model = self._model()
        rng = np.random.default_rng(1)
        for frames, want in ((256, 8), (512, 16)):
            spec = audio.Spectrogram(rng.standard_normal((257, frames)).astype(np.float32),
                                     normalized=True)
            feats = m.frame_features(model, spec)
            assert feats.shape == (want, model.trunk.frame_width)

    def test_last_frame_change_is_temporally_local(self):
        model = self._model()
        rng = np.random.default_rng(2)
        base = rng.standard_normal((257, 512)).astype(np.float32)
        bumped = base.copy()
        bumped[:, -1] += 1.0
        fa = m.frame_features(model, audio.Spectrogram(base, normalized=True))
        fb = m.frame_features(model, audio.Spectrogram(bumped, normalized=True))
        diff = np.abs(fa - fb).max(axis=1)
        # Receptive field along time is ~156 input frames (~5 descriptors);
        # batch-norm leaks nothing in eval mode, so the head must be untouched.
        assert np.all(diff[:8] == 0)
        assert diff[-1] > 0


class TestVladHeads:
    def test_single_cluster_is_plain_residual_sum(self):
        rng = np.random.default_rng(3)
        feats = rng.standard_normal((4, 3))
        params = tiny_vlad(1, 0, 3)
        out = m.netvlad_aggregate(Tensor(feats), params, intra_norm=False)
        expect = (feats - params.c.data[0]).sum(axis=0)
        expect /= np.linalg.norm(expect)
        np.testing.assert_allclose(out.data, expect, atol=1e-10)

    def test_residual_zero_when_frames_sit_on_centre(self):
        params = tiny_vlad(2, 0, 3, seed=4)
        centre = params.c.data[0]
        feats = np.tile(centre, (5, 1))
        out = m.netvlad_aggregate(Tensor(feats), params, intra_norm=False)
        np.testing.assert_allclose(out.data[:3], 0.0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_naive_triple_loop(self, seed):
        rng = np.random.default_rng(seed)
        tt, kk, dd = rng.integers(1, 9), rng.integers(1, 5), rng.integers(2, 9)
        feats = rng.standard_normal((tt, dd))
        params = tiny_vlad(int(kk), 0, int(dd), seed=seed + 100)
        ours = m.netvlad_aggregate(Tensor(feats), params).data
        oracle = naive_vlad(feats, params.w.data, params.b.data, params.c.data, int(kk))
        np.testing.assert_allclose(ours, oracle, atol=1e-6)

    def test_ghost_with_zero_ghosts_is_bitwise_netvlad(self):
        rng = np.random.default_rng(6)
        feats = Tensor(rng.standard_normal((5, 4)))
        params = tiny_vlad(3, 0, 4, seed=7)
        a = m.netvlad_aggregate(feats, params).data
        b = m.ghostvlad_aggregate(feats, params).data
        np.testing.assert_array_equal(a, b)

    def test_ghost_assignment_over_all_clusters_matches_naive(self):
        rng = np.random.default_rng(8)
        feats = rng.standard_normal((6, 4))
        params = tiny_vlad(3, 2, 4, seed=9)
        ours = m.ghostvlad_aggregate(Tensor(feats), params).data
        oracle = naive_vlad(feats, params.w.data, params.b.data, params.c.data, 3)
        np.testing.assert_allclose(ours, oracle, atol=1e-6)
        assert ours.shape == (12,)

    def test_output_length_is_k_times_d_for_k8_g2(self):
        params = VladParams(8, 2, 512, rng=np.random.default_rng(10), dtype=np.float32)
        feats = Tensor(np.random.default_rng(11).standard_normal((8, 512)).astype(np.float32))
        out = m.ghostvlad_aggregate(feats, params)
        assert out.shape == (8 * 512,)

    def test_ghost_heavy_frame_contributes_little_real_mass(self):
        # Point the frame straight at a ghost row with a big bias.
        dd = 4
        params = tiny_vlad(2, 1, dd, seed=12)
        params.w.data[:] = 0.0
        params.b.data[:] = np.array([0.0, 0.0, 10.0])   # ghost row dominates
        frame = np.ones((1, dd))
        logits = params.w.data @ frame[0] + params.b.data
        e = np.exp(logits - logits.max())
        assign = e / e.sum()
        assert assign[2] >= 0.99
        assert assign[:2].sum() <= 0.01

    def test_netvlad_rejects_ghost_params(self):
        params = tiny_vlad(2, 1, 3, seed=13)
        with pytest.raises(ValueError, match="G == 0"):
            m.netvlad_aggregate(Tensor(np.zeros((2, 3))), params)

    @pytest.mark.parametrize("head", ["tap", "netvlad", "ghostvlad"])
    def test_permutation_invariance(self, head):
        rng = np.random.default_rng(14)
        feats = rng.standard_normal((7, 5))
        params = tiny_vlad(3, 2 if head == "ghostvlad" else 0, 5, seed=15)

        def agg(f):
            ten = Tensor(f)
            if head == "tap":
                return m.tap_aggregate(ten).data
            if head == "netvlad":
                return m.netvlad_aggregate(ten, params).data
            return m.ghostvlad_aggregate(ten, params).data

        base = agg(feats)
        for _ in range(20):
            perm = rng.permutation(7)
            np.testing.assert_allclose(agg(feats[perm]), base, atol=1e-6)

    def test_assignment_rows_sum_to_one(self):
        rng = np.random.default_rng(16)
        params = tiny_vlad(3, 2, 4, seed=17)
        feats = rng.standard_normal((10, 4))
        logits = feats @ params.w.data.T + params.b.data
        assign = t.softmax_rows(Tensor(logits)).data
        np.testing.assert_allclose(assign.sum(axis=1), 1.0, atol=1e-6)


class TestTap:
    def test_single_frame_identity(self):
        f = np.array([[1.0, -2.0, 3.0]])
        np.testing.assert_allclose(m.tap_aggregate(Tensor(f)).data, f[0])

    def test_opposite_frames_cancel(self):
        v = np.array([1.0, 2.0, 3.0])
        out = m.tap_aggregate(Tensor(np.stack([v, -v])))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_mean_matches_direct_recomputation(self):
        rng = np.random.default_rng(18)
        f = rng.standard_normal((4, 3))
        np.testing.assert_allclose(m.tap_aggregate(Tensor(f)).data, f.sum(axis=0) / 4,
                                   atol=1e-7)

    def test_duplication_invariance_distinguishes_tap_from_raw_vlad(self):
        # Doubling the descriptor sequence fixes the TAP mean exactly, while
        # the raw VLAD matrix doubles (it is a sum over frames); only the
        # final L2 normalization hides that factor.
        rng = np.random.default_rng(19)
        f = rng.standard_normal((6, 4))
        doubled = np.vstack([f, f])
        tap_a = m.tap_aggregate(Tensor(f)).data
        tap_b = m.tap_aggregate(Tensor(doubled)).data
        np.testing.assert_allclose(tap_a, tap_b, atol=1e-12)

        params = tiny_vlad(2, 0, 4, seed=20)

        def raw_vlad(feats):
            logits = feats @ params.w.data.T + params.b.data
            e = np.exp(logits - logits.max(axis=1, keepdims=True))
            a = e / e.sum(axis=1, keepdims=True)
            return a.T @ feats - a.sum(axis=0)[:, None] * params.c.data

        np.testing.assert_allclose(raw_vlad(doubled), 2.0 * raw_vlad(f), atol=1e-9)
        # After normalization both heads are duplication-invariant.
        norm_a = m.netvlad_aggregate(Tensor(f), params).data
        norm_b = m.netvlad_aggregate(Tensor(doubled), params).data
        np.testing.assert_allclose(norm_a, norm_b, atol=1e-9)


class TestEmbed:
    def _model(self):
        return m.build_model(TINY_MODEL, seed=21)

    def _spec(self, frames=128, seed=22):
        rng = np.random.default_rng(seed)
        return audio.Spectrogram(rng.standard_normal((257, frames)).astype(np.float32),
                                 normalized=True)

    def test_unit_norm_output(self):
        emb = self._model().embed(self._spec())
        assert emb.shape == (TINY_MODEL.embed_dim,)
        assert np.linalg.norm(emb) == pytest.approx(1.0, abs=1e-5)

    def test_eval_mode_is_bit_deterministic(self):
        model = self._model()
        spec = self._spec()
        np.testing.assert_array_equal(model.embed(spec), model.embed(spec))

    def test_rejects_unnormalized_spectrogram(self):
        spec = audio.Spectrogram(np.abs(np.random.default_rng(0)
                                        .standard_normal((257, 64))).astype(np.float32))
        with pytest.raises(ValueError, match="normalized"):
            self._model().embed(spec)


class TestCheckpoint:
    def _model(self, cfg=TINY_MODEL, seed=23):
        return m.build_model(cfg, seed=seed)

    def test_round_trip_is_bitwise(self, tmp_path):
        model = self._model()
        path = tmp_path / "m.ckpt"
        m.save_checkpoint(model, path, step=7)
        loaded, opt, step = m.load_checkpoint(path)
        assert step == 7 and opt is None
        assert loaded.cfg == model.cfg
        for name, p in model.named_params().items():
            np.testing.assert_array_equal(loaded.named_params()[name].data, p.data)
        for name, buf in model.named_buffers().items():
            np.testing.assert_array_equal(loaded.named_buffers()[name], buf)

    def test_optimizer_state_round_trip(self, tmp_path):
        from spkvlad.train import AdamState
        model = self._model()
        state = AdamState(model.named_params())
        state.step = 42
        for mm, vv in state.moments.values():
            mm += 0.5
            vv += 0.25
        path = tmp_path / "opt.ckpt"
        m.save_checkpoint(model, path, optimizer_state=state, step=100)
        _, opt, step = m.load_checkpoint(path)
        assert step == 100 and opt["step"] == 42
        for name in model.named_params():
            np.testing.assert_array_equal(opt["moments"][name][0], state.moments[name][0])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ValueError, match="bad magic"):
            m.load_checkpoint(path)

    def test_truncated_file(self, tmp_path):
        model = self._model()
        path = tmp_path / "t.ckpt"
        m.save_checkpoint(model, path)
        data = path.read_bytes()
        path.write_bytes(data[:len(data) - 64])
        with pytest.raises(ValueError, match="truncated"):
            m.load_checkpoint(path)

    def test_cluster_count_mismatch_names_tensor(self, tmp_path):
        model = self._model()
        path = tmp_path / "k.ckpt"
        m.save_checkpoint(model, path)
        bigger = ModelConfig(trunk=TINY_TRUNK, aggregation="ghostvlad", clusters=4,
                             ghost_clusters=1, embed_dim=4, num_classes=3,
                             classifier="cosine", dtype="float64")
        with pytest.raises(ValueError, match=r"head\.vlad\.w"):
            m.load_checkpoint(path, config=bigger)

    def test_nan_parameter_refuses_to_save(self, tmp_path):
        model = self._model()
        model.fc.weight.data[0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            m.save_checkpoint(model, tmp_path / "nan.ckpt")
