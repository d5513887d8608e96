"""Trajectory decoder: anchors, truncated corruption, layer refinement,
decoding contracts, and best-mode selection."""

import json

import numpy as np
import pytest

from lindrive.cross_attn import QuerySet, attend
from lindrive.decoder import (
    AnchorSet,
    NoiseSchedule,
    Trajectory,
    cluster_anchors,
    corrupt_anchors,
    decode,
    decoder_layer,
    derive_agent_queries,
    load_anchors,
    random_decoder_params,
    save_anchors,
    select_best,
    wrap_angle,
    DecoderOutput,
)
from lindrive.errors import ConfigError, ContractError, DataError, ShapeError
from lindrive.fusion import BevBundle
from lindrive.harness import gen_trajectory_dataset


def make_bundle(d=8, n=4, seed=0):
    rng = np.random.default_rng(seed)
    return BevBundle(
        bev_tokens=rng.standard_normal((n, d)),
        ego_token=rng.standard_normal(d),
        pos_emb=rng.standard_normal((n + 1, d)),
    )


class TestTrajectory:
    def test_heading_wraps_on_construction(self):
        t = Trajectory(np.array([[0.0, 0.0, 4.0], [1.0, 0.0, -4.0]]))
        assert np.all(t.waypoints[:, 2] > -np.pi)
        assert np.all(t.waypoints[:, 2] <= np.pi)

    def test_wrap_angle_range(self):
        th = np.linspace(-10, 10, 2001)
        w = wrap_angle(th)
        assert np.all((w > -np.pi) & (w <= np.pi))
        np.testing.assert_allclose(np.cos(w), np.cos(th), atol=1e-12)
        np.testing.assert_allclose(np.sin(w), np.sin(th), atol=1e-12)
        assert wrap_angle(np.pi) == np.pi
        assert wrap_angle(-np.pi) == np.pi

    def test_non_finite_rejected(self):
        with pytest.raises(DataError):
            Trajectory(np.array([[0.0, np.nan, 0.0]]))

    def test_json_round_trip(self):
        t = Trajectory(np.array([[1.0, 2.0, 0.5], [2.0, 3.0, 0.25]]))
        back = Trajectory.from_json(json.loads(json.dumps(t.to_json())))
        np.testing.assert_allclose(back.waypoints, t.waypoints)
        assert back.dt == t.dt


class TestNoiseSchedule:
    def test_default_invariants(self):
        s = NoiseSchedule.linear()
        assert s.total_steps == 1000 and s.truncate_at == 50
        assert np.all((s.betas > 0) & (s.betas < 1))
        assert np.all(np.diff(s.betas) >= 0)
        assert s.alpha_bars[0] == 1.0
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert np.all((s.alpha_bars > 0) & (s.alpha_bars <= 1))

    def test_bad_schedules_rejected(self):
        with pytest.raises(ConfigError):
            NoiseSchedule(betas=np.array([0.2, 0.1]))
        with pytest.raises(ConfigError):
            NoiseSchedule(betas=np.array([0.0, 0.1]))
        with pytest.raises(ConfigError):
            NoiseSchedule(betas=np.array([0.1, 0.2]), truncate_at=5)


class TestClusterAnchors:
    def test_dataset_equals_k(self):
        data = gen_trajectory_dataset(5, seed=1)
        anchors = cluster_anchors(data, 5, seed=2)
        got = sorted(anchors.stacked().reshape(5, -1).sum(axis=1))
        want = sorted(data.reshape(5, -1).sum(axis=1))
        np.testing.assert_allclose(got, want, rtol=1e-9)

    def test_single_centroid_is_mean(self):
        data = gen_trajectory_dataset(20, seed=3)
        anchors = cluster_anchors(data, 1, seed=4)
        np.testing.assert_allclose(
            anchors.stacked()[0], data.mean(axis=0), rtol=1e-9
        )

    def test_two_bundles_recover_means(self):
        # offsets only on x, y; headings stay inside (-pi, pi] so the
        # Trajectory wrap leaves the centroids untouched
        rng = np.random.default_rng(5)
        a = rng.standard_normal((40, 8, 3)) * 0.01
        b = rng.standard_normal((40, 8, 3)) * 0.01
        a[:, :, :2] += 10.0
        b[:, :, :2] -= 10.0
        data = np.concatenate([a, b])
        anchors = cluster_anchors(data, 2, seed=6).stacked()
        means = sorted([a.mean(axis=0), b.mean(axis=0)], key=lambda m: m[0, 0])
        got = sorted(list(anchors), key=lambda m: m[0, 0])
        np.testing.assert_allclose(got[0], means[0], atol=1e-6)
        np.testing.assert_allclose(got[1], means[1], atol=1e-6)

    def test_insufficient_data(self):
        with pytest.raises(DataError):
            cluster_anchors(gen_trajectory_dataset(3, seed=7), 5, seed=8)

    def test_anchor_file_round_trip(self, tmp_path):
        anchors = cluster_anchors(gen_trajectory_dataset(10, seed=9), 4, seed=10)
        save_anchors(tmp_path / "anchors.json", anchors)
        back = load_anchors(tmp_path / "anchors.json")
        np.testing.assert_allclose(back.stacked(), anchors.stacked())


class TestCorruptAnchors:
    def make_anchors(self, k=4, seed=11):
        return cluster_anchors(gen_trajectory_dataset(3 * k, seed=seed), k, seed=seed)

    def test_step_zero_identity(self):
        anchors = self.make_anchors()
        out = corrupt_anchors(anchors, NoiseSchedule.linear(), 0, seed=12)
        np.testing.assert_array_equal(out, anchors.stacked())

    def test_truncation_boundary(self):
        anchors = self.make_anchors()
        sched = NoiseSchedule.linear()
        corrupt_anchors(anchors, sched, 50, seed=13)  # accepted
        with pytest.raises(ContractError):
            corrupt_anchors(anchors, sched, 51, seed=13)

    def test_noise_variance_matches_schedule(self):
        # var(x_step - sqrt(abar) x0) ~ 1 - abar over many seeds, within 5%
        anchors = AnchorSet([
            Trajectory(np.zeros((2, 3))),
            Trajectory(np.ones((2, 3))),
        ])
        sched = NoiseSchedule.linear()
        step = 50
        abar = sched.alpha_bars[step]
        x0 = anchors.stacked()
        resids = []
        for seed in range(10_000):
            x = corrupt_anchors(anchors, sched, step, seed=seed)
            resids.append(x - np.sqrt(abar) * x0)
        var = float(np.var(np.stack(resids)))
        assert abs(var - (1.0 - abar)) < 0.05 * (1.0 - abar)

    def test_deterministic_per_seed(self):
        anchors = self.make_anchors()
        sched = NoiseSchedule.linear()
        a = corrupt_anchors(anchors, sched, 25, seed=14)
        b = corrupt_anchors(anchors, sched, 25, seed=14)
        np.testing.assert_array_equal(a, b)


class TestDecoderLayer:
    def test_zero_delta_projection_identity(self):
        params = random_decoder_params(8, n_layers=1, seed=15)
        lp = params.layers[0]
        lp.W_delta[...] = 0.0
        lp.b_delta[...] = 0.0
        noisy = np.random.default_rng(16).standard_normal((3, 8, 3))
        agent_q = QuerySet(np.random.default_rng(17).standard_normal((2, 8)))
        refined, feats = decoder_layer(noisy, make_bundle(), agent_q, lp)
        np.testing.assert_array_equal(refined, noisy)
        assert feats.shape == (3, 8)

    def test_mode_count_preserved(self):
        params = random_decoder_params(8, n_layers=1, seed=18)
        noisy = np.random.default_rng(19).standard_normal((5, 8, 3))
        agent_q = QuerySet(np.random.default_rng(20).standard_normal((2, 8)))
        refined, feats = decoder_layer(noisy, make_bundle(seed=1), agent_q, params.layers[0])
        assert refined.shape == (5, 8, 3)
        assert feats.shape == (5, 8)

    def test_compositional_oracle(self):
        # re-compose the layer from its pieces: embed, two cross-attention
        # passes, feed-forward, delta projection
        params = random_decoder_params(8, n_layers=1, seed=21)
        lp = params.layers[0]
        bundle = make_bundle(seed=2)
        noisy = np.random.default_rng(22).standard_normal((2, 8, 3))
        agent_q = QuerySet(np.random.default_rng(23).standard_normal((2, 8)))

        flat = noisy.reshape(2, -1)
        x = flat @ lp.W_embed + lp.b_embed
        x = attend(bundle.tokens(), QuerySet(x), lp.bev_attn).tokens
        x = attend(agent_q.tokens, QuerySet(x), lp.agent_attn).tokens
        x = x + np.maximum(x @ lp.W_ff1, 0.0) @ lp.W_ff2
        want = (flat + x @ lp.W_delta + lp.b_delta).reshape(2, 8, 3)

        refined, feats = decoder_layer(noisy, bundle, agent_q, lp)
        np.testing.assert_allclose(refined, want, rtol=1e-12)
        np.testing.assert_allclose(feats, x, rtol=1e-12)


class TestDecode:
    def setup_method(self):
        self.params = random_decoder_params(8, n_layers=2, seed=24)
        self.bundle = make_bundle(seed=3)
        self.agent_q = derive_agent_queries(self.bundle, self.params)
        data = gen_trajectory_dataset(30, seed=25)
        self.anchors = cluster_anchors(data, 6, seed=26)

    def test_output_contracts(self):
        out = decode(self.anchors, self.bundle, self.agent_q, self.params, seed=27)
        assert out.n_modes == 6
        for traj in out.trajectories:
            assert traj.n == 8
            assert np.all((traj.waypoints[:, 2] > -np.pi) & (traj.waypoints[:, 2] <= np.pi))
        assert np.all((out.on_road >= 0) & (out.on_road <= 1))
        assert np.all((out.on_route >= 0) & (out.on_route <= 1))
        assert np.isfinite(out.confidence).all()
        assert out.agent_futures.shape == (8, 8, 2)

    def test_deterministic_under_seed(self):
        a = decode(self.anchors, self.bundle, self.agent_q, self.params, seed=28)
        b = decode(self.anchors, self.bundle, self.agent_q, self.params, seed=28)
        for ta, tb in zip(a.trajectories, b.trajectories):
            np.testing.assert_array_equal(ta.waypoints, tb.waypoints)
        np.testing.assert_array_equal(a.confidence, b.confidence)

    def test_mode_subsampling(self):
        out = decode(
            self.anchors, self.bundle, self.agent_q, self.params, seed=29, k_modes=3
        )
        assert out.n_modes == 3

    def test_bad_steps_rejected(self):
        with pytest.raises(ConfigError):
            decode(self.anchors, self.bundle, self.agent_q, self.params, steps=0)

    def test_stochastic_flag_changes_path(self):
        det = decode(self.anchors, self.bundle, self.agent_q, self.params, seed=30)
        sto = decode(
            self.anchors, self.bundle, self.agent_q, self.params, seed=30,
            stochastic=True,
        )
        assert not np.array_equal(
            det.trajectories[0].waypoints, sto.trajectories[0].waypoints
        )

    def test_agent_queries_shape(self):
        assert self.agent_q.m == 8
        assert self.agent_q.d == 8


class TestSelectBest:
    def make_output(self, confidence):
        n = len(confidence)
        trajs = [Trajectory(np.full((2, 3), float(i))) for i in range(n)]
        return DecoderOutput(
            trajectories=trajs,
            confidence=np.asarray(confidence, dtype=np.float64),
            on_road=np.zeros(n),
            on_route=np.zeros(n),
            agent_futures=np.zeros((1, 2, 2)),
        )

    def test_argmax(self):
        _, idx = select_best(self.make_output([0.2, 0.9, 0.5]))
        assert idx == 1

    def test_tie_breaks_low(self):
        _, idx = select_best(self.make_output([0.5, 0.5]))
        assert idx == 0

    def test_invariant_under_monotone_transforms(self):
        rng = np.random.default_rng(31)
        for _ in range(200):
            conf = rng.standard_normal(rng.integers(1, 12))
            _, idx = select_best(self.make_output(conf))
            for transform in (np.tanh, lambda c: 3.0 * c + 7.0, np.exp):
                _, idx2 = select_best(self.make_output(transform(conf)))
                assert idx2 == idx

    def test_empty_rejected(self):
        out = self.make_output([0.5])
        out.trajectories = []
        with pytest.raises(ContractError):
            select_best(out)
