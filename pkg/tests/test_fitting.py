import numpy as np
import pytest
from helpers import box_sample, small_world, smooth_trajectory

from articulate.ema import EmaRecording
from articulate.errors import DataError, ShapeError, UsageError
from articulate.fitting import (
    Correspondence,
    FitOptions,
    PoseTrajectory,
    estimate_correspondence,
    estimate_speaker,
    eval_energy,
    fit_frame,
    fit_sequence,
    load_pose_trajectory,
    save_pose_trajectory,
    virtual_ema,
)
from articulate.model import ModelParams, generate_features


def coil_list(model, corr, s, p):
    """(vertex, target) pairs with targets at the generated vertex positions."""
    feats = generate_features(model, ModelParams(s, p)).reshape(-1, 3)
    return [(v, feats[v]) for v in corr.vertices]


def planted_recording(model, corr, s, trajectory, frame_rate=200.0, utt="u",
                      jitter=0.0, rng=None):
    contracted = np.einsum("qrv,q->rv", model.core.array, s)
    feats = model.mean + trajectory @ contracted
    verts = feats.reshape(len(trajectory), -1, 3)
    channels = {}
    for label, vertex in corr.pairs:
        chan = verts[:, vertex, :]
        if jitter > 0:
            chan = chan + rng.normal(0.0, jitter, size=chan.shape)
        channels[label] = chan
    return EmaRecording(utterance=utt, frame_rate=frame_rate, channels=channels)


class TestEvalEnergy:
    def test_zero_residual_at_planted_targets(self):
        model, corr, rng = small_world(0)
        s = box_sample(rng, model.speaker_stats, 3.0)
        p = box_sample(rng, model.pose_stats, 3.0)
        coils = coil_list(model, corr, s, p)
        value, gs, gp = eval_energy(model, coils, s, p)
        assert value == pytest.approx(0.0, abs=1e-18)
        assert np.allclose(gs, 0.0, atol=1e-9)
        assert np.allclose(gp, 0.0, atol=1e-9)

    def test_temporal_terms_vanish_at_prev(self):
        model, corr, rng = small_world(1)
        s = box_sample(rng, model.speaker_stats, 3.0)
        p = box_sample(rng, model.pose_stats, 3.0)
        coils = coil_list(model, corr, s, p)
        v0, _, _ = eval_energy(model, coils, s, p, prev=None, alpha=5.0, beta=7.0)
        v1, _, _ = eval_energy(model, coils, s, p, prev=ModelParams(s, p),
                               alpha=5.0, beta=7.0)
        assert v0 == pytest.approx(v1)

    def test_energy_nonnegative(self):
        model, corr, rng = small_world(2)
        for _ in range(10):
            s = box_sample(rng, model.speaker_stats, 3.0)
            p = box_sample(rng, model.pose_stats, 3.0)
            coils = [(int(v), rng.uniform(-30, 30, 3)) for v in corr.vertices]
            prev = ModelParams(box_sample(rng, model.speaker_stats, 3.0),
                               box_sample(rng, model.pose_stats, 3.0))
            value, _, _ = eval_energy(model, coils, s, p, prev, 2.0, 3.0)
            assert value >= 0.0

    def test_gradients_match_central_differences(self):
        # includes configurations sitting exactly on the box boundary
        model, corr, rng = small_world(3)
        ms, npd = model.speaker_dim, model.pose_dim
        h = 1e-6
        worst = 0.0
        for trial in range(100):
            s = box_sample(rng, model.speaker_stats, 3.0, margin=1.0)
            p = box_sample(rng, model.pose_stats, 3.0, margin=1.0)
            if trial % 3 == 0:  # push some coordinates onto the bounds
                lo_s, hi_s = model.speaker_stats.box(3.0)
                s[int(rng.integers(ms))] = hi_s[int(rng.integers(ms))]
                lo_p, _ = model.pose_stats.box(3.0)
                p[int(rng.integers(npd))] = lo_p[int(rng.integers(npd))]
            coils = [(int(v), rng.uniform(-30, 30, 3)) for v in corr.vertices]
            prev = None
            alpha = beta = 0.0
            if trial % 2 == 0:
                prev = ModelParams(box_sample(rng, model.speaker_stats, 3.0),
                                   box_sample(rng, model.pose_stats, 3.0))
                alpha, beta = float(rng.uniform(0, 30)), float(rng.uniform(0, 30))
            _, gs, gp = eval_energy(model, coils, s, p, prev, alpha, beta)
            for grad, vec, which in ((gs, s, "s"), (gp, p, "p")):
                fd = np.empty_like(vec)
                for k in range(vec.size):
                    plus, minus = vec.copy(), vec.copy()
                    plus[k] += h
                    minus[k] -= h
                    if which == "s":
                        fp, _, _ = eval_energy(model, coils, plus, p, prev, alpha, beta)
                        fm, _, _ = eval_energy(model, coils, minus, p, prev, alpha, beta)
                    else:
                        fp, _, _ = eval_energy(model, coils, s, plus, prev, alpha, beta)
                        fm, _, _ = eval_energy(model, coils, s, minus, prev, alpha, beta)
                    fd[k] = (fp - fm) / (2 * h)
                scale = max(1.0, np.abs(fd).max(), np.abs(grad).max())
                worst = max(worst, np.abs(grad - fd).max() / scale)
        assert worst <= 1e-5

    def test_shape_mismatch(self):
        model, corr, rng = small_world(4)
        with pytest.raises(ShapeError):
            eval_energy(model, coil_list(model, corr,
                                         model.speaker_stats.mean,
                                         model.pose_stats.mean),
                        np.zeros(model.speaker_dim + 2),
                        np.zeros(model.pose_dim))


class TestFitFrame:
    def test_planted_target_oracle(self):
        hits = 0
        trials = 20
        for seed in range(trials):
            model, corr, rng = small_world(5)
            rng = np.random.default_rng(1000 + seed)
            s = box_sample(rng, model.speaker_stats, 3.0)
            p = box_sample(rng, model.pose_stats, 3.0)
            targets = np.array([t for _, t in coil_list(model, corr, s, p)])
            params, diag = fit_frame(model, targets, corr, FitOptions(c=3.0))
            if diag["e_data"] <= 1e-6:
                hits += 1
        assert hits >= int(0.95 * trials)

    def test_tiny_box_pins_to_means(self):
        model, corr, rng = small_world(6)
        targets = rng.uniform(-20, 20, size=(len(corr.pairs), 3))
        params, _ = fit_frame(model, targets, corr, FitOptions(c=1e-9))
        assert np.allclose(params.s, model.speaker_stats.mean, atol=1e-9)
        assert np.allclose(params.p, model.pose_stats.mean, atol=1e-9)

    def test_fix_speaker_echoed_bitwise(self):
        model, corr, rng = small_world(7)
        s_fixed = box_sample(rng, model.speaker_stats, 2.0)
        targets = rng.uniform(-20, 20, size=(len(corr.pairs), 3))
        params, _ = fit_frame(model, targets, corr,
                              FitOptions(c=3.0, fix_speaker=s_fixed))
        assert np.array_equal(params.s, s_fixed)

    def test_box_constraints_hold_exactly(self):
        model, corr, rng = small_world(8)
        lo_s, hi_s = model.speaker_stats.box(0.5)
        lo_p, hi_p = model.pose_stats.box(0.5)
        for _ in range(5):
            targets = rng.uniform(-40, 40, size=(len(corr.pairs), 3))
            params, _ = fit_frame(model, targets, corr, FitOptions(c=0.5))
            assert np.all(params.s >= lo_s) and np.all(params.s <= hi_s)
            assert np.all(params.p >= lo_p) and np.all(params.p <= hi_p)


class TestFitSequence:
    def test_constant_input_constant_params(self):
        model, corr, rng = small_world(9)
        s = box_sample(rng, model.speaker_stats, 2.0)
        p = box_sample(rng, model.pose_stats, 2.0)
        traj = np.tile(p, (8, 1))
        rec = planted_recording(model, corr, s, traj)
        result = fit_sequence(model, rec, corr, FitOptions(alpha=20, beta=10, c=3))
        for t in range(2, 8):
            assert np.abs(result.p[t] - result.p[1]).max() <= 1e-5
            assert np.abs(result.s[t] - result.s[1]).max() <= 1e-5

    def test_smoothness_monotone_in_beta(self):
        model, corr, _ = small_world(10)
        for seed in range(3):
            rng = np.random.default_rng(2000 + seed)
            s = box_sample(rng, model.speaker_stats, 1.0)
            traj = smooth_trajectory(rng, model.pose_stats, 30)
            rec = planted_recording(model, corr, s, traj, jitter=0.3, rng=rng)
            rough = fit_sequence(model, rec, corr, FitOptions(alpha=0, beta=0, c=3))
            smooth = fit_sequence(model, rec, corr, FitOptions(alpha=0, beta=10, c=3))
            def wiggle(res):
                return float((np.diff(res.p, axis=0) ** 2).sum())
            assert wiggle(smooth) < wiggle(rough)

    def test_alpha_reduces_speaker_drift(self):
        model, corr, _ = small_world(11)
        rng = np.random.default_rng(3000)
        s = box_sample(rng, model.speaker_stats, 1.0)
        traj = smooth_trajectory(rng, model.pose_stats, 30)
        rec = planted_recording(model, corr, s, traj, jitter=0.3, rng=rng)
        free = fit_sequence(model, rec, corr, FitOptions(alpha=0, beta=0, c=3))
        tied = fit_sequence(model, rec, corr, FitOptions(alpha=20, beta=10, c=3))
        def max_step(res):
            return float(np.abs(np.diff(res.s, axis=0)).max())
        assert max_step(tied) <= max_step(free) + 1e-12

    def test_uncoupled_fit_is_permutation_invariant(self):
        model, corr, _ = small_world(12)
        rng = np.random.default_rng(4000)
        s = box_sample(rng, model.speaker_stats, 1.0)
        traj = smooth_trajectory(rng, model.pose_stats, 12)
        rec = planted_recording(model, corr, s, traj, jitter=0.2, rng=rng)
        result = fit_sequence(model, rec, corr, FitOptions(alpha=0, beta=0, c=3))
        perm = np.random.default_rng(1).permutation(12)
        rec_perm = EmaRecording(
            "perm", rec.frame_rate,
            {l: rec.channels[l][perm] for l in rec.channels},
        )
        result_perm = fit_sequence(model, rec_perm, corr,
                                   FitOptions(alpha=0, beta=0, c=3))
        assert np.array_equal(result_perm.p, result.p[perm])
        assert np.array_equal(result_perm.s, result.s[perm])

    def test_missing_values_rejected(self):
        model, corr, rng = small_world(13)
        chan = {label: np.full((4, 3), np.nan) for label in corr.labels}
        rec = EmaRecording("u", 200.0, chan)
        with pytest.raises(DataError):
            fit_sequence(model, rec, corr, FitOptions())

    def test_energies_nonnegative_and_recorded(self):
        model, corr, rng = small_world(14)
        s = box_sample(rng, model.speaker_stats, 1.0)
        traj = smooth_trajectory(rng, model.pose_stats, 6)
        rec = planted_recording(model, corr, s, traj)
        result = fit_sequence(model, rec, corr, FitOptions(alpha=2, beta=2, c=3))
        assert result.energies.shape == (6, 3)
        assert (result.energies >= 0).all()
        assert result.energies[0, 1] == 0.0  # no previous frame
        assert result.energies[0, 2] == 0.0


class TestCorrespondence:
    def test_distinct_vertices_enforced(self):
        with pytest.raises(DataError):
            Correspondence(pairs=(("T1", 3), ("T2", 3)), mean_distance_mm=0.0)

    def test_targets_at_mean_mesh_vertices(self):
        model, corr, rng = small_world(15)
        mean_params = model.mean_params()
        feats = generate_features(model, mean_params).reshape(-1, 3)
        channels = {
            label: np.tile(feats[vertex], (5, 1)) for label, vertex in corr.pairs
        }
        rec = EmaRecording("u", 200.0, channels)
        found = estimate_correspondence(model, rec, corr.labels,
                                        FitOptions(c=0.25, seed=3))
        assert found.mean_distance_mm <= 1e-3
        assert tuple(found.vertices) == tuple(corr.vertices)

    def test_planted_recovery_over_seeds(self):
        model, corr, _ = small_world(16)
        recovered = 0
        for seed in range(5):
            rng = np.random.default_rng(5000 + seed)
            s = box_sample(rng, model.speaker_stats, 0.2)
            traj = smooth_trajectory(rng, model.pose_stats, 40, c=0.2)
            rec = planted_recording(model, corr, s, traj)
            found = estimate_correspondence(model, rec, corr.labels,
                                            FitOptions(c=0.25, seed=seed))
            if tuple(found.vertices) == tuple(corr.vertices):
                recovered += 1
        assert recovered >= 4

    def test_deterministic_given_seed(self):
        model, corr, rng = small_world(17)
        s = box_sample(rng, model.speaker_stats, 0.2)
        traj = smooth_trajectory(rng, model.pose_stats, 10, c=0.2)
        rec = planted_recording(model, corr, s, traj)
        a = estimate_correspondence(model, rec, corr.labels, FitOptions(seed=9, c=0.25))
        b = estimate_correspondence(model, rec, corr.labels, FitOptions(seed=9, c=0.25))
        assert a.pairs == b.pairs
        assert a.mean_distance_mm == b.mean_distance_mm

    def test_more_coils_than_vertices(self):
        model, corr, rng = small_world(18)
        labels = [f"c{k}" for k in range(model.vertex_count + 1)]
        rec = EmaRecording("u", 200.0,
                           {l: np.zeros((2, 3)) for l in labels})
        with pytest.raises(DataError):
            estimate_correspondence(model, rec, labels)


class TestEstimateSpeaker:
    def test_two_pass_oracle(self):
        model, corr, _ = small_world(19)
        rng = np.random.default_rng(6000)
        s_true = box_sample(rng, model.speaker_stats, 0.5)
        recs = []
        for k in range(3):
            traj = smooth_trajectory(rng, model.pose_stats, 25, c=0.8)
            recs.append(planted_recording(model, corr, s_true, traj, utt=f"u{k}"))
        pass1 = FitOptions(alpha=20, beta=10, c=3)
        pass2 = FitOptions(alpha=0, beta=1, c=2)
        s_hat, results = estimate_speaker(model, recs, corr, pass1, pass2)
        lo, hi = model.speaker_stats.box(3.0)
        assert np.all(s_hat >= lo) and np.all(s_hat <= hi)
        for res in results:
            assert np.all(res.s == s_hat)  # pass 2 carries the fixed speaker
        mean_residual = float(np.mean([res.residuals.mean() for res in results]))
        assert mean_residual <= 0.1  # jitter-free refit

    def test_identical_recordings_mean_invariance(self):
        model, corr, _ = small_world(20)
        rng = np.random.default_rng(6100)
        s_true = box_sample(rng, model.speaker_stats, 0.5)
        traj = smooth_trajectory(rng, model.pose_stats, 10)
        rec = planted_recording(model, corr, s_true, traj)
        pass1 = FitOptions(alpha=20, beta=10, c=3)
        pass2 = FitOptions(beta=1, c=2)
        one, _ = estimate_speaker(model, [rec], corr, pass1, pass2)
        two, _ = estimate_speaker(model, [rec, rec], corr, pass1, pass2)
        assert np.allclose(one, two, atol=1e-15)

    def test_empty_list(self):
        model, corr, _ = small_world(21)
        with pytest.raises(UsageError):
            estimate_speaker(model, [], corr, FitOptions(), FitOptions())


class TestVirtualEma:
    def test_constant_pose_constant_channels(self):
        model, corr, rng = small_world(22)
        p = box_sample(rng, model.pose_stats, 1.0)
        s = box_sample(rng, model.speaker_stats, 1.0)
        rec = virtual_ema(model, corr, np.tile(p, (4, 1)), s, 200.0)
        for chan in rec.channels.values():
            assert np.allclose(chan, chan[0])

    def test_single_frame(self):
        model, corr, rng = small_world(23)
        rec = virtual_ema(model, corr, model.pose_stats.mean[None, :],
                          model.speaker_stats.mean, 200.0)
        assert rec.n_frames == 1

    def test_consistent_with_fit_residuals(self):
        # a fixed speaker makes the per-frame residuals reproducible from
        # the pose trajectory alone (the pass-2 situation)
        model, corr, _ = small_world(24)
        rng = np.random.default_rng(7000)
        s = box_sample(rng, model.speaker_stats, 0.5)
        traj = smooth_trajectory(rng, model.pose_stats, 15)
        rec = planted_recording(model, corr, s, traj, jitter=0.2, rng=rng)
        result = fit_sequence(model, rec, corr,
                              FitOptions(beta=1, c=3, fix_speaker=s))
        virt = virtual_ema(model, corr, result.p, result.s[0], 200.0)
        for k, label in enumerate(corr.labels):
            dist = np.linalg.norm(
                virt.channels[label] - rec.channels[label], axis=1
            )
            assert np.allclose(dist, result.residuals[:, k], atol=1e-8)


class TestPoseTrajectoryIO:
    def test_round_trip(self, tmp_path):
        traj = PoseTrajectory(frame_rate=200.0, speaker=[0.1, 0.2],
                              frames=np.arange(12.0).reshape(4, 3),
                              utterance="u9")
        save_pose_trajectory(traj, tmp_path / "t.json")
        back = load_pose_trajectory(tmp_path / "t.json")
        assert back.frame_rate == 200.0
        assert np.array_equal(back.frames, traj.frames)
        assert np.array_equal(back.speaker, traj.speaker)
        assert back.utterance == "u9"
