import math

import numpy as np
import pytest

from anisoalign.aligner import (
    AlignArtifacts,
    Bounds,
    InitState,
    RefineNet,
    RefineTrainConfig,
    align_corpus,
    centroid_calibrate,
    fit_radial_transfer,
    global_init,
    kappa,
    load_refiner,
    phase_deformation_loss,
    prior_matching_loss,
    reconstruct,
    refine,
    save_refiner,
    train_refiner,
)
from anisoalign.errors import InsufficientSamples, InvalidConfig, InvalidInput
from anisoalign.frame import Frame, fit_frame, to_polar, wrap
from anisoalign.numerics import haar_subspace
from anisoalign.phase_prior import (
    NoiseSchedule,
    PriorTrainConfig,
    train_prior,
)
from anisoalign.store import EmbeddingSet, SplitSpec, l2_normalize, split
from anisoalign.synthetic import PlantSpec, generate, geometric_spectrum


def small_corpus(seed=0, n=2400, d=24):
    spec = PlantSpec(
        n=n,
        d=d,
        shared_dim=8,
        shared_spectrum=geometric_spectrum(8, 0.45, 0.9),
        residual_energies=(0.02, 0.012),
        centroid_offset=0.3,
        iso_noise=0.01,
        x_noise=0.02,
        mean_scale=1.0,
        seed=seed,
    )
    pair, truth = generate(spec)
    return split(pair, SplitSpec(0.5, seed + 1))


@pytest.fixture(scope="module")
def pipeline():
    est, held = small_corpus()
    frame = fit_frame(est.x, est.y, r=8, lambda_reg=1e-6)
    transfer = fit_radial_transfer(frame, est.x, est.y)
    prior, _, _ = train_prior(
        to_polar(frame, est.x.data).rho,
        to_polar(frame, est.x.data).theta,
        frame,
        NoiseSchedule(),
        PriorTrainConfig(steps=500, batch=128, seed=3),
    )
    return est, held, frame, transfer, prior


class TestBounds:
    def test_validation(self):
        with pytest.raises(InvalidInput):
            Bounds(alpha_theta=0.0)
        with pytest.raises(InvalidInput):
            Bounds(alpha_theta=3.2)

    def test_kappa_formula_and_brute_force(self):
        at, ar = 0.3, 0.2
        want = math.sqrt(
            (math.exp(ar) - 1.0) ** 2 + 4.0 * math.exp(ar) * math.sin(at / 2) ** 2
        )
        assert kappa(at, ar) == pytest.approx(want)
        # brute-force max displacement over the reachable (dtheta, s) grid
        best = 0.0
        for dt in np.linspace(-at, at, 101):
            for s in np.exp(np.linspace(-ar, ar, 101)):
                best = max(best, math.hypot(s * math.cos(dt) - 1.0, s * math.sin(dt)))
        assert best <= kappa(at, ar) + 1e-12
        assert best == pytest.approx(kappa(at, ar), rel=1e-3)


class TestGlobalInit:
    def test_self_transfer_keeps_radii(self, pipeline):
        est, held, frame, transfer, prior = pipeline
        from anisoalign.aligner import RadialTransfer

        same = RadialTransfer(source=transfer.target, target=transfer.target)
        # evaluate on the sample the ECDFs were fitted on: exact there
        polar = to_polar(frame, est.x.data)
        out = same.apply(polar.rho)
        assert np.abs(out - polar.rho).max() < 1e-6

    def test_identical_v_stats_passthrough(self):
        rng = np.random.default_rng(5)
        d, r = 12, 4
        basis = haar_subspace(d, r, rng)
        zeros = np.zeros(d)
        frame = Frame(
            basis=basis,
            mu_source=zeros,
            mu_target=zeros,
            v_mu_source=zeros,
            v_mu_target=zeros,
            v_sigma_source=np.ones(d),
            v_sigma_target=np.ones(d),
            lambda_reg=0.0,
        )
        from anisoalign.aligner import RadialTransfer
        from anisoalign.numerics import ecdf_fit

        rho = np.abs(rng.standard_normal((50, r // 2))) + 0.5
        f = [ecdf_fit(rho[:, k]) for k in range(r // 2)]
        transfer = RadialTransfer(source=f, target=f)
        y = rng.standard_normal((20, d))
        state = global_init(y, frame, transfer)
        y_v = y - (y @ basis) @ basis.T
        # the scale denominator carries a +eps guard, hence the tolerance
        assert np.abs(state.v0 - y_v).max() < 1e-6

    def test_planted_radial_scale_transferred(self):
        rng = np.random.default_rng(6)
        d, r = 10, 4
        basis = haar_subspace(d, r, rng)
        zeros = np.zeros(d)
        frame = Frame(
            basis=basis,
            mu_source=zeros,
            mu_target=zeros,
            v_mu_source=zeros,
            v_mu_target=zeros,
            v_sigma_source=np.ones(d),
            v_sigma_target=np.ones(d),
            lambda_reg=0.0,
        )
        # target radii are exactly twice the source radii per block
        n = 4000
        c = rng.standard_normal((n, r))
        y_est = EmbeddingSet(data=c @ basis.T)
        x_est = EmbeddingSet(data=(2.0 * c) @ basis.T)
        transfer = fit_radial_transfer(frame, x_est, y_est)
        fresh = rng.standard_normal((500, r)) @ basis.T
        state = global_init(fresh, frame, transfer)
        rho_in = to_polar(frame, fresh).rho
        ratio = state.rho0 / rho_in
        inside = (rho_in > np.quantile(rho_in, 0.05)) & (
            rho_in < np.quantile(rho_in, 0.95)
        )
        assert np.abs(ratio[inside] - 2.0).max() < 0.15

    def test_v0_in_complement(self, pipeline):
        est, held, frame, transfer, prior = pipeline
        state = global_init(held.y.data, frame, transfer)
        assert np.abs(state.v0 @ frame.basis).max() <= 1e-8

    def test_block_count_mismatch(self, pipeline):
        est, held, frame, transfer, prior = pipeline
        from anisoalign.aligner import RadialTransfer

        bad = RadialTransfer(source=transfer.source[:-1], target=transfer.target[:-1])
        with pytest.raises(InvalidConfig):
            global_init(held.y.data, frame, bad)


class TestRefine:
    def test_zero_net_is_identity(self, pipeline):
        est, held, frame, transfer, prior = pipeline
        state = global_init(held.y.data, frame, transfer)
        net = RefineNet(frame.m, frame.d, rng=np.random.default_rng(0))
        th, rh, vh = refine(state, net, Bounds(), frame)
        assert np.array_equal(th, wrap(state.theta0))
        assert np.array_equal(rh, state.rho0)
        assert np.array_equal(vh, state.v0)

    def test_hard_bounds_hold_for_random_net(self, pipeline):
        est, held, frame, transfer, prior = pipeline
        state = global_init(held.y.data, frame, transfer)
        rng = np.random.default_rng(7)
        net = RefineNet(frame.m, frame.d, rng=rng)
        net.net.weights[-1][:] = 3.0 * rng.standard_normal(
            net.net.weights[-1].shape
        )
        bounds = Bounds()
        th, rh, vh = refine(state, net, bounds, frame)
        assert np.abs(wrap(th - state.theta0)).max() <= bounds.alpha_theta + 1e-12
        ratio = rh / state.rho0
        assert np.all(ratio >= math.exp(-bounds.alpha_rho) - 1e-12)
        assert np.all(ratio <= math.exp(bounds.alpha_rho) + 1e-12)
        assert np.abs(vh - state.v0).max() <= bounds.alpha_v + 1e-12

    def test_per_block_displacement_bound(self, pipeline):
        est, held, frame, transfer, prior = pipeline
        state = global_init(held.y.data, frame, transfer)
        rng = np.random.default_rng(8)
        net = RefineNet(frame.m, frame.d, rng=rng)
        net.net.weights[-1][:] = 2.0 * rng.standard_normal(net.net.weights[-1].shape)
        bounds = Bounds()
        th, rh, _ = refine(state, net, bounds, frame)
        c0 = np.stack(
            [state.rho0 * np.cos(state.theta0), state.rho0 * np.sin(state.theta0)], -1
        )
        c1 = np.stack([rh * np.cos(th), rh * np.sin(th)], -1)
        move = np.linalg.norm(c1 - c0, axis=-1)
        cap = state.rho0 * kappa(bounds.alpha_theta, bounds.alpha_rho)
        assert np.all(move <= cap + 1e-9)


class TestLosses:
    def test_prior_loss_nonnegative_and_planted_contrast(self, pipeline):
        est, held, frame, transfer, prior = pipeline
        state = global_init(held.y.data[:256], frame, transfer)
        rng = np.random.default_rng(9)
        conformant = prior_matching_loss(
            state.theta0, state.rho0, prior, np.random.default_rng(77)
        )
        uniform = prior_matching_loss(
            rng.uniform(-np.pi, np.pi, state.theta0.shape),
            state.rho0,
            prior,
            np.random.default_rng(77),
        )
        assert conformant >= 0.0
        assert conformant < uniform

    def test_prior_weights_untouched_by_gradient_call(self, pipeline):
        est, held, frame, transfer, prior = pipeline
        state = global_init(held.y.data[:64], frame, transfer)
        before = {k: v.copy() for k, v in prior.net.net.state().items()}
        prior_matching_loss(
            state.theta0, state.rho0, prior, np.random.default_rng(5), want_grads=True
        )
        after = prior.net.net.state()
        for key in before:
            assert np.array_equal(before[key], after[key])

    def test_deformation_zero_cases(self, pipeline):
        est, held, frame, transfer, prior = pipeline
        state = global_init(held.y.data[:100], frame, transfer)
        g = prior.graph
        base = phase_deformation_loss(state.theta0, state.theta0, state.rho0, g)
        assert base == pytest.approx(0.0, abs=1e-12)
        shifted = wrap(state.theta0 + 0.7)  # global rotation leaves differences
        assert phase_deformation_loss(
            shifted, state.theta0, state.rho0, g
        ) == pytest.approx(0.0, abs=1e-9)

    def test_deformation_single_edge_closed_form(self):
        from anisoalign.phase_prior import DependencyGraph

        g = DependencyGraph(
            m=2,
            k=np.array([0]),
            l=np.array([1]),
            coupling=np.array([1.0]),
            offset=np.array([0.0]),
        )
        theta0 = np.array([[0.2, -0.4]])
        rho0 = np.array([[1.5, 2.0]])
        delta = 0.3
        theta_hat = theta0 + np.array([[delta, 0.0]])
        w = (1.5 * 2.0) / (1.5 * 2.0 + 1e-12)
        want = w * (1.0 - np.cos(delta))
        got = phase_deformation_loss(theta_hat, theta0, rho0, g)
        assert got == pytest.approx(want, rel=1e-9)

    def test_empty_graph_rejected(self):
        from anisoalign.phase_prior import DependencyGraph

        g = DependencyGraph(
            m=2,
            k=np.array([], dtype=np.intp),
            l=np.array([], dtype=np.intp),
            coupling=np.array([]),
            offset=np.array([]),
        )
        with pytest.raises(InvalidConfig):
            phase_deformation_loss(np.zeros((1, 2)), np.zeros((1, 2)), np.ones((1, 2)), g)


class TestTrainRefiner:
    def test_validation_loss_decreases(self, pipeline):
        est, held, frame, transfer, prior = pipeline
        states = global_init(est.y.data, frame, transfer)
        net, hist = train_refiner(
            states, frame, prior, Bounds(), RefineTrainConfig(steps=300, seed=4, lr=3e-4)
        )
        assert hist["val_loss_final"] < hist["val_loss_initial"]

    def test_beta_infinity_freezes_relative_phases(self, pipeline):
        est, held, frame, transfer, prior = pipeline
        states = global_init(est.y.data, frame, transfer)
        cfg = RefineTrainConfig(steps=300, seed=5, lr=1e-3, beta=1e4)
        net, _ = train_refiner(states, frame, prior, Bounds(), cfg)
        th, _, _ = refine(states, net, Bounds(), frame)
        g = prior.graph
        dev = wrap(
            (th[:, g.k] - th[:, g.l]) - (states.theta0[:, g.k] - states.theta0[:, g.l])
        )
        assert np.abs(dev).mean() < 0.01

    def test_deterministic(self, pipeline):
        est, held, frame, transfer, prior = pipeline
        states = global_init(est.y.data[:500], frame, transfer)
        cfg = RefineTrainConfig(steps=50, seed=6)
        a, _ = train_refiner(states, frame, prior, Bounds(), cfg)
        b, _ = train_refiner(states, frame, prior, Bounds(), cfg)
        for key, arr in a.net.state().items():
            assert np.array_equal(arr, b.net.state()[key])


class TestReconstructCalibrate:
    def test_unit_norm_and_v_preserved(self, pipeline):
        est, held, frame, transfer, prior = pipeline
        state = global_init(held.y.data, frame, transfer)
        net = RefineNet(frame.m, frame.d, rng=np.random.default_rng(1))
        th, rh, vh = refine(state, net, Bounds(), frame)
        e_prime = reconstruct(th, rh, vh, frame)
        assert np.abs(np.linalg.norm(e_prime, axis=1) - 1.0).max() <= 1e-9
        # the U-content of the scaled-back reconstruction matches the blocks
        from anisoalign.frame import block_cartesian

        pre_norm = np.linalg.norm(
            block_cartesian(rh, th) @ frame.basis.T + vh, axis=1
        )
        u_content = (e_prime * pre_norm[:, None]) @ frame.basis
        assert np.abs(u_content - block_cartesian(rh, th)).max() < 1e-8

    def test_calibration_pins_pre_norm_mean(self, pipeline):
        est, held, frame, transfer, prior = pipeline
        rng = np.random.default_rng(2)
        e_prime = l2_normalize(EmbeddingSet(data=rng.standard_normal((800, frame.d)) + 0.3)).data
        out = centroid_calibrate(e_prime, frame.mu_target)
        mean = e_prime[np.lexsort(e_prime.T[::-1])].mean(axis=0)
        pre = e_prime - mean + frame.mu_target
        want = pre / np.linalg.norm(pre, axis=1, keepdims=True)
        assert np.array_equal(out, want)

    def test_already_centered_is_pure_normalization(self, pipeline):
        est, held, frame, transfer, prior = pipeline
        rng = np.random.default_rng(3)
        raw = rng.standard_normal((600, frame.d)) * 0.05 + frame.mu_target
        raw = raw - raw.mean(axis=0) + frame.mu_target  # empirical mean exactly mu
        out = centroid_calibrate(raw, frame.mu_target)
        want = raw / np.linalg.norm(raw, axis=1, keepdims=True)
        assert np.abs(out - want).max() < 1e-12

    def test_empty_rejected(self, pipeline):
        est, held, frame, transfer, prior = pipeline
        with pytest.raises(InsufficientSamples):
            centroid_calibrate(np.empty((0, frame.d)), frame.mu_target)


class TestAlignCorpus:
    def _artifacts(self, pipeline, seed=11):
        est, held, frame, transfer, prior = pipeline
        states = global_init(est.y.data, frame, transfer)
        net, _ = train_refiner(
            states, frame, prior, Bounds(), RefineTrainConfig(steps=120, seed=seed)
        )
        return AlignArtifacts(
            frame=frame,
            prior=prior,
            radial_transfer=transfer,
            refiner=net,
            bounds=Bounds(),
        )

    def test_permutation_equivariance_bitwise(self, pipeline):
        est, held, frame, transfer, prior = pipeline
        arts = self._artifacts(pipeline)
        z = align_corpus(held.y, arts)
        rng = np.random.default_rng(12)
        perm = rng.permutation(held.y.n)
        z_perm = align_corpus(
            EmbeddingSet(data=held.y.data[perm], modality="source"), arts
        )
        assert np.array_equal(z.data[perm], z_perm.data)

    def test_unpaired_training_invariance(self, pipeline):
        # shuffling the correspondence between est X and est Y changes nothing:
        # no stage may consume pairing
        est, held, frame, transfer, prior = pipeline
        rng = np.random.default_rng(13)
        est_y_shuffled = EmbeddingSet(data=est.y.data[rng.permutation(est.y.n)])
        frame2 = fit_frame(est.x, est_y_shuffled, r=8, lambda_reg=1e-6)
        assert np.array_equal(frame.basis, frame2.basis)
        transfer2 = fit_radial_transfer(frame2, est.x, est_y_shuffled)
        for a, b in zip(transfer.source, transfer2.source):
            assert np.array_equal(a.sample, b.sample)

    def test_empty_corpus(self, pipeline):
        arts = self._artifacts(pipeline)
        with pytest.raises(InsufficientSamples):
            align_corpus(EmbeddingSet(data=np.empty((0, arts.frame.d))), arts)

    def test_similarity_stability_certificate(self, pipeline):
        # with a bound set keeping eps_eff < 1, unnormalized inner products
        # drift at most 2 eps + eps^2 relative to the init reconstruction
        est, held, frame, transfer, prior = pipeline
        bounds = Bounds(alpha_theta=0.3, alpha_rho=0.2, alpha_v=0.02)
        eps_eff = kappa(bounds.alpha_theta, bounds.alpha_rho) + bounds.alpha_v * np.sqrt(
            frame.d
        )
        assert eps_eff < 1.0
        state = global_init(held.y.data[:400], frame, transfer)
        rng = np.random.default_rng(14)
        net = RefineNet(frame.m, frame.d, rng=rng)
        net.net.weights[-1][:] = 2.0 * rng.standard_normal(net.net.weights[-1].shape)
        from anisoalign.frame import block_cartesian

        z0 = block_cartesian(state.rho0, state.theta0) @ frame.basis.T + state.v0
        th, rh, vh = refine(state, net, bounds, frame)
        z1 = block_cartesian(rh, th) @ frame.basis.T + vh
        i = rng.integers(0, 400, 2000)
        j = rng.integers(0, 400, 2000)
        drift = np.abs(np.sum(z1[i] * z1[j], axis=1) - np.sum(z0[i] * z0[j], axis=1))
        # certificate applies on unit-scale states; allow the actual norms
        scale = np.maximum(np.linalg.norm(z0[i], axis=1), 1.0) * np.maximum(
            np.linalg.norm(z0[j], axis=1), 1.0
        )
        assert np.all(drift <= (2 * eps_eff + eps_eff**2) * scale + 1e-9)


class TestRefinerIO:
    def test_roundtrip(self, pipeline, tmp_path):
        est, held, frame, transfer, prior = pipeline
        rng = np.random.default_rng(15)
        net = RefineNet(frame.m, frame.d, rng=rng)
        bounds = Bounds(alpha_theta=0.25, alpha_rho=0.15, alpha_v=0.04)
        path = tmp_path / "refiner.bin"
        save_refiner(net, bounds, path)
        back, back_bounds = load_refiner(path)
        assert back_bounds == bounds
        state = global_init(held.y.data[:32], frame, transfer)
        a = net.forward(state)
        b = back.forward(state)
        assert np.allclose(a, b, atol=1e-4)
