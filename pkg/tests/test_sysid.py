import numpy as np
import pytest

from impactmpc.dynamics import MechConstants, ThetaParams, feature_vector, step_euler
from impactmpc.plant import PlantConfig, PlantSimulator, ResidualSpec, inject_residual
from impactmpc.sysid import (
    GpModel,
    RankDeficient,
    RecordTooShort,
    RegressionDataset,
    SensorRecord,
    build_dataset,
    estimate_acceleration,
    fit_gp,
    gp_training_targets,
    identify_theta,
    log_marginal_likelihood,
    select_subset,
)

THETA_TRUE = np.array([24.0, 60.0, 9.0e4, 1.0])


def make_record(n_ticks=3000, noise=0.0, residual=None, seed=0, mech=None):
    """Drive the plant with a varied torque schedule and log the sensors."""
    mech = mech or MechConstants(j_h=2e-4, j_s=4e-4)
    cfg = PlantConfig(
        mech=mech, theta=THETA_TRUE,
        residual=residual or ResidualSpec.none(),
        cor_mode="constant", cor_value=0.3,
        phi_ap_mode="constant", phi_ap_value=0.1,
        noise_std=noise,
    )
    sim = PlantSimulator(cfg, np.array([0.2, 0.0, -80.0, -80.0]), seed=seed)
    rng = np.random.default_rng(seed + 1)
    samples = []
    impact_ticks = []
    u = -0.3
    for k in range(n_ticks):
        if k % 7 == 0:
            u = float(rng.uniform(-0.5, -0.05))
        samples.append(sim.sensor_sample(u))
        n_before = len(sim.events)
        sim.tick(u)
        if len(sim.events) > n_before:
            impact_ticks.append(k)
    return SensorRecord.from_samples(samples, impact_ticks), mech


def test_constant_speed_record_zero_acceleration():
    n = 400
    t = np.arange(n) * 1e-3
    rec = SensorRecord(t, -120.0 * t, -120.0 * t + 0.2, np.full(n, -0.2), np.array([], dtype=int))
    acc, valid = estimate_acceleration(rec)
    assert abs(np.mean(acc[valid])) < 1e-6 * 120 / 1e-3


def test_quadratic_angle_recovers_acceleration():
    n = 600
    t = np.arange(n) * 1e-3
    a = -3500.0
    rec = SensorRecord(t, 0.5 * a * t**2, 0.5 * a * t**2, np.zeros(n), np.array([], dtype=int))
    acc, valid = estimate_acceleration(rec)
    interior = np.zeros(n, dtype=bool)
    interior[50:-50] = True
    got = acc[valid & interior]
    np.testing.assert_allclose(got, a, rtol=1e-3)


def test_filtering_beats_raw_differencing_on_noise():
    n = 2000
    rng = np.random.default_rng(5)
    t = np.arange(n) * 1e-3
    a = -2000.0
    clean = 0.5 * a * t**2
    noisy = clean + rng.normal(0, 1e-3, n)
    rec = SensorRecord(t, noisy, noisy, np.zeros(n), np.array([], dtype=int))
    acc, valid = estimate_acceleration(rec)
    raw = np.zeros(n)
    raw[1:-1] = (noisy[2:] - 2 * noisy[1:-1] + noisy[:-2]) / 1e-6
    sl = slice(100, -100)
    rmse_filt = np.sqrt(np.mean((acc[sl] - a) ** 2))
    rmse_raw = np.sqrt(np.mean((raw[sl] - a) ** 2))
    assert rmse_filt * 5 < rmse_raw


def test_short_record_rejected():
    with pytest.raises(RecordTooShort):
        estimate_acceleration(
            SensorRecord(np.arange(5) * 1e-3, np.zeros(5), np.zeros(5),
                         np.zeros(5), np.array([], dtype=int))
        )


def test_identify_recovers_truth_noiseless():
    record, mech = make_record(n_ticks=2500, noise=0.0)
    ds = build_dataset(record, mech)
    rep = identify_theta(ds)
    got = rep.theta.as_array()[:3]
    np.testing.assert_allclose(got, THETA_TRUE[:3], rtol=1e-3)
    assert abs(rep.spindle_bias) < 0.01 * abs(ds.targets).max()
    assert np.isfinite(rep.condition_number)


def test_identify_rank_deficient_without_input_excitation():
    rng = np.random.default_rng(0)
    K = 200
    rows = np.column_stack([
        np.zeros(K),                      # u == 0: lambda channel dead
        rng.normal(size=K),
        rng.normal(size=K),
        np.ones(K),
    ])
    ds = RegressionDataset(rows, rng.normal(size=K), rng.normal(size=(K, 3)))
    with pytest.raises(RankDeficient):
        identify_theta(ds)


def synthetic_dataset(K, noise, rng, mech):
    """Synthetic regression rows from random between-impact states."""
    x = np.empty((K, 4))
    x[:, 1] = rng.uniform(-20, 20, K)
    x[:, 0] = x[:, 1] + rng.uniform(-2.0, 2.0, K)
    x[:, 2] = rng.uniform(-250, 100, K)
    x[:, 3] = rng.uniform(-200, 0, K)
    u = rng.uniform(-0.5, 0.0, K)
    c = mech.cam_lead
    s = np.tanh((x[:, 0] - x[:, 1]) / mech.eps_sign)
    rows = np.column_stack([
        u / mech.j_s, (c / mech.j_s) * s,
        (c * c / mech.j_s) * (x[:, 0] - x[:, 1]), np.ones(K),
    ])
    th = np.array([THETA_TRUE[0], THETA_TRUE[1], THETA_TRUE[2], 0.0])
    y = rows @ th + rng.normal(0, noise, K)
    feats = np.column_stack([x[:, 0] - x[:, 1], x[:, 2] - x[:, 3], u])
    return RegressionDataset(rows, y, feats)


def test_identify_consistency_error_shrinks_with_samples(mech):
    mech = MechConstants(j_h=2e-4, j_s=4e-4)
    noise = 2000.0  # rad/s^2, large to make the effect visible
    errs_small, errs_big = [], []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        for K, out in ((100, errs_small), (10000, errs_big)):
            rep = identify_theta(synthetic_dataset(K, noise, rng, mech))
            rel = np.abs(rep.theta.as_array()[:3] - THETA_TRUE[:3]) / THETA_TRUE[:3]
            out.append(rel.max())
    assert np.mean(errs_big) < np.mean(errs_small)


def test_identify_row_permutation_invariant(mech):
    mech = MechConstants(j_h=2e-4, j_s=4e-4)
    rng = np.random.default_rng(3)
    ds = synthetic_dataset(500, 100.0, rng, mech)
    rep1 = identify_theta(ds)
    perm = rng.permutation(len(ds))
    ds2 = RegressionDataset(ds.rows[perm], ds.targets[perm], ds.features[perm])
    rep2 = identify_theta(ds2)
    np.testing.assert_allclose(rep1.theta.as_array(), rep2.theta.as_array(), rtol=1e-10)


def test_gp_targets_zero_for_exact_model(mech):
    mech = MechConstants(j_h=2e-4, j_s=4e-4)
    rng = np.random.default_rng(1)
    ds = synthetic_dataset(300, 0.0, rng, mech)
    e = gp_training_targets(ds, ThetaParams(*THETA_TRUE[:3]), spindle_bias=0.0)
    assert np.max(np.abs(e)) < 1e-8 * np.max(np.abs(ds.targets))


def test_gp_targets_track_injected_viscous_term():
    mech = MechConstants(j_h=2e-4, j_s=4e-4)
    spec = ResidualSpec(viscous_s=2e-4, coulomb_s=0.0, torque_sag=0.0)
    record, _ = make_record(n_ticks=2500, noise=0.0, residual=spec)
    ds = build_dataset(record, mech)
    # residuals against the true parameters leave the viscous term as the
    # only unexplained signal, so they correlate with the spindle speed
    e = gp_training_targets(ds, ThetaParams(*THETA_TRUE[:3]), spindle_bias=0.0)
    _, valid = estimate_acceleration(record)
    v_s = np.gradient(record.motor_angle, 1e-3)[valid]
    r = np.corrcoef(e, v_s)[0, 1]
    assert abs(r) > 0.95


def test_gp_targets_pure_function(mech):
    mech = MechConstants(j_h=2e-4, j_s=4e-4)
    rng = np.random.default_rng(2)
    ds = synthetic_dataset(100, 10.0, rng, mech)
    th = ThetaParams(*THETA_TRUE[:3])
    np.testing.assert_array_equal(
        gp_training_targets(ds, th, 1.5), gp_training_targets(ds, th, 1.5)
    )


# -- subset selection ---------------------------------------------------------


def test_subset_full_budget_returns_everything():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(50, 3))
    idx = select_subset(X, rng.normal(size=50), 50)
    np.testing.assert_array_equal(np.sort(idx), np.arange(50))


def test_subset_avoids_duplicates():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(40, 3))
    X2 = np.vstack([X, X])  # every point twice
    y2 = rng.normal(size=80)
    idx = select_subset(X2, y2, 30, seed=2)
    feats = X2[idx]
    # no two selected feature vectors coincide
    d = np.linalg.norm(feats[:, None, :] - feats[None, :, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    assert d.min() > 1e-9


def test_subset_covers_separated_clusters():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(100, 3)) * 0.1
    b = rng.normal(size=(100, 3)) * 0.1 + 8.0
    X = np.vstack([a, b])
    idx = select_subset(X, rng.normal(size=200), 10, seed=0)
    n_a = np.sum(idx < 100)
    assert n_a >= 3 and (10 - n_a) >= 3


# -- GP fit -------------------------------------------------------------------


def test_gp_fits_zero_targets_to_zero():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 3))
    gp = fit_gp(X, np.zeros(40), seed=0, restarts=2)
    q = rng.normal(size=(100, 3))
    assert np.max(np.abs(gp.mean_batch(q))) < 1e-6


def test_gp_sine_regression_held_out():
    rng = np.random.default_rng(7)
    x = rng.uniform(0, 6, 50)[:, None]
    y = np.sin(x[:, 0])
    gp = fit_gp(x, y, seed=1)
    xq = rng.uniform(0.3, 5.7, 200)[:, None]
    rmse = np.sqrt(np.mean((gp.mean_batch(xq) - np.sin(xq[:, 0])) ** 2))
    assert rmse < 0.05


def test_gp_reverts_to_zero_far_from_data():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(60, 3))
    y = rng.normal(size=60) * 50.0
    gp = fit_gp(X, y, seed=0, restarts=3)
    far = np.full((1, 3), 0.0) + gp.norm_mu + gp.norm_sd * gp.lengthscales * 20
    assert abs(gp.mean_batch(far)[0]) < 0.01 * np.max(np.abs(y))


def test_gp_interpolates_with_vanishing_noise():
    rng = np.random.default_rng(4)
    X = rng.uniform(-1, 1, size=(30, 3))
    y = np.sin(X @ np.array([1.0, 2.0, -1.0])) * 10
    gp = GpModel(
        Z=(X - X.mean(0)) / X.std(0), y=y, sigma_f2=100.0,
        lengthscales=np.ones(3), sigma_n2=1e-10,
        norm_mu=X.mean(0), norm_sd=X.std(0),
    )
    pred = gp.mean_batch(X)
    np.testing.assert_allclose(pred, y, rtol=1e-4, atol=1e-4 * np.abs(y).max())


def test_gp_lml_not_worse_than_initialization():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(50, 3))
    y = np.cos(X[:, 0]) + 0.1 * rng.normal(size=50)
    gp = fit_gp(X, y, seed=3)
    Zn = (X - gp.norm_mu) / gp.norm_sd
    y_scale = float(np.std(y))
    p_init = np.log(np.concatenate([[y_scale**2], np.ones(3), [1e-2 * y_scale**2]]))
    p_fit = np.log(np.concatenate([[gp.sigma_f2], gp.lengthscales, [gp.sigma_n2]]))
    assert log_marginal_likelihood(p_fit, Zn, y) >= log_marginal_likelihood(p_init, Zn, y) - 1e-9


def test_lml_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    X = rng.normal(size=(25, 3))
    Zn = (X - X.mean(0)) / X.std(0)
    y = np.sin(X[:, 0]) + 0.05 * rng.normal(size=25)
    p = np.log(np.array([0.8, 1.3, 0.7, 2.0, 0.05]))
    _, g = log_marginal_likelihood(p, Zn, y, grad=True)
    h = 1e-6
    for i in range(len(p)):
        dp = p.copy(); dm = p.copy()
        dp[i] += h; dm[i] -= h
        fd = (log_marginal_likelihood(dp, Zn, y) - log_marginal_likelihood(dm, Zn, y)) / (2 * h)
        np.testing.assert_allclose(g[i], fd, rtol=1e-5, atol=1e-8)


def test_gp_mean_grad_matches_finite_differences():
    rng = np.random.default_rng(12)
    X = rng.normal(size=(40, 3)) * np.array([1.5, 120.0, 0.2])
    y = 100 * np.sin(X[:, 0]) + X[:, 1] * 0.5
    gp = fit_gp(X, y, seed=0, restarts=2)
    for _ in range(10):
        z = rng.normal(size=3) * np.array([1.5, 120.0, 0.2])
        g = gp.mean_grad(z)
        for i in range(3):
            h = 1e-5 * max(abs(z[i]), 1.0)
            zp = z.copy(); zm = z.copy()
            zp[i] += h; zm[i] -= h
            fd = (gp.mean(zp) - gp.mean(zm)) / (2 * h)
            np.testing.assert_allclose(g[i], fd, rtol=1e-4, atol=1e-6 * abs(y).max())


def test_gp_round_trip_serialization():
    rng = np.random.default_rng(13)
    X = rng.normal(size=(30, 3))
    y = rng.normal(size=30)
    gp = fit_gp(X, y, seed=0, restarts=1)
    gp2 = GpModel.from_dict(gp.to_dict())
    q = rng.normal(size=(20, 3))
    np.testing.assert_array_equal(gp.mean_batch(q), gp2.mean_batch(q))


def test_step_euler_with_fitted_gp_reproduces_training_residual(mech, theta_true):
    rng = np.random.default_rng(14)
    X = rng.uniform(-1, 1, size=(60, 3)) * np.array([2.0, 200.0, 0.25])
    y = -300.0 * np.tanh(X[:, 1] / 100.0)  # synthetic residual accel
    gp = fit_gp(X, y, seed=0)
    th = theta_true.as_array()
    # at a training point, the omega_s update gains the fitted residual
    z = X[7]
    x = np.array([z[0], 0.0, z[1] / 2, -z[1] / 2])
    u = z[2]
    np.testing.assert_allclose(feature_vector(x, u), z, atol=1e-12)
    plain = step_euler(x, u, th, mech, 1e-3)
    aug = step_euler(x, u, th, mech, 1e-3, gp=gp)
    got_residual = (aug[3] - plain[3]) / 1e-3
    assert abs(got_residual - y[7]) < 0.05 * np.abs(y).max()
