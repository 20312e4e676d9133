"""Acceptance gate: ten end-to-end checks, one test (and one pass/fail
line) per criterion, each with pinned tolerances and a wall-clock budget.

Criterion 7 compares the exact finite-volume generating function against
the weak-coupling prediction at matched times t = 1/lambda^2.  The
monotone-improvement half of that check passes; the absolute-accuracy
half (median relative deviation at lambda = 0.2 below 0.25) measures
about 0.44 on this family of discretized instances and fails.  The
failure is real, reproducible, and left visible on purpose; the finite
grids reachable within the dimension cap recover only about half of the
asymptotic decay rate at these horizons.
"""

import time
import warnings

import numpy as np
import pytest

from fcslab import (
    ScgfSolver,
    build_and_deform,
    build_deformed_lindblad,
    build_rate_process,
    clt_test,
    compressed_step,
    empirical_scgf,
    extract_blocks,
    gc_symmetry_defect,
    make_model,
    mean_current_estimates,
    rate_function,
    resonant_modes,
    sample,
    assemble,
    tpm_distribution,
    characteristic_function,
    transfer_instance,
    transport_moments,
    weak_coupling_compare,
)
from fcslab.errors import TruncationWarning
from fcslab.lindblad import unvec, vec
from fcslab.model import ReservoirSpec

from conftest import canonical_reservoirs, model_fleet, random_hermitian
import oracles

SEED = 20260825


def _line(num, label, elapsed, budget):
    assert elapsed < budget, f"criterion {num} overran: {elapsed:.1f}s"
    print(f"criterion {num:02d} {label}: PASS ({elapsed:.1f}s)")


@pytest.fixture(scope="module")
def qubit():
    return make_model(np.diag([0.5, -0.5]), canonical_reservoirs(), lam=0.1)


def test_criterion_01_normalization_and_trace_preservation():
    t0 = time.monotonic()
    rng = np.random.default_rng(11)
    for model in model_fleet(20, seed=11):
        solver = ScgfSolver(model, check_irreducibility=False)
        f0 = solver.f(np.zeros(model.n_reservoirs))
        assert abs(f0) <= 1e-12, f"f(0) = {f0}"
        dual = build_deformed_lindblad(
            model, np.zeros(model.n_reservoirs)).dual.matrix
        d = model.system.dim
        for _ in range(50):
            s = random_hermitian(rng, d)
            residual = abs(np.trace(unvec(dual @ vec(s), d)))
            assert residual <= 1e-10, f"trace defect {residual}"
    _line(1, "f(0) = 0 and trace preservation", time.monotonic() - t0, 10.0)


def test_criterion_02_gc_symmetry_with_corrupted_control(qubit):
    t0 = time.monotonic()
    nus = np.arange(0.0, 1.0 + 1e-12, 0.05)
    scan = gc_symmetry_defect(qubit, nu_grid=nus)
    defect = scan.defect / qubit.lam ** 2
    assert defect <= 1e-9, f"qubit defect {defect}"
    for model in model_fleet(10, seed=2121):
        solver = ScgfSolver(model, check_irreducibility=False)
        d = gc_symmetry_defect(solver, nu_grid=nus).defect / model.lam ** 2
        assert d <= 1e-9, f"fleet defect {d}"
    # corrupted control: mirroring about 10 percent warmer reservoirs is
    # not a symmetry and must show a visible defect
    solver = ScgfSolver(qubit)
    wrong = 0.9 * np.array([r.beta for r in qubit.reservoirs])
    bad = max(abs(solver.f(nu * wrong) - solver.f((1 - nu) * wrong))
              for nu in nus) / qubit.lam ** 2
    assert bad > 1e-3, f"corrupted defect only {bad}"
    _line(2, "exchange symmetry on thermal line", time.monotonic() - t0, 30.0)


def test_criterion_03_qubit_matches_hand_built_tilted_matrix(qubit):
    t0 = time.monotonic()
    solver = ScgfSolver(qubit)
    worst = 0.0
    for k1 in np.linspace(-0.15, 1.05, 11):
        for k2 in np.linspace(-0.13, 1.97, 11):
            kappa = np.array([k1, k2])
            got = solver.leading(kappa, need_vectors=False).eigenvalue.real
            ref = oracles.qubit_scgf(kappa)
            err = abs(got - ref)
            if abs(ref) > 1e-12:
                err /= abs(ref)
            worst = max(worst, err)
    assert worst <= 1e-10, f"worst relative error {worst}"
    _line(3, "two-level closed form on 11x11 grid", time.monotonic() - t0,
          5.0)


def test_criterion_04_moments_derivatives_and_entropy_sign(qubit):
    t0 = time.monotonic()
    models = [qubit] + model_fleet(3, seed=808, n_res=2)
    for model in models:
        solver = ScgfSolver(model, check_irreducibility=False)
        mom = transport_moments(model, fd_check=False)
        zero = np.zeros(model.n_reservoirs)
        grad = oracles.richardson_gradient(solver.f, zero)
        hess = oracles.richardson_hessian(solver.f, zero)
        assert np.abs(-grad - mom.mean_currents).max() <= 1e-6
        assert np.abs(hess - mom.covariance).max() <= 1e-6
        np.testing.assert_allclose(mom.covariance, mom.covariance.T,
                                   atol=1e-14)
        scale = max(1.0, np.abs(mom.covariance).max())
        assert np.linalg.eigvalsh(mom.covariance).min() >= -1e-10 * scale
    # equilibrium: equal temperatures switch entropy production off
    eq = make_model(qubit.system.hamiltonian,
                    [ReservoirSpec(label=r.label, beta=1.5,
                                   coupling=r.coupling, density=r.density)
                     for r in qubit.reservoirs], lam=0.1)
    sigma_eq = transport_moments(eq, fd_check=False).entropy_production_rate
    assert abs(sigma_eq) <= 1e-10, f"equilibrium sigma {sigma_eq}"
    # out of equilibrium: positive, and the hotter reservoir drains
    mom = transport_moments(qubit, fd_check=False)
    assert mom.entropy_production_rate > 0
    betas = np.array([r.beta for r in qubit.reservoirs])
    assert mom.mean_currents[np.argmin(betas)] < 0
    assert mom.mean_currents[np.argmax(betas)] > 0
    _line(4, "derivatives, covariance, entropy sign", time.monotonic() - t0,
          30.0)


def test_criterion_05_rate_function_convex_and_grid_checked(qubit):
    t0 = time.monotonic()
    solver = ScgfSolver(qubit)
    mean0 = transport_moments(qubit, fd_check=False).mean_currents[0]
    at_mean = rate_function(qubit, np.array([[mean0]]), active=[0])
    assert abs(at_mean.points[0].value) <= 1e-8
    alphas = np.linspace(mean0 - 0.004, mean0 + 0.004, 9).reshape(-1, 1)
    table = rate_function(qubit, alphas, active=[0])
    vals = table.values()
    assert vals.min() >= -1e-12, f"negative rate {vals.min()}"
    mid = vals[1:-1] - 0.5 * (vals[:-2] + vals[2:])
    assert mid.max() <= 1e-8, f"midpoint convexity violation {mid.max()}"
    lo, hi = qubit.domain_box[0]
    for alpha in (mean0 - 0.003, mean0 + 0.0025):
        newton = rate_function(qubit, np.array([[alpha]]),
                               active=[0]).points[0]
        grid_val, grid_k = oracles.grid_rate_function(
            lambda k: solver.f(np.array([k, 0.0])), alpha, lo, hi)
        assert abs(newton.value - grid_val) <= 1e-7
        assert abs(newton.argmin[0] - grid_k) <= 1e-5
    _line(5, "rate function vs dense grid", time.monotonic() - t0, 60.0)


@pytest.mark.filterwarnings("ignore::fcslab.errors.TruncationWarning")
def test_criterion_06_two_point_measurement_distribution(qubit):
    t0 = time.monotonic()
    t = 5.0
    spacing = 0.8 * np.pi / t
    modes = [resonant_modes(qubit.system, res, 3, spacing, n_max=2)
             for res in qubit.reservoirs]
    fv = assemble(qubit, modes)
    assert fv.dim <= 1458
    dist = tpm_distribution(fv, qubit.rho_system, t)
    assert abs(dist.total() - 1.0) <= 1e-10
    chi0 = characteristic_function(fv, qubit.rho_system, np.zeros(2), t)
    assert abs(chi0 - 1.0) <= 1e-12
    for kappa in (np.array([0.3, 0.1]), np.array([0.25, 0.5])):
        chi = characteristic_function(fv, qubit.rho_system, kappa, t)
        assert abs(dist.laplace(kappa) - chi) <= 1e-8
    # zero coupling: all mass exactly on zero transfer
    free = make_model(qubit.system.hamiltonian, canonical_reservoirs(),
                      lam=0.0)
    d0 = tpm_distribution(assemble(free, modes), free.rho_system, t)
    assert len(d0.probabilities) == 1
    assert np.all(np.asarray(d0.support[0]) == 0.0)
    assert abs(d0.probabilities[0] - 1.0) <= 1e-14
    _line(6, "measurement statistics at dim 1458", time.monotonic() - t0,
          120.0)


def test_criterion_07_finite_volume_tracks_weak_coupling(qubit):
    t0 = time.monotonic()
    kappas = [(0.2, 0.0), (0.4, 0.0), (0.8, 0.0), (0.1, 0.05), (0.0, 0.3)]
    lams = [0.4, 0.3, 0.2, 0.1]
    table = weak_coupling_compare(qubit, kappas, lams, n_modes=3, n_max=2,
                                  spacing_margin=1.0, rho_rule="tilted")
    meds = [table.median_deviation(lam) for lam in lams]
    report = ", ".join(f"lam={l}: {m:.4f}" for l, m in zip(lams, meds))
    assert all(a > b for a, b in zip(meds, meds[1:])), \
        f"medians not decreasing: {report}"
    elapsed = time.monotonic() - t0
    assert elapsed < 600.0
    assert meds[lams.index(0.2)] <= 0.25, (
        f"median relative deviation at lam=0.2 is "
        f"{meds[lams.index(0.2)]:.4f} > 0.25 ({report}); the trend check "
        f"above passed, the absolute level does not reach 0.25 on these "
        f"instances")
    _line(7, "weak-coupling deviation decay", elapsed, 600.0)


@pytest.mark.filterwarnings("ignore::fcslab.errors.TruncationWarning")
def test_criterion_08_transfer_operator_identities(qubit):
    t0 = time.monotonic()
    kappa = np.array([0.4, 0.0])
    # compression identity on a small exactly-solvable instance
    fv32 = transfer_instance(qubit, 0.3, tau=0.5, n_blocks=4, n_modes=1,
                             n_occ=3, spacing_margin=0.8)
    blocks32 = extract_blocks(compressed_step(fv32, kappa, 0.5, lam=0.3),
                              n_max=4)
    op32 = build_and_deform(blocks32)
    for m in range(1, 5):
        assert op32.compression_residual(m) <= 1e-8, f"m = {m}"
    # the spectrum does not depend on the gauge shift delta
    other = build_and_deform(blocks32, delta=op32.delta + 0.3)
    assert abs(op32.f_transfer - other.f_transfer) <= 1e-8
    # stronger coupling leaves more inter-block correlation behind
    chats = {}
    for lam in (0.1, 0.4):
        fv = transfer_instance(qubit, lam, tau=0.5, n_blocks=2, n_modes=3,
                               n_occ=2, spacing_margin=0.8)
        cd = compressed_step(fv, kappa, 0.5, lam=lam)
        chats[lam] = extract_blocks(cd, n_max=2).c_hat
    assert chats[0.1] < chats[0.4], f"c_hat {chats}"
    # deformed leading eigenvalue tracks the weak-coupling rate
    fv = transfer_instance(qubit, 0.2, tau=0.2, n_blocks=2, n_modes=3,
                           n_occ=2, spacing_margin=1.0)
    blocks = extract_blocks(compressed_step(fv, kappa, 0.2, lam=0.2),
                            n_max=2)
    op = build_and_deform(blocks)
    f_fgr = 0.2 ** 2 * ScgfSolver(qubit).leading(kappa).eigenvalue.real
    rel = abs(op.f_transfer - f_fgr) / abs(f_fgr)
    assert rel <= 0.3, f"relative gap {rel}"
    _line(8, "transfer-operator construction", time.monotonic() - t0, 600.0)


def test_criterion_09_trajectories_reproduce_generator_statistics(qubit):
    t0 = time.monotonic()
    solver = ScgfSolver(qubit)
    horizon = 100.0 / solver.leading(np.zeros(2)).gap
    rp = build_rate_process(qubit.system, qubit.reservoirs)
    ens = sample(rp, horizon, 10_000, seed=SEED)
    est, se = mean_current_estimates(ens)
    pulls = (est - rp.mean_currents()) / se
    assert np.abs(pulls).max() <= 3.0, f"current pulls {pulls}"
    emp = empirical_scgf(ens, np.array([[0.2, 0.0]]))
    assert abs(emp.pulls()[0]) <= 3.0, f"scgf pull {emp.pulls()[0]}"
    mom = transport_moments(qubit, fd_check=False)
    lam2 = qubit.lam ** 2
    report = clt_test(ens, mom.mean_currents / lam2, mom.covariance / lam2,
                      significance=0.01)
    assert report.passed, (f"clt p-values {report.p_values}, "
                           f"mahalanobis {report.p_mahalanobis}")
    # bit-level reproducibility: a fresh run of any prefix is identical
    again = sample(rp, horizon, 100, seed=SEED, jobs=2)
    assert again.y.tobytes() == ens.y[:100].tobytes()
    _line(9, "trajectory sampling statistics", time.monotonic() - t0, 300.0)


@pytest.mark.filterwarnings("ignore::fcslab.errors.TruncationWarning")
def test_criterion_10_block_time_invariance(qubit):
    t0 = time.monotonic()
    kappa = np.array([0.4, 0.0])
    fv = transfer_instance(qubit, 0.2, tau=0.2, n_blocks=4, n_modes=3,
                           n_occ=2, spacing_margin=1.0)
    fine = build_and_deform(
        extract_blocks(compressed_step(fv, kappa, 0.2, lam=0.2), n_max=4))
    coarse = build_and_deform(
        extract_blocks(compressed_step(fv, kappa, 0.4, lam=0.2), n_max=2))
    rel = abs(fine.rate - coarse.rate) / abs(coarse.rate)
    assert rel <= 1e-2, f"block-time dependence {rel}"
    _line(10, "block-time invariance", time.monotonic() - t0, 120.0)
