"""Finite-volume assembly, two-point measurement statistics, correlation
decay checks, and the weak-coupling comparison harness."""

import itertools
import warnings

import numpy as np
import pytest
import scipy.integrate
import scipy.linalg

from fcslab import (
    ReservoirSpec,
    SpectralDensity,
    ReservoirModes,
    assemble,
    characteristic_function,
    correlation_function,
    discretize_reservoir,
    effective_density,
    make_model,
    resonant_modes,
    tpm_distribution,
    weak_coupling_compare,
)
from fcslab.errors import (
    ConfigError,
    DimensionCap,
    EmptyRange,
    NoExponentialDecay,
    OverflowGuard,
    RecurrenceHorizonExceeded,
    TruncationWarning,
)
from fcslab.finite_volume import _fourier_integral
from oracles import qubit_scgf_physical

SX = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
EQ = np.diag([0.5, -0.5]).astype(complex)


def ohmic_reservoir(label="hot", beta=1.0):
    return ReservoirSpec(label=label, beta=beta, coupling=SX,
                         density=SpectralDensity(
                             "ohmic", {"gamma": 0.5, "exponent": 1.0,
                                       "cutoff": 5.0}))


@pytest.fixture(scope="module")
def fv32(qubit_model):
    """32-dimensional two-reservoir instance: 2 modes per reservoir, n_max 1."""
    model = qubit_model.with_lam(0.3)
    modes = [resonant_modes(model.system, r, 2, 0.35, n_max=1)
             for r in model.reservoirs]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TruncationWarning)
        fv = assemble(model, modes)
    return fv


@pytest.fixture(scope="module")
def rho_probe():
    return np.array([[0.3, 0.1 + 0.05j], [0.1 - 0.05j, 0.7]])


# ---------------------------------------------------------------------------
# discretization
# ---------------------------------------------------------------------------

def test_discretize_midpoint_single_mode():
    res = ohmic_reservoir()
    mm = discretize_reservoir(res, 1, (0.5, 1.5), n_max=3)
    assert mm.frequencies.shape == (1,)
    assert mm.frequencies[0] == pytest.approx(1.0)
    # one midpoint node carries the full interval weight: g^2 = J(1) * 1
    assert mm.couplings[0] ** 2 == pytest.approx(res.density(1.0), rel=1e-14)
    assert mm.n_max == 3 and mm.label == "hot"


def test_discretize_quadrature_convergence():
    # sum g_j^2 is a quadrature rule for the integral of J; midpoint errors
    # must at least halve when the mode count doubles
    res = ohmic_reservoir()
    lo, hi = 0.2, 3.0
    exact, _ = scipy.integrate.quad(lambda x: res.density(x), lo, hi)
    errs = []
    for n in (4, 8, 16, 32):
        mm = discretize_reservoir(res, n, (lo, hi))
        errs.append(abs(np.sum(mm.couplings ** 2) - exact))
    for a, b in zip(errs, errs[1:]):
        assert b <= 0.5 * a + 1e-14


def test_discretize_gauss_scheme_accuracy():
    res = ohmic_reservoir()
    lo, hi = 0.2, 3.0
    exact, _ = scipy.integrate.quad(lambda x: res.density(x), lo, hi)
    mm = discretize_reservoir(res, 12, (lo, hi), scheme="gauss")
    assert np.sum(mm.couplings ** 2) == pytest.approx(exact, rel=1e-10)
    # weighted first moment too: sum g^2 xi ~ integral of J(x) x
    exact1, _ = scipy.integrate.quad(lambda x: x * res.density(x), lo, hi)
    assert np.sum(mm.couplings ** 2 * mm.frequencies) == \
        pytest.approx(exact1, rel=1e-10)


def test_discretize_rejects_bad_input():
    res = ohmic_reservoir()
    with pytest.raises(EmptyRange):
        discretize_reservoir(res, 4, (2.0, 1.0))
    with pytest.raises(EmptyRange):
        discretize_reservoir(res, 4, (-1.0, 1.0))
    with pytest.raises(EmptyRange):
        discretize_reservoir(res, 0, (0.5, 1.5))
    with pytest.raises(ConfigError):
        discretize_reservoir(res, 4, (0.5, 1.5), scheme="chebyshev")
    with pytest.raises(ConfigError):
        ReservoirModes(label="x", beta=1.0, frequencies=np.array([1.0, -0.2]),
                       couplings=np.array([0.1, 0.1]), n_max=1)
    with pytest.raises(EmptyRange):
        ReservoirModes(label="x", beta=1.0, frequencies=np.array([]),
                       couplings=np.array([]), n_max=1)


def test_resonant_modes_grid_layout(qubit_system):
    res = ohmic_reservoir()
    mm = resonant_modes(qubit_system, res, 3, 0.1, n_max=2)
    # qubit has a single positive transition at 1: grid (0.9, 1.0, 1.1)
    assert np.allclose(mm.frequencies, [0.9, 1.0, 1.1])
    assert np.allclose(mm.couplings ** 2, res.density(mm.frequencies) * 0.1)
    assert mm.min_spacing() == pytest.approx(0.1)
    with pytest.raises(EmptyRange):
        resonant_modes(qubit_system, res, 9, 0.3, n_max=2)


def test_mode_set_roundtrips_through_dict():
    res = ohmic_reservoir(beta=1.7)
    mm = discretize_reservoir(res, 5, (0.4, 2.2), n_max=4)
    back = ReservoirModes.from_dict(mm.to_dict())
    assert back.label == mm.label and back.beta == mm.beta
    assert back.n_max == 4 and back.scheme == "uniform"
    assert np.array_equal(back.frequencies, mm.frequencies)
    assert np.array_equal(back.couplings, mm.couplings)


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def test_assemble_single_mode_matches_hand_matrix():
    # one resonant mode, occupation cutoff 1: the 4x4 picture is solvable by
    # hand; basis order (exc,0), (exc,1), (gnd,0), (gnd,1)
    lam, g = 0.25, 0.3
    model = make_model(EQ, [ohmic_reservoir()], lam=lam)
    mm = ReservoirModes(label="hot", beta=1.0, frequencies=np.array([1.0]),
                        couplings=np.array([g]), n_max=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TruncationWarning)
        fv = assemble(model, [mm])
    c = lam * g
    hand = np.array([
        [0.5, 0.0, 0.0, c],
        [0.0, 1.5, c, 0.0],
        [0.0, c, -0.5, 0.0],
        [c, 0.0, 0.0, 0.5],
    ])
    assert fv.dim == 4
    assert np.allclose(fv.hamiltonian, hand, atol=1e-14)
    # blocks {(exc,1),(gnd,0)} and {(exc,0),(gnd,1)}: the second has
    # eigenvalues 1/2 +- lam g
    eig = np.sort(np.linalg.eigvalsh(fv.hamiltonian))
    # block {(exc,1),(gnd,0)}: [[3/2, c], [c, -1/2]] -> 1/2 +- sqrt(1 + c^2)
    # block {(exc,0),(gnd,1)}: [[1/2, c], [c, 1/2]]  -> 1/2 +- c
    expected = np.sort([0.5 + np.sqrt(1 + c * c), 0.5 - np.sqrt(1 + c * c),
                        0.5 + c, 0.5 - c])
    assert np.allclose(eig, expected, atol=1e-13)


def test_assemble_free_spectrum_at_zero_coupling():
    model = make_model(EQ, [ohmic_reservoir(), ohmic_reservoir("cold", 2.0)],
                       lam=0.0)
    modes = [resonant_modes(model.system, r, 2, 0.4, n_max=2)
             for r in model.reservoirs]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TruncationWarning)
        fv = assemble(model, modes)
    xi = np.concatenate([m.frequencies for m in modes])
    sums = []
    for e in (0.5, -0.5):
        for occ in itertools.product(range(3), repeat=len(xi)):
            sums.append(e + np.dot(occ, xi))
    assert fv.dim == 2 * 3 ** 4
    assert np.allclose(np.sort(np.linalg.eigvalsh(fv.hamiltonian)),
                       np.sort(sums), atol=1e-12)


def test_assemble_hermitian_and_reservoir_energies(fv32):
    h = fv32.hamiltonian
    assert np.abs(h - h.conj().T).max() <= 1e-13
    # reservoir energy observables commute with everything diagonal and
    # enumerate occupation configurations mode by mode
    k_energy = fv32.reservoir_energy
    assert k_energy.shape == (2, 16)
    xi_hot = fv32.modes[0].frequencies
    # big-endian layout: first mode of reservoir 0 has the largest stride
    m = 0b1010  # occupations (1, 0) for hot modes, (1, 0) for cold modes
    assert k_energy[0, m] == pytest.approx(xi_hot[0])


def test_assemble_rejects_mismatched_labels(qubit_model):
    modes = [resonant_modes(qubit_model.system, r, 2, 0.35, n_max=1)
             for r in qubit_model.reservoirs]
    with pytest.raises(ConfigError):
        assemble(qubit_model, [modes[1], modes[0]])
    with pytest.raises(ConfigError):
        assemble(qubit_model, modes[:1])


def test_gibbs_weights_product_form(fv32):
    w = fv32.gibbs_weights
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(w > 0)
    xi = np.concatenate([m.frequencies for m in fv32.modes])
    betas = np.array([1.0, 1.0, 2.0, 2.0])
    raw = np.zeros(16)
    for m, occ in enumerate(itertools.product(range(2), repeat=4)):
        raw[m] = np.exp(-np.sum(betas * xi * occ))
    assert np.allclose(w, raw / raw.sum(), atol=1e-14)


def test_truncation_warning_tracks_thermal_tail(qubit_system):
    # beta 1 at frequency ~1 with two levels leaves ~e^{-2} in the tail
    hot = ohmic_reservoir("hot", 1.0)
    model = make_model(EQ, [hot], lam=0.2)
    modes = [resonant_modes(qubit_system, hot, 2, 0.35, n_max=1)]
    with pytest.warns(TruncationWarning):
        assemble(model, modes)
    # beta 6 with three levels: tail e^{-6 * 0.825 * 3} ~ 4e-7 is below the
    # reporting threshold
    cold = ohmic_reservoir("hot", 6.0)
    model2 = make_model(EQ, [cold], lam=0.2)
    modes2 = [resonant_modes(qubit_system, cold, 2, 0.35, n_max=2)]
    with warnings.catch_warnings():
        warnings.simplefilter("error", TruncationWarning)
        assemble(model2, modes2)


def test_dimension_cap(qubit_model):
    modes = [resonant_modes(qubit_model.system, r, 4, 0.2, n_max=3)
             for r in qubit_model.reservoirs]
    # 2 * 4^8 = 131072 over the default cap
    with pytest.raises(DimensionCap):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", TruncationWarning)
            assemble(qubit_model, modes)
    small = [resonant_modes(qubit_model.system, r, 2, 0.35, n_max=1)
             for r in qubit_model.reservoirs]
    with pytest.raises(DimensionCap):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", TruncationWarning)
            assemble(qubit_model, small, dimension_cap=20)


# ---------------------------------------------------------------------------
# two-point measurement statistics
# ---------------------------------------------------------------------------

def test_point_mass_at_zero_without_dynamics(fv32, qubit_model, rho_probe):
    # t = 0: nothing moved
    dist = tpm_distribution(fv32, rho_probe, 0.0)
    assert dist.probabilities.tolist() == [1.0]
    assert not dist.support.any()
    # lam = 0: reservoir energies are conserved for every t
    model0 = qubit_model.with_lam(0.0)
    modes = [resonant_modes(model0.system, r, 2, 0.35, n_max=1)
             for r in model0.reservoirs]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TruncationWarning)
        fv0 = assemble(model0, modes)
    dist0 = tpm_distribution(fv0, rho_probe, 7.3)
    assert dist0.probabilities.tolist() == [1.0]
    assert not dist0.support.any()
    assert characteristic_function(fv0, rho_probe, np.array([2.0, -1.0]), 7.3) \
        == 1.0 + 0.0j


def test_chi_is_one_at_zero_counting_field(fv32, rho_probe):
    chi = characteristic_function(fv32, rho_probe, np.zeros(2), 4.0)
    assert abs(chi - 1.0) <= 1e-12


def test_chi_matches_dense_reference(fv32, rho_probe):
    # independent route: chi = Tr[(rho (x) gibbs) Gamma(-kappa) U* Gamma(kappa) U]
    # with U from expm rather than the eigendecomposition
    t = 4.0
    U = scipy.linalg.expm(-1j * t * fv32.hamiltonian)
    full_E = np.stack([np.tile(fv32.reservoir_energy[k], fv32.sys_dim)
                       for k in range(2)])
    rho_full = np.kron(rho_probe, np.diag(fv32.gibbs_weights))
    for kap in (np.array([0.4, -0.2]), np.array([1.0, 0.3]),
                np.array([0.7j, -1.3j]), np.array([0.3 + 0.5j, 0.1 - 0.2j])):
        phase = kap @ full_E
        dense = np.trace(rho_full @ np.diag(np.exp(phase))
                         @ U.conj().T @ np.diag(np.exp(-phase)) @ U)
        chi = characteristic_function(fv32, rho_probe, kap, t)
        assert abs(chi - dense) <= 1e-10


def test_tpm_distribution_consistent_with_chi(fv32, rho_probe):
    t = 4.0
    dist = tpm_distribution(fv32, rho_probe, t)
    assert np.all(dist.probabilities > 0)
    assert dist.total() == pytest.approx(1.0, abs=1e-10)
    for kap in (np.array([0.3, -0.2]), np.array([0.0, 1.0]),
                np.array([0.5j, 0.2 - 0.4j])):
        chi = characteristic_function(fv32, rho_probe, kap, t)
        assert abs(dist.laplace(kap) - chi) <= 1e-10
    # Fourier transform of a probability measure has modulus at most 1
    for theta in ([0.7, -1.3], [2.0, 0.0], [0.3, 0.3]):
        chi = characteristic_function(fv32, rho_probe,
                                      1j * np.asarray(theta), t)
        assert abs(chi) <= 1.0 + 1e-12


def test_tpm_support_is_energy_lattice(fv32, rho_probe):
    # every atom is a difference of two reservoir-energy configurations
    dist = tpm_distribution(fv32, rho_probe, 4.0)
    diffs = (fv32.reservoir_energy[:, :, None]
             - fv32.reservoir_energy[:, None, :]).reshape(2, -1).T
    for y in dist.support:
        assert np.min(np.abs(diffs - y).max(axis=1)) <= 1e-8


def test_chi_permutation_equivariance(qubit_model, rho_probe):
    # relabeling the reservoirs and permuting kappa the same way is a no-op
    model = qubit_model.with_lam(0.3)
    swapped = make_model(EQ, list(model.reservoirs[::-1]), lam=0.3)
    kap = np.array([0.4, -0.1])
    chis = []
    for m, k in ((model, kap), (swapped, kap[::-1])):
        modes = [resonant_modes(m.system, r, 2, 0.35, n_max=1)
                 for r in m.reservoirs]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", TruncationWarning)
            fv = assemble(m, modes)
        chis.append(characteristic_function(fv, rho_probe, k, 4.0))
    assert abs(chis[0] - chis[1]) <= 1e-10


def test_chi_guards(fv32, rho_probe):
    with pytest.raises(OverflowGuard):
        characteristic_function(fv32, rho_probe, np.array([400.0, 0.0]), 4.0)
    with pytest.raises(ConfigError):
        characteristic_function(fv32, rho_probe, np.array([0.1, 0.2, 0.3]), 4.0)
    bad_trace = np.diag([0.6, 0.6])
    with pytest.raises(ConfigError):
        characteristic_function(fv32, bad_trace, np.array([0.1, 0.0]), 4.0)
    not_herm = np.array([[0.5, 0.3], [0.0, 0.5]])
    with pytest.raises(ConfigError):
        characteristic_function(fv32, not_herm, np.array([0.1, 0.0]), 4.0)
    not_psd = np.diag([1.4, -0.4])
    with pytest.raises(ConfigError):
        tpm_distribution(fv32, not_psd, 4.0)


def test_chi_for_random_states(fv32):
    rng = np.random.default_rng(4041)
    t = 3.0
    kap = np.array([0.5, 0.1])
    for _ in range(4):
        a = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
        rho = a @ a.conj().T
        rho /= np.trace(rho).real
        dist = tpm_distribution(fv32, rho, t)
        assert dist.total() == pytest.approx(1.0, abs=1e-10)
        chi = characteristic_function(fv32, rho, kap, t)
        assert abs(dist.laplace(kap) - chi) <= 1e-10
        assert chi.real > 0


# ---------------------------------------------------------------------------
# correlation decay
# ---------------------------------------------------------------------------

def test_correlation_value_at_time_zero():
    res = ohmic_reservoir(beta=1.3)
    dens = effective_density(res)
    lo, hi = dens.support()
    exact, _ = scipy.integrate.quad(lambda x: dens(x), lo, hi,
                                    points=[0.0], limit=400)
    mine = abs(_fourier_integral(dens, 0.0, 0.0))
    assert mine == pytest.approx(exact, rel=1e-8)
    # exponential cutoffs leave a kink at zero frequency, so the correlation
    # tail is a power law; at a 5 percent log-residual it is not exponential
    with pytest.raises(NoExponentialDecay):
        correlation_function(res, times=np.linspace(0.0, 40.0, 641),
                             residual_tol=0.05)


def test_correlation_gaussian_cutoff_decays_exponentially():
    res = ReservoirSpec(label="g", beta=1.0, coupling=SX,
                        density=SpectralDensity(
                            "gaussian", {"gamma": 0.5, "exponent": 1.0,
                                         "cutoff": 2.0}))
    dec = correlation_function(res)
    assert dec.alpha > 0
    assert dec.residual <= 0.05
    assert dec.prefactor > 0
    # the fitted envelope actually bounds the tail of the window
    i0, i1 = dec.window
    env = dec.prefactor * np.exp(-dec.alpha * dec.times[i0:i1])
    assert np.all(dec.values[i0:i1] <= 3.0 * env)


def test_correlation_flat_density_has_no_exponential_decay():
    res = ReservoirSpec(label="f", beta=1.0, coupling=SX,
                        density=SpectralDensity(
                            "flat", {"height": 0.5, "omega_min": 0.3,
                                     "omega_max": 2.0}))
    with pytest.raises(NoExponentialDecay):
        correlation_function(res, times=np.linspace(0.0, 60.0, 961))


# ---------------------------------------------------------------------------
# weak-coupling comparison
# ---------------------------------------------------------------------------

def test_weak_coupling_table_structure(qubit_model):
    kappas = [np.array([0.3, 0.0]), np.array([0.0, 0.6])]
    tab = weak_coupling_compare(qubit_model, kappas, lams=[0.0, 0.35],
                                n_modes=2, n_max=1)
    assert tab.lams() == [0.0, 0.35]
    assert np.all(tab.deviations(0.0) == 0.0)
    devs = tab.deviations(0.35)
    assert devs.shape == (2,)
    assert np.all(np.isfinite(devs)) and np.all(devs >= 0)
    assert tab.median_deviation(0.35) == pytest.approx(np.median(devs))
    row = tab.rows[2]
    assert row.t == pytest.approx(1.0 / 0.35 ** 2)
    # the comparison column is the closed-form physical cumulant rate
    assert row.f_fgr == pytest.approx(
        qubit_scgf_physical(np.array([0.3, 0.0]), 0.35), rel=1e-9)
    assert row.chi > 0


def test_weak_coupling_recurrence_guard(qubit_model):
    with pytest.raises(RecurrenceHorizonExceeded):
        weak_coupling_compare(qubit_model, [np.array([0.3, 0.0])],
                              lams=[0.35], n_modes=2, n_max=1,
                              spacing_margin=1.2)


def test_weak_coupling_mixed_state_rule(qubit_model):
    tab = weak_coupling_compare(qubit_model, [np.array([0.3, 0.0])],
                                lams=[0.35], n_modes=2, n_max=1,
                                rho_rule="mixed")
    assert len(tab.rows) == 1 and np.isfinite(tab.rows[0].deviation)
    with pytest.raises(ConfigError):
        weak_coupling_compare(qubit_model, [np.array([0.3, 0.0])],
                              lams=[0.35], n_modes=2, n_max=1,
                              rho_rule="bogus")
