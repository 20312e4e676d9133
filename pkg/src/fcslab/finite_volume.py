"""Exact counting statistics at finite volume.

Reservoirs are replaced by finitely many bosonic modes on occupation-truncated
Fock spaces.  The total Hamiltonian, the commuting reservoir energy
observables, and the truncated Gibbs state are assembled densely; the
two-point measurement distribution P(y) of transferred energies and its
Laplace/Fourier transform chi(kappa, t) come from a single eigendecomposition
per instance.  Weak-coupling diagnostics compare (1/t) log chi at t = c/lambda^2
against the generator's leading eigenvalue, and reservoir time-correlation
functions are checked for the exponential decay the perturbative construction
relies on.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.csgraph

from .errors import (
    ConfigError,
    DimensionCap,
    EmptyRange,
    NoExponentialDecay,
    OverflowGuard,
    RecurrenceHorizonExceeded,
    TruncationWarning,
)
from .model import effective_density, require_hermitian

GROUP_TOL = 1e-9
GIBBS_TAIL_WARN = 1e-6


# ---------------------------------------------------------------------------
# reservoir discretization
# ---------------------------------------------------------------------------

@dataclass
class ReservoirModes:
    """Discretized reservoir: mode frequencies, couplings, occupation cutoff.

    couplings g_j satisfy g_j^2 = J(xi_j) * w_j with quadrature weights w_j,
    so sums over modes approximate integrals against the bare density.
    """

    label: str
    beta: float
    frequencies: np.ndarray
    couplings: np.ndarray
    n_max: int
    scheme: str = "uniform"

    def __post_init__(self):
        self.frequencies = np.asarray(self.frequencies, dtype=float)
        self.couplings = np.asarray(self.couplings, dtype=float)
        if self.frequencies.ndim != 1 or \
                self.frequencies.shape != self.couplings.shape:
            raise ConfigError("mode frequencies and couplings must be "
                              "1-d arrays of equal length")
        if len(self.frequencies) == 0:
            raise EmptyRange(f"reservoir '{self.label}' has no modes")
        if np.any(self.frequencies <= 0):
            raise ConfigError("mode frequencies must be positive")
        if int(self.n_max) < 1:
            raise ConfigError("n_max must be at least 1")
        self.n_max = int(self.n_max)

    @property
    def n_modes(self):
        return len(self.frequencies)

    def min_spacing(self):
        if self.n_modes < 2:
            return np.inf
        return float(np.diff(np.sort(self.frequencies)).min())

    def to_dict(self):
        return {"label": self.label, "beta": float(self.beta),
                "frequencies": [float(x) for x in self.frequencies],
                "couplings": [float(x) for x in self.couplings],
                "n_max": self.n_max, "scheme": self.scheme}

    @classmethod
    def from_dict(cls, d):
        return cls(label=d["label"], beta=float(d["beta"]),
                   frequencies=np.asarray(d["frequencies"], dtype=float),
                   couplings=np.asarray(d["couplings"], dtype=float),
                   n_max=int(d["n_max"]), scheme=d.get("scheme", "uniform"))


def discretize_reservoir(reservoir, n_modes, xi_range, scheme="uniform",
                         n_max=2):
    """Place n_modes oscillator modes on xi_range with g_j^2 = J(xi_j) w_j.

    scheme 'uniform' uses midpoints with equal weights, 'gauss' uses
    Gauss-Legendre nodes; both make sum g_j^2 f(xi_j) converge to the
    integral of J f over the range.
    """
    lo, hi = float(xi_range[0]), float(xi_range[1])
    if not (0 <= lo < hi):
        raise EmptyRange(f"mode range ({lo}, {hi}) must satisfy 0 <= lo < hi")
    n_modes = int(n_modes)
    if n_modes < 1:
        raise EmptyRange("need at least one mode")
    if scheme == "uniform":
        width = (hi - lo) / n_modes
        xi = lo + width * (np.arange(n_modes) + 0.5)
        w = np.full(n_modes, width)
    elif scheme == "gauss":
        nodes, weights = np.polynomial.legendre.leggauss(n_modes)
        xi = 0.5 * (hi - lo) * nodes + 0.5 * (hi + lo)
        w = 0.5 * (hi - lo) * weights
    else:
        raise ConfigError(f"unknown discretization scheme '{scheme}'")
    if np.any(xi <= 0):
        raise EmptyRange("discretization produced non-positive frequencies")
    g = np.sqrt(reservoir.density(xi) * w)
    return ReservoirModes(label=reservoir.label, beta=reservoir.beta,
                          frequencies=xi, couplings=g, n_max=n_max,
                          scheme=scheme)


def resonant_modes(system, reservoir, n_modes, spacing, n_max=2):
    """Modes on uniform grids of the given spacing centered on every positive
    Bohr frequency of the system (one grid per frequency, concatenated)."""
    freqs = [w for w in system.bohr_frequencies if w > 0]
    if not freqs:
        raise EmptyRange("system has no positive transition frequency")
    xi, g = [], []
    for w in freqs:
        offsets = (np.arange(n_modes) - (n_modes - 1) / 2) * spacing
        nodes = w + offsets
        if nodes[0] <= 0:
            raise EmptyRange(
                f"spacing {spacing} pushes modes below zero at frequency {w}")
        xi.append(nodes)
        g.append(np.sqrt(reservoir.density(nodes) * spacing))
    return ReservoirModes(label=reservoir.label, beta=reservoir.beta,
                          frequencies=np.concatenate(xi),
                          couplings=np.concatenate(g), n_max=n_max,
                          scheme="uniform")


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

@dataclass
class FiniteVolumeModel:
    """Assembled finite-volume instance.

    Basis layout is system-major: full index b = i * mode_dim + m where m
    runs over occupation configurations of all modes (reservoir 0 modes
    first, each mode big-endian).  reservoir_energy[k, m] is the energy in
    reservoir k of configuration m; gibbs_weights is the truncated,
    renormalized thermal distribution over configurations.
    """

    system: object
    reservoirs: list
    modes: list
    lam: float
    hamiltonian: np.ndarray
    reservoir_energy: np.ndarray        # (n_reservoirs, mode_dim)
    gibbs_weights: np.ndarray           # (mode_dim,)
    _eig: list = field(default=None, repr=False)
    _prop: dict = field(default_factory=dict, repr=False)
    _qcache: dict = field(default_factory=dict, repr=False)

    @property
    def dim(self):
        return self.hamiltonian.shape[0]

    @property
    def sys_dim(self):
        return self.system.dim

    @property
    def mode_dim(self):
        return self.dim // self.sys_dim

    @property
    def n_reservoirs(self):
        return len(self.reservoirs)

    def recurrence_horizon(self):
        """Half the shortest recurrence period 2 pi / (mode spacing)."""
        spacing = min(m.min_spacing() for m in self.modes)
        return np.pi / spacing if np.isfinite(spacing) else np.inf

    def _eig_data(self):
        """Per-block (indices, eigvals, eigvecs) over the exact sparsity
        components of H.  Conserved checkerboard parities (e.g. sigma_x
        coupling to linear mode displacements) split the matrix in two,
        quartering the diagonalization cost with no approximation."""
        if self._eig is None:
            pattern = scipy.sparse.csr_matrix(self.hamiltonian != 0.0)
            n_comp, labels = scipy.sparse.csgraph.connected_components(
                pattern, directed=False)
            if n_comp <= 1:
                eps, vecs = np.linalg.eigh(self.hamiltonian)
                self._eig = [(np.arange(self.dim), eps, vecs)]
            else:
                data = []
                for c in range(n_comp):
                    idx = np.flatnonzero(labels == c)
                    eps, vecs = np.linalg.eigh(
                        self.hamiltonian[np.ix_(idx, idx)])
                    data.append((idx, eps, vecs))
                self._eig = data
        return self._eig

    def eigensystem(self):
        """Full (eps, vecs) of H in ascending order, assembled from the
        block data; prefer propagator() downstream so large instances keep
        the block structure."""
        data = self._eig_data()
        if len(data) == 1:
            return data[0][1], data[0][2]
        eps = np.concatenate([e for _, e, _ in data])
        vecs = np.zeros((self.dim, self.dim), dtype=complex)
        pos = 0
        for idx, e, v in data:
            vecs[idx, pos:pos + len(e)] = v
            pos += len(e)
        order = np.argsort(eps, kind="stable")
        return eps[order], vecs[:, order]

    def propagator(self, t):
        """U = exp(-i t H), cached for the handful of times in active use."""
        key = float(t)
        if key not in self._prop:
            if len(self._prop) >= 4:
                self._prop.clear()
            data = self._eig_data()
            if len(data) == 1:
                _, eps, vecs = data[0]
                u = (vecs * np.exp(-1j * eps * t)) @ vecs.conj().T
            else:
                u = np.zeros((self.dim, self.dim), dtype=complex)
                for idx, eps, vecs in data:
                    u[np.ix_(idx, idx)] = \
                        (vecs * np.exp(-1j * eps * t)) @ vecs.conj().T
            self._prop[key] = u
        return self._prop[key]

    def config_dict(self):
        return {"lam": float(self.lam),
                "modes": [m.to_dict() for m in self.modes]}


def _mode_occupations(dims):
    """occupations[j, m] = occupation of mode j in configuration m."""
    total = int(np.prod(dims))
    occ = np.zeros((len(dims), total), dtype=np.int64)
    stride = total
    for j, dj in enumerate(dims):
        stride //= dj
        occ[j] = (np.arange(total) // stride) % dj
    return occ


def assemble(model, modes, dimension_cap=8192):
    """Build the full Hamiltonian, reservoir energy observables, and the
    truncated Gibbs weights for a model plus one ReservoirModes per
    reservoir (matched by order)."""
    if len(modes) != len(model.reservoirs):
        raise ConfigError("need exactly one mode set per reservoir")
    for res, mm in zip(model.reservoirs, modes):
        if res.label != mm.label:
            raise ConfigError(
                f"mode set '{mm.label}' does not match reservoir '{res.label}'")
    d = model.system.dim
    dims = [m.n_max + 1 for m in modes for _ in m.frequencies]
    mode_dim = int(np.prod(dims))
    total = d * mode_dim
    if total > dimension_cap:
        raise DimensionCap(
            f"finite-volume dimension {total} exceeds the cap {dimension_cap}")

    flat = [(k, xi, g)
            for k, m in enumerate(modes)
            for xi, g in zip(m.frequencies, m.couplings)]
    occ = _mode_occupations(dims)

    # reservoir energies per configuration and the Gibbs distribution
    n_res = len(modes)
    energy = np.zeros((n_res, mode_dim))
    for j, (k, xi, _) in enumerate(flat):
        energy[k] += xi * occ[j]
    betas = np.array([m.beta for m in modes])
    logw = -betas @ energy
    logw -= logw.max()
    weights = np.exp(logw)
    weights /= weights.sum()

    worst = 0.0
    for j, (k, xi, _) in enumerate(flat):
        worst = max(worst, np.exp(-betas[k] * xi * dims[j]))
    if worst > GIBBS_TAIL_WARN:
        warnings.warn(
            f"thermal occupation tail beyond the cutoff reaches {worst:.2e}; "
            "truncated Gibbs weights are biased", TruncationWarning)

    # interaction: lam * sum_j g_j (D_k (x) a_j^dag + D_k^dag (x) a_j)
    ham = scipy.sparse.csr_matrix((total, total), dtype=complex)
    if model.lam != 0.0:
        for j, (k, xi, g) in enumerate(flat):
            if g == 0.0:
                continue
            nj = dims[j]
            raise_op = scipy.sparse.diags(np.sqrt(np.arange(1, nj)), -1)
            left = scipy.sparse.identity(int(np.prod(dims[:j])), format="csr")
            right = scipy.sparse.identity(int(np.prod(dims[j + 1:])),
                                          format="csr")
            adag = scipy.sparse.kron(scipy.sparse.kron(left, raise_op), right)
            coupling = scipy.sparse.csr_matrix(model.reservoirs[k].coupling)
            term = scipy.sparse.kron(coupling, adag)
            ham = ham + model.lam * g * (term + term.conj().T)
    ham = np.asarray(ham.todense())

    # free part: system energies plus mode energies, all diagonal
    sys_diag = np.real(np.diag(model.system.hamiltonian))
    full_diag = (sys_diag[:, None] + energy.sum(axis=0)[None, :]).ravel()
    ham[np.diag_indices(total)] += full_diag

    require_hermitian(ham, "finite-volume Hamiltonian")
    return FiniteVolumeModel(system=model.system,
                             reservoirs=list(model.reservoirs),
                             modes=list(modes), lam=model.lam,
                             hamiltonian=ham, reservoir_energy=energy,
                             gibbs_weights=weights)


# ---------------------------------------------------------------------------
# two-point measurement statistics
# ---------------------------------------------------------------------------

@dataclass
class TpmDistribution:
    """Atoms of the transferred-energy distribution at time t."""

    support: np.ndarray          # (n_atoms, n_reservoirs)
    probabilities: np.ndarray    # (n_atoms,)
    t: float

    def total(self):
        return float(self.probabilities.sum())

    def laplace(self, kappa):
        """sum_y P(y) e^{-(kappa|y)}; kappa may be complex (Fourier)."""
        kappa = np.atleast_1d(np.asarray(kappa))
        return complex(np.sum(self.probabilities
                              * np.exp(-self.support @ kappa)))

    def mean(self):
        return self.probabilities @ self.support


def _check_rho(rho, d):
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (d, d):
        raise ConfigError(f"system state must be {d}x{d}")
    require_hermitian(rho, "system state")
    if abs(np.trace(rho).real - 1.0) > 1e-10:
        raise ConfigError("system state must have unit trace")
    if np.linalg.eigvalsh(rho).min() < -1e-10:
        raise ConfigError("system state must be positive semidefinite")
    return rho


def _q_matrix(fv, rho, t):
    """Q[m', m] = sum_i <(i,m')| U (rho (x) |m><m|) U* |(i,m')> for U at t.

    Everything downstream (chi for any kappa, the full TPM distribution)
    reduces to contractions of Q with the Gibbs weights and energy phases.
    """
    key = (float(t), hash(rho.tobytes()))
    if key in fv._qcache:
        return fv._qcache[key]
    d, M = fv.sys_dim, fv.mode_dim
    U = fv.propagator(t)
    Ur = U.reshape(fv.dim, d, M)
    t1 = np.einsum("ij,bim->bjm", rho, Ur)
    K = np.einsum("bjm,bjm->bm", t1, Ur.conj()).real
    Q = K.reshape(d, M, M).sum(axis=0)
    if len(fv._qcache) >= 3:
        fv._qcache.clear()
    fv._qcache[key] = Q
    return Q


def characteristic_function(fv, rho_system, kappa, t):
    """chi(kappa, t) = E[e^{-(kappa|y)}] over the two-point measurement of
    the reservoir energies; real kappa gives the Laplace regime, imaginary
    kappa the Fourier regime."""
    kappa = np.atleast_1d(np.asarray(kappa))
    if kappa.shape != (fv.n_reservoirs,):
        raise ConfigError("kappa must have one entry per reservoir")
    if t == 0.0 or fv.lam == 0.0:
        return 1.0 + 0.0j
    rho = _check_rho(rho_system, fv.sys_dim)
    spread = np.abs(kappa.real) @ np.abs(fv.reservoir_energy).max(axis=1)
    if spread > 690.0:
        raise OverflowGuard(
            f"counting weight exponent {spread:.1f} exceeds the safe range",
            diagnostics={"exponent": float(spread)})
    Q = _q_matrix(fv, rho, t)
    phase_out = np.exp(-kappa @ fv.reservoir_energy)
    phase_in = np.exp(kappa @ fv.reservoir_energy) * fv.gibbs_weights
    return complex(phase_out @ Q @ phase_in)


def _group_energy_vectors(energy, tol):
    """Cluster configuration energy vectors; returns (labels, values)."""
    scale = max(1.0, float(np.abs(energy).max()))
    keys = np.round(energy / (tol * scale)).astype(np.int64)
    uniq, labels = np.unique(keys.T, axis=0, return_inverse=True)
    values = np.zeros((len(uniq), energy.shape[0]))
    counts = np.bincount(labels, minlength=len(uniq)).astype(float)
    for k in range(energy.shape[0]):
        values[:, k] = np.bincount(labels, weights=energy[k],
                                   minlength=len(uniq)) / counts
    return labels, values


def tpm_distribution(fv, rho_system, t, group_tol=GROUP_TOL):
    """Distribution of y = (measured final - initial) reservoir energies.

    At lam = 0 or t = 0 the reservoir energies are conserved and the
    distribution is exactly the point mass at 0.
    """
    if t < 0:
        raise ConfigError("time must be nonnegative")
    n_res = fv.n_reservoirs
    if fv.lam == 0.0 or t == 0.0:
        return TpmDistribution(support=np.zeros((1, n_res)),
                               probabilities=np.array([1.0]), t=float(t))
    rho = _check_rho(rho_system, fv.sys_dim)
    Q = _q_matrix(fv, rho, t)
    labels, values = _group_energy_vectors(fv.reservoir_energy, group_tol)
    # aggregate Q over (final group, initial group), Gibbs-weighting columns
    wq = Q * fv.gibbs_weights[None, :]
    return _reduce_groups(wq, labels, values, t)


def _reduce_groups(wq, labels, values, t):
    n_grp = len(values)
    # two scatter-adds: group the initial index, then the final one
    col = np.zeros((n_grp, wq.shape[0]))      # col[g_init, m_final]
    np.add.at(col, labels, wq.T)
    agg = np.zeros((n_grp, n_grp))            # agg[g_final, g_init]
    np.add.at(agg, labels, col.T)

    diffs = values[:, None, :] - values[None, :, :]
    flat_y = diffs.reshape(-1, values.shape[1])
    flat_p = agg.reshape(-1)
    scale = max(1.0, float(np.abs(values).max()))
    keys = np.round(flat_y / (GROUP_TOL * scale)).astype(np.int64)
    uniq, lab = np.unique(keys, axis=0, return_inverse=True)
    probs = np.bincount(lab, weights=flat_p, minlength=len(uniq))
    ys = np.zeros((len(uniq), values.shape[1]))
    counts = np.bincount(lab, minlength=len(uniq)).astype(float)
    for k in range(values.shape[1]):
        ys[:, k] = np.bincount(lab, weights=flat_y[:, k],
                               minlength=len(uniq)) / counts
    keep = probs > 0
    order = np.lexsort(ys[keep].T[::-1])
    return TpmDistribution(support=ys[keep][order],
                           probabilities=probs[keep][order], t=float(t))


# ---------------------------------------------------------------------------
# reservoir correlation functions
# ---------------------------------------------------------------------------

@dataclass
class CorrelationDecay:
    times: np.ndarray
    values: np.ndarray           # p_kappa(t) >= 0
    prefactor: float             # C in the fitted bound C e^{-alpha t}
    alpha: float
    residual: float              # rms log-residual over the fit window
    window: tuple                # (index range used for the fit)


def _fourier_integral(dens, kappa, t, oversample=3.0):
    """integral of G(xi) e^{-kappa xi} e^{-i t xi} over the support."""
    lo, hi = dens.support()
    breaks = sorted({lo, hi, *[b for b in dens.breakpoints() if lo < b < hi]})
    nodes, weights = np.polynomial.legendre.leggauss(16)
    total = 0.0 + 0.0j
    for a, b in zip(breaks[:-1], breaks[1:]):
        n_osc = abs(t) * (b - a) / (2 * np.pi)
        # the floor resolves the density itself, the t-term its oscillations
        panels = max(64, int(np.ceil(oversample * n_osc)) + 1)
        edges = np.linspace(a, b, panels + 1)
        mid = 0.5 * (edges[:-1] + edges[1:])
        half = 0.5 * np.diff(edges)
        xs = (mid[:, None] + half[:, None] * nodes[None, :]).ravel()
        ws = (half[:, None] * weights[None, :]).ravel()
        vals = dens(xs) * np.exp(-kappa * xs - 1j * t * xs)
        total += np.sum(vals * ws)
    return total


def correlation_function(reservoir, kappa=0.0, times=None, coupling=None,
                         fit_window=(1e-1, 1e-3), residual_tol=0.1):
    """p_kappa(t) = ||D||^2 |integral G(xi) e^{-kappa xi - i t xi} dxi| with an
    exponential-envelope fit p <= C e^{-alpha t} on the decay window.

    Raises NoExponentialDecay when the envelope never enters the window or
    the log-linear fit leaves a residual above residual_tol, which flags
    densities whose correlations decay too slowly for the perturbative
    construction (hard spectral edges give 1/t tails).
    """
    dens = effective_density(reservoir)
    if coupling is None:
        coupling = reservoir.coupling
    norm2 = float(np.linalg.norm(np.asarray(coupling), 2) ** 2)
    if times is None:
        times = np.linspace(0.0, 8.0 * reservoir.beta, 321)
    times = np.asarray(times, dtype=float)
    values = np.array([abs(_fourier_integral(dens, kappa, t)) for t in times])
    values *= norm2

    peak = values.max()
    hi_frac, lo_frac = max(fit_window), min(fit_window)
    below = np.nonzero(values <= hi_frac * peak)[0]
    if len(below) == 0:
        raise NoExponentialDecay(
            "correlations never decayed into the fit window",
            diagnostics={"final_fraction": float(values[-1] / peak)})
    start = int(below[0])
    under = np.nonzero(values[start:] <= lo_frac * peak)[0]
    stop = int(start + under[0]) + 1 if len(under) else len(values)
    sel = slice(start, stop)
    ts = times[sel]
    logs = np.log(np.maximum(values[sel], 1e-300))
    if len(ts) < 4:
        raise NoExponentialDecay("fit window holds fewer than 4 samples")
    design = np.column_stack([np.ones_like(ts), -ts])
    coef, *_ = np.linalg.lstsq(design, logs, rcond=None)
    fit = design @ coef
    spread = max(logs.max() - logs.min(), 1.0)
    residual = float(np.sqrt(np.mean((logs - fit) ** 2)) / spread)
    alpha = float(coef[1])
    if alpha <= 0 or residual > residual_tol:
        raise NoExponentialDecay(
            f"envelope is not exponential (alpha {alpha:.3g}, "
            f"log-residual {residual:.3g})",
            diagnostics={"alpha": alpha, "residual": residual})
    return CorrelationDecay(times=times, values=values,
                            prefactor=float(np.exp(coef[0])), alpha=alpha,
                            residual=residual, window=(start, stop))


# ---------------------------------------------------------------------------
# weak-coupling comparison
# ---------------------------------------------------------------------------

@dataclass
class WeakCouplingRow:
    lam: float
    t: float
    kappa: np.ndarray
    chi: float
    f_finite: float              # (1/t) log chi
    f_fgr: float                 # lam^2 * leading eigenvalue
    deviation: float             # relative gap


@dataclass
class WeakCouplingTable:
    rows: list = field(default_factory=list)

    def deviations(self, lam):
        return np.array([r.deviation for r in self.rows if r.lam == lam])

    def median_deviation(self, lam):
        return float(np.median(self.deviations(lam)))

    def lams(self):
        seen = []
        for r in self.rows:
            if r.lam not in seen:
                seen.append(r.lam)
        return seen


def weak_coupling_compare(model, kappas, lams, n_modes=3, n_max=2,
                          t_factor=1.0, spacing_margin=0.8,
                          dimension_cap=8192, rho_rule="tilted",
                          solver=None):
    """Deviation table |(1/t) log chi - lam^2 f| / (lam^2 |f|) at t = c/lam^2.

    Per lambda an instance with n_modes modes per reservoir is built on
    uniform grids centered at the system transition frequencies, spaced
    spacing_margin * pi / t so the evaluation time stays below half of the
    recurrence period.  The reference system state is the trace-normalized
    tilted stationary state at each kappa ('tilted'), which removes the
    lambda-independent overlap offset from (1/t) log chi, or the maximally
    mixed state ('mixed').
    """
    from .scgf import ScgfSolver

    if solver is None:
        solver = ScgfSolver(model, check_irreducibility=False)
    kappas = [np.atleast_1d(np.asarray(k, dtype=float)) for k in kappas]
    table = WeakCouplingTable()
    for lam in lams:
        if lam == 0.0:
            for kappa in kappas:
                table.rows.append(WeakCouplingRow(
                    lam=0.0, t=np.inf, kappa=kappa, chi=1.0, f_finite=0.0,
                    f_fgr=0.0, deviation=0.0))
            continue
        t = t_factor / lam ** 2
        spacing = spacing_margin * np.pi / t
        modes = [resonant_modes(model.system, res, n_modes, spacing, n_max)
                 for res in model.reservoirs]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", TruncationWarning)
            fv = assemble(model.with_lam(lam), modes,
                          dimension_cap=dimension_cap)
        horizon = fv.recurrence_horizon()
        # spacing = margin * pi / t puts t right at the horizon for
        # margin = 1; tolerate that boundary to rounding
        if t > horizon * (1.0 + 1e-9):
            raise RecurrenceHorizonExceeded(
                f"evaluation time {t:.3g} exceeds the recurrence horizon "
                f"{horizon:.3g}",
                diagnostics={"t": float(t), "horizon": float(horizon)})
        for kappa in kappas:
            lead = solver.leading(kappa)
            f_rate = lead.eigenvalue.real
            if rho_rule == "tilted":
                rho = lead.left_eigvec / np.trace(lead.left_eigvec)
            elif rho_rule == "mixed":
                rho = np.eye(fv.sys_dim) / fv.sys_dim
            else:
                raise ConfigError(f"unknown rho_rule '{rho_rule}'")
            chi = characteristic_function(fv, rho, kappa, t)
            f_fin = float(np.log(chi.real) / t)
            f_fgr = lam * lam * f_rate
            denom = abs(f_fgr) if abs(f_fgr) > 0 else 1.0
            table.rows.append(WeakCouplingRow(
                lam=float(lam), t=float(t), kappa=kappa,
                chi=float(chi.real), f_finite=f_fin, f_fgr=f_fgr,
                deviation=abs(f_fin - f_fgr) / denom))
    return table

