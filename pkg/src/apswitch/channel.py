"""Correlated Rayleigh channels, MMSE estimation, MR precoding and the
Monte Carlo statistics that parameterize every power-control problem.

Notation follows the downlink use-and-then-forget bound: for user ``k``
served with amplitudes ``u_k`` (one entry per AP),

    gamma_k = (b_k^T u_k)^2 / (sum_i u_i^T C_ki u_i - (b_k^T u_k)^2 + sigma^2)

with ``[b_k]_l = Re E[h_lk^H w_lk]`` and
``[C_ki]_{lm} = E[(h_lk^H w_li) (h_mk^H w_mi)^*]``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .scenario import NetworkGeometry, ScenarioConfig

MAX_REDRAWS = 100


class DegenerateEstimateError(ValueError):
    """Raised when an estimate or beamformer is undefined (zero norm / singular system)."""


def _psd_project(matrix: np.ndarray) -> np.ndarray:
    """Hermitian part with negative eigenvalues clipped to zero."""
    return _psd_project_with_shift(matrix)[0]


def _psd_project_with_shift(matrix: np.ndarray) -> tuple[np.ndarray, float]:
    """Projection plus the largest eigenvalue change relative to the trace."""
    herm = 0.5 * (matrix + matrix.conj().T)
    eigvals, eigvecs = np.linalg.eigh(herm)
    trace = float(np.sum(np.abs(eigvals)))
    if eigvals.min() >= 0:
        return herm, 0.0
    shift = float(-eigvals.min()) / trace if trace > 0 else 0.0
    eigvals = np.clip(eigvals, 0.0, None)
    return (eigvecs * eigvals) @ eigvecs.conj().T, shift


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    eigvals, eigvecs = np.linalg.eigh(0.5 * (matrix + matrix.conj().T))
    return (eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))) @ eigvecs.conj().T


def local_scattering_covariance(gain: float, angle: float, asd_deg: float, num_antennas: int,
                                antenna_spacing: float = 0.5) -> np.ndarray:
    """Gaussian local scattering model for a uniform linear array.

    Uses the small-angular-spread closed form, which is a Gaussian
    characteristic function along the array and hence positive semidefinite.
    The result has trace ``num_antennas * gain``.
    """
    if not all(np.isfinite(v) for v in (gain, angle, asd_deg, antenna_spacing)):
        raise ValueError("covariance parameters must be finite")
    if gain < 0 or asd_deg < 0 or num_antennas < 1:
        raise ValueError("need gain >= 0, asd >= 0 and at least one antenna")
    asd = np.deg2rad(asd_deg)
    lag = np.subtract.outer(np.arange(num_antennas), np.arange(num_antennas))
    phase = 2.0 * np.pi * antenna_spacing * lag
    corr = np.exp(1j * phase * np.sin(angle)) * np.exp(-0.5 * asd**2 * (phase * np.cos(angle)) ** 2)
    return _psd_project(gain * corr)


def covariance_matrices(geometry: NetworkGeometry, config: ScenarioConfig) -> np.ndarray:
    """All spatial covariances, shape ``(L, K, N, N)``."""
    num_aps, num_users = geometry.large_scale.shape
    n = config.antennas_per_ap
    out = np.empty((num_aps, num_users, n, n), dtype=complex)
    for l in range(num_aps):
        for k in range(num_users):
            out[l, k] = local_scattering_covariance(
                geometry.large_scale[l, k], geometry.nominal_angles[l, k],
                config.angular_spread, n, config.antenna_spacing)
    return out


def _complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def sample_channel(cov: np.ndarray, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw ``h ~ CN(0, cov)`` as ``cov^{1/2} z``; ``size`` adds a leading realization axis."""
    root = _psd_sqrt(np.asarray(cov, dtype=complex))
    n = root.shape[0]
    if size is None:
        return root @ _complex_normal(rng, n)
    return _complex_normal(rng, (size, n)) @ root.T


def mmse_estimate(cov: np.ndarray, pilot_obs: np.ndarray, noise_power: float) -> np.ndarray:
    """Linear MMSE estimate ``R (R + sigma^2 I)^{-1} y``; works on stacked observations too."""
    cov = np.asarray(cov, dtype=complex)
    n = cov.shape[0]
    if not np.any(cov):
        return np.zeros_like(np.asarray(pilot_obs, dtype=complex))
    if noise_power <= 0 and np.linalg.matrix_rank(cov) < n:
        raise DegenerateEstimateError("singular estimation system (zero noise, rank-deficient R)")
    system = cov + noise_power * np.eye(n)
    # R (R + s I)^{-1} = ((R + s I)^{-1} R)^H since both are Hermitian
    gain = np.linalg.solve(system, cov).conj().T
    return np.asarray(pilot_obs) @ gain.T


def mr_beamformer(estimate: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(estimate)
    if norm == 0:
        raise DegenerateEstimateError("cannot normalise a zero channel estimate")
    return np.asarray(estimate) / norm


@dataclass(frozen=True, eq=False)
class ChannelStatistics:
    """The vectors ``b_k`` and matrices ``C_ki`` for a set of APs.

    ``b`` has shape ``(K, M)`` and ``C`` has shape ``(K, K, M, M)``, where
    ``M = len(ap_indices)`` and row/column ``j`` refers to AP ``ap_indices[j]``.
    ``projection_shift[k, i]``, when known, is the largest eigenvalue change
    made by projecting the raw estimate of ``C_ki`` onto the PSD cone,
    relative to its trace.
    """

    b: np.ndarray
    C: np.ndarray
    dl_noise: float
    num_realizations: int
    ap_indices: tuple[int, ...]
    total_aps: int = 0
    projection_shift: np.ndarray | None = None

    def __post_init__(self):
        if self.total_aps <= 0:
            object.__setattr__(self, "total_aps", max(self.ap_indices) + 1)
        self.b.setflags(write=False)
        self.C.setflags(write=False)
        if self.b.shape[1] != len(self.ap_indices) or self.C.shape[2:] != (len(self.ap_indices),) * 2:
            raise ValueError("statistics shapes do not match the AP index list")

    @property
    def num_users(self) -> int:
        return self.b.shape[0]

    @property
    def num_aps(self) -> int:
        return self.b.shape[1]

    @functools.cached_property
    def quad_forms(self) -> np.ndarray:
        """``Re C_ki``: the real quadratic form seen by real amplitude vectors."""
        return np.ascontiguousarray(self.C.real)

    @functools.cached_property
    def sqrt_quad_forms(self) -> np.ndarray:
        """Symmetric square roots of ``Re C_ki``, shape ``(K, K, M, M)``."""
        forms = self.quad_forms
        eigvals, eigvecs = np.linalg.eigh(forms)
        roots = np.sqrt(np.clip(eigvals, 0.0, None))
        return np.einsum("kiab,kib,kicb->kiac", eigvecs, roots, eigvecs)

    def position(self, ap: int) -> int:
        return self.ap_indices.index(ap)


def _restricted(stats: ChannelStatistics, positions: np.ndarray, aps: tuple[int, ...]) -> ChannelStatistics:
    return ChannelStatistics(
        b=stats.b[:, positions].copy(),
        C=stats.C[:, :, positions[:, None], positions[None, :]].copy(),
        dl_noise=stats.dl_noise,
        num_realizations=stats.num_realizations,
        ap_indices=aps,
        total_aps=stats.total_aps,
    )


def restrict_statistics(stats: ChannelStatistics, active: Iterable[int]) -> ChannelStatistics:
    """Keep only the rows (and columns) of APs in ``active``, in ascending AP order."""
    aps = tuple(sorted(set(int(a) for a in active)))
    if not aps:
        raise ValueError("active set must be non-empty")
    missing = [a for a in aps if a not in stats.ap_indices]
    if missing:
        raise ValueError(f"APs {missing} are not covered by these statistics")
    positions = np.array([stats.position(a) for a in aps], dtype=int)
    return _restricted(stats, positions, aps)


def _link_seed(base_seed: int, ap: int, user: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(base_seed), spawn_key=(int(ap), int(user)))


def _ap_products(covs_l: np.ndarray, base_seed: int, ap: int, num_realizations: int,
                 ul_noise: float) -> np.ndarray:
    """Inner products ``g[r, k, i] = h_lk^H w_li`` at one AP, one random stream per link."""
    num_users, n = covs_l.shape[0], covs_l.shape[1]
    h = np.empty((num_realizations, num_users, n), dtype=complex)
    w = np.empty_like(h)
    for k in range(num_users):
        rng = np.random.default_rng(_link_seed(base_seed, ap, k))
        h[:, k] = sample_channel(covs_l[k], rng, size=num_realizations)
        noise = np.sqrt(ul_noise) * _complex_normal(rng, (num_realizations, n))
        est = mmse_estimate(covs_l[k], h[:, k] + noise, ul_noise)
        norms = np.linalg.norm(est, axis=1)
        redraws = 0
        while np.any(norms == 0):
            redraws += int(np.count_nonzero(norms == 0))
            if redraws > MAX_REDRAWS:
                raise DegenerateEstimateError(f"zero-norm estimates for AP {ap}, user {k}")
            bad = np.flatnonzero(norms == 0)
            h[bad, k] = sample_channel(covs_l[k], rng, size=bad.size)
            noise = np.sqrt(ul_noise) * _complex_normal(rng, (bad.size, n))
            est[bad] = mmse_estimate(covs_l[k], h[bad, k] + noise, ul_noise)
            norms = np.linalg.norm(est, axis=1)
        w[:, k] = est / norms[:, None]
    return np.einsum("rkn,rin->rki", h.conj(), w)


def _statistics_from_products(g: np.ndarray, dl_noise: float, aps: tuple[int, ...],
                              total_aps: int) -> ChannelStatistics:
    """``g`` has shape ``(R, M, K, K)`` indexed ``[realization, ap, user k, precoder i]``."""
    num_realizations = g.shape[0]
    diag = np.einsum("rmkk->rmk", g)
    b = np.clip(diag.real.mean(axis=0).T, 0.0, None)
    C = np.einsum("rlki,rmki->kilm", g, g.conj()) / num_realizations
    num_users = b.shape[0]
    shift = np.zeros((num_users, num_users))
    for k in range(num_users):
        for i in range(num_users):
            C[k, i], shift[k, i] = _psd_project_with_shift(C[k, i])
    return ChannelStatistics(b=b, C=C, dl_noise=dl_noise, num_realizations=num_realizations,
                             ap_indices=aps, total_aps=total_aps, projection_shift=shift)


class StatisticsProvider:
    """Lazily measures statistics AP by AP and remembers which APs were measured.

    Each (AP, user) link draws its realizations from its own seeded stream, so
    statistics for a set of APs do not depend on the order or grouping in
    which APs are measured.
    """

    def __init__(self, covariances: np.ndarray, config: ScenarioConfig, seed: int):
        self.covariances = covariances
        self.config = config
        self.seed = int(seed)
        self._products: dict[int, np.ndarray] = {}
        self.measured: set[int] = set()

    @property
    def num_aps(self) -> int:
        return self.covariances.shape[0]

    def _products_for(self, ap: int) -> np.ndarray:
        if ap not in self._products:
            self._products[ap] = _ap_products(
                self.covariances[ap], self.seed, ap, self.config.num_channel_realizations,
                self.config.ul_noise_power)
        return self._products[ap]

    def __call__(self, active: Iterable[int]) -> ChannelStatistics:
        aps = tuple(sorted(set(int(a) for a in active)))
        if not aps:
            raise ValueError("active set must be non-empty")
        if aps[0] < 0 or aps[-1] >= self.num_aps:
            raise ValueError(f"AP index out of range: {aps}")
        self.measured.update(aps)
        g = np.stack([self._products_for(a) for a in aps], axis=1)
        return _statistics_from_products(g, self.config.dl_noise_power, aps, self.num_aps)

    def full(self) -> ChannelStatistics:
        return self(range(self.num_aps))


def estimate_statistics(covariances: np.ndarray, config: ScenarioConfig,
                        rng: np.random.Generator | int) -> ChannelStatistics:
    """Monte Carlo estimate of ``b_k`` and ``C_ki`` over all APs."""
    seed = rng if isinstance(rng, (int, np.integer)) else int(rng.integers(2**63))
    return StatisticsProvider(covariances, config, seed).full()


def save_statistics(stats: ChannelStatistics, path: str | Path) -> None:
    """Write statistics to an ``.npz`` archive (shape header plus row-major arrays)."""
    np.savez(path, b=stats.b, C=stats.C, dl_noise=stats.dl_noise, num_realizations=stats.num_realizations,
             ap_indices=np.array(stats.ap_indices, dtype=int), total_aps=stats.total_aps)


def load_statistics(path: str | Path) -> ChannelStatistics:
    with np.load(path) as data:
        return ChannelStatistics(
            b=data["b"], C=data["C"], dl_noise=float(data["dl_noise"]),
            num_realizations=int(data["num_realizations"]),
            ap_indices=tuple(int(a) for a in data["ap_indices"]),
            total_aps=int(data["total_aps"]),
        )


def statistics_from_arrays(b: Sequence, C: Sequence, dl_noise: float,
                           num_realizations: int = 1) -> ChannelStatistics:
    """Wrap hand-made statistics (tests, closed-form checks) covering APs ``0..M-1``."""
    b = np.atleast_2d(np.asarray(b, dtype=float))
    C = np.asarray(C, dtype=complex)
    num_users, m = b.shape
    C = C.reshape(num_users, num_users, m, m)
    return ChannelStatistics(b=b, C=C, dl_noise=float(dl_noise),
                             num_realizations=num_realizations, ap_indices=tuple(range(m)))
