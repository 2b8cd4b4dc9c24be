"""Exact subspace decomposition of signals built from two disjoint systems.

An observation is modelled as x = H @ theta_H + S @ theta_S + e with the
columns of H spanning the wanted-signal subspace, the columns of S spanning
the structured-noise subspace, and e white Gaussian measurement error. The
oblique projector onto Range(S) along Range(H) recovers the structured-noise
component exactly in the noiseless case, which makes this module both the
synthetic ground-truth generator and an independent correctness oracle for
the learned decomposition.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SingularError

COND_LIMIT = 1e10
RANGE_OVERLAP_RTOL = 1e-8


def _check_full_rank(m, name):
    if m.ndim != 2:
        raise ConfigError(f"{name} must be a matrix, got shape {m.shape}")
    if m.shape[1] > m.shape[0]:
        raise SingularError(f"{name} has more columns than rows; cannot have full column rank")
    sv = np.linalg.svd(m, compute_uv=False)
    if sv[-1] <= 0 or sv[0] / sv[-1] > COND_LIMIT:
        raise SingularError(f"{name} is rank deficient or ill-conditioned (cond > {COND_LIMIT:g})")


def _solve_guarded(m, rhs, what):
    sv = np.linalg.svd(m, compute_uv=False)
    if sv[-1] <= 0 or sv[0] / sv[-1] > COND_LIMIT:
        raise SingularError(f"{what} is singular or ill-conditioned; ranges are not disjoint")
    return np.linalg.solve(m, rhs)


def orth_complement_projector(h_sys):
    """Projector onto the orthogonal complement of Range(h_sys).

    Symmetric, idempotent, and annihilates h_sys. Computed from an
    orthonormal basis rather than an explicit Gram inverse.
    """
    _check_full_rank(h_sys, "H")
    q, _ = np.linalg.qr(h_sys)
    return np.eye(h_sys.shape[0]) - q @ q.T


def oblique_projector(s_sys, h_sys):
    """Idempotent map onto Range(s_sys) along Range(h_sys).

    E = S (S^T P S)^-1 S^T P with P the orthogonal-complement projector of
    h_sys; satisfies E @ h_sys = 0 and E @ s_sys = s_sys.
    """
    _check_full_rank(s_sys, "S")
    p = orth_complement_projector(h_sys)
    ps = p @ s_sys
    gram = s_sys.T @ ps
    coeffs = _solve_guarded(gram, ps.T, "S^T P S")
    return s_sys @ coeffs


@dataclass
class Decomposition:
    """Additive split of an observation into signal, noise and residual."""

    x_id_hat: np.ndarray
    eps_hat: np.ndarray
    residual: np.ndarray

    def reconstruction(self):
        return self.x_id_hat + self.eps_hat + self.residual


def decompose(x_obs, h_sys, s_sys):
    """Split x_obs into its Range(H) part, Range(S) part and a residual."""
    x_obs = np.asarray(x_obs, dtype=np.float64)
    eps_hat = oblique_projector(s_sys, h_sys) @ x_obs
    x_id_hat = oblique_projector(h_sys, s_sys) @ x_obs
    return Decomposition(x_id_hat, eps_hat, x_obs - x_id_hat - eps_hat)


@dataclass
class LinearSignalModel:
    """Generative model: x = H theta_H + S theta_S + N(0, sigma_e^2 I)."""

    h_sys: np.ndarray
    s_sys: np.ndarray
    theta_h: np.ndarray
    theta_s: np.ndarray
    sigma_e: float = 0.0

    def __post_init__(self):
        self.h_sys = np.asarray(self.h_sys, dtype=np.float64)
        self.s_sys = np.asarray(self.s_sys, dtype=np.float64)
        self.theta_h = np.asarray(self.theta_h, dtype=np.float64)
        self.theta_s = np.asarray(self.theta_s, dtype=np.float64)
        if self.sigma_e < 0:
            raise ConfigError(f"sigma_e must be nonnegative, got {self.sigma_e}")
        if self.h_sys.shape[0] != self.s_sys.shape[0]:
            raise ConfigError(
                f"H and S must share the ambient dimension: {self.h_sys.shape} vs {self.s_sys.shape}"
            )
        if self.theta_h.shape != (self.h_sys.shape[1],):
            raise ConfigError(f"theta_H shape {self.theta_h.shape} != ({self.h_sys.shape[1]},)")
        if self.theta_s.shape != (self.s_sys.shape[1],):
            raise ConfigError(f"theta_S shape {self.theta_s.shape} != ({self.s_sys.shape[1]},)")
        _check_full_rank(self.h_sys, "H")
        _check_full_rank(self.s_sys, "S")
        # disjoint ranges: [H S] must have full column rank
        stacked = np.concatenate([self.h_sys, self.s_sys], axis=1)
        sv = np.linalg.svd(stacked, compute_uv=False)
        rank = int((sv > RANGE_OVERLAP_RTOL * sv[0]).sum())
        if rank < self.h_sys.shape[1] + self.s_sys.shape[1]:
            raise SingularError("Range(H) and Range(S) overlap; the model is not identifiable")

    @property
    def dim(self):
        return self.h_sys.shape[0]


def sample(model, rng_seed):
    """Draw one observation; returns (x_obs, ground-truth Decomposition)."""
    rng = np.random.default_rng(rng_seed)
    x_id = model.h_sys @ model.theta_h
    eps = model.s_sys @ model.theta_s
    e = rng.normal(0.0, model.sigma_e, size=model.dim) if model.sigma_e > 0 else np.zeros(model.dim)
    return x_id + eps + e, Decomposition(x_id, eps, e)


def random_model(rng, dim=16, k_h=3, k_s=2, sigma_e=0.0, max_tries=50):
    """A random well-conditioned model instance (helper for tests and demos)."""
    for _ in range(max_tries):
        h = rng.normal(size=(dim, k_h))
        s = rng.normal(size=(dim, k_s))
        sv = np.linalg.svd(np.concatenate([h, s], axis=1), compute_uv=False)
        if sv[-1] > 1e-3 * sv[0]:
            return LinearSignalModel(h, s, rng.normal(size=k_h), rng.normal(size=k_s), sigma_e)
    raise SingularError("could not draw a well-conditioned instance")
