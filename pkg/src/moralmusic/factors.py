"""
Exploratory factor analysis: principal axis factoring with varimax / promax rotation.

The typical flow is::

    r = correlation_matrix(x)
    model = fit_factor_model(x, n_factors=5, rotation="promax")
    scores = factor_scores(x, model)
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

HEYWOOD_CEILING = 1.0 - 1e-6


class FactorAnalysisError(ValueError):
    pass


def _as_array(x) -> tuple[np.ndarray, tuple[str, ...]]:
    if hasattr(x, "values") and hasattr(x, "names"):
        return np.asarray(x.values, dtype=float), tuple(x.names)
    arr = np.asarray(x, dtype=float)
    return arr, tuple(f"v{i + 1}" for i in range(arr.shape[1]))


def correlation_matrix(x) -> np.ndarray:
    """Pearson correlation matrix of the columns of ``x``.

    Parameters
    ----------
    x : FeatureMatrix or array-like, shape (n, p)

    Returns
    -------
    numpy.ndarray, shape (p, p)
        Symmetric with an exact unit diagonal.
    """
    arr, names = _as_array(x)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise FactorAnalysisError("need at least 2 rows to correlate")
    centered = arr - arr.mean(axis=0)
    sd = np.sqrt((centered**2).sum(axis=0))
    constant = [names[j] for j in np.flatnonzero(sd == 0)]
    if constant:
        raise FactorAnalysisError(f"constant columns: {constant}")
    z = centered / sd
    r = z.T @ z
    r = (r + r.T) / 2.0
    np.fill_diagonal(r, 1.0)
    return np.clip(r, -1.0, 1.0)


def _fix_signs(loadings: np.ndarray) -> np.ndarray:
    """Flip columns so each has a non-negative sum (deterministic orientation)."""
    signs = np.where(loadings.sum(axis=0) < 0, -1.0, 1.0)
    return loadings * signs


def squared_multiple_correlations(r: np.ndarray) -> np.ndarray:
    """SMC of each variable on all others, ``1 - 1/diag(R^-1)``.

    Falls back to the largest absolute off-diagonal correlation per row when
    ``r`` is singular.
    """
    try:
        cond = np.linalg.cond(r)
        if not np.isfinite(cond) or cond > 1e12:
            raise np.linalg.LinAlgError("ill-conditioned")
        smc = 1.0 - 1.0 / np.diag(np.linalg.inv(r))
    except np.linalg.LinAlgError:
        off = np.abs(r - np.diag(np.diag(r)))
        logger.info("singular correlation matrix, using max |r| start values")
        smc = off.max(axis=1)
    return np.clip(smc, 0.0, 1.0)


@dataclass(frozen=True)
class PAFResult:
    loadings: np.ndarray
    communalities: np.ndarray
    eigenvalues: np.ndarray  # of the reduced matrix at convergence
    iterations: int
    converged: bool
    heywood: bool


def principal_axis_factoring(
    r: np.ndarray, n_factors: int, tol: float = 1e-3, max_iter: int = 100
) -> PAFResult:
    """Iterated principal axis extraction of unrotated loadings.

    Communalities start at the squared multiple correlations and are refined
    until the largest change drops below ``tol``. Communalities above one
    (Heywood cases) are clamped just below one and flagged.

    A factor with only two strong indicators pins down the product of their
    loadings but not each loading, so very small tolerances let the iteration
    creep along that ridge towards a Heywood case; the default stops well
    before that.
    """
    r = np.asarray(r, dtype=float)
    p = r.shape[0]
    if r.shape != (p, p):
        raise FactorAnalysisError("correlation matrix must be square")
    if not 1 <= n_factors < p:
        raise FactorAnalysisError(f"need 1 <= n_factors < {p}, got {n_factors}")

    h2 = squared_multiple_correlations(r)
    heywood = False
    converged = False
    loadings = np.zeros((p, n_factors))
    evals = np.zeros(p)
    it = 0
    for it in range(1, max_iter + 1):
        reduced = r.copy()
        np.fill_diagonal(reduced, h2)
        evals, evecs = np.linalg.eigh(reduced)
        order = np.argsort(evals)[::-1]
        evals, evecs = evals[order], evecs[:, order]
        loadings = evecs[:, :n_factors] * np.sqrt(np.maximum(evals[:n_factors], 0.0))
        new_h2 = (loadings**2).sum(axis=1)
        if (new_h2 > 1.0).any():
            heywood = True
            new_h2 = np.minimum(new_h2, HEYWOOD_CEILING)
        delta = np.max(np.abs(new_h2 - h2))
        h2 = new_h2
        if delta < tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"principal axis factoring did not converge in {max_iter} iterations", stacklevel=2)

    h2_out = (loadings**2).sum(axis=1)
    over = h2_out > HEYWOOD_CEILING
    if over.any():
        heywood = True
        loadings[over] *= np.sqrt(HEYWOOD_CEILING / h2_out[over])[:, None]
    loadings = _fix_signs(loadings)
    return PAFResult(
        loadings=loadings,
        communalities=(loadings**2).sum(axis=1),
        eigenvalues=evals,
        iterations=it,
        converged=converged,
        heywood=heywood,
    )


def varimax_criterion(loadings: np.ndarray) -> float:
    l2 = np.asarray(loadings) ** 2
    p = l2.shape[0]
    return float(((l2**2).sum(axis=0) / p - (l2.sum(axis=0) / p) ** 2).sum())


def varimax(
    loadings: np.ndarray, normalize: bool = True, tol: float = 1e-8, max_sweeps: int = 500
) -> tuple[np.ndarray, np.ndarray]:
    """Kaiser's varimax via pairwise planar rotations.

    Returns the rotated loadings and the orthonormal rotation matrix ``T``
    with ``rotated = loadings @ T``.
    """
    a = np.asarray(loadings, dtype=float)
    p, k = a.shape
    if k < 2:
        return a.copy(), np.eye(k)

    h = np.sqrt((a**2).sum(axis=1))
    scale = np.where(h > 0, h, 1.0) if normalize else np.ones(p)
    b = a / scale[:, None]
    t = np.eye(k)
    crit = varimax_criterion(b)
    for _ in range(max_sweeps):
        for i in range(k - 1):
            for j in range(i + 1, k):
                x, y = b[:, i], b[:, j]
                u = x**2 - y**2
                v = 2.0 * x * y
                num = 2.0 * (u @ v) - 2.0 * u.sum() * v.sum() / p
                den = (u @ u - v @ v) - (u.sum() ** 2 - v.sum() ** 2) / p
                phi = np.arctan2(num, den) / 4.0
                if abs(phi) < 1e-15:
                    continue
                c, s = np.cos(phi), np.sin(phi)
                rot = np.array([[c, -s], [s, c]])
                b[:, [i, j]] = b[:, [i, j]] @ rot
                t[:, [i, j]] = t[:, [i, j]] @ rot
        new_crit = varimax_criterion(b)
        gain = new_crit - crit
        crit = new_crit
        if gain < tol:
            break
    return b * scale[:, None], t


def promax(loadings: np.ndarray, kappa: int = 4) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Oblique promax rotation of varimax-rotated loadings.

    Returns
    -------
    pattern : numpy.ndarray, shape (p, k)
    phi : numpy.ndarray, shape (k, k)
        Factor correlation matrix (unit diagonal).
    transform : numpy.ndarray, shape (k, k)
        ``pattern = loadings @ transform``.
    """
    a = np.asarray(loadings, dtype=float)
    if kappa < 1:
        raise FactorAnalysisError("kappa must be >= 1")
    k = a.shape[1]
    if k < 2:
        return a.copy(), np.eye(k), np.eye(k)
    if np.linalg.matrix_rank(a) < k:
        raise FactorAnalysisError("loadings are rank deficient; cannot apply promax")
    target = np.abs(a) ** kappa * np.sign(a)
    try:
        u, *_ = np.linalg.lstsq(a, target, rcond=None)
        d = np.diag(np.linalg.inv(u.T @ u))
        u = u @ np.diag(np.sqrt(d))
        u_inv = np.linalg.inv(u)
        if not np.all(np.isfinite(u_inv)):
            raise np.linalg.LinAlgError("non-finite transform")
    except np.linalg.LinAlgError as exc:
        raise FactorAnalysisError(f"singular promax transform ({exc}); try a lower kappa") from exc
    phi = u_inv @ u_inv.T
    # absorb the rounding residue of the unit-diagonal scaling into u, so
    # pattern @ phi @ pattern.T stays equal to a @ a.T
    s = np.sqrt(np.diag(phi))
    u = u * s
    phi = phi / np.outer(s, s)
    phi = (phi + phi.T) / 2.0
    np.fill_diagonal(phi, 1.0)
    return a @ u, phi, u


def explained_variance(loadings: np.ndarray) -> float:
    """Sum of squared loadings over the number of variables."""
    a = np.asarray(loadings, dtype=float)
    if a.size == 0:
        return 0.0
    return float((a**2).sum() / a.shape[0])


@dataclass(frozen=True)
class FactorModel:
    variables: tuple[str, ...]
    pattern: np.ndarray
    phi: np.ndarray
    communalities: np.ndarray
    explained_variance: float
    rotation: str
    kappa: int | None
    eigenvalues: np.ndarray  # of the full correlation matrix (Kaiser criterion)
    correlation: np.ndarray
    unrotated: np.ndarray
    converged: bool = True
    heywood: bool = False
    iterations: int = 0
    extras: dict = field(default_factory=dict)

    @property
    def n_factors(self) -> int:
        return self.pattern.shape[1]

    @property
    def structure(self) -> np.ndarray:
        return self.pattern @ self.phi

    @property
    def explained_variance_structure(self) -> float:
        return explained_variance(self.structure)

    def groupings(self) -> list[list[str]]:
        """Variables grouped by the factor holding their largest |pattern| loading,
        each group ordered by decreasing loading."""
        best = np.argmax(np.abs(self.pattern), axis=1)
        groups = []
        for f in range(self.n_factors):
            members = [i for i in range(len(self.variables)) if best[i] == f]
            members.sort(key=lambda i: -abs(self.pattern[i, f]))
            groups.append([self.variables[i] for i in members])
        return groups

    def genre_vectors(self) -> dict[str, np.ndarray]:
        return {v: self.pattern[i].copy() for i, v in enumerate(self.variables)}

    def to_dict(self) -> dict:
        return {
            "variables": list(self.variables),
            "pattern": self.pattern.tolist(),
            "phi": self.phi.tolist(),
            "communalities": self.communalities.tolist(),
            "explained_variance": self.explained_variance,
            "explained_variance_structure": self.explained_variance_structure,
            "rotation": self.rotation,
            "kappa": self.kappa,
            "eigenvalues": self.eigenvalues.tolist(),
            "correlation": self.correlation.tolist(),
            "unrotated": self.unrotated.tolist(),
            "converged": self.converged,
            "heywood": self.heywood,
            "iterations": self.iterations,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "FactorModel":
        return cls(
            variables=tuple(data["variables"]),
            pattern=np.array(data["pattern"], dtype=float),
            phi=np.array(data["phi"], dtype=float),
            communalities=np.array(data["communalities"], dtype=float),
            explained_variance=float(data["explained_variance"]),
            rotation=data["rotation"],
            kappa=data.get("kappa"),
            eigenvalues=np.array(data["eigenvalues"], dtype=float),
            correlation=np.array(data["correlation"], dtype=float),
            unrotated=np.array(data["unrotated"], dtype=float),
            converged=bool(data.get("converged", True)),
            heywood=bool(data.get("heywood", False)),
            iterations=int(data.get("iterations", 0)),
        )


def _order_factors(pattern: np.ndarray, phi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # descending variance; each column oriented to a non-negative sum
    order = np.argsort(-(pattern**2).sum(axis=0), kind="stable")
    pattern = pattern[:, order]
    phi = phi[np.ix_(order, order)]
    signs = np.where(pattern.sum(axis=0) < 0, -1.0, 1.0)
    return pattern * signs, phi * np.outer(signs, signs)


def fit_factor_model(
    x,
    n_factors: int = 5,
    rotation: str = "promax",
    kappa: int = 4,
    tol: float = 1e-3,
    max_iter: int = 100,
) -> FactorModel:
    """Correlate, extract with PAF and rotate; ``rotation`` is none|varimax|promax."""
    arr, names = _as_array(x)
    r = correlation_matrix(arr)
    paf = principal_axis_factoring(r, n_factors, tol=tol, max_iter=max_iter)
    k = n_factors
    if rotation == "none":
        pattern, phi = paf.loadings, np.eye(k)
    elif rotation == "varimax":
        pattern, _ = varimax(paf.loadings)
        pattern, phi = _order_factors(pattern, np.eye(k))
    elif rotation == "promax":
        vm, _ = varimax(paf.loadings)
        pattern, phi, _ = promax(vm, kappa)
        pattern, phi = _order_factors(pattern, phi)
    else:
        raise FactorAnalysisError(f"unknown rotation {rotation!r}")
    full_evals = np.sort(np.linalg.eigvalsh(r))[::-1]
    return FactorModel(
        variables=names,
        pattern=pattern,
        phi=phi,
        communalities=paf.communalities,
        explained_variance=explained_variance(paf.loadings),
        rotation=rotation,
        kappa=kappa if rotation == "promax" else None,
        eigenvalues=full_evals,
        correlation=r,
        unrotated=paf.loadings,
        converged=paf.converged,
        heywood=paf.heywood,
        iterations=paf.iterations,
    )


def factor_scores(x, model: FactorModel) -> np.ndarray:
    """Thurstone regression scores ``Z R^-1 (P Phi)``.

    ``Z`` standardizes ``x`` with its own mean and population standard deviation.
    """
    arr, names = _as_array(x)
    if arr.shape[1] != len(model.variables):
        raise FactorAnalysisError(
            f"expected {len(model.variables)} columns, got {arr.shape[1]}"
        )
    sd = arr.std(axis=0)
    if (sd == 0).any():
        raise FactorAnalysisError("cannot standardize a constant column")
    z = (arr - arr.mean(axis=0)) / sd
    try:
        weights = np.linalg.solve(model.correlation, model.structure)
    except np.linalg.LinAlgError as exc:
        raise FactorAnalysisError("singular correlation matrix") from exc
    return z @ weights
