"""
Forecast Error Model
Gaussian forecast errors: covariance estimation, scenario sampling,
sensitivity matrices and uncertainty margins.

Sign convention: the realized injection at bus n is inj_n - (Gamma xi)_n, so a
positive error is an injection shortfall (or extra load).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import chi2, norm

from grid import Network, PathMatrix


logger = logging.getLogger(__name__)


class UncertaintyError(ValueError):
    """Raised for invalid error models, probabilities or dimensions."""


@dataclass(frozen=True)
class Source:
    id: str
    bus: int


@dataclass(frozen=True)
class EpsilonConfig:
    """Violation probabilities per chance-constraint family, and the rating split beta."""

    eps_s: float = 0.05
    eps_v: float = 0.05
    eps_r: float = 0.05
    eps_a: float = 0.05
    eps_c: float = 0.05
    eps_ns: float = 0.05
    beta: float = 0.5

    def __post_init__(self):
        for name in ("eps_s", "eps_v", "eps_r", "eps_a", "eps_c", "eps_ns"):
            value = getattr(self, name)
            if not 0 < value < 0.5:
                raise UncertaintyError(f"{name} must lie in (0, 0.5) for a convex reformulation, got {value}")
        if not 0 < self.beta < 1:
            raise UncertaintyError(f"beta must lie in (0, 1), got {self.beta}")

    def quantiles(self) -> Dict[str, float]:
        """
        Gaussian quantiles used by every margin family.

        The reactive rating split uses (1 - beta) * eps_s, consistent with the
        two absolute-value chance constraints it comes from.
        """
        b = self.beta
        return {
            "rating_p": gaussian_quantile(1 - b * self.eps_s / 1.25),
            "rating_q": gaussian_quantile(1 - (1 - b) * self.eps_s / 1.25),
            "aux_p": gaussian_quantile(1 - b * self.eps_s / 2.5),
            "aux_q": gaussian_quantile(1 - (1 - b) * self.eps_s / 2.5),
            "voltage": gaussian_quantile(1 - self.eps_v),
            "request": gaussian_quantile(1 - self.eps_r),
            "activation": gaussian_quantile(1 - self.eps_a),
            "curtailment": gaussian_quantile(1 - self.eps_c),
            "shedding": gaussian_quantile(1 - self.eps_ns),
        }

    @classmethod
    def from_dict(cls, doc: Dict, beta: Optional[float] = None) -> "EpsilonConfig":
        keys = {"s": "eps_s", "v": "eps_v", "r": "eps_r", "a": "eps_a", "c": "eps_c", "ns": "eps_ns"}
        kwargs = {keys[k]: float(v) for k, v in doc.items() if k in keys}
        if beta is not None:
            kwargs["beta"] = float(beta)
        return cls(**kwargs)

    def to_dict(self) -> Dict:
        return {
            "s": self.eps_s, "v": self.eps_v, "r": self.eps_r,
            "a": self.eps_a, "c": self.eps_c, "ns": self.eps_ns,
        }


@dataclass(frozen=True, eq=False)
class ForecastErrorModel:
    """
    Zero-mean Gaussian forecast errors.

    sigma has shape (T, U, U); a single (U, U) matrix is shared by all periods.
    Periods are independent of each other.
    """

    sources: Tuple[Source, ...]
    sigma: np.ndarray

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=float)
        if sigma.ndim == 2:
            sigma = sigma[None, :, :]
        u = len(self.sources)
        if sigma.ndim != 3 or sigma.shape[1:] != (u, u):
            raise UncertaintyError(f"sigma must be ({u}, {u}) per period, got {sigma.shape}")
        if not np.allclose(sigma, np.swapaxes(sigma, 1, 2), atol=1e-12):
            raise UncertaintyError("sigma is not symmetric")
        for t, s in enumerate(sigma):
            low = np.linalg.eigvalsh(s).min() if u else 0.0
            if low < -1e-9 * max(1.0, np.trace(s)):
                raise UncertaintyError(f"sigma of period {t} is not positive semidefinite (eigenvalue {low:.3g})")
        ids = [s.id for s in self.sources]
        if len(set(ids)) != len(ids):
            raise UncertaintyError(f"duplicate source ids in {ids}")
        object.__setattr__(self, "sigma", sigma)

    @property
    def n_sources(self) -> int:
        return len(self.sources)

    @property
    def source_ids(self) -> Tuple[str, ...]:
        return tuple(s.id for s in self.sources)

    def covariance(self, period: int = 0) -> np.ndarray:
        return self.sigma[0] if self.sigma.shape[0] == 1 else self.sigma[period]

    def factor(self, period: int = 0) -> np.ndarray:
        return covariance_factor(self.covariance(period))

    def total_std(self, period: int = 0) -> float:
        """Standard deviation of the total error xi_tot = 1' xi."""
        ones = np.ones(self.n_sources)
        return float(np.sqrt(max(ones @ self.covariance(period) @ ones, 0.0)))

    def incidence(self, network: Network) -> np.ndarray:
        """Gamma, the |N| x |U| source-to-bus incidence matrix."""
        gamma = np.zeros((network.n_buses, self.n_sources))
        for j, src in enumerate(self.sources):
            if src.bus not in network.index_of:
                raise UncertaintyError(f"source {src.id} sits at unknown bus {src.bus}")
            gamma[network.index_of[src.bus], j] = 1.0
        return gamma

    def scaled(self, factor: float) -> "ForecastErrorModel":
        return ForecastErrorModel(self.sources, self.sigma * factor)


@dataclass(frozen=True, eq=False)
class ScenarioSet:
    """Error draws of shape (count, T, U), per-unit."""

    draws: np.ndarray
    source_ids: Tuple[str, ...]
    seed: Optional[int] = None

    @property
    def count(self) -> int:
        return self.draws.shape[0]

    @property
    def n_periods(self) -> int:
        return self.draws.shape[1]

    def period(self, t: int = 0) -> np.ndarray:
        return self.draws[:, t, :]

    def head(self, count: int) -> "ScenarioSet":
        return ScenarioSet(self.draws[:count], self.source_ids, self.seed)


def covariance_inflation(count: int, confidence: float) -> float:
    """
    Factor c with c * S an upper confidence bound on the variance behind a
    zero-mean sample variance S of `count` draws (count * S / var ~ chi2(count)).
    """
    if count < 1:
        raise UncertaintyError(f"need at least 1 draw, got {count}")
    if not 0 < confidence < 1:
        raise UncertaintyError(f"confidence must lie in (0, 1), got {confidence}")
    return float(count / chi2.ppf(1.0 - confidence, count))


def estimate_covariance(scenarios: ScenarioSet, confidence: Optional[float] = None) -> np.ndarray:
    """
    Sample covariance about the fixed zero mean, shape (T, U, U).

    With a confidence level the estimate is scaled by
    covariance_inflation(count, confidence).
    """
    if scenarios.count < 2:
        raise UncertaintyError(f"need at least 2 scenarios to estimate a covariance, got {scenarios.count}")
    d = scenarios.draws
    sigma = np.einsum("ktu,ktv->tuv", d, d) / scenarios.count
    sigma = 0.5 * (sigma + np.swapaxes(sigma, 1, 2))
    if confidence is not None:
        sigma = sigma * covariance_inflation(scenarios.count, confidence)
    return sigma


def gaussian_quantile(p: float) -> float:
    """Inverse standard normal CDF."""
    if not 0 < p < 1:
        raise UncertaintyError(f"probability must lie in (0, 1), got {p}")
    return float(norm.ppf(p))


def covariance_factor(sigma: np.ndarray) -> np.ndarray:
    """
    L with sigma = L L'.

    Tries a plain Cholesky first; rank-deficient sample covariances get a
    diagonal shift of 1e-10 * trace / U before the second attempt.
    """
    sigma = np.asarray(sigma, dtype=float)
    u = sigma.shape[0]
    trace = float(np.trace(sigma))
    if u == 0 or trace <= 0:
        return np.zeros_like(sigma)
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        delta = 1e-10 * trace / u
        logger.warning("Covariance not positive definite, regularizing with delta=%.3g", delta)
        try:
            return np.linalg.cholesky(sigma + delta * np.eye(u))
        except np.linalg.LinAlgError as e:
            raise UncertaintyError(f"covariance factorization failed after regularization: {e}") from e


@dataclass(frozen=True, eq=False)
class AffineSensitivity:
    """
    Sensitivity rows that are affine in the participation factors:
    b(alpha) = base - (coef @ alpha) 1'.
    """

    base: np.ndarray
    coef: np.ndarray

    def at(self, alpha: np.ndarray) -> np.ndarray:
        return self.base - np.outer(self.coef @ alpha, np.ones(self.base.shape[1]))


@dataclass(frozen=True, eq=False)
class SensitivityBundle:
    b_f: np.ndarray
    b_p: np.ndarray
    b_q: np.ndarray
    b_u: np.ndarray


def affine_sensitivities(network: Network, pathmatrix: PathMatrix, model: ForecastErrorModel) -> Dict[str, AffineSensitivity]:
    """
    Affine forms of b_f, b_p, b_q and b_u.

    Voltage rows telescope along the slack path:
    b_u[n] = -2 * sum over lines on path(n) of (R b_p + X b_q).
    """
    a = pathmatrix.a
    if a.shape != (network.n_lines, network.n_buses):
        raise UncertaintyError(f"path matrix shape {a.shape} does not match network")
    gamma = model.incidence(network)
    k = np.diag(network.k_factors)
    r = np.diag(network.line_r)
    x = np.diag(network.line_x)

    p = AffineSensitivity(base=a @ gamma, coef=a)
    q = AffineSensitivity(base=a @ k @ gamma, coef=a @ k)
    u = AffineSensitivity(
        base=-2.0 * a.T @ (r @ p.base + x @ q.base),
        coef=-2.0 * a.T @ (r @ p.coef + x @ q.coef),
    )
    f = AffineSensitivity(base=np.zeros((network.n_buses, model.n_sources)), coef=-np.eye(network.n_buses))
    return {"f": f, "p": p, "q": q, "u": u}


def sensitivity_matrices(
    network: Network,
    pathmatrix: PathMatrix,
    model: ForecastErrorModel,
    alpha: Union[Sequence[float], np.ndarray],
) -> SensitivityBundle:
    """Sensitivity matrices of flexibility, flows and voltages for fixed alpha."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (network.n_buses,):
        raise UncertaintyError(f"alpha must have {network.n_buses} entries, got shape {alpha.shape}")
    aff = affine_sensitivities(network, pathmatrix, model)
    return SensitivityBundle(
        b_f=aff["f"].at(alpha),
        b_p=aff["p"].at(alpha),
        b_q=aff["q"].at(alpha),
        b_u=aff["u"].at(alpha),
    )


def uncertainty_margin(b_row: Union[Sequence[float], np.ndarray], sigma: np.ndarray, epsilon: float, scale: float = 1.0) -> float:
    """
    Omega = Phi^-1(1 - epsilon / scale) * sqrt(b' Sigma b).

    scale is 1 for one-sided constraints, 1.25 for the two-sided flow
    constraints and 2.5 for the auxiliary rating bounds.
    """
    if scale <= 0:
        raise UncertaintyError(f"scale must be positive, got {scale}")
    p = 1 - epsilon / scale
    if not 0 < p < 1:
        raise UncertaintyError(f"1 - epsilon/scale = {p} outside (0, 1)")
    b = np.asarray(b_row, dtype=float)
    variance = float(b @ np.asarray(sigma, dtype=float) @ b)
    return gaussian_quantile(p) * float(np.sqrt(max(variance, 0.0)))


def sample_scenarios(model: ForecastErrorModel, count: int, seed: int, n_periods: Optional[int] = None) -> ScenarioSet:
    """
    Zero-mean Gaussian draws via the Cholesky factor of each period's sigma.

    The same (model, count, seed) always gives bit-identical draws.
    """
    if count < 1:
        raise UncertaintyError(f"scenario count must be positive, got {count}")
    periods = n_periods or model.sigma.shape[0]
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((count, periods, model.n_sources))
    draws = np.empty_like(z)
    for t in range(periods):
        draws[:, t, :] = z[:, t, :] @ model.factor(t).T
    return ScenarioSet(draws=draws, source_ids=model.source_ids, seed=seed)


# --- file formats -----------------------------------------------------------

def load_error_model(path: Union[str, Path], base_mva: float = 1.0) -> Tuple[ForecastErrorModel, EpsilonConfig]:
    """
    Read {sources, sigma, epsilons, beta}; sigma is given in MW^2.

    Raises:
        FileNotFoundError: when the file is missing
        UncertaintyError: for malformed content
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Error model file not found: {path}")
    try:
        with open(path, "r") as f:
            doc = json.load(f)
        sources = tuple(Source(str(s["id"]), int(s["bus"])) for s in doc["sources"])
        sigma = np.asarray(doc["sigma"], dtype=float) / base_mva ** 2
        epsilons = EpsilonConfig.from_dict(doc.get("epsilons", {}), doc.get("beta"))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        if isinstance(e, UncertaintyError):
            raise
        raise UncertaintyError(f"Malformed error model {path}: {e}") from e
    return ForecastErrorModel(sources, sigma), epsilons


def save_error_model(model: ForecastErrorModel, epsilons: EpsilonConfig, path: Union[str, Path], base_mva: float = 1.0):
    sigma = model.sigma * base_mva ** 2
    doc = {
        "sources": [{"id": s.id, "bus": s.bus} for s in model.sources],
        "sigma": (sigma[0] if sigma.shape[0] == 1 else sigma).round(12).tolist(),
        "epsilons": epsilons.to_dict(),
        "beta": epsilons.beta,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)


def load_scenarios(path: Union[str, Path], source_ids: Sequence[str], base_mva: float = 1.0) -> ScenarioSet:
    """
    Read a scenario CSV (one row per draw, MW, columns named by source id).

    An optional `period` column spreads draws over several periods; rows of
    each period are taken in file order.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Scenario file not found: {path}")
    df = pd.read_csv(path)
    df.columns = [str(c) for c in df.columns]
    missing = [s for s in source_ids if s not in df.columns]
    if missing:
        raise UncertaintyError(f"{path} lacks columns for sources {missing}")

    if "period" in df.columns:
        blocks = [g[list(source_ids)].to_numpy(dtype=float) for _, g in df.groupby("period", sort=True)]
        if len({b.shape[0] for b in blocks}) != 1:
            raise UncertaintyError(f"{path}: periods have different draw counts")
        draws = np.stack(blocks, axis=1)
    else:
        draws = df[list(source_ids)].to_numpy(dtype=float)[:, None, :]
    return ScenarioSet(draws=draws / base_mva, source_ids=tuple(source_ids))


def save_scenarios(scenarios: ScenarioSet, path: Union[str, Path], base_mva: float = 1.0):
    count, periods, _ = scenarios.draws.shape
    frames = []
    for t in range(periods):
        frame = pd.DataFrame(scenarios.period(t) * base_mva, columns=list(scenarios.source_ids))
        if periods > 1:
            frame.insert(0, "period", t)
        frames.append(frame)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.concat(frames, ignore_index=True).to_csv(path, index=False, float_format="%.10g")
