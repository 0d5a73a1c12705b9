"""Thin wrapper over scipy's gradient-based minimizers."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import optimize as _opt

log = logging.getLogger(__name__)

METHODS = ("L-BFGS-B", "TNC", "BFGS")


class OptimizerDivergence(RuntimeError):
    """The objective became non-finite at the returned point."""


@dataclass(frozen=True)
class OptimizerSettings:
    method: str = "L-BFGS-B"
    max_iter: int = 500
    gtol: float = 1e-5

    def __post_init__(self):
        method = str(self.method).upper()
        canon = {m.upper(): m for m in METHODS}
        if method not in canon:
            raise ValueError(f"optimizer method must be one of {METHODS}, got {self.method!r}")
        object.__setattr__(self, "method", canon[method])
        if int(self.max_iter) < 1:
            raise ValueError("max_iter must be >= 1")
        if not float(self.gtol) > 0:
            raise ValueError("gtol must be > 0")
        object.__setattr__(self, "max_iter", int(self.max_iter))
        object.__setattr__(self, "gtol", float(self.gtol))

    def to_config(self):
        return {"method": self.method, "max_iter": self.max_iter, "gtol": self.gtol}

    @classmethod
    def from_config(cls, cfg):
        if isinstance(cfg, OptimizerSettings):
            return cfg
        return cls(**(cfg or {}))


@dataclass
class MinimizeResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    n_iter: int
    n_eval: int
    converged: bool
    message: str


def minimize(fun_and_grad, x0, settings):
    """Minimize ``fun_and_grad(x) -> (f, g)`` from ``x0``.

    Evaluations that fail with a linear-algebra error or produce a
    non-finite value are reported to the optimizer as ``+inf`` so that its
    line search backs off. The returned point must be finite.
    """
    x0 = np.asarray(x0, dtype=np.float64).copy()
    n_eval = 0

    def wrapped(x):
        nonlocal n_eval
        n_eval += 1
        try:
            f, g = fun_and_grad(x)
        except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            log.debug("objective failed at %s: %s", x, exc)
            return np.inf, np.zeros_like(x)
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            return np.inf, np.zeros_like(x)
        return float(f), np.asarray(g, dtype=np.float64)

    if settings.method == "L-BFGS-B":
        options = {"maxiter": settings.max_iter, "gtol": settings.gtol, "maxfun": 20 * settings.max_iter}
    elif settings.method == "TNC":
        options = {"maxfun": 20 * settings.max_iter, "gtol": settings.gtol}
    else:
        options = {"maxiter": settings.max_iter, "gtol": settings.gtol}

    res = _opt.minimize(wrapped, x0, jac=True, method=settings.method, options=options)
    x = np.asarray(res.x, dtype=np.float64)
    f, g = wrapped(x)
    if not np.isfinite(f):
        raise OptimizerDivergence(f"objective is non-finite at the optimizer's final point ({res.message})")
    gnorm = float(np.max(np.abs(g))) if g.size else 0.0
    return MinimizeResult(
        x=x,
        fun=f,
        grad=g,
        n_iter=int(getattr(res, "nit", 0) or 0),
        n_eval=n_eval,
        converged=bool(res.success) or gnorm < settings.gtol,
        message=str(res.message),
    )
