"""Central finite-difference verification of analytic gradients.

A :class:`GradCase` bundles a forward closure that reads a list of arrays
in place, the arrays themselves, and a backward closure that maps an
upstream gradient to one gradient per array. The scalar objective is
``sum(forward() * R)`` for a fixed random projection ``R``, so every
output element contributes.
"""
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

# Finite-difference step relative to the magnitude of the perturbed value.
DEFAULT_EPS = 1e-3
DEFAULT_TOLERANCE = 1e-5


@dataclass
class GradCase:
    forward: Callable[[], np.ndarray]
    backward: Callable[[np.ndarray], List[np.ndarray]]
    arrays: List[np.ndarray]
    names: List[str] = field(default_factory=list)
    eps: float = DEFAULT_EPS
    max_checks: Optional[int] = None
    # compare against the closest of central/forward/backward differences;
    # for deep ReLU nets where a step may straddle a kink
    kink_tolerant: bool = False


@dataclass
class GradcheckReport:
    name: str
    max_rel_error: float
    tolerance: float
    n_checked: int
    worst: str = ""
    seeds: int = 1

    @property
    def passed(self):
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error < self.tolerance

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name:<28s} max_rel_err={self.max_rel_error:.3e} "
                f"tol={self.tolerance:.0e} checked={self.n_checked} seeds={self.seeds}")


def gradcheck(case, tolerance=DEFAULT_TOLERANCE, rng=None, name="op"):
    """Compare analytic and central-difference gradients for ``case``.

    The error of each array is ``max|analytic - numeric|`` over the checked
    entries divided by the larger of the two gradients' max magnitudes
    (floored at 1e-6 of the largest gradient seen in any array). Failures
    are reported, never raised.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    out = case.forward()
    proj = rng.standard_normal(out.shape)
    analytic = [np.asarray(g, dtype=np.float64) for g in case.backward(proj.astype(out.dtype))]
    if len(analytic) != len(case.arrays):
        raise ValueError(f"backward returned {len(analytic)} gradients for {len(case.arrays)} arrays")

    def objective():
        return float(np.sum(case.forward() * proj))

    f0 = objective() if case.kink_tolerant else 0.0

    numeric, picked = [], []
    for arr in case.arrays:
        flat = arr.reshape(-1)
        if case.max_checks is not None and flat.size > case.max_checks:
            idx = rng.choice(flat.size, size=case.max_checks, replace=False)
        else:
            idx = np.arange(flat.size)
        num = np.empty(idx.size)
        for k, i in enumerate(idx):
            orig = flat[i]
            h = case.eps * max(1.0, abs(float(orig)))
            flat[i] = orig + h
            fp = objective()
            flat[i] = orig - h
            fm = objective()
            flat[i] = orig
            num[k] = (fp - fm) / (2 * h)
            if case.kink_tolerant:
                a_k = analytic[len(numeric)].reshape(-1)[i]
                cands = ((fp - f0) / h, (f0 - fm) / h)
                for c in cands:
                    if abs(c - a_k) < abs(num[k] - a_k):
                        num[k] = c
        numeric.append(num)
        picked.append(idx)

    global_scale = max((np.abs(n).max() if n.size else 0.0) for n in numeric)
    global_scale = max(global_scale, max(np.abs(a).max() if a.size else 0.0 for a in analytic))
    worst_err, worst_name, count = 0.0, "", 0
    names = case.names or [f"arg{i}" for i in range(len(case.arrays))]
    for nm, a, num, idx in zip(names, analytic, numeric, picked):
        if idx.size == 0:
            continue
        a = a.reshape(-1)[idx]
        denom = max(np.abs(a).max(), np.abs(num).max(), 1e-6 * global_scale, 1e-300)
        err = float(np.abs(a - num).max() / denom)
        count += idx.size
        if not np.isfinite(err) or err > worst_err:
            worst_err, worst_name = err, nm
    return GradcheckReport(name, worst_err, tolerance, count, worst_name)


REGISTRY = {}


def register(name):
    """Register a factory ``rng -> GradCase`` under ``name``."""
    def deco(factory):
        REGISTRY[name] = factory
        return factory
    return deco


def _load_all():
    # importing these modules populates REGISTRY
    import imcnet.tensor.cases  # noqa: F401
    import imcnet.mcm.deform  # noqa: F401
    import imcnet.losses  # noqa: F401
    import imcnet.composites  # noqa: F401


def registered_ops():
    _load_all()
    return sorted(REGISTRY)


def run_registered(names=None, seeds=20, tolerance=DEFAULT_TOLERANCE):
    """Run every (or the named) registered case over ``seeds`` seeds."""
    _load_all()
    names = sorted(REGISTRY) if names is None else list(names)
    reports = []
    for nm in names:
        if nm not in REGISTRY:
            raise KeyError(f"unknown op {nm!r}; known: {', '.join(sorted(REGISTRY))}")
        worst = None
        total = 0
        for seed in range(seeds):
            rng = np.random.default_rng(seed)
            rep = gradcheck(REGISTRY[nm](rng), tolerance, rng=rng, name=nm)
            total += rep.n_checked
            err = rep.max_rel_error if np.isfinite(rep.max_rel_error) else np.inf
            if worst is None or err > worst.max_rel_error:
                worst = rep
                worst.max_rel_error = err
        worst.n_checked = total
        worst.seeds = seeds
        reports.append(worst)
    return reports
