"""Fast built-in checks behind ``radpos selftest``."""
from __future__ import annotations

from fractions import Fraction

import numpy as np

from .fusion import ConfusionCounts, combine_with_radiologist, transfer_to_external_cohort
from .metrics import OperatingPoint, interpolate_at_sensitivity, rates

# Published operating points (percent) and the interpolated rows they imply.
INTERPOLATION_CASES = (
    ("radiologist UCLA cutoffs 3/4", (92.19, 7.84), (65.47, 70.30), 80.00, 36.33),
    ("T2 model t=5 / t=0.9", (83.85, 42.86), (78.88, 41.73), 80.00, 41.98),
)


def _interp_pct(a, b, target) -> float:
    pts = [OperatingPoint(0, a[0] / 100, a[1] / 100), OperatingPoint(1, b[0] / 100, b[1] / 100)]
    return 100 * interpolate_at_sensitivity(pts, target / 100)


def check_interpolation(tol: float = 0.02):
    for name, a, b, target, expected in INTERPOLATION_CASES:
        got = _interp_pct(a, b, target)
        yield f"interpolation ({name})", abs(got - expected) <= tol, f"{got:.4f}% vs {expected}%"


def _simulate_cases(rng, n):
    """Per-case (truth, radiologist call, ML call on radiologist positives)."""
    truth = rng.random(n) < rng.uniform(0.1, 0.9)
    rad = np.where(truth, rng.random(n) < rng.uniform(0.2, 1.0), rng.random(n) < rng.uniform(0.0, 0.8))
    ml = rng.random(n) < rng.uniform(0.0, 1.0)
    return truth, rad, ml


def check_fusion_identities(n_tabulations: int = 1000, seed: int = 0):
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n_tabulations):
        truth, rad_call, ml_call = _simulate_cases(rng, int(rng.integers(1, 400)))
        fused_call = rad_call & ml_call
        rad = ConfusionCounts(int(np.sum(rad_call & truth)), int(np.sum(rad_call & ~truth)),
                              int(np.sum(~rad_call & ~truth)), int(np.sum(~rad_call & truth)), "Rad")
        on_pos = ConfusionCounts(int(np.sum(rad_call & ml_call & truth)), int(np.sum(rad_call & ml_call & ~truth)),
                                 int(np.sum(rad_call & ~ml_call & ~truth)), int(np.sum(rad_call & ~ml_call & truth)),
                                 "MLonPositives")
        comb = combine_with_radiologist(rad, on_pos)
        direct = (int(np.sum(fused_call & truth)), int(np.sum(fused_call & ~truth)),
                  int(np.sum(~fused_call & ~truth)), int(np.sum(~fused_call & truth)))
        if comb.as_tuple() != direct:
            bad += 1
            continue
        # exact rational check of sen' = sen * +sen, spc' = spc + (1 - spc) * +spc
        if rad.tp > 0:
            if Fraction(comb.tp, comb.tp + comb.fn) != Fraction(rad.tp, rad.tp + rad.fn) * Fraction(on_pos.tp, rad.tp):
                bad += 1
                continue
        if rad.fp + rad.tn > 0 and rad.fp > 0:
            spc = Fraction(rad.tn, rad.tn + rad.fp)
            if Fraction(comb.tn, comb.tn + comb.fp) != spc + (1 - spc) * Fraction(on_pos.tn, rad.fp):
                bad += 1
    yield f"fusion identities ({n_tabulations} tabulations)", bad == 0, f"{bad} mismatches"


def check_transfer(tol_pct: float = 0.02):
    rad = ConfusionCounts(5866, 2747, 7253, 4134, "Rad", "Zone")
    spc_plus = (0.9042 - 0.7253) / (1 - 0.7253)
    comb = transfer_to_external_cohort(1.0, spc_plus, rad)
    sen, spc = rates(comb)
    ok = abs(100 * sen - 58.66) <= tol_pct and abs(100 * spc - 90.42) <= tol_pct
    yield "external-cohort transfer", ok, f"sen {100 * sen:.3f}%, spc {100 * spc:.3f}%"


def run_all():
    results = []
    for check in (check_interpolation, check_fusion_identities, check_transfer):
        results.extend(check())
    return results
