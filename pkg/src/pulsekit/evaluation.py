"""Beat-tracking metrics: F-measure and the CML/AML continuity family."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

F_MEASURE_TOLERANCE = 0.07
CONTINUITY_TOLERANCE = 0.175


@dataclass
class EvalResult:
    f1: float
    cmlc: float
    cmlt: float
    amlc: float
    amlt: float

    def as_dict(self):
        return asdict(self)


def _as_beats(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    if np.any(np.diff(x) <= 0):
        raise ValueError("beat times must be strictly increasing")
    return x


def match_count(est, ref, tol: float = F_MEASURE_TOLERANCE) -> int:
    """Size of a maximum one-to-one matching with |est - ref| <= tol.

    Sweeping estimates in time order and pairing each with the earliest
    still-unmatched reference inside its window is optimal here because
    every window has the same width.
    """
    est, ref = np.sort(np.asarray(est, float)), np.sort(np.asarray(ref, float))
    j = matched = 0
    for e in est:
        while j < len(ref) and ref[j] < e - tol - 1e-12:
            j += 1
        if j < len(ref) and abs(ref[j] - e) <= tol + 1e-12:
            matched += 1
            j += 1
    return matched


def f_measure(est, ref, tol: float = F_MEASURE_TOLERANCE) -> float:
    est, ref = _as_beats(est), _as_beats(ref)
    if len(est) == 0 and len(ref) == 0:
        return 1.0
    if len(est) == 0 or len(ref) == 0:
        return 0.0
    hits = match_count(est, ref, tol)
    if hits == 0:
        return 0.0
    # harmonic mean of precision and recall, in a form that is exact for small counts
    return 2 * hits / (len(est) + len(ref))


def reference_variations(ref: np.ndarray) -> dict:
    """Metrical variants accepted by the AML measures."""
    n = len(ref)
    double = np.interp(np.arange(0, n - 0.5, 0.5), np.arange(n), ref)
    quarter = np.interp(np.arange(0.25, n - 1, 0.5), np.arange(n), ref)
    return {
        "original": ref,
        "offbeat": double[1::2],
        "double": double,
        "double_offbeat": quarter,
        "half_odd": ref[::2],
        "half_even": ref[1::2],
    }


def _correct_beats(est: np.ndarray, ref: np.ndarray, tol: float) -> np.ndarray:
    """Per estimated beat: phase and period both within ``tol`` of the reference."""
    ok = np.zeros(len(est), dtype=bool)
    if len(ref) < 2 or len(est) == 0:
        return ok
    used = np.zeros(len(ref), dtype=bool)
    for m, e in enumerate(est):
        nearest = int(np.argmin(np.abs(ref - e)))
        if used[nearest]:
            continue
        ref_ivl = ref[1] - ref[0] if nearest == 0 else ref[nearest] - ref[nearest - 1]
        phase = abs(e - ref[nearest]) / ref_ivl
        # the first estimate has no preceding interval: use the following one, if any
        if m > 0:
            period = abs(1.0 - (est[m] - est[m - 1]) / ref_ivl)
        elif len(est) > 1:
            period = abs(1.0 - (est[1] - est[0]) / ref_ivl)
        else:
            period = 0.0
        if phase < tol and period < tol:
            used[nearest] = True
            ok[m] = True
    return ok


def _longest_run(flags: np.ndarray) -> int:
    best = run = 0
    for f in flags:
        run = run + 1 if f else 0
        best = max(best, run)
    return best


def _accuracies(est, ref, tol):
    ok = _correct_beats(est, ref, tol)
    total = max(len(est), len(ref))
    return _longest_run(ok) / total, ok.sum() / total


def continuity(est, ref, tol: float = CONTINUITY_TOLERANCE) -> dict:
    """CMLc, CMLt, AMLc, AMLt.

    An estimate is correct when its phase error against the nearest
    annotation and its interval error against that annotation's interval
    are both under ``tol`` (relative). The first estimate has no preceding
    interval, so its following interval stands in (a lone estimate is judged
    on phase only). Accuracies divide by ``max(len(est), len(variant))``.
    """
    est, ref = _as_beats(est), _as_beats(ref)
    if len(ref) < 2:
        raise ValueError("continuity needs at least two reference beats")
    scores = {name: _accuracies(est, variant, tol)
              for name, variant in reference_variations(ref).items() if len(variant) >= 2}
    cmlc, cmlt = scores["original"]
    return {
        "cmlc": float(cmlc),
        "cmlt": float(cmlt),
        "amlc": float(max(c for c, _ in scores.values())),
        "amlt": float(max(t for _, t in scores.values())),
    }


def evaluate(est, ref) -> EvalResult:
    return EvalResult(f1=f_measure(est, ref), **continuity(est, ref))


def mean_result(results) -> EvalResult:
    results = list(results)
    keys = ("f1", "cmlc", "cmlt", "amlc", "amlt")
    return EvalResult(**{k: float(np.mean([getattr(r, k) for r in results])) for k in keys})


def write_results_csv(path, named_results, header: str | None = None):
    """``named_results`` is a sequence of (track, EvalResult); a MEAN row is appended."""
    named_results = list(named_results)
    rows = named_results + [("MEAN", mean_result(r for _, r in named_results))]
    with open(path, "w") as fh:
        if header:
            fh.write(f"# {header}\n")
        fh.write("track,f1,cmlc,cmlt,amlc,amlt\n")
        for name, r in rows:
            fh.write(f"{name},{r.f1:.6f},{r.cmlc:.6f},{r.cmlt:.6f},{r.amlc:.6f},{r.amlt:.6f}\n")
