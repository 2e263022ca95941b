"""Random search over CRF weights and kernel widths.

Each trial samples one parameter vector (uniform per declared linear/log
scale, prefix-stable in the seed stream so extending ``trials`` never changes
earlier draws), runs mean-field inference on every validation case and scores
the mean objective; the best trial wins, ties toward the earlier one.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .crf import CrfParams, infer
from .errors import EmptyMaskError
from .volume import LabelVolume, ProbVolume, Volume3D

log = logging.getLogger("liverseg.tuner")

PARAM_ORDER = ("w_pos", "w_bil", "sigma_pos", "sigma_bil", "sigma_int")

DEFAULT_RANGES = {
    "w_pos": (0.1, 100.0),
    "w_bil": (0.1, 100.0),
    "sigma_pos": (0.5, 50.0),
    "sigma_bil": (0.5, 50.0),
    "sigma_int": (1.0, 200.0),
}


@dataclass(frozen=True)
class SearchSpace:
    """Per-parameter (low, high) ranges and sampling scales.

    Weights and widths span orders of magnitude, so every parameter defaults
    to log-uniform sampling.
    """

    ranges: dict[str, tuple[float, float]] = field(
        default_factory=lambda: dict(DEFAULT_RANGES)
    )
    scales: dict[str, str] = field(
        default_factory=lambda: {name: "log" for name in PARAM_ORDER}
    )
    trials: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be positive")
        for name in PARAM_ORDER:
            if name not in self.ranges:
                raise ValueError(f"missing range for {name}")
            lo, hi = self.ranges[name]
            if not lo <= hi:
                raise ValueError(f"{name}: low must not exceed high, got ({lo}, {hi})")
            scale = self.scales.get(name, "log")
            if scale not in ("linear", "log"):
                raise ValueError(f"{name}: unknown scale {scale!r}")
            if scale == "log" and lo <= 0:
                raise ValueError(f"{name}: log scale requires low > 0")


@dataclass(frozen=True)
class TunerCase:
    """One validation case: unary map, intensity volume, ground truth, class."""

    unary: ProbVolume
    intensity: Volume3D
    gt: LabelVolume
    cls: int


@dataclass(frozen=True)
class TrialResult:
    trial: int
    params: CrfParams
    case_scores: tuple[float, ...]   # NaN where a case was skipped
    mean_score: float


def _sample(space: SearchSpace, rng: np.random.Generator) -> dict[str, float]:
    out = {}
    for name in PARAM_ORDER:
        lo, hi = space.ranges[name]
        scale = space.scales.get(name, "log")
        if lo == hi:
            value = float(lo)
            rng.uniform()  # keep the stream aligned across degenerate ranges
        elif scale == "log":
            value = float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
        else:
            value = float(rng.uniform(lo, hi))
        out[name] = value
    return out


def _score_case(params: CrfParams, case: TunerCase, objective: str) -> float:
    gt = case.gt.labels == case.cls
    if not gt.any():
        raise EmptyMaskError(f"class {case.cls} absent from the case ground truth")
    _, labels = infer(case.unary, case.intensity, params)
    pred = labels.labels == case.cls
    if objective == "dice":
        return metrics.dice(pred, gt)
    if objective == "voe":
        return -metrics.voe(pred, gt)
    raise ValueError(f"unsupported objective {objective!r}")


def default_objective_class(gt: LabelVolume) -> int:
    """Lesion-class Dice when lesions exist in the ground truth, else liver."""
    return 2 if (gt.labels == 2).any() else 1


def random_search(
    space: SearchSpace,
    cases: list[TunerCase],
    objective: str = "dice",
    iterations: int = 10,
) -> tuple[CrfParams, list[TrialResult]]:
    """Sample ``space.trials`` parameter vectors and return the best scorer.

    A case on which the objective is undefined (e.g. empty ground truth for
    an overlap score that needs one) is skipped with a warning and the trial
    is scored over the remainder. Deterministic given the space seed.
    """
    if not cases:
        raise ValueError("random_search needs at least one case")
    rng = np.random.default_rng(space.seed)
    trace: list[TrialResult] = []
    best: TrialResult | None = None
    for trial in range(space.trials):
        sampled = _sample(space, rng)
        params = CrfParams(iterations=iterations, **sampled)
        scores = []
        for idx, case in enumerate(cases):
            try:
                scores.append(_score_case(params, case, objective))
            except EmptyMaskError as exc:
                log.warning("trial %d: case %d skipped (%s)", trial, idx, exc)
                scores.append(math.nan)
        valid = [s for s in scores if not math.isnan(s)]
        mean_score = float(np.mean(valid)) if valid else math.nan
        result = TrialResult(trial, params, tuple(scores), mean_score)
        trace.append(result)
        if not math.isnan(mean_score) and (best is None or mean_score > best.mean_score):
            best = result
    if best is None:
        raise EmptyMaskError("objective undefined on every case for every trial")
    return best.params, trace


def write_trace_csv(path: str | Path, trace: list[TrialResult]) -> None:
    """CSV trace: trial, the five parameters, per-case scores, mean score."""
    n_cases = len(trace[0].case_scores) if trace else 0
    header = ["trial", *PARAM_ORDER, *[f"case{i}_score" for i in range(n_cases)], "mean_score"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t in trace:
            p = t.params
            row = [t.trial, p.w_pos, p.w_bil, p.sigma_pos, p.sigma_bil, p.sigma_int]
            row += [f"{s:.6g}" for s in t.case_scores]
            row.append(f"{t.mean_score:.6g}")
            writer.writerow(row)
