"""Agreement measures between simulated and observed item statistics.

Correlations and the rank-based separation measure are written out
directly rather than delegated, because their exact tie and edge
behavior is part of this package's contract and is cross-checked against
brute-force references in the test suite. Only the Student-t tail needed
for p-values comes from SciPy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import stdtr

from .corpus import Corpus
from .responses import ParseStatus, ResponseMatrix, SimulatedResponse
from .rng import SplitMix64, derive_seed


@dataclass(frozen=True)
class CorrelationResult:
    r: float
    p_value: float
    n: int


def _as_float_arrays(x: Sequence[float], y: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    ax = np.asarray(x, dtype=float)
    ay = np.asarray(y, dtype=float)
    if ax.shape != ay.shape or ax.ndim != 1:
        raise ValueError("inputs must be one-dimensional and equally long")
    return ax, ay


def _pearson_r(ax: np.ndarray, ay: np.ndarray) -> float:
    dx = ax - ax.mean()
    dy = ay - ay.mean()
    sx = float(dx @ dx)
    sy = float(dy @ dy)
    if sx == 0.0 or sy == 0.0:
        return float("nan")
    return float((dx @ dy) / math.sqrt(sx * sy))


def _t_pvalue(r: float, n: int) -> float:
    if n < 3 or math.isnan(r):
        return float("nan")
    denom = 1.0 - r * r
    if denom <= 0.0:
        return 0.0
    t = r * math.sqrt((n - 2) / denom)
    return float(2.0 * stdtr(n - 2, -abs(t)))


def pearson(x: Sequence[float], y: Sequence[float]) -> CorrelationResult:
    """Linear correlation with a two-sided t-based p-value.

    Degenerate cases surface as NaN rather than a silent zero: a constant
    series has no linear association to report.
    """
    ax, ay = _as_float_arrays(x, y)
    r = _pearson_r(ax, ay)
    return CorrelationResult(r=r, p_value=_t_pvalue(r, len(ax)), n=len(ax))


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of their rank span."""
    arr = np.asarray(values, dtype=float)
    order = np.argsort(arr, kind="stable")
    ranks = np.empty(len(arr), dtype=float)
    i = 0
    while i < len(arr):
        j = i
        while j + 1 < len(arr) and arr[order[j + 1]] == arr[order[i]]:
            j += 1
        # positions i..j (0-based) share ranks i+1..j+1
        ranks[order[i : j + 1]] = (i + j + 2) / 2.0
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> CorrelationResult:
    """Rank correlation: the linear correlation of average ranks."""
    ax, ay = _as_float_arrays(x, y)
    r = _pearson_r(average_ranks(ax), average_ranks(ay))
    return CorrelationResult(r=r, p_value=_t_pvalue(r, len(ax)), n=len(ax))


def permutation_pvalue(
    x: Sequence[float],
    y: Sequence[float],
    seed: int,
    rounds: int = 10000,
    rank: bool = False,
) -> float:
    """Two-sided Monte Carlo permutation p for a correlation.

    The t approximation is shaky below a dozen points; this shuffles one
    series and counts permutations at least as extreme as what was seen.
    Add-one smoothing keeps the estimate away from an impossible zero.
    """
    ax, ay = _as_float_arrays(x, y)
    if rank:
        ax, ay = average_ranks(ax), average_ranks(ay)
    observed = abs(_pearson_r(ax, ay))
    if math.isnan(observed):
        return float("nan")
    rng = SplitMix64(derive_seed(seed, "permutation"))
    shuffled = list(ay)
    hits = 0
    for _ in range(rounds):
        rng.shuffle(shuffled)
        r = _pearson_r(ax, np.asarray(shuffled))
        if not math.isnan(r) and abs(r) >= observed - 1e-15:
            hits += 1
    return (1 + hits) / (1 + rounds)


def mann_whitney_auc(
    higher: Sequence[float], lower: Sequence[float]
) -> float:
    """P(draw from ``higher`` exceeds draw from ``lower``), ties half.

    Computed from rank sums, so it matches the probability definition
    exactly and, for a monotone score, any strictly increasing transform
    of the scores gives the same value.
    """
    hi = np.asarray(higher, dtype=float)
    lo = np.asarray(lower, dtype=float)
    if len(hi) == 0 or len(lo) == 0:
        return float("nan")
    ranks = average_ranks(np.concatenate([hi, lo]))
    rank_sum = float(ranks[: len(hi)].sum())
    u = rank_sum - len(hi) * (len(hi) + 1) / 2.0
    return u / (len(hi) * len(lo))


@dataclass(frozen=True)
class DifficultySeparation:
    auc: float
    n_hard: int
    n_other: int
    mode: str


def difficulty_separation(
    predictions: Mapping[str, float],
    labels: Mapping[str, str],
    mode: str = "hard_vs_easy",
    hard_label: str = "Hard",
    easy_label: str = "Easy",
) -> DifficultySeparation:
    """How cleanly predicted success rates separate hard items.

    Returns the probability that a non-hard item gets the higher
    predicted rate, so a useful predictor scores near 1. The default
    compares hard against easy only, leaving middling items out of the
    comparison; ``mode="hard_vs_rest"`` pools everything that is not
    hard.
    """
    if mode not in ("hard_vs_easy", "hard_vs_rest"):
        raise ValueError(f"unknown separation mode {mode!r}")
    hard: List[float] = []
    other: List[float] = []
    for item_id, score in predictions.items():
        label = labels.get(item_id)
        if label is None:
            continue
        if label == hard_label:
            hard.append(score)
        elif mode == "hard_vs_rest" or label == easy_label:
            other.append(score)
    return DifficultySeparation(
        auc=mann_whitney_auc(other, hard),
        n_hard=len(hard),
        n_other=len(other),
        mode=mode,
    )


@dataclass(frozen=True)
class DistractorMatchResult:
    match_rate: float
    n_items: int
    # Expected match rate for a model picking wrong answers blindly;
    # reported both against the wrong choices only and against all
    # choices, since both conventions appear in practice.
    chance_wrong_only: float
    chance_all_choices: float
    model_ties: int
    observed_ties: int


def _top_wrong_letter(
    shares: Mapping[str, float], wrong_letters: Sequence[str]
) -> Tuple[Optional[str], bool]:
    best: Optional[str] = None
    best_share = -1.0
    tie = False
    for letter in wrong_letters:  # letter order breaks exact ties
        share = float(shares.get(letter, 0.0))
        if share > best_share:
            best, best_share, tie = letter, share, False
        elif share == best_share:
            tie = True
    return best, tie


def distractor_match(
    responses: Iterable[SimulatedResponse], corpus: Corpus
) -> DistractorMatchResult:
    """Does the model fall for the same wrong answer students do?

    For each item with an observed choice distribution, compare the
    model's most-picked wrong letter against the students' most-picked
    wrong letter. Ties break by letter order on both sides and are
    counted, since a tie-broken match is weaker evidence than a clear
    one. Items where the model never answered wrongly are skipped.
    """
    counts: Dict[str, Dict[str, int]] = {}
    for response in responses:
        if response.parse_status == ParseStatus.FAILED.value:
            continue
        if response.chosen is None or response.correct == 1:
            continue
        counts.setdefault(response.item_id, {}).setdefault(response.chosen, 0)
        counts[response.item_id][response.chosen] += 1

    matches = 0
    n_items = 0
    model_ties = 0
    observed_ties = 0
    inv_wrong = 0.0
    inv_all = 0.0
    for item_id, picked in counts.items():
        item = corpus.by_id.get(item_id)
        if item is None or not item.real_choice_distribution:
            continue
        wrong = item.wrong_letters()
        model_top, m_tie = _top_wrong_letter(
            {k: float(v) for k, v in picked.items()}, wrong
        )
        observed_top, o_tie = _top_wrong_letter(item.real_choice_distribution, wrong)
        if model_top is None or observed_top is None:
            continue
        n_items += 1
        model_ties += int(m_tie)
        observed_ties += int(o_tie)
        matches += int(model_top == observed_top)
        inv_wrong += 1.0 / len(wrong)
        inv_all += 1.0 / len(item.choices)
    if n_items == 0:
        return DistractorMatchResult(
            match_rate=float("nan"),
            n_items=0,
            chance_wrong_only=float("nan"),
            chance_all_choices=float("nan"),
            model_ties=0,
            observed_ties=0,
        )
    return DistractorMatchResult(
        match_rate=matches / n_items,
        n_items=n_items,
        chance_wrong_only=inv_wrong / n_items,
        chance_all_choices=inv_all / n_items,
        model_ties=model_ties,
        observed_ties=observed_ties,
    )


def skill_correctness(matrix: ResponseMatrix) -> Dict[str, float]:
    """Observed fraction correct per skill label, over unmasked cells."""
    rates: Dict[str, float] = {}
    skills = np.asarray(matrix.skills)
    for label in dict.fromkeys(matrix.skills):
        rows = skills == label
        observed = int(matrix.mask[rows].sum())
        correct = int(np.where(matrix.mask[rows], matrix.data[rows], 0).sum())
        rates[label] = correct / observed if observed else float("nan")
    return rates


def subgroup_correlations(
    matrix: ResponseMatrix,
    student_groups: Mapping[str, Sequence[int]],
    real_rates: Mapping[str, Mapping[str, float]],
) -> Dict[str, CorrelationResult]:
    """Per-subgroup agreement with subgroup-specific observed rates.

    ``student_groups`` maps a subgroup label to the student indices that
    belong to it; ``real_rates`` maps the same label to observed per-item
    rates. Items missing an observed rate for a label drop out of that
    label's correlation.
    """
    row_of = {s: i for i, s in enumerate(matrix.student_indices)}
    results: Dict[str, CorrelationResult] = {}
    for label, members in student_groups.items():
        rows = [row_of[s] for s in members if s in row_of]
        observed = real_rates.get(label, {})
        if not rows or not observed:
            continue
        sub_mask = matrix.mask[rows]
        sub_data = np.where(sub_mask, matrix.data[rows], 0)
        counts = sub_mask.sum(axis=0)
        sums = sub_data.sum(axis=0)
        sim: List[float] = []
        real: List[float] = []
        for j, item_id in enumerate(matrix.item_ids):
            if counts[j] == 0 or item_id not in observed:
                continue
            sim.append(sums[j] / counts[j])
            real.append(float(observed[item_id]))
        if len(sim) >= 3:
            results[label] = pearson(sim, real)
    return results


def ensemble_predictions(
    predictions: Sequence[Mapping[str, float]],
    weights: Optional[Sequence[float]] = None,
) -> Dict[str, float]:
    """Weighted per-item average across prediction sets.

    Weights renormalize over the models that actually cover each item, so
    partial coverage shifts mass instead of deflating the average.
    Uniform weights by default.
    """
    if not predictions:
        return {}
    if weights is None:
        weights = [1.0] * len(predictions)
    if len(weights) != len(predictions):
        raise ValueError("one weight per prediction set is required")
    if any(w < 0 for w in weights):
        raise ValueError("weights must be non-negative")
    combined: Dict[str, float] = {}
    item_ids: List[str] = []
    for source in predictions:
        for item_id in source:
            if item_id not in combined:
                combined[item_id] = 0.0
                item_ids.append(item_id)
    out: Dict[str, float] = {}
    for item_id in item_ids:
        total = 0.0
        mass = 0.0
        for source, weight in zip(predictions, weights):
            if item_id in source:
                total += weight * float(source[item_id])
                mass += weight
        if mass > 0.0:
            out[item_id] = total / mass
    return out
