"""Experiment drivers: simulate, estimate, solve, evaluate, combine.

A run is a directory. ``manifest.json`` pins the configuration (hashed),
the prompt fixtures (hashed) and the request counts; ``responses.jsonl``
accumulates graded replies in a deterministic order so two runs with the
same seed produce byte-identical logs and an interrupted run can resume
into the same bytes; the remaining artifacts are derived from those two
plus the corpus and never embed timestamps, so re-deriving them is also
byte-stable.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

from . import __version__
from .classroom import (
    SkillDistribution,
    SkillLevel,
    StudentProfile,
    load_name_pool,
    sample_classroom,
    strategy_from_spec,
)
from .corpus import Corpus, Item, filter_corpus, load_corpus
from .gateway import (
    CompletionBackend,
    CompletionRequest,
    Gateway,
    GatewayConfig,
    HttpChatBackend,
    MockStudentModel,
    RequestKey,
)
from .irt import FitConfig, FitResult, fit_rasch
from .metrics import (
    CorrelationResult,
    difficulty_separation,
    distractor_match,
    ensemble_predictions,
    pearson,
    permutation_pvalue,
    skill_correctness,
    spearman,
    subgroup_correlations,
)
from .promptgen import (
    PromptTemplates,
    render_direct_percentage_prompt,
    render_knowledge_prompt,
    render_student_prompt,
)
from .responses import (
    ParseStatus,
    ResponseLog,
    ResponseMatrix,
    SimulatedResponse,
    build_matrix,
    direct_estimates,
    grade as grade_answer,
    parse_answer,
    parse_percentage,
)
from .rng import mix64

MANIFEST_NAME = "manifest.json"
RESPONSES_NAME = "responses.jsonl"
FIT_NAME = "fit.json"
PREDICTIONS_NAME = "predictions.json"
EVALUATION_JSON_NAME = "evaluation.json"
EVALUATION_CSV_NAME = "evaluation.csv"
REPORT_NAME = "report.md"

# Request rows that do not belong to a simulated student (expert solves,
# percentage estimates) carry this index so keys stay totally ordered.
NO_STUDENT = -1

_DPCE_VARIANTS = {
    # variant -> (temperature, replicates)
    "greedy": (0.0, 1),
    "averaged": (0.3, 10),
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run depends on, in one hashable bundle."""

    corpus_path: str
    mode: str = "simulate"  # simulate | dpce | baseline
    grade: Optional[int] = None
    n_students: int = 300
    strategy: str = "none"
    model: str = "local-model"
    endpoint: str = "http://localhost:8000/v1/chat/completions"
    temperature: float = 0.7
    seed: int = 0
    mock: bool = False
    replicates: int = 1
    dpce_variant: str = "greedy"
    mask_failed: bool = False
    skill_weights: Optional[Dict[str, float]] = None
    max_retries: int = 3
    max_in_flight: int = 8
    timeout: float = 60.0
    capture: bool = False
    mock_options: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.mode not in ("simulate", "dpce", "baseline"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.n_students < 1:
            raise ValueError("n_students must be >= 1")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if self.dpce_variant not in _DPCE_VARIANTS:
            raise ValueError(f"unknown dpce variant {self.dpce_variant!r}")

    def distribution(self) -> SkillDistribution:
        if self.skill_weights is None:
            return SkillDistribution.default()
        return SkillDistribution.from_mapping(self.skill_weights)

    def to_mapping(self) -> Dict[str, object]:
        out: Dict[str, object] = {}
        for spec in fields(self):
            out[spec.name] = getattr(self, spec.name)
        return out

    @classmethod
    def from_mapping(cls, raw: Mapping[str, object]) -> "ExperimentConfig":
        known = {spec.name for spec in cls.__dataclass_fields__.values()}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**raw)  # type: ignore[arg-type]

    @classmethod
    def from_file(
        cls, path: Union[str, Path], overrides: Optional[Mapping[str, object]] = None
    ) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as handle:
            raw = json.load(handle)
        if not isinstance(raw, dict):
            raise ValueError("config file must hold a JSON object")
        merged = dict(raw)
        merged.update(overrides or {})
        return cls.from_mapping(merged)


def expand_sweep(
    base: Mapping[str, object],
) -> List[Tuple[str, ExperimentConfig]]:
    """Grid-expand list-valued ``n_students``/``strategy`` fields.

    Each expanded run gets its own seed, derived by mixing the run index
    into the base seed, so sweep points are independent draws rather than
    accidental replays of one another. A config with no list fields comes
    back as a single unnamed run with its seed untouched.
    """
    sizes = base.get("n_students", 300)
    strategies = base.get("strategy", "none")
    size_list = list(sizes) if isinstance(sizes, (list, tuple)) else [sizes]
    strategy_list = (
        list(strategies) if isinstance(strategies, (list, tuple)) else [strategies]
    )
    swept = isinstance(sizes, (list, tuple)) or isinstance(strategies, (list, tuple))
    runs: List[Tuple[str, ExperimentConfig]] = []
    index = 0
    for n in size_list:
        for strategy in strategy_list:
            raw = dict(base)
            raw["n_students"] = n
            raw["strategy"] = strategy
            if swept:
                raw["seed"] = int(base.get("seed", 0)) ^ mix64(index)
            config = ExperimentConfig.from_mapping(raw)
            name = f"n{n}-{str(strategy).replace(':', '-')}" if swept else ""
            runs.append((name, config))
            index += 1
    return runs


def _canonical_json(payload: object) -> str:
    return json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def _sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def build_manifest(
    config: ExperimentConfig,
    templates: PromptTemplates,
    n_items: int,
    n_students: int,
    n_requests: int,
    names_repeat: bool,
) -> Dict[str, object]:
    config_map = config.to_mapping()
    manifest: Dict[str, object] = {
        "manifest_version": 1,
        "package_version": __version__,
        "mode": config.mode,
        "config": config_map,
        "config_hash": _sha256_text(_canonical_json(config_map)),
        "prompt_hashes": templates.fixture_hashes(),
        "counts": {
            "items": n_items,
            "students": n_students,
            "requests": n_requests,
        },
        "names_repeat": names_repeat,
    }
    manifest["manifest_hash"] = _sha256_text(_canonical_json(manifest))
    return manifest


def _write_json(path: Path, payload: Mapping[str, object]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2, ensure_ascii=False)
        handle.write("\n")


def _read_json(path: Path) -> Dict[str, object]:
    with open(path, "r", encoding="utf-8") as handle:
        return json.load(handle)


def _load_run_corpus(config: ExperimentConfig) -> Corpus:
    corpus = load_corpus(config.corpus_path)
    if config.grade is not None:
        corpus = filter_corpus(corpus, grade=config.grade)
    if len(corpus) == 0:
        raise ValueError("no items left after filtering; check corpus and grade")
    return corpus


def _build_rosters(
    config: ExperimentConfig, corpus: Corpus
) -> Dict[int, List[StudentProfile]]:
    """One roster per grade present, all drawn from the same seed.

    Sharing the seed keeps student k's skill and identity stable across
    grades, so a multi-grade evaluation sees one cohort, not one cohort
    per grade.
    """
    strategy = strategy_from_spec(config.strategy, name_pool=load_name_pool())
    dist = config.distribution()
    rosters: Dict[int, List[StudentProfile]] = {}
    for grade in corpus.grades_present():
        rosters[grade] = sample_classroom(
            config.n_students, grade, dist, strategy, config.seed
        )
    return rosters


def _make_backend(config: ExperimentConfig, corpus: Corpus) -> CompletionBackend:
    if not config.mock:
        return HttpChatBackend(
            GatewayConfig(
                endpoint=config.endpoint,
                model=config.model,
                timeout=config.timeout,
                max_retries=config.max_retries,
                max_in_flight=config.max_in_flight,
            )
        )
    options = dict(config.mock_options)
    betas = options.pop("skill_betas", None)
    if betas is not None:
        options["skill_betas"] = {
            SkillLevel(str(k)): float(v) for k, v in dict(betas).items()
        }
    if config.skill_weights is not None:
        options.setdefault("mixture", config.distribution())
    return MockStudentModel(corpus=corpus, seed=config.seed, **options)


def _make_gateway(
    config: ExperimentConfig,
    backend: CompletionBackend,
    out_dir: Optional[Path],
) -> Gateway:
    capture_path = None
    if config.capture and out_dir is not None:
        capture_path = str(out_dir / "capture.jsonl")
    return Gateway(
        backend,
        GatewayConfig(
            endpoint=config.endpoint,
            model=config.model,
            timeout=config.timeout,
            max_retries=config.max_retries,
            max_in_flight=config.max_in_flight,
        ),
        capture_path=capture_path,
    )


@dataclass
class RunOutcome:
    config: ExperimentConfig
    manifest: Dict[str, object]
    out_dir: Optional[Path]
    responses: List[SimulatedResponse]
    completed: bool
    matrix: Optional[ResponseMatrix] = None
    fit: Optional[FitResult] = None
    predictions: Dict[str, Optional[float]] = field(default_factory=dict)
    parse_counts: Dict[str, int] = field(default_factory=dict)


def _prepare_out_dir(
    config: ExperimentConfig, out_dir: Optional[Union[str, Path]], manifest: Dict[str, object]
) -> Tuple[Optional[Path], List[SimulatedResponse], set]:
    """Create or re-enter a run directory; refuse one built from a
    different configuration."""
    if out_dir is None:
        return None, [], set()
    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)
    manifest_path = out_path / MANIFEST_NAME
    if manifest_path.exists():
        existing = _read_json(manifest_path)
        if existing.get("config_hash") != manifest["config_hash"]:
            raise ValueError(
                f"{out_path} holds a run with a different configuration; "
                "pick a fresh directory or delete the old run"
            )
    _write_json(manifest_path, manifest)
    log = ResponseLog(str(out_path / RESPONSES_NAME))
    done_responses, done_keys = log.open_resumable()
    return out_path, done_responses, done_keys


def _count_statuses(responses: Sequence[SimulatedResponse]) -> Dict[str, int]:
    counts = {status.value: 0 for status in ParseStatus}
    for response in responses:
        counts[response.parse_status] = counts.get(response.parse_status, 0) + 1
    return counts


def run_simulate(
    config: ExperimentConfig,
    out_dir: Optional[Union[str, Path]] = None,
    backend: Optional[CompletionBackend] = None,
    max_requests: Optional[int] = None,
) -> RunOutcome:
    """Role-play every (student, item, replicate) cell and fit the result.

    Requests are issued item by item; each item's replies are graded and
    appended to the log sorted by (student, replicate), which is what
    makes equal-seed logs byte-identical and interrupted logs a clean
    prefix. ``max_requests`` stops after that many new completions (used
    to exercise resumption); the outcome then reports ``completed=False``
    and carries no fit.
    """
    if config.mode != "simulate":
        config = replace(config, mode="simulate")
    corpus = _load_run_corpus(config)
    rosters = _build_rosters(config, corpus)
    templates = PromptTemplates.load()
    n_students = sum(len(r) for r in rosters.values())
    n_requests = sum(
        len(rosters[item.grade]) * config.replicates for item in corpus
    )
    names_repeat = config.strategy == "diverse" and config.n_students > 48
    manifest = build_manifest(
        config, templates, len(corpus), n_students, n_requests, names_repeat
    )
    out_path, responses, done = _prepare_out_dir(config, out_dir, manifest)
    log = ResponseLog(str(out_path / RESPONSES_NAME)) if out_path else None

    if backend is None:
        backend = _make_backend(config, corpus)
    gateway = _make_gateway(config, backend, out_path)

    issued = 0
    truncated = False
    for item in corpus:
        roster = rosters[item.grade]
        batch: List[CompletionRequest] = []
        for profile in roster:
            for replicate in range(config.replicates):
                key = RequestKey(item.item_id, profile.student_index, replicate)
                if key.as_tuple() in done:
                    continue
                batch.append(
                    CompletionRequest(
                        prompt=render_student_prompt(item, profile, templates),
                        key=key,
                        temperature=config.temperature,
                        seed=config.seed,
                        skill=profile.skill,
                    )
                )
        if max_requests is not None and issued + len(batch) > max_requests:
            batch = batch[: max_requests - issued]
            truncated = True
        if batch:
            skill_of = {p.student_index: p.skill for p in roster}
            records = gateway.run(batch)
            issued += len(batch)
            graded: List[SimulatedResponse] = []
            for record in records:
                parsed = parse_answer(record.text, item.choice_letters)
                graded.append(
                    SimulatedResponse(
                        item_id=item.item_id,
                        student_index=record.key.student_index,
                        replicate=record.key.replicate,
                        skill=skill_of[record.key.student_index].value,
                        raw=record.text,
                        chosen=parsed.chosen,
                        correct=grade_answer(parsed.chosen, item.correct_key),
                        parse_status=parsed.status.value,
                    )
                )
            graded.sort(key=lambda r: (r.student_index, r.replicate))
            if log is not None:
                log.append_batch(graded)
            responses.extend(graded)
        if truncated:
            break

    completed = len(responses) == n_requests
    outcome = RunOutcome(
        config=config,
        manifest=manifest,
        out_dir=out_path,
        responses=responses,
        completed=completed,
    )
    if not completed:
        return outcome

    item_ids = [item.item_id for item in corpus]
    matrix = build_matrix(responses, item_ids, mask_failed=config.mask_failed)
    fit = fit_rasch(matrix, FitConfig())
    rates = matrix.item_success_rates()
    predictions: Dict[str, Optional[float]] = {}
    for j, item_id in enumerate(matrix.item_ids):
        value = float(rates[j])
        predictions[item_id] = None if math.isnan(value) else value
    outcome.matrix = matrix
    outcome.fit = fit
    outcome.predictions = predictions
    outcome.parse_counts = _count_statuses(responses)
    if out_path is not None:
        fit_payload = fit.to_json_dict()
        fit_payload["manifest_hash"] = manifest["manifest_hash"]
        _write_json(out_path / FIT_NAME, fit_payload)
        _write_json(
            out_path / PREDICTIONS_NAME,
            {
                "manifest_hash": manifest["manifest_hash"],
                "mode": "simulate",
                "predictions": predictions,
                "parse_counts": outcome.parse_counts,
            },
        )
    return outcome


def _run_per_item(
    config: ExperimentConfig,
    out_dir: Optional[Union[str, Path]],
    backend: Optional[CompletionBackend],
    render,
    parse,
    temperature: float,
    replicates: int,
) -> Tuple[RunOutcome, Corpus]:
    """Shared driver for the modes that query each item without a roster."""
    corpus = _load_run_corpus(config)
    templates = PromptTemplates.load()
    n_requests = len(corpus) * replicates
    manifest = build_manifest(config, templates, len(corpus), 0, n_requests, False)
    out_path, responses, done = _prepare_out_dir(config, out_dir, manifest)
    log = ResponseLog(str(out_path / RESPONSES_NAME)) if out_path else None
    if backend is None:
        backend = _make_backend(config, corpus)
    gateway = _make_gateway(config, backend, out_path)

    for item in corpus:
        batch: List[CompletionRequest] = []
        for replicate in range(replicates):
            key = RequestKey(item.item_id, NO_STUDENT, replicate)
            if key.as_tuple() in done:
                continue
            batch.append(
                CompletionRequest(
                    prompt=render(item, templates),
                    key=key,
                    temperature=temperature,
                    seed=config.seed,
                )
            )
        if not batch:
            continue
        records = gateway.run(batch)
        graded = [parse(item, record) for record in records]
        graded.sort(key=lambda r: (r.student_index, r.replicate))
        if log is not None:
            log.append_batch(graded)
        responses.extend(graded)

    outcome = RunOutcome(
        config=config,
        manifest=manifest,
        out_dir=out_path,
        responses=responses,
        completed=len(responses) == n_requests,
        parse_counts=_count_statuses(responses),
    )
    return outcome, corpus


def run_dpce(
    config: ExperimentConfig,
    out_dir: Optional[Union[str, Path]] = None,
    backend: Optional[CompletionBackend] = None,
) -> RunOutcome:
    """Ask the model to estimate each item's success percentage directly.

    The greedy variant asks once at temperature 0; the averaged variant
    asks ten times at temperature 0.3 and averages whatever parses. The
    per-item estimate lands in ``predictions.json``; replicates whose
    reply never states a percentage are dropped from the average, and an
    item with no parseable replicate gets a null estimate.
    """
    if config.mode != "dpce":
        config = replace(config, mode="dpce")
    temperature, replicates = _DPCE_VARIANTS[config.dpce_variant]

    def parse(item: Item, record) -> SimulatedResponse:
        value = parse_percentage(record.text)
        return SimulatedResponse(
            item_id=item.item_id,
            student_index=record.key.student_index,
            replicate=record.key.replicate,
            skill="",
            raw=record.text,
            chosen=None,
            correct=0,
            parse_status=(
                ParseStatus.PARSED.value if value is not None else ParseStatus.FAILED.value
            ),
        )

    outcome, corpus = _run_per_item(
        config,
        out_dir,
        backend,
        render_direct_percentage_prompt,
        parse,
        temperature,
        replicates,
    )
    if not outcome.completed:
        return outcome
    item_ids = [item.item_id for item in corpus]
    parsed = [
        (response.item_id, parse_percentage(response.raw))
        for response in outcome.responses
    ]
    outcome.predictions = direct_estimates(parsed, item_ids)
    if outcome.out_dir is not None:
        _write_json(
            outcome.out_dir / PREDICTIONS_NAME,
            {
                "manifest_hash": outcome.manifest["manifest_hash"],
                "mode": "dpce",
                "variant": config.dpce_variant,
                "predictions": outcome.predictions,
                "parse_counts": outcome.parse_counts,
            },
        )
    return outcome


def run_baseline(
    config: ExperimentConfig,
    out_dir: Optional[Union[str, Path]] = None,
    backend: Optional[CompletionBackend] = None,
) -> RunOutcome:
    """Solve every item once as an expert, reporting raw model knowledge.

    The per-item record is 1 when the model picked the keyed answer. A
    low overall accuracy here caps what any persona conditioning can be
    expected to deliver downstream.
    """
    if config.mode != "baseline":
        config = replace(config, mode="baseline")

    def parse(item: Item, record) -> SimulatedResponse:
        parsed = parse_answer(record.text, item.choice_letters)
        return SimulatedResponse(
            item_id=item.item_id,
            student_index=record.key.student_index,
            replicate=record.key.replicate,
            skill="",
            raw=record.text,
            chosen=parsed.chosen,
            correct=grade_answer(parsed.chosen, item.correct_key),
            parse_status=parsed.status.value,
        )

    outcome, corpus = _run_per_item(
        config, out_dir, backend, render_knowledge_prompt, parse, 0.0, 1
    )
    if not outcome.completed:
        return outcome
    per_item = {r.item_id: float(r.correct) for r in outcome.responses}
    outcome.predictions = {item.item_id: per_item[item.item_id] for item in corpus}
    accuracy = sum(per_item.values()) / len(per_item) if per_item else float("nan")
    if outcome.out_dir is not None:
        _write_json(
            outcome.out_dir / PREDICTIONS_NAME,
            {
                "manifest_hash": outcome.manifest["manifest_hash"],
                "mode": "baseline",
                "predictions": outcome.predictions,
                "accuracy": accuracy,
                "parse_counts": outcome.parse_counts,
            },
        )
    return outcome


def _correlation_payload(result: CorrelationResult, method: str) -> Dict[str, object]:
    return {
        "r": result.r,
        "p_value": result.p_value,
        "n": result.n,
        "p_method": method,
    }


def evaluate_predictions(
    predictions: Mapping[str, Optional[float]],
    corpus: Corpus,
    seed: int = 0,
    permutation_below: int = 10,
) -> Dict[str, object]:
    """Core agreement numbers for one prediction set against the corpus.

    Small samples (< ``permutation_below`` items) get permutation
    p-values; the t approximation takes over above that.
    """
    sim: List[float] = []
    real: List[float] = []
    used: List[str] = []
    for item in corpus:
        value = predictions.get(item.item_id)
        if value is None:
            continue
        sim.append(float(value))
        real.append(item.real_percent_correct)
        used.append(item.item_id)
    if len(sim) < 3:
        raise ValueError("need at least 3 predicted items to evaluate")
    labels = {item.item_id: item.difficulty_label for item in corpus}
    pred_map = {item_id: value for item_id, value in zip(used, sim)}
    use_permutation = len(sim) < permutation_below
    result: Dict[str, object] = {
        "n_items": len(sim),
        "pearson": _correlation_payload(
            pearson(sim, real), "t" if not use_permutation else "permutation"
        ),
        "spearman": _correlation_payload(
            spearman(sim, real), "t" if not use_permutation else "permutation"
        ),
    }
    if use_permutation:
        result["pearson"]["p_value"] = permutation_pvalue(sim, real, seed)
        result["spearman"]["p_value"] = permutation_pvalue(sim, real, seed, rank=True)
    for mode in ("hard_vs_easy", "hard_vs_rest"):
        separation = difficulty_separation(pred_map, labels, mode=mode)
        result[f"auc_{mode}"] = {
            "auc": separation.auc,
            "n_hard": separation.n_hard,
            "n_other": separation.n_other,
        }
    return result


def _demographic_groups(
    rosters: Mapping[int, Sequence[StudentProfile]]
) -> Dict[str, List[int]]:
    groups: Dict[str, List[int]] = {}
    seen: set = set()
    for roster in rosters.values():
        for profile in roster:
            if profile.name_demographics is None:
                continue
            if profile.student_index in seen:
                continue
            seen.add(profile.student_index)
            gender, race = profile.name_demographics
            groups.setdefault(gender.lower(), []).append(profile.student_index)
            groups.setdefault(race.lower(), []).append(profile.student_index)
    return groups


def _subgroup_real_rates(corpus: Corpus) -> Dict[str, Dict[str, float]]:
    rates: Dict[str, Dict[str, float]] = {}
    for item in corpus:
        if not item.real_subgroup_percent_correct:
            continue
        for label, value in item.real_subgroup_percent_correct.items():
            rates.setdefault(label.lower(), {})[item.item_id] = float(value)
    return rates


def evaluate_run(
    run_dir: Union[str, Path],
    corpus_path: Optional[str] = None,
    write: bool = True,
) -> Dict[str, object]:
    """Score a finished run directory against its corpus.

    Always reports the correlation and separation numbers; simulate runs
    additionally get per-skill correctness, distractor agreement and,
    when the roster carries demographics and the corpus carries subgroup
    rates, per-subgroup correlations. The output embeds the run's
    manifest hash and nothing time-dependent, so evaluating twice writes
    identical bytes.
    """
    run_path = Path(run_dir)
    manifest = _read_json(run_path / MANIFEST_NAME)
    config = ExperimentConfig.from_mapping(manifest["config"])  # type: ignore[arg-type]
    if corpus_path is not None:
        config = replace(config, corpus_path=corpus_path)
    corpus = _load_run_corpus(config)
    predictions_payload = _read_json(run_path / PREDICTIONS_NAME)
    predictions: Dict[str, Optional[float]] = {
        str(k): (None if v is None else float(v))
        for k, v in predictions_payload["predictions"].items()
    }
    evaluation: Dict[str, object] = {
        "manifest_hash": manifest["manifest_hash"],
        "mode": manifest["mode"],
        "metrics": evaluate_predictions(predictions, corpus, seed=config.seed),
    }
    if "parse_counts" in predictions_payload:
        evaluation["parse_counts"] = predictions_payload["parse_counts"]

    if manifest["mode"] == "simulate":
        log = ResponseLog(str(run_path / RESPONSES_NAME))
        responses = log.read_all()
        matrix = build_matrix(
            responses,
            [item.item_id for item in corpus],
            mask_failed=config.mask_failed,
        )
        evaluation["skill_correctness"] = skill_correctness(matrix)
        match = distractor_match(responses, corpus)
        evaluation["distractor_match"] = {
            "match_rate": match.match_rate,
            "n_items": match.n_items,
            "chance_wrong_only": match.chance_wrong_only,
            "chance_all_choices": match.chance_all_choices,
            "model_ties": match.model_ties,
            "observed_ties": match.observed_ties,
        }
        rosters = _build_rosters(config, corpus)
        groups = _demographic_groups(rosters)
        real_rates = _subgroup_real_rates(corpus)
        if groups and real_rates:
            subgroup = subgroup_correlations(matrix, groups, real_rates)
            evaluation["subgroup_correlations"] = {
                label: _correlation_payload(result, "t")
                for label, result in sorted(subgroup.items())
            }
        fit_path = run_path / FIT_NAME
        if fit_path.exists():
            fit = FitResult.load(str(fit_path))
            evaluation["fit"] = {
                "beta": fit.beta,
                "converged": fit.converged,
                "iterations": fit.iterations,
                "log_likelihood": fit.log_likelihood,
            }

    if write:
        _write_json(run_path / EVALUATION_JSON_NAME, evaluation)
        _write_evaluation_csv(run_path / EVALUATION_CSV_NAME, predictions, corpus)
    return evaluation


def _write_evaluation_csv(
    path: Path, predictions: Mapping[str, Optional[float]], corpus: Corpus
) -> None:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(
        ["item_id", "grade", "difficulty", "real_rate", "predicted_rate"]
    )
    for item in corpus:
        value = predictions.get(item.item_id)
        writer.writerow(
            [
                item.item_id,
                item.grade,
                item.difficulty_label,
                f"{item.real_percent_correct:.6f}",
                "" if value is None else f"{value:.6f}",
            ]
        )
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(buffer.getvalue())


def run_ensemble(
    run_dirs: Sequence[Union[str, Path]],
    corpus_path: Optional[str] = None,
    weights: Optional[Sequence[float]] = None,
    out_path: Optional[Union[str, Path]] = None,
) -> Dict[str, object]:
    """Blend the predictions of several finished runs and score the blend.

    Weights follow the run order and renormalize over the runs covering
    each item. The corpus defaults to the first run's configured one.
    """
    if not run_dirs:
        raise ValueError("ensemble needs at least one run directory")
    sources: List[Dict[str, object]] = []
    prediction_sets: List[Dict[str, float]] = []
    for run_dir in run_dirs:
        payload = _read_json(Path(run_dir) / PREDICTIONS_NAME)
        clean = {
            str(k): float(v)
            for k, v in payload["predictions"].items()
            if v is not None
        }
        prediction_sets.append(clean)
        sources.append(
            {
                "run": str(run_dir),
                "mode": payload.get("mode"),
                "manifest_hash": payload.get("manifest_hash"),
                "n_items": len(clean),
            }
        )
    combined = ensemble_predictions(prediction_sets, weights)
    if corpus_path is None:
        manifest = _read_json(Path(run_dirs[0]) / MANIFEST_NAME)
        corpus_path = str(manifest["config"]["corpus_path"])  # type: ignore[index]
    corpus = load_corpus(corpus_path)
    payload = {
        "sources": sources,
        "weights": list(weights) if weights is not None else None,
        "predictions": combined,
        "metrics": evaluate_predictions(combined, corpus),
    }
    if out_path is not None:
        _write_json(Path(out_path), payload)
    return payload


def _format_float(value: object) -> str:
    if value is None:
        return "-"
    try:
        number = float(value)  # type: ignore[arg-type]
    except (TypeError, ValueError):
        return str(value)
    if math.isnan(number):
        return "nan"
    return f"{number:.4f}"


def render_report(run_dir: Union[str, Path]) -> str:
    """Markdown summary of a run's evaluation, regenerated on demand."""
    run_path = Path(run_dir)
    evaluation_path = run_path / EVALUATION_JSON_NAME
    if not evaluation_path.exists():
        evaluate_run(run_path)
    evaluation = _read_json(evaluation_path)
    manifest = _read_json(run_path / MANIFEST_NAME)
    config = manifest["config"]
    lines: List[str] = []
    lines.append(f"# Run report: {manifest['mode']}")
    lines.append("")
    lines.append(f"- manifest hash: `{manifest['manifest_hash']}`")
    lines.append(f"- model: {config['model']}  mock: {config['mock']}")
    lines.append(
        f"- grade: {config['grade']}  students: {config['n_students']}  "
        f"strategy: {config['strategy']}  seed: {config['seed']}"
    )
    counts = manifest["counts"]
    lines.append(
        f"- items: {counts['items']}  requests: {counts['requests']}"
    )
    lines.append("")
    metrics_block = evaluation["metrics"]
    lines.append("## Agreement with observed difficulty")
    lines.append("")
    lines.append("| metric | value | p | n |")
    lines.append("| --- | --- | --- | --- |")
    for name in ("pearson", "spearman"):
        block = metrics_block[name]
        lines.append(
            f"| {name} | {_format_float(block['r'])} | "
            f"{_format_float(block['p_value'])} | {block['n']} |"
        )
    for name in ("auc_hard_vs_easy", "auc_hard_vs_rest"):
        block = metrics_block[name]
        lines.append(
            f"| {name} | {_format_float(block['auc'])} | - | "
            f"{block['n_hard']}+{block['n_other']} |"
        )
    if "parse_counts" in evaluation:
        lines.append("")
        lines.append("## Parsing")
        lines.append("")
        for status, count in sorted(evaluation["parse_counts"].items()):
            lines.append(f"- {status}: {count}")
    if "skill_correctness" in evaluation:
        lines.append("")
        lines.append("## Correctness by skill")
        lines.append("")
        lines.append("| skill | rate |")
        lines.append("| --- | --- |")
        for label, rate in evaluation["skill_correctness"].items():
            lines.append(f"| {label} | {_format_float(rate)} |")
    if "distractor_match" in evaluation:
        block = evaluation["distractor_match"]
        lines.append("")
        lines.append("## Distractor agreement")
        lines.append("")
        lines.append(
            f"- top wrong answer matches observed on "
            f"{_format_float(block['match_rate'])} of {block['n_items']} items"
        )
        lines.append(
            f"- blind-guess reference: {_format_float(block['chance_wrong_only'])} "
            f"(wrong choices only), {_format_float(block['chance_all_choices'])} "
            "(all choices)"
        )
    if "subgroup_correlations" in evaluation:
        lines.append("")
        lines.append("## Subgroup agreement")
        lines.append("")
        lines.append("| subgroup | r | p | n |")
        lines.append("| --- | --- | --- | --- |")
        for label, block in evaluation["subgroup_correlations"].items():
            lines.append(
                f"| {label} | {_format_float(block['r'])} | "
                f"{_format_float(block['p_value'])} | {block['n']} |"
            )
    if "fit" in evaluation:
        block = evaluation["fit"]
        lines.append("")
        lines.append("## Ability scaling")
        lines.append("")
        lines.append("| skill | ability |")
        lines.append("| --- | --- |")
        for label, value in block["beta"].items():
            lines.append(f"| {label} | {_format_float(value)} |")
        lines.append("")
        lines.append(
            f"- converged: {block['converged']} after {block['iterations']} sweeps"
        )
    lines.append("")
    report = "\n".join(lines)
    with open(run_path / REPORT_NAME, "w", encoding="utf-8") as handle:
        handle.write(report)
    return report
