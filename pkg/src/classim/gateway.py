"""Transport layer for chat completions.

Two backends sit behind one interface: an HTTP client for any
OpenAI-compatible endpoint, and an offline model that fabricates
transcript-shaped replies as a pure function of ``(seed, request key)``.
The surrounding :class:`Gateway` owns retries, bounded concurrency and
optional request capture; backends only turn one request into text.
"""

from __future__ import annotations

import json
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple

import requests

from .classroom import SkillDistribution, SkillLevel
from .corpus import Corpus, Item
from .promptgen import PromptKind, RenderedPrompt
from .rng import SplitMix64, derive_seed, normal_pair

API_KEY_ENV = "CLASSIM_API_KEY"

# Statuses worth retrying: timeout, throttling, server-side trouble.
_RETRY_STATUSES = frozenset({408, 429})


@dataclass(frozen=True, order=True)
class RequestKey:
    """Identity of one completion within a run.

    ``student_index`` is -1 for requests that do not belong to a simulated
    student (expert solves, percentage estimates); keeping it an int keeps
    keys totally ordered for stable log layout.
    """

    item_id: str
    student_index: int
    replicate: int

    def as_tuple(self) -> Tuple[str, int, int]:
        return (self.item_id, self.student_index, self.replicate)


@dataclass(frozen=True)
class CompletionRequest:
    prompt: RenderedPrompt
    key: RequestKey
    temperature: float
    seed: int = 0
    skill: Optional[SkillLevel] = None
    max_tokens: Optional[int] = None


@dataclass(frozen=True)
class CompletionRecord:
    key: RequestKey
    text: str
    ok: bool
    attempts: int
    error: Optional[str] = None


@dataclass(frozen=True)
class GatewayConfig:
    endpoint: str = "http://localhost:8000/v1/chat/completions"
    model: str = "local-model"
    timeout: float = 60.0
    max_retries: int = 3
    backoff_base: float = 0.5
    backoff_cap: float = 8.0
    max_in_flight: int = 8
    api_key_env: str = API_KEY_ENV

    def __post_init__(self) -> None:
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")


class CompletionBackend(Protocol):
    def complete(self, request: CompletionRequest) -> str:
        """Return the assistant text for one request. May raise."""


class TransientBackendError(RuntimeError):
    """Failure that is worth retrying (throttle, 5xx, transport)."""


class HttpChatBackend:
    """POSTs to a chat-completions endpoint and extracts the reply text."""

    def __init__(self, config: GatewayConfig) -> None:
        self.config = config
        self._local = threading.local()

    def _session(self) -> requests.Session:
        # One session per worker thread; requests.Session is not documented
        # as safe for concurrent use.
        session = getattr(self._local, "session", None)
        if session is None:
            session = requests.Session()
            self._local.session = session
        return session

    def _headers(self) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.config.api_key_env, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        return headers

    def complete(self, request: CompletionRequest) -> str:
        payload: Dict[str, object] = {
            "model": self.config.model,
            "messages": list(request.prompt.messages()),
            "temperature": request.temperature,
        }
        if request.max_tokens is not None:
            payload["max_tokens"] = request.max_tokens
        try:
            response = self._session().post(
                self.config.endpoint,
                json=payload,
                headers=self._headers(),
                timeout=self.config.timeout,
            )
        except requests.RequestException as exc:
            raise TransientBackendError(f"transport error: {exc}") from exc
        if response.status_code in _RETRY_STATUSES or response.status_code >= 500:
            raise TransientBackendError(f"status {response.status_code}")
        if response.status_code != 200:
            raise RuntimeError(
                f"status {response.status_code}: {response.text[:200]}"
            )
        try:
            data = response.json()
            content = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise RuntimeError(f"malformed completion payload: {exc}") from exc
        if not isinstance(content, str):
            raise RuntimeError("completion content is not text")
        return content


class Gateway:
    """Runs batches of completion requests with retries and a worker pool.

    Results come back in request order. A request that exhausts its
    retries is reported as a failed record, never raised; the caller
    decides whether a hole in the batch is fatal. Total attempts per
    request never exceed ``1 + max_retries``.
    """

    def __init__(
        self,
        backend: CompletionBackend,
        config: Optional[GatewayConfig] = None,
        sleep: Callable[[float], None] = time.sleep,
        capture_path: Optional[str] = None,
    ) -> None:
        self.backend = backend
        self.config = config or GatewayConfig()
        self._sleep = sleep
        self._capture_path = capture_path
        self._capture_lock = threading.Lock()

    def _backoff(self, attempt: int) -> float:
        return min(self.config.backoff_cap, self.config.backoff_base * (2.0 ** attempt))

    def _capture(self, request: CompletionRequest, record: CompletionRecord) -> None:
        if self._capture_path is None:
            return
        line = json.dumps(
            {
                "item_id": request.key.item_id,
                "student_index": request.key.student_index,
                "replicate": request.key.replicate,
                "system": request.prompt.system,
                "user": request.prompt.user,
                "text": record.text,
                "ok": record.ok,
                "attempts": record.attempts,
            },
            ensure_ascii=False,
        )
        with self._capture_lock:
            with open(self._capture_path, "a", encoding="utf-8") as handle:
                handle.write(line + "\n")

    def _run_one(self, request: CompletionRequest) -> CompletionRecord:
        attempts = 0
        last_error = "no attempts made"
        while attempts <= self.config.max_retries:
            attempts += 1
            try:
                text = self.backend.complete(request)
                record = CompletionRecord(
                    key=request.key, text=text, ok=True, attempts=attempts
                )
                self._capture(request, record)
                return record
            except TransientBackendError as exc:
                last_error = str(exc)
                if attempts <= self.config.max_retries:
                    self._sleep(self._backoff(attempts - 1))
            except Exception as exc:  # non-retryable: fail the key immediately
                record = CompletionRecord(
                    key=request.key,
                    text="",
                    ok=False,
                    attempts=attempts,
                    error=str(exc),
                )
                self._capture(request, record)
                return record
        record = CompletionRecord(
            key=request.key, text="", ok=False, attempts=attempts, error=last_error
        )
        self._capture(request, record)
        return record

    def run(self, batch: Sequence[CompletionRequest]) -> List[CompletionRecord]:
        if not batch:
            return []
        if self.config.max_in_flight == 1 or len(batch) == 1:
            return [self._run_one(request) for request in batch]
        with ThreadPoolExecutor(max_workers=self.config.max_in_flight) as pool:
            return list(pool.map(self._run_one, batch))


_EPS = 1e-6

DEFAULT_SKILL_BETAS: Mapping[SkillLevel, float] = {
    SkillLevel.BELOW_BASIC: -1.0,
    SkillLevel.BASIC: -0.3,
    SkillLevel.PROFICIENT: 0.6,
    SkillLevel.ADVANCED: 1.3,
}

_REASONING_PHRASES = (
    "I worked through the steps and this one fits.",
    "I compared the choices and settled on this.",
    "This matches what I got when I checked it.",
    "I was not fully sure, but this looked right.",
)


def _logit(p: float) -> float:
    p = min(max(p, _EPS), 1.0 - _EPS)
    return math.log(p / (1.0 - p))


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


class MockStudentModel:
    """Offline backend that behaves like a population of test takers.

    Every item gets a latent difficulty: by default the log-odds of
    failure on the item's observed success rate, so harder items (lower
    rate) get larger difficulty; with ``delta_source="independent"`` the
    difficulty is a standard normal draw unrelated to the observed rate,
    which is the null configuration used to check that the pipeline does
    not manufacture correlation. Role-play requests answer correctly with
    probability ``sigmoid(beta_skill - delta)``; wrong answers pick a
    distractor either uniformly or following the item's observed choice
    shares. Percentage requests report the skill-mixture expectation plus
    temperature-scaled noise. Expert requests answer correctly with
    probability ``expert_accuracy``.

    All draws derive from ``(seed, request key, purpose)``, so equal seeds
    give byte-identical transcripts regardless of batch order or thread
    count.
    """

    def __init__(
        self,
        corpus: Corpus,
        seed: int,
        skill_betas: Optional[Mapping[SkillLevel, float]] = None,
        mixture: Optional[SkillDistribution] = None,
        distractor_policy: str = "uniform",
        expert_accuracy: float = 1.0,
        noise_scale: float = 0.15,
        dpce_constant: Optional[float] = None,
        delta_source: str = "real",
        quirk_rate: float = 0.0,
        garble_rate: float = 0.0,
    ) -> None:
        if distractor_policy not in ("uniform", "real-marginal"):
            raise ValueError(f"unknown distractor policy {distractor_policy!r}")
        if delta_source not in ("real", "independent"):
            raise ValueError(f"unknown delta source {delta_source!r}")
        if not 0.0 <= expert_accuracy <= 1.0:
            raise ValueError("expert_accuracy must be in [0, 1]")
        self.corpus = corpus
        self.seed = seed
        self.skill_betas = dict(skill_betas or DEFAULT_SKILL_BETAS)
        self.mixture = mixture or SkillDistribution.default()
        self.distractor_policy = distractor_policy
        self.expert_accuracy = expert_accuracy
        self.noise_scale = noise_scale
        self.dpce_constant = dpce_constant
        self.delta_source = delta_source
        self.quirk_rate = quirk_rate
        self.garble_rate = garble_rate

    def item_delta(self, item: Item) -> float:
        if self.delta_source == "independent":
            rng = SplitMix64(derive_seed(self.seed, "delta", item.item_id))
            return normal_pair(rng)[0]
        return -_logit(item.real_percent_correct)

    def success_probability(self, item: Item, skill: SkillLevel) -> float:
        return _sigmoid(self.skill_betas[skill] - self.item_delta(item))

    def expected_rate(self, item: Item) -> float:
        """Success rate under the skill mixture; what a run should recover."""
        weights = self.mixture.as_mapping()
        return sum(
            weights[skill] * self.success_probability(item, skill)
            for skill in SkillLevel
        )

    def _rng(self, request: CompletionRequest, purpose: str) -> SplitMix64:
        key = request.key
        return SplitMix64(
            derive_seed(
                self.seed,
                purpose,
                key.item_id,
                key.student_index,
                key.replicate,
            )
        )

    def _pick_distractor(self, item: Item, rng: SplitMix64) -> str:
        wrong = item.wrong_letters()
        if self.distractor_policy == "real-marginal" and item.real_choice_distribution:
            shares = [
                max(item.real_choice_distribution.get(letter, 0.0), 0.0)
                for letter in wrong
            ]
            total = sum(shares)
            if total > 0.0:
                point = rng.next_float() * total
                acc = 0.0
                for letter, share in zip(wrong, shares):
                    acc += share
                    if point < acc:
                        return letter
                return wrong[-1]
        return wrong[rng.randrange(len(wrong))]

    def _item(self, item_id: str) -> Item:
        try:
            return self.corpus.by_id[item_id]
        except KeyError:
            raise RuntimeError(f"unknown item {item_id!r}") from None

    def _student_reply(self, request: CompletionRequest, item: Item) -> str:
        if request.skill is None:
            raise RuntimeError("role-play request is missing the student skill")
        rng = self._rng(request, "student")
        if self.garble_rate > 0.0 and rng.next_float() < self.garble_rate:
            return "I ran out of time and could not pick one."
        p = self.success_probability(item, request.skill)
        if rng.next_float() < p:
            letter = item.correct_key
        else:
            letter = self._pick_distractor(item, rng)
        phrase = _REASONING_PHRASES[rng.randrange(len(_REASONING_PHRASES))]
        if self.quirk_rate > 0.0 and rng.next_float() < self.quirk_rate:
            # Imperfect but still recoverable shapes seen in real transcripts.
            if rng.next_float() < 0.5:
                return str({"reasoning": phrase, "answer key": letter})
            return f"{phrase}\nAnswer Key: {letter}"
        return json.dumps({"reasoning": phrase, "answer key": letter})

    def _expert_reply(self, request: CompletionRequest, item: Item) -> str:
        rng = self._rng(request, "expert")
        if rng.next_float() < self.expert_accuracy:
            letter = item.correct_key
        else:
            letter = self._pick_distractor(item, rng)
        return f"Working through it step by step.\nAnswer Key: {letter}"

    def _percentage_reply(self, request: CompletionRequest, item: Item) -> str:
        rng = self._rng(request, "percentage")
        if self.dpce_constant is not None:
            value = self.dpce_constant
        else:
            value = self.expected_rate(item)
        sigma = self.noise_scale * request.temperature
        if sigma > 0.0:
            value += sigma * normal_pair(rng)[0]
        percent = round(min(max(value, 0.0), 1.0) * 100.0)
        return (
            "Judging the computational load for this grade level.\n"
            f"Percentage Correct: {percent}"
        )

    def complete(self, request: CompletionRequest) -> str:
        item = self._item(request.key.item_id)
        kind = request.prompt.kind
        if kind == PromptKind.STUDENT:
            return self._student_reply(request, item)
        if kind == PromptKind.KNOWLEDGE:
            return self._expert_reply(request, item)
        if kind == PromptKind.DIRECT_PERCENTAGE:
            return self._percentage_reply(request, item)
        raise RuntimeError(f"unsupported prompt kind {kind!r}")
