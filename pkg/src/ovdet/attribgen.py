"""Taxonomic attribute generation through a chat-completion LLM endpoint.

Two modes: ``Live`` queries the service (credentials from the environment),
``Replay`` answers only from the on-disk cache. Every raw answer is cached
under a digest of (name, template, model id), so changing the template
never reuses stale answers.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import re
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import httpx

from .container import canonical_json
from .taxonomy import RANKS, CategoryRecord, TaxonomyRegistry

logger = logging.getLogger(__name__)

ENV_BASE_URL = "OVDET_LLM_BASE_URL"
ENV_API_KEY = "OVDET_LLM_API_KEY"
DEFAULT_BASE_URL = "https://api.openai.com/v1"

DEFAULT_TEMPLATE = (
    'Give the biological classification of the marine object "{name}". '
    'Answer with one JSON object with the keys "common_name", "kingdom", "phylum", "class", '
    '"order", "family", "genus" and "species". '
    'If it cannot be classified, answer {"undefined": true}.'
)
FIXTURE_MODEL = "fixture-replay"

_ABSENT = {"", "none", "null", "n/a", "na", "unknown", "-", "undefined", "not applicable"}
_DECLINE = re.compile(r"\b(cannot|can't|can not|unable|not able|not possible|no (biological )?classification|sorry)\b", re.I)


class AttribGenError(RuntimeError):
    pass


class CacheMiss(AttribGenError):
    pass


class Mode(str, enum.Enum):
    LIVE = "Live"
    REPLAY = "Replay"

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, cls):
            return value
        for m in cls:
            if m.value.lower() == str(value).lower():
                return m
        raise ValueError(f"unknown mode {value!r}")


class ParseStatus(str, enum.Enum):
    OK = "OK"
    UNDEFINED = "Undefined"
    PARSE_ERROR = "ParseError"


def check_template(template: str) -> str:
    if template.count("{name}") != 1:
        raise ValueError("instruction template must contain exactly one {name} slot")
    return template


def render_prompt(template: str, name: str) -> str:
    # plain substitution so the template may contain literal JSON braces
    return check_template(template).replace("{name}", name)


def cache_key(name: str, template: str, model_id: str) -> str:
    return hashlib.sha256(canonical_json([name, template, model_id]).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class AttributeRequest:
    category_names: tuple[str, ...]
    instruction_template: str = DEFAULT_TEMPLATE
    model_id: str = "gpt-4"
    cache_dir: str = ".attrgen_cache"
    mode: Mode = Mode.REPLAY

    def __post_init__(self):
        object.__setattr__(self, "category_names", tuple(self.category_names))
        object.__setattr__(self, "mode", Mode.parse(self.mode))
        check_template(self.instruction_template)
        if any(not isinstance(n, str) or not n.strip() for n in self.category_names):
            raise ValueError("category names must be non-empty strings")
        if self.mode is Mode.REPLAY and not any(Path(self.cache_dir).glob("*.json")):
            raise CacheMiss(f"Replay mode needs a populated cache; {self.cache_dir} has no entries")


@dataclass(frozen=True)
class AttributeResponse:
    name: str
    status: ParseStatus
    ranks: Mapping[str, str | None] = field(default_factory=dict)
    common_name: str | None = None
    raw_text: str = ""

    def to_record(self) -> dict:
        rec = CategoryRecord(self.name, self.common_name, self.ranks if self.status is ParseStatus.OK else {}).to_json()
        if self.status is ParseStatus.PARSE_ERROR:
            rec["review"] = True
        return rec


# --------------------------------------------------------------------------
# parsing


def _clean(v) -> str | None:
    if v is None or isinstance(v, bool):
        return None
    s = str(v).strip().strip('"').strip()
    return None if s.lower() in _ABSENT else s


def _from_mapping(obj: Mapping) -> tuple[dict, str | None, bool]:
    low = {str(k).strip().lower().replace(" ", "_"): v for k, v in obj.items()}
    ranks = {r: _clean(low.get(r.lower())) for r in RANKS}
    common = _clean(low.get("common_name"))
    return ranks, common, bool(low.get("undefined"))


def _json_object(text: str) -> dict | None:
    start = text.find("{")
    end = text.rfind("}")
    if start < 0 or end <= start:
        return None
    try:
        obj = json.loads(text[start : end + 1])
    except json.JSONDecodeError:
        return None
    return obj if isinstance(obj, dict) else None


def _labelled_lines(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        m = re.match(r"^\s*[-*]?\s*([A-Za-z][A-Za-z _]*?)\s*[:=]\s*(.*?)\s*$", line)
        if m:
            out[m.group(1)] = m.group(2)
    return out


def parse_response(name: str, raw_text: str) -> AttributeResponse:
    """Total parser: every input maps to exactly one status and never raises."""
    try:
        obj = _json_object(raw_text)
        if obj is None:
            obj = _labelled_lines(raw_text)
        ranks, common, declined = _from_mapping(obj)
        present = [r for r in RANKS if ranks[r] is not None]
        if not present and (declined or _DECLINE.search(raw_text)):
            return AttributeResponse(name, ParseStatus.UNDEFINED, {}, common, raw_text)
        if len(present) == len(RANKS):
            return AttributeResponse(name, ParseStatus.OK, ranks, common, raw_text)
    except Exception:  # parser totality: malformed text must not escape as an exception
        logger.exception("unexpected parser failure for %r", name)
    return AttributeResponse(name, ParseStatus.PARSE_ERROR, {}, None, raw_text)


# --------------------------------------------------------------------------
# cache


class ResponseCache:
    """One JSON file per digest; writes are write-then-rename."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def path(self, key: str) -> Path:
        return self.root / f"{key}.json"

    def get(self, key: str) -> dict | None:
        p = self.path(key)
        if not p.exists():
            return None
        return json.loads(p.read_text(encoding="utf-8"))

    def put(self, key: str, entry: dict) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        p = self.path(key)
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".tmp-", suffix=".json")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, indent=1, sort_keys=True, ensure_ascii=False) + "\n")
        os.replace(tmp, p)
        return p


# --------------------------------------------------------------------------
# live client


class RateLimiter:
    def __init__(self, min_interval: float, clock=time.monotonic, sleep=time.sleep):
        self.min_interval = min_interval
        self._clock, self._sleep = clock, sleep
        self._next = 0.0
        self._lock = threading.Lock()

    def wait(self):
        with self._lock:
            now = self._clock()
            delay = self._next - now
            self._next = max(now, self._next) + self.min_interval
        if delay > 0:
            self._sleep(delay)


class LiveClient:
    """Chat-completion client with retry, exponential backoff and a request rate limit."""

    RETRY_STATUS = {408, 409, 429, 500, 502, 503, 504}

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        max_retries: int = 4,
        backoff: float = 1.0,
        min_interval: float = 0.5,
        timeout: float = 60.0,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        api_key = api_key or os.environ.get(ENV_API_KEY)
        if not api_key:
            raise AttribGenError(
                f"Live mode needs credentials: set {ENV_API_KEY} (and optionally {ENV_BASE_URL}), "
                "or use Replay mode with a populated cache"
            )
        self.base_url = (base_url or os.environ.get(ENV_BASE_URL) or DEFAULT_BASE_URL).rstrip("/")
        self.max_retries = max_retries
        self.backoff = backoff
        self._sleep = sleep
        self._limiter = RateLimiter(min_interval, sleep=sleep)
        self._http = httpx.Client(
            headers={"Authorization": f"Bearer {api_key}"}, timeout=timeout, transport=transport
        )

    def close(self):
        self._http.close()

    def complete(self, prompt: str, model_id: str) -> str:
        body = {"model": model_id, "temperature": 0, "messages": [{"role": "user", "content": prompt}]}
        last = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            self._limiter.wait()
            try:
                r = self._http.post(f"{self.base_url}/chat/completions", json=body)
            except httpx.TransportError as exc:
                last = exc
                continue
            if r.status_code in (401, 403):
                raise AttribGenError(f"authentication failed ({r.status_code}); check {ENV_API_KEY}")
            if r.status_code in self.RETRY_STATUS:
                last = AttribGenError(f"HTTP {r.status_code}")
                continue
            if r.status_code >= 400:
                raise AttribGenError(f"request failed: HTTP {r.status_code}: {r.text[:200]}")
            try:
                return r.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise AttribGenError(f"unexpected response shape: {r.text[:200]}") from exc
        raise AttribGenError(f"giving up after {self.max_retries + 1} attempts: {last}")


# --------------------------------------------------------------------------
# orchestration


def dedup_names(names: Iterable[str]) -> tuple[list[str], list[str]]:
    """Exact-string dedup after case-folding; first spelling wins. Returns (kept, dropped)."""
    kept, dropped, seen = [], [], set()
    for n in names:
        k = n.strip().casefold()
        if k in seen:
            dropped.append(n)
        else:
            seen.add(k)
            kept.append(n)
    if dropped:
        logger.warning("dropped %d case-duplicate name(s) for review: %s", len(dropped), dropped)
    return kept, dropped


def generate_attributes(request: AttributeRequest, client: LiveClient | None = None, concurrency: int = 4) -> list[AttributeResponse]:
    cache = ResponseCache(request.cache_dir)
    keys = [cache_key(n, request.instruction_template, request.model_id) for n in request.category_names]
    raw: dict[str, str] = {}
    todo = []
    for n, k in zip(request.category_names, keys):
        hit = cache.get(k)
        if hit is not None:
            raw[k] = hit["raw_text"]
        else:
            todo.append((n, k))
    if todo and request.mode is Mode.REPLAY:
        raise CacheMiss(f"Replay cache miss for {len(todo)} name(s), e.g. {todo[0][0]!r}")
    if todo:
        own = client is None
        client = client or LiveClient()

        def fetch(item):
            n, k = item
            text = client.complete(render_prompt(request.instruction_template, n), request.model_id)
            cache.put(k, {"name": n, "template": request.instruction_template, "model_id": request.model_id, "raw_text": text})
            return k, text

        try:
            with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
                for k, text in pool.map(fetch, todo):
                    raw[k] = text
        finally:
            if own:
                client.close()
    return [parse_response(n, raw[k]) for n, k in zip(request.category_names, keys)]


def to_taxonomy(responses: Sequence[AttributeResponse], path: str | os.PathLike | None = None) -> TaxonomyRegistry:
    """Build (and optionally write) the taxonomy record file.

    ParseError entries become undefined records carrying ``"review": true``.
    """
    records = [r.to_record() for r in responses]
    registry = TaxonomyRegistry(CategoryRecord.from_json(r) for r in records)
    if path is not None:
        path = Path(path)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(records, indent=1, ensure_ascii=False) + "\n")
        os.replace(tmp, path)
    return registry


# --------------------------------------------------------------------------
# shipped fixture


def fixture_responses() -> dict[str, str]:
    """Name -> raw model answer for the bundled offline marine vocabulary."""
    text = resources.files("ovdet").joinpath("data/marine_fixture.json").read_text(encoding="utf-8")
    return {e["name"]: e["raw_text"] for e in json.loads(text)}


def install_fixture(cache_dir: str | os.PathLike, template: str = DEFAULT_TEMPLATE, model_id: str = FIXTURE_MODEL) -> list[str]:
    """Populate a Replay cache with the bundled answers; returns the fixture names."""
    cache = ResponseCache(cache_dir)
    names = []
    for n, text in fixture_responses().items():
        cache.put(cache_key(n, template, model_id), {"name": n, "template": template, "model_id": model_id, "raw_text": text})
        names.append(n)
    return names
