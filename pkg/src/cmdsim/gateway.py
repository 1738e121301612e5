"""Chat-completion providers, the provider pool, and prompt builders.

Every generation stage talks to a provider through one tiny interface:
``complete(prompt) -> assistant text``.  Real providers speak the common
chat-completion JSON HTTP shape; a deterministic :class:`MockProvider`
ships in-tree so the whole pipeline runs offline and reproducibly.

Prompt wording lives in versioned template files under
``cmdsim/templates/`` and is substituted, never rebuilt, so prompts are
byte-stable across releases of this package.
"""

from __future__ import annotations

import configparser
import hashlib
import logging
import os
import threading
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import requests

from .core import CommandLine

logger = logging.getLogger(__name__)

SEEDS_PER_PROMPT = 12

_HTTP_RETRYABLE = frozenset({429, 500, 502, 503, 504})


class GatewayError(Exception):
    """Base class for provider-related failures."""


class TransportError(GatewayError):
    """Network-level failure (connection, timeout) after retries."""


class ProviderError(GatewayError):
    """Non-success HTTP response or malformed payload from a provider."""

    def __init__(self, message: str, status: int, body: str) -> None:
        super().__init__(message)
        self.status = status
        self.body = body


class ConfigurationError(GatewayError):
    """Local misconfiguration, e.g. a missing API-key environment variable."""


@dataclass(frozen=True)
class ProviderSpec:
    """Connection settings for one chat-completion provider."""

    name: str
    endpoint: str
    model_id: str
    api_key_env: str = ""
    temperature: float = 1.0
    max_retries: int = 2
    timeout: float = 30.0

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("provider name must not be empty")
        if not self.endpoint:
            raise ValueError(f"provider {self.name}: endpoint must not be empty")
        if not self.model_id:
            raise ValueError(f"provider {self.name}: model_id must not be empty")
        if self.temperature < 0:
            raise ValueError(f"provider {self.name}: temperature must be >= 0")
        if self.max_retries < 0:
            raise ValueError(f"provider {self.name}: max_retries must be >= 0")
        if self.timeout <= 0:
            raise ValueError(f"provider {self.name}: timeout must be positive")


@dataclass(frozen=True)
class ProviderPool:
    """A non-empty collection of providers sampled uniformly per call."""

    providers: tuple[ProviderSpec, ...]
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not self.providers:
            raise ValueError("provider pool must not be empty")
        names = [p.name for p in self.providers]
        if len(set(names)) != len(names):
            raise ValueError("provider names must be unique within a pool")

    def by_name(self, name: str) -> ProviderSpec:
        for spec in self.providers:
            if spec.name == name:
                return spec
        raise KeyError(f"no provider named {name!r} in pool")


def _load_template(filename: str) -> str:
    text = resources.files("cmdsim").joinpath("templates", filename).read_text("utf-8")
    return text.rstrip("\n")


SYNTHESIS_TEMPLATE = _load_template("synthesis.txt")
SIMILAR_PAIR_TEMPLATE = _load_template("similar_pair.txt")
EXPLANATION_TEMPLATE = _load_template("explanation.txt")
TEMPLATE_VERSION = _load_template("VERSION")

_SEEDS_SLOT = "{command_line_seeds}"
_QUERY_SLOT = "{query_command_line}"
_COMMAND_SLOT = "{command_line}"


def _as_text(command: CommandLine | str) -> str:
    return command.text if isinstance(command, CommandLine) else command


def build_synthesis_prompt(seeds: Sequence[CommandLine | str]) -> str:
    """Render the generation prompt with the 12 sampled seeds numbered 1..12.

    Substitution uses plain string replacement (not str.format) because
    command lines routinely contain braces.
    """
    if len(seeds) != SEEDS_PER_PROMPT:
        raise ValueError(
            f"requires exactly {SEEDS_PER_PROMPT} seeds, got {len(seeds)}"
        )
    block = "\n".join(
        f"{i}. {_as_text(seed)}" for i, seed in enumerate(seeds, start=1)
    )
    return SYNTHESIS_TEMPLATE.replace(_SEEDS_SLOT, block, 1)


def build_pair_prompt(query: CommandLine | str) -> str:
    """Render the similar-command prompt for one query command line."""
    text = _as_text(query)
    if not text.strip():
        raise ValueError("empty query")
    return SIMILAR_PAIR_TEMPLATE.replace(_QUERY_SLOT, text, 1)


def build_explanation_prompt(command: CommandLine | str) -> str:
    """Render the description-request prompt for one command line.

    The wording is this package's own (versioned in the template file);
    it asks for one to two sentences about purpose and intention.
    """
    text = _as_text(command)
    if not text.strip():
        raise ValueError("empty command")
    return EXPLANATION_TEMPLATE.replace(_COMMAND_SLOT, text, 1)


def pick_provider(pool: ProviderPool, rng) -> ProviderSpec:
    """Uniformly pick one provider; deterministic under a seeded rng."""
    return rng.choice(pool.providers)


def complete(
    spec: ProviderSpec,
    prompt: str,
    *,
    session: requests.Session | None = None,
    sleep: Callable[[float], None] = time.sleep,
    backoff_base: float = 0.5,
) -> str:
    """Send one chat-completion request and return the assistant text.

    Retries transport failures and retryable HTTP statuses (429, 5xx)
    with exponential backoff up to ``spec.max_retries`` extra attempts.
    Other HTTP errors fail immediately.  ``spec`` is never mutated.
    """
    headers = {"Content-Type": "application/json"}
    if spec.api_key_env:
        key = os.environ.get(spec.api_key_env)
        if key is None:
            raise ConfigurationError(
                f"environment variable {spec.api_key_env} is not set "
                f"(required by provider {spec.name})"
            )
        headers["Authorization"] = f"Bearer {key}"
    body = {
        "model": spec.model_id,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": spec.temperature,
    }
    post = session.post if session is not None else requests.post

    last_error: GatewayError | None = None
    for attempt in range(spec.max_retries + 1):
        if attempt > 0:
            sleep(backoff_base * 2 ** (attempt - 1))
        try:
            response = post(spec.endpoint, json=body, headers=headers, timeout=spec.timeout)
        except requests.RequestException as exc:
            last_error = TransportError(f"provider {spec.name}: {exc}")
            logger.warning("transport failure on %s (attempt %d): %s", spec.name, attempt + 1, exc)
            continue
        if response.status_code == 200:
            try:
                payload = response.json()
                return payload["choices"][0]["message"]["content"]
            except (ValueError, LookupError, TypeError) as exc:
                raise ProviderError(
                    f"provider {spec.name}: malformed completion payload: {exc}",
                    status=200,
                    body=response.text[:2000],
                ) from exc
        error = ProviderError(
            f"provider {spec.name}: HTTP {response.status_code}",
            status=response.status_code,
            body=response.text[:2000],
        )
        if response.status_code not in _HTTP_RETRYABLE:
            raise error
        last_error = error
        logger.warning("retryable HTTP %d from %s (attempt %d)", response.status_code, spec.name, attempt + 1)
    assert last_error is not None
    raise last_error


class TokenBucket:
    """Thread-safe token bucket: bursts up to ``capacity``, refills at
    ``refill_rate`` tokens per second."""

    def __init__(
        self,
        capacity: float,
        refill_rate: float,
        *,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        if capacity <= 0 or refill_rate <= 0:
            raise ValueError("capacity and refill_rate must be positive")
        self.capacity = capacity
        self.refill_rate = refill_rate
        self._clock = clock
        self._sleep = sleep
        self._tokens = capacity
        self._last = clock()
        self._lock = threading.Lock()

    def _refill(self) -> None:
        now = self._clock()
        self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.refill_rate)
        self._last = now

    def try_acquire(self, tokens: float = 1.0) -> bool:
        with self._lock:
            self._refill()
            if self._tokens >= tokens:
                self._tokens -= tokens
                return True
            return False

    def acquire(self, tokens: float = 1.0) -> None:
        if tokens > self.capacity:
            raise ValueError(f"cannot acquire {tokens} tokens from bucket of capacity {self.capacity}")
        while True:
            with self._lock:
                self._refill()
                if self._tokens >= tokens:
                    self._tokens -= tokens
                    return
                deficit = tokens - self._tokens
            self._sleep(deficit / self.refill_rate)


class HttpChatProvider:
    """A ProviderSpec bound to a session and optional rate limiter."""

    def __init__(
        self,
        spec: ProviderSpec,
        *,
        session: requests.Session | None = None,
        rate_limiter: TokenBucket | None = None,
    ) -> None:
        self.spec = spec
        self._session = session
        self._rate_limiter = rate_limiter

    @property
    def name(self) -> str:
        return self.spec.name

    def complete(self, prompt: str) -> str:
        if self._rate_limiter is not None:
            self._rate_limiter.acquire()
        return complete(self.spec, prompt, session=self._session)


# Vocabulary for the deterministic mock.  The two columns are synonym
# forms that share no character trigram, so a deliberately weak lexical
# embedding cannot see the correspondence while a trained adapter can.
MOCK_VERB_SYNONYMS: tuple[tuple[str, str], ...] = (
    ("copy", "xfer"),
    ("purge", "wipe"),
    ("list", "show"),
    ("query", "seek"),
    ("start", "begin"),
    ("stop", "halt"),
)
MOCK_FLAG_SYNONYMS: tuple[tuple[str, str], ...] = (
    ("/aa", "-zz"),
    ("/bb", "-yy"),
    ("/cc", "-xx"),
    ("/dd", "-ww"),
    ("/ee", "-vv"),
    ("/ff", "-uu"),
)
MOCK_TARGETS: tuple[str, ...] = (
    "c:\\srv\\alpha",
    "c:\\srv\\beta",
    "c:\\srv\\gamma",
    "c:\\srv\\delta",
    "c:\\srv\\omega",
    "c:\\srv\\sigma",
)
_MOCK_TAGS = "0123456789abcdef"
_MOCK_CONCEPTS: tuple[str, ...] = (
    "duplicates files",
    "removes records",
    "enumerates accounts",
    "inspects shares",
    "launches a service",
    "terminates a service",
)

_SYNTH_PREFIX = SYNTHESIS_TEMPLATE.split(_SEEDS_SLOT)[0]
_PAIR_PREFIX, _PAIR_SUFFIX = SIMILAR_PAIR_TEMPLATE.split(_QUERY_SLOT)
_EXPL_PREFIX, _EXPL_SUFFIX = EXPLANATION_TEMPLATE.split(_COMMAND_SLOT)


def _slot_content(prompt: str, prefix: str, suffix: str) -> str | None:
    if prompt.startswith(prefix) and prompt.endswith(suffix):
        return prompt[len(prefix):len(prompt) - len(suffix)]
    return None


class MockProvider:
    """Deterministic offline provider.

    Responses are a pure function of the prompt text: an exact-match
    response table is consulted first, then the three shipped prompt
    templates are recognized structurally, and anything else is echoed
    back.  Synthesis responses draw commands from a small closed
    vocabulary (verb, flag, target path, hex tag); pair responses map
    each verb and flag to a trigram-disjoint synonym; explanation
    responses describe the verb concept, flag profile, and target while
    ignoring the tag, so near-duplicate commands explain identically.
    """

    def __init__(self, name: str = "mock", table: dict[str, str] | None = None, salt: str = "") -> None:
        self.name = name
        self.salt = salt
        self._table = dict(table) if table else {}
        self._verb_map = {a: b for a, b in MOCK_VERB_SYNONYMS}
        self._flag_map = {a: b for a, b in MOCK_FLAG_SYNONYMS}

    def complete(self, prompt: str) -> str:
        if prompt in self._table:
            return self._table[prompt]
        if prompt.startswith(_SYNTH_PREFIX):
            return self._synthesize(prompt)
        query = _slot_content(prompt, _PAIR_PREFIX, _PAIR_SUFFIX)
        if query is not None:
            return "<CMD>" + self._similar(query)
        command = _slot_content(prompt, _EXPL_PREFIX, _EXPL_SUFFIX)
        if command is not None:
            return self._explain(command)
        return prompt

    def _pick(self, prompt: str, counter: int) -> str:
        digest = hashlib.sha256(f"{self.salt}|{counter}|{prompt}".encode("utf-8")).digest()
        verb = MOCK_VERB_SYNONYMS[digest[0] % 6][0]
        flag = MOCK_FLAG_SYNONYMS[digest[1] % 6][0]
        target = MOCK_TARGETS[digest[2] % 6]
        tag = _MOCK_TAGS[digest[3] % 16]
        return f"{verb} {flag} {target}{tag}"

    def _synthesize(self, prompt: str) -> str:
        return "\n".join("<CMD>" + self._pick(prompt, i) for i in range(4))

    def _similar(self, query: str) -> str:
        tokens = query.split(" ")
        mapped = [self._flag_map.get(t, self._verb_map.get(t, t)) for t in tokens]
        candidate = " ".join(mapped)
        if " ".join(candidate.lower().split()) == " ".join(query.lower().split()):
            # Out-of-vocabulary command: fall back to a visible rewrite.
            candidate = "rerun " + query
        return candidate

    def _parse_command(self, command: str) -> tuple[int, int, str] | None:
        tokens = command.split(" ")
        if len(tokens) != 3:
            return None
        verb_index = flag_index = -1
        for i, (a, b) in enumerate(MOCK_VERB_SYNONYMS):
            if tokens[0] in (a, b):
                verb_index = i
        for i, (a, b) in enumerate(MOCK_FLAG_SYNONYMS):
            if tokens[1] in (a, b):
                flag_index = i
        if verb_index < 0 or flag_index < 0:
            return None
        target = tokens[2]
        if target[:-1] in MOCK_TARGETS and target[-1] in _MOCK_TAGS:
            target = target[:-1]
        if target not in MOCK_TARGETS:
            return None
        return verb_index, flag_index, target

    def _explain(self, command: str) -> str:
        parsed = self._parse_command(command)
        if parsed is None:
            return f"This command runs {command} to accomplish its stated purpose."
        verb_index, flag_index, target = parsed
        return (
            f"This command {_MOCK_CONCEPTS[verb_index]} under {target} "
            f"with profile {flag_index}."
        )


def is_mock_endpoint(endpoint: str) -> bool:
    return endpoint.startswith("mock:")


def build_client(
    spec: ProviderSpec,
    *,
    session: requests.Session | None = None,
    rate_limiter: TokenBucket | None = None,
):
    """Turn a spec into a callable provider; mock:// endpoints get the
    deterministic in-process mock."""
    if is_mock_endpoint(spec.endpoint):
        return MockProvider(name=spec.name, salt=spec.model_id)
    return HttpChatProvider(spec, session=session, rate_limiter=rate_limiter)


class ClientFactory:
    """Memoizing spec-to-client resolver shared across a pipeline run."""

    def __init__(self, *, session: requests.Session | None = None) -> None:
        self._session = session
        self._clients: dict[str, object] = {}

    def __call__(self, spec: ProviderSpec):
        client = self._clients.get(spec.name)
        if client is None:
            client = build_client(spec, session=self._session)
            self._clients[spec.name] = client
        return client


def load_provider_pool(path: str | Path, *, rng_seed: int | None = None) -> ProviderPool:
    """Read a provider pool from an INI-style configuration file.

    Each section defines one provider (section name = provider name)
    with keys endpoint, model, and optionally api_key_env, temperature,
    max_retries, timeout.  A reserved ``[pool]`` section may set
    rng_seed; an explicit ``rng_seed`` argument wins over the file.
    Secrets never appear in the file, only environment-variable names.
    """
    parser = configparser.ConfigParser()
    read = parser.read(path, encoding="utf-8")
    if not read:
        raise ConfigurationError(f"provider configuration file not found: {path}")
    file_seed = 0
    if parser.has_section("pool"):
        file_seed = parser.getint("pool", "rng_seed", fallback=0)
    specs = []
    for section in parser.sections():
        if section == "pool":
            continue
        entries = parser[section]
        for required in ("endpoint", "model"):
            if required not in entries:
                raise ConfigurationError(
                    f"provider {section!r}: missing required key {required!r} in {path}"
                )
        specs.append(
            ProviderSpec(
                name=section,
                endpoint=entries["endpoint"],
                model_id=entries["model"],
                api_key_env=entries.get("api_key_env", ""),
                temperature=entries.getfloat("temperature", fallback=1.0),
                max_retries=entries.getint("max_retries", fallback=2),
                timeout=entries.getfloat("timeout", fallback=30.0),
            )
        )
    if not specs:
        raise ConfigurationError(f"no provider sections found in {path}")
    return ProviderPool(providers=tuple(specs), rng_seed=rng_seed if rng_seed is not None else file_seed)
