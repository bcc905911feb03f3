"""Text enrichment: captioner prompts, templates, clients, and caching.

Each drawing's sparse metadata (object name, class, perspective, the
original one-line figure caption) is expanded into ~20 varied
descriptions: a captioner describes the visual elements, a language
model supplies synonyms and free-form variants, and a template set
merges everything.  Specific object names are preferred over generic
class names when filling templates.

External model calls sit behind a single client interface with a
deterministic offline mock, and results are cached to JSONL so training
and serving never need network access.
"""

from __future__ import annotations

import hashlib
import json
import os
import string
import tempfile
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .records import PatentImageRecord

ALLOWED_PLACEHOLDERS = frozenset(
    {"ObjectName", "Class", "Details", "Synonym", "Perspective", "OriginalDescription"}
)

DEFAULT_CAPTION_INSTRUCTION = (
    "Describe the distinct visual elements present in the design, such as "
    "shapes, contours, texture, and the arrangement of various components."
)

LIVE_LLM = "live_llm"
MOCK = "mock"
CACHED = "cached"


class EnrichmentError(RuntimeError):
    """Raised for client failures and malformed model responses."""


class ModelResponseError(EnrichmentError):
    """Model returned something unparseable; carries the raw response."""

    def __init__(self, message: str, raw: str):
        super().__init__(f"{message}: {raw[:200]!r}")
        self.raw = raw


@dataclass(frozen=True)
class PromptTemplate:
    """A pattern with placeholders from the allowed set."""

    template_id: str
    pattern: str

    def __post_init__(self):
        for _, name, _, _ in string.Formatter().parse(self.pattern):
            if name is None:
                continue
            if name not in ALLOWED_PLACEHOLDERS:
                raise ValueError(
                    f"template {self.template_id!r}: unknown placeholder {{{name}}}"
                )

    @property
    def placeholders(self) -> frozenset:
        return frozenset(
            name
            for _, name, _, _ in string.Formatter().parse(self.pattern)
            if name is not None
        )


DEFAULT_TEMPLATES = (
    PromptTemplate("photo_of", "This is a photo of {ObjectName}"),
    PromptTemplate("photo_classified", "This is a photo of {ObjectName}, classified as {Class}"),
    PromptTemplate("image_features", "This image features {Details}"),
    PromptTemplate("alias", "{ObjectName} can also be referred to as {Synonym}"),
)


@dataclass(frozen=True)
class EnrichedText:
    """The generated description set for one record."""

    record_id: str
    texts: tuple
    provenance: str  # live_llm | mock | cached
    model_name: str

    def __post_init__(self):
        if not self.texts:
            raise ValueError("texts must be non-empty")
        if self.provenance not in (LIVE_LLM, MOCK, CACHED):
            raise ValueError(f"unknown provenance {self.provenance!r}")


def build_caption_request(
    record: PatentImageRecord,
    image_ref: str,
    instruction: Optional[str] = None,
) -> dict:
    """Assemble the captioner call payload for one drawing."""
    if not record.record_id:
        raise ValueError("record_id must be non-empty")
    if not image_ref:
        raise ValueError(f"record {record.record_id!r}: missing image reference")
    return {
        "record_id": record.record_id,
        "image": image_ref,
        "instruction": instruction or DEFAULT_CAPTION_INSTRUCTION,
    }


@dataclass
class RenderResult:
    texts: list
    skipped: list  # template_ids dropped for unresolvable placeholders


def render_templates(
    record: PatentImageRecord,
    details: str,
    synonyms: Sequence[str],
    templates: Sequence[PromptTemplate],
) -> RenderResult:
    """Fill templates with record fields, caption details, and synonyms.

    Templates naming {Synonym} render once per synonym; the rest render
    once.  Any template with an empty required value is skipped and
    listed in the result.  Output is deduplicated in order.  The
    specific object name fills {ObjectName} whenever present, falling
    back to the class label only when the record has no object name.
    """
    if not templates:
        raise ValueError("templates must be non-empty")
    base = {
        "ObjectName": record.object_name.strip() or record.class_id,
        "Class": record.class_id,
        "Details": details.strip(),
        "Perspective": record.perspective.strip(),
        "OriginalDescription": record.description.strip(),
    }
    synonyms = [s.strip() for s in synonyms if s and s.strip()]
    texts: list = []
    skipped: list = []
    seen = set()
    for tpl in templates:
        needs = tpl.placeholders
        fixed_missing = any(not base[name] for name in needs if name != "Synonym")
        if fixed_missing or ("Synonym" in needs and not synonyms):
            skipped.append(tpl.template_id)
            continue
        fills = (
            [dict(base, Synonym=s) for s in synonyms]
            if "Synonym" in needs
            else [base]
        )
        for values in fills:
            rendered = tpl.pattern.format(**values)
            if rendered not in seen:
                seen.add(rendered)
                texts.append(rendered)
    return RenderResult(texts=texts, skipped=skipped)


@dataclass
class EnrichmentResponse:
    synonyms: list
    variants: list


class ModelClient(ABC):
    """Boundary to the external captioner + language model."""

    model_name: str = "unknown"

    @abstractmethod
    def caption(self, request: dict) -> str:
        """Describe the referenced drawing."""

    @abstractmethod
    def enrich(self, record: PatentImageRecord, details: str, n_variants: int) -> EnrichmentResponse:
        """Produce synonyms for the object name plus free-form variants."""


_MOCK_ADJECTIVES = (
    "slender", "ribbed", "tapered", "angular", "rounded", "fluted",
    "segmented", "latticed", "contoured", "stepped",
)
_MOCK_PARTS = (
    "housing", "base", "rim", "handle", "panel", "shell", "frame",
    "spout", "bracket", "grille",
)
_MOCK_QUALIFIERS = ("compact", "portable", "ornamental", "modular", "freestanding")


class MockModelClient(ModelClient):
    """Deterministic offline stand-in for the captioner and LLM.

    Outputs derive from sha256(seed, record_id), so they are stable
    across platforms and runs; different seeds change the synonym sets.
    Tracks call counts so cache tests can assert zero traffic.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.model_name = f"mock-{seed}"
        self.caption_calls = 0
        self.enrich_calls = 0

    def _digits(self, record_id: str, salt: str, n: int) -> list:
        digest = hashlib.sha256(f"{self.seed}:{salt}:{record_id}".encode()).digest()
        return [digest[i % len(digest)] for i in range(n)]

    def caption(self, request: dict) -> str:
        self.caption_calls += 1
        rid = request["record_id"]
        d = self._digits(rid, "caption", 4)
        name = request.get("object_name", "") or "design"
        return (
            f"a {_MOCK_ADJECTIVES[d[0] % len(_MOCK_ADJECTIVES)]} {name} with a "
            f"{_MOCK_ADJECTIVES[d[1] % len(_MOCK_ADJECTIVES)]} "
            f"{_MOCK_PARTS[d[2] % len(_MOCK_PARTS)]} and a "
            f"{_MOCK_ADJECTIVES[d[3] % len(_MOCK_ADJECTIVES)]} profile"
        )

    def enrich(self, record: PatentImageRecord, details: str, n_variants: int) -> EnrichmentResponse:
        self.enrich_calls += 1
        name = record.object_name or record.class_id
        d = self._digits(record.record_id, "enrich", 3 + n_variants)
        synonyms = [
            f"{_MOCK_QUALIFIERS[d[0] % len(_MOCK_QUALIFIERS)]} {name}",
            f"{name} unit",
            f"{name} apparatus",
        ]
        variants = []
        for i in range(n_variants):
            adj = _MOCK_ADJECTIVES[d[3 + i] % len(_MOCK_ADJECTIVES)]
            part = _MOCK_PARTS[(d[3 + i] // 7) % len(_MOCK_PARTS)]
            variants.append(
                f"A {adj} {name} shown in a {record.perspective or 'perspective view'}, "
                f"with emphasis on the {part}"
            )
        return EnrichmentResponse(synonyms=synonyms, variants=variants)


class OpenAICompatClient(ModelClient):
    """Chat-completions client for an OpenAI-compatible endpoint.

    The auth token is read from the configured environment variable at
    call time and never persisted.  Retries on timeouts per the policy,
    then raises.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str = "PATRET_API_KEY",
        timeout: float = 30.0,
        max_retries: int = 2,
        temperature: float = 0.7,
    ):
        self.base_url = base_url.rstrip("/")
        self.model_name = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.max_retries = max_retries
        self.temperature = temperature
        self._client = None

    def _http(self):
        import httpx

        if self._client is None:
            self._client = httpx.Client(timeout=self.timeout)
        return self._client

    def _headers(self) -> dict:
        token = os.environ.get(self.api_key_env, "")
        if not token:
            raise EnrichmentError(
                f"missing credentials: environment variable {self.api_key_env} is not set"
            )
        return {"Authorization": f"Bearer {token}"}

    def _chat(self, messages: list) -> str:
        import httpx

        last_exc: Optional[Exception] = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = self._http().post(
                    f"{self.base_url}/chat/completions",
                    headers=self._headers(),
                    json={
                        "model": self.model_name,
                        "temperature": self.temperature,
                        "messages": messages,
                    },
                )
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"]
            except httpx.TimeoutException as exc:
                last_exc = exc
                if attempt < self.max_retries:
                    time.sleep(min(2.0**attempt, 8.0))
            except (KeyError, IndexError, ValueError) as exc:
                raise ModelResponseError("unexpected completion shape", resp.text) from exc
        raise EnrichmentError(f"client timed out after {self.max_retries + 1} attempts") from last_exc

    def caption(self, request: dict) -> str:
        content = self._chat(
            [
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": request["instruction"]},
                        {"type": "image_url", "image_url": {"url": request["image"]}},
                    ],
                }
            ]
        )
        return content.strip()

    def enrich(self, record: PatentImageRecord, details: str, n_variants: int) -> EnrichmentResponse:
        prompt = (
            "You help index design-patent drawings for retrieval.\n"
            f"Object name: {record.object_name}\n"
            f"Design class: {record.class_id}\n"
            f"Perspective: {record.perspective}\n"
            f"Original caption: {record.description}\n"
            f"Visual details: {details}\n\n"
            f"Reply with JSON only: {{\"synonyms\": [...], \"variants\": [...]}} where "
            f"synonyms are alternative names for the object and variants are "
            f"{n_variants} varied one-sentence descriptions of the drawing."
        )
        raw = self._chat([{"role": "user", "content": prompt}])
        try:
            obj = json.loads(raw)
            synonyms = [str(s) for s in obj["synonyms"]]
            variants = [str(v) for v in obj["variants"]]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ModelResponseError("model reply is not the expected JSON", raw) from exc
        return EnrichmentResponse(synonyms=synonyms, variants=variants)


def template_set_hash(templates: Sequence[PromptTemplate]) -> str:
    payload = "\n".join(
        f"{t.template_id}\t{t.pattern}" for t in sorted(templates, key=lambda t: t.template_id)
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


class EnrichmentCache:
    """JSONL-backed cache keyed by (record_id, model_name, template hash).

    Writes go to a temp file that is renamed over the target, so readers
    never observe a partial file.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._entries: dict = {}
        if self.path.exists():
            with open(self.path, "r", encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    obj = json.loads(line)
                    key = (obj["record_id"], obj["model_name"], obj.get("template_hash", ""))
                    self._entries[key] = tuple(obj["texts"])

    def get(self, record_id: str, model_name: str, tpl_hash: str):
        return self._entries.get((record_id, model_name, tpl_hash))

    def put(self, record_id: str, model_name: str, tpl_hash: str, texts: Sequence[str]) -> None:
        self._entries[(record_id, model_name, tpl_hash)] = tuple(texts)
        self._flush()

    def _flush(self) -> None:
        fd, tmp = tempfile.mkstemp(dir=str(self.path.parent) or ".", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                for (rid, model, tpl), texts in self._entries.items():
                    fh.write(
                        json.dumps(
                            {
                                "record_id": rid,
                                "model_name": model,
                                "template_hash": tpl,
                                "texts": list(texts),
                            },
                            separators=(",", ":"),
                        )
                        + "\n"
                    )
            os.replace(tmp, self.path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def texts_by_record(self) -> dict:
        out: dict = {}
        for (rid, _, _), texts in self._entries.items():
            out.setdefault(rid, list(texts))
        return out

    def __len__(self) -> int:
        return len(self._entries)


def _truncate_tokens(text: str, max_tokens: int) -> str:
    words = text.split()
    return " ".join(words[:max_tokens]) if len(words) > max_tokens else text


def enrich_record(
    record: PatentImageRecord,
    client: ModelClient,
    templates: Sequence[PromptTemplate] = DEFAULT_TEMPLATES,
    count_target: int = 20,
    cache: Optional[EnrichmentCache] = None,
    image_ref: Optional[str] = None,
    max_tokens: int = 77,
) -> EnrichedText:
    """Generate (or fetch from cache) the description set for one record.

    Captioner details and model synonyms feed the templates; free-form
    variants pad the list toward count_target, and over-generation
    truncates template renders first, variants last.
    """
    if count_target < 1:
        raise ValueError("count_target must be >= 1")
    tpl_hash = template_set_hash(templates)
    if cache is not None:
        hit = cache.get(record.record_id, client.model_name, tpl_hash)
        if hit:
            return EnrichedText(
                record_id=record.record_id,
                texts=hit,
                provenance=CACHED,
                model_name=client.model_name,
            )

    request = build_caption_request(record, image_ref or f"image://{record.record_id}")
    request["object_name"] = record.object_name
    details = client.caption(request)
    response = client.enrich(record, details, n_variants=count_target)
    rendered = render_templates(record, details, response.synonyms, templates)

    texts: list = []
    seen = set()
    for t in rendered.texts + [v for v in response.variants if v and v.strip()]:
        t = _truncate_tokens(t.strip(), max_tokens)
        if t and t not in seen:
            seen.add(t)
            texts.append(t)
        if len(texts) == count_target:
            break
    if not texts:
        raise EnrichmentError(f"record {record.record_id!r}: no texts generated")

    if cache is not None:
        cache.put(record.record_id, client.model_name, tpl_hash, texts)
    provenance = MOCK if isinstance(client, MockModelClient) else LIVE_LLM
    return EnrichedText(
        record_id=record.record_id,
        texts=tuple(texts),
        provenance=provenance,
        model_name=client.model_name,
    )


class TextEmbeddingProvider(ABC):
    """Maps text strings to fixed-dimension embedding rows."""

    dim: int

    @abstractmethod
    def embed(self, texts: Sequence[str]) -> np.ndarray:
        """Return one unit row per text; equal strings map to equal rows."""


class HashingTextEmbedder(TextEmbeddingProvider):
    """Deterministic bag-of-hashed-tokens embedder.

    Each token hashes to a fixed Gaussian direction; a text embeds as
    the normalized token sum, so texts sharing words land nearby.  A
    stand-in for a frozen neural text encoder in offline runs.
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim
        self.seed = seed
        self._token_cache: dict = {}

    def _token_vector(self, token: str) -> np.ndarray:
        vec = self._token_cache.get(token)
        if vec is None:
            digest = hashlib.sha256(f"{self.seed}:{token}".encode("utf-8")).digest()
            rng = np.random.Generator(
                np.random.Philox(key=int.from_bytes(digest[:16], "little"))
            )
            vec = rng.standard_normal(self.dim)
            self._token_cache[token] = vec
        return vec

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        rows = np.zeros((len(texts), self.dim))
        for i, text in enumerate(texts):
            tokens = [t for t in "".join(
                c.lower() if c.isalnum() else " " for c in text
            ).split() if t]
            if not tokens:
                tokens = ["<empty>"]
            acc = np.zeros(self.dim)
            for tok in tokens:
                acc += self._token_vector(tok)
            norm = np.linalg.norm(acc)
            rows[i] = acc / norm if norm > 0 else self._token_vector("<zero>")
        return rows


class PirvEmbeddingProvider(TextEmbeddingProvider):
    """Serves precomputed embeddings from a PIRV file, one row per text."""

    def __init__(self, path):
        from .index import load_embeddings

        self.matrix, self.metadata = load_embeddings(path)
        self.dim = int(self.matrix.shape[1])

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if len(texts) != self.matrix.shape[0]:
            raise ValueError(
                f"{self.matrix.shape[0]} precomputed rows but {len(texts)} texts"
            )
        return np.array(self.matrix, dtype=np.float64)


def embed_texts(
    texts: Sequence[str],
    provider: TextEmbeddingProvider,
    expect_dim: Optional[int] = None,
) -> np.ndarray:
    """Embed texts through a provider, checking the configured dimension."""
    if expect_dim is not None and provider.dim != expect_dim:
        raise ValueError(
            f"provider dim {provider.dim} does not match configured dim {expect_dim}"
        )
    out = provider.embed(list(texts))
    if out.shape != (len(texts), provider.dim):
        raise ValueError(f"provider returned shape {out.shape}")
    return out
