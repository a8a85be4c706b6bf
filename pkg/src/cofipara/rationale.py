"""Stance-conditioned rationale generation with a pluggable LMM client.

Each sample is explained from both candidate labels ("competing"
rationales) for the detection stage, and only from the sarcastic side for
target identification. Responses are cached in an append-only JSONL file
keyed by (sample id, stance, backend id).
"""
from __future__ import annotations

import base64
import datetime as _dt
import hashlib
import io
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Protocol

from .errors import ContractViolation, GenerationError, RejectedInput, TransportError
from .sample import Phase, Sample, Stance

log = logging.getLogger(__name__)

SEP = "<sep>"

PROMPT_TEMPLATE = (
    "Given a tweet that consists of a text and an image, "
    "please give me a rationale of why the tweet is {stance}.\n"
    "tweet text: {text}\n"
    "tweet image: {image}"
)


@dataclass(frozen=True)
class PromptText:
    text: str
    stance: Stance
    image_ref: str

    @property
    def prompt_hash(self) -> int:
        return content_hash64(self.text)


def content_hash64(*parts: str) -> int:
    h = hashlib.sha256("\x1f".join(parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "big")


@dataclass(frozen=True)
class RationaleSet:
    r_pos: str
    r_neg: Optional[str]
    backend_id: str
    prompt_hash: int


def build_prompt(sample: Sample, stance: Stance) -> PromptText:
    if not sample.text or not sample.text.strip():
        raise RejectedInput(f"sample {sample.id!r} has empty text")
    stance = Stance(stance)
    image_ref = sample.image_path or f"<image:{sample.id}>"
    text = PROMPT_TEMPLATE.format(stance=stance.value, text=sample.text, image=image_ref)
    return PromptText(text=text, stance=stance, image_ref=image_ref)


class RationaleClient(Protocol):
    backend_id: str

    def generate(self, prompt: PromptText, sample: Sample) -> str:
        """Return the rationale text, or raise TransportError on a retriable failure."""


class MockClient:
    """Offline backend: echoes ``RATIONALE[<stance>|<first words>...]``.

    ``failures`` maps a stance to how many leading calls for that stance
    raise :class:`TransportError`, to exercise the retry path.
    """

    def __init__(self, backend_id="mock", prefix_words=2, failures=None):
        self.backend_id = backend_id
        self.prefix_words = prefix_words
        self.failures = dict(failures or {})
        self.calls: list[tuple[str, str]] = []
        self._lock = threading.Lock()

    def generate(self, prompt: PromptText, sample: Sample) -> str:
        with self._lock:
            self.calls.append((sample.id, prompt.stance.value))
            left = self.failures.get(prompt.stance, 0)
            if left:
                self.failures[prompt.stance] = left - 1
                raise TransportError(f"mock refusal for {prompt.stance.value}")
        words = sample.text.split()
        head = " ".join(words[: self.prefix_words])
        if len(words) > self.prefix_words:
            head += "..."
        return f"RATIONALE[{prompt.stance.value}|{head}]"

    @property
    def call_count(self):
        return len(self.calls)


@dataclass
class BackendConfig:
    endpoint: str
    model: str
    max_retries: int = 3
    concurrency: int = 4
    timeout: float = 60.0
    api_key: Optional[str] = None

    @classmethod
    def from_env(cls, env=None):
        env = os.environ if env is None else env
        try:
            endpoint = env["COFIPARA_LMM_ENDPOINT"]
            model = env["COFIPARA_LMM_MODEL"]
        except KeyError as exc:
            raise RejectedInput(f"missing backend setting {exc.args[0]}") from None
        return cls(
            endpoint=endpoint,
            model=model,
            max_retries=int(env.get("COFIPARA_LMM_MAX_RETRIES", 3)),
            concurrency=int(env.get("COFIPARA_LMM_CONCURRENCY", 4)),
            timeout=float(env.get("COFIPARA_LMM_TIMEOUT", 60)),
            api_key=env.get("COFIPARA_LMM_API_KEY"),
        )


def _image_data_url(sample: Sample) -> Optional[str]:
    if sample.image is not None:
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(sample.image).save(buf, format="PNG")
        raw = buf.getvalue()
    elif sample.image_path and os.path.exists(sample.image_path):
        raw = Path(sample.image_path).read_bytes()
    else:
        return None
    return "data:image/png;base64," + base64.b64encode(raw).decode("ascii")


class HttpClient:
    """OpenAI-compatible chat-completions backend (LLaVA / Qwen-VL servers).

    Decoding is greedy (temperature 0) so repeated prompts give the same text.
    The image travels as a base64 data URL next to the prompt.
    """

    def __init__(self, config: BackendConfig, transport=None):
        import httpx

        self.config = config
        self.backend_id = f"http:{config.model}"
        headers = {"Authorization": f"Bearer {config.api_key}"} if config.api_key else {}
        self._http = httpx.Client(timeout=config.timeout, headers=headers, transport=transport)

    def generate(self, prompt: PromptText, sample: Sample) -> str:
        import httpx

        content = [{"type": "text", "text": prompt.text}]
        url = _image_data_url(sample)
        if url:
            content.append({"type": "image_url", "image_url": {"url": url}})
        body = {
            "model": self.config.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": content}],
        }
        try:
            resp = self._http.post(self.config.endpoint, json=body)
        except httpx.HTTPError as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"backend returned HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise GenerationError(f"backend rejected request: HTTP {resp.status_code}", prompt.stance)
        try:
            text = resp.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, ValueError) as exc:
            raise TransportError(f"malformed backend response: {exc}") from exc
        if not text or not text.strip():
            raise TransportError("backend returned an empty rationale")
        return text.strip()


def cache_key(sample_id: str, stance: Stance, backend_id: str) -> str:
    raw = json.dumps([sample_id, Stance(stance).value, backend_id], ensure_ascii=False)
    return hashlib.sha256(raw.encode("utf-8")).hexdigest()


class RationaleCache:
    """Append-only JSONL cache. ``path=None`` keeps it in memory only.

    The first record written for a key wins; later duplicates in the file
    are ignored on load.
    """

    def __init__(self, path=None, clock=None):
        self.path = Path(path) if path is not None else None
        self._clock = clock or (lambda: _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"))
        self._entries: dict[str, dict] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._entries.setdefault(rec["key"], rec)

    def __len__(self):
        return len(self._entries)

    def keys(self):
        return list(self._entries)

    def get(self, sample_id, stance, backend_id) -> Optional[str]:
        rec = self._entries.get(cache_key(sample_id, stance, backend_id))
        return None if rec is None else rec["rationale"]

    def put(self, sample_id, stance, backend_id, rationale: str) -> str:
        key = cache_key(sample_id, stance, backend_id)
        with self._lock:
            if key in self._entries:
                return self._entries[key]["rationale"]
            rec = {
                "key": key,
                "sample_id": sample_id,
                "stance": Stance(stance).value,
                "backend_id": backend_id,
                "rationale": rationale,
                "created_at": self._clock(),
            }
            self._entries[key] = rec
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
            return rationale


def _request(sample, stance, client, cache, max_retries, backoff):
    hit = cache.get(sample.id, stance, client.backend_id)
    if hit is not None:
        return hit
    prompt = build_prompt(sample, stance)
    for attempt in range(max_retries + 1):
        try:
            text = client.generate(prompt, sample)
            break
        except TransportError as exc:
            log.warning("rationale request %s/%s failed (attempt %d): %s", sample.id, stance.value, attempt + 1, exc)
            if attempt == max_retries:
                raise GenerationError(
                    f"no rationale for sample {sample.id!r} after {max_retries + 1} attempts: {exc}", stance
                ) from exc
            if backoff:
                time.sleep(backoff * 2**attempt)
    return cache.put(sample.id, stance, client.backend_id, text)


def _check_generatable(sample):
    if not sample.text or not sample.text.strip():
        raise RejectedInput(f"sample {sample.id!r} has empty text")
    if sample.image is None and sample.image_path is None:
        raise RejectedInput(f"sample {sample.id!r} has no image")


def generate_competing(sample, client, cache=None, max_retries=3, backoff=0.0) -> RationaleSet:
    _check_generatable(sample)
    cache = cache if cache is not None else RationaleCache()
    pos = _request(sample, Stance.SARCASTIC, client, cache, max_retries, backoff)
    neg = _request(sample, Stance.NON_SARCASTIC, client, cache, max_retries, backoff)
    h = content_hash64(
        build_prompt(sample, Stance.SARCASTIC).text, build_prompt(sample, Stance.NON_SARCASTIC).text
    )
    return RationaleSet(r_pos=pos, r_neg=neg, backend_id=client.backend_id, prompt_hash=h)


def generate_sarcastic(sample, client, cache=None, max_retries=3, backoff=0.0) -> RationaleSet:
    _check_generatable(sample)
    cache = cache if cache is not None else RationaleCache()
    pos = _request(sample, Stance.SARCASTIC, client, cache, max_retries, backoff)
    h = content_hash64(build_prompt(sample, Stance.SARCASTIC).text)
    return RationaleSet(r_pos=pos, r_neg=None, backend_id=client.backend_id, prompt_hash=h)


def generate_for_phase(
    samples: Iterable[Sample], phase, client, cache=None, jobs=1, max_retries=3, backoff=0.0
) -> dict[str, RationaleSet]:
    """Rationales for many samples; ``jobs`` bounds the requests in flight."""
    fn = generate_competing if Phase(phase) is Phase.PRETRAIN else generate_sarcastic
    cache = cache if cache is not None else RationaleCache()
    samples = list(samples)
    if jobs <= 1:
        results = [fn(s, client, cache, max_retries, backoff) for s in samples]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda s: fn(s, client, cache, max_retries, backoff), samples))
    return {s.id: r for s, r in zip(samples, results)}


def _clean(part: str) -> str:
    return " ".join(part.replace(SEP, " ").split())


def pack_input(sample: Sample, rationales: Optional[RationaleSet], phase) -> str:
    """Augmented input text: the tweet followed by its rationales.

    Pretraining packs ``T <sep> r_pos <sep> r_neg``; fine-tuning packs
    ``T <sep> r_pos``. Separator literals inside the parts are blanked so
    the separator count is fixed by the phase.
    """
    phase = Phase(phase)
    r_pos = rationales.r_pos if rationales else None
    r_neg = rationales.r_neg if rationales else None
    if not r_pos or not r_pos.strip():
        raise ContractViolation(f"sample {sample.id!r}: r_pos is required for {phase.value}")
    parts = [sample.text, r_pos]
    if phase is Phase.PRETRAIN:
        if not r_neg or not r_neg.strip():
            raise ContractViolation(f"sample {sample.id!r}: r_neg is required for pretrain")
        parts.append(r_neg)
    return f" {SEP} ".join(_clean(p) for p in parts)
