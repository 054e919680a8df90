"""
Backends for the two model roles: a chat VLM and a text-prompted segmenter.

Each role has a live HTTP implementation (requests) and a deterministic
scripted one for tests and desk-scale runs. Live clients retry transport
failures with exponential backoff; malformed reply bodies are not retried
here and surface to the engine's recovery logic.
"""

import json
import logging
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import requests
from PIL import Image

from .exceptions import (
    BackendUnavailable,
    EmptyInput,
    MalformedBackendReply,
    MalformedManifest,
    ScriptExhausted,
)
from .forms import FixtureCandidateForm, form_errors
from .masks import RasterMask, Rle, rle_decode
from .overlays import load_image, to_data_uri

logger = logging.getLogger(__name__)

DEFAULT_CANDIDATE_CAP = 8


# ===== DOMAIN TYPES =====

@dataclass(frozen=True, eq=False)
class ImageRef:
    """An input image plus the id segmenter fixtures are keyed by."""
    image_id: str
    pixels: Image.Image

    @classmethod
    def open(cls, path, image_id: Optional[str] = None) -> 'ImageRef':
        path = Path(path)
        return cls(image_id or path.stem, load_image(path))

    @property
    def width(self) -> int:
        return self.pixels.width

    @property
    def height(self) -> int:
        return self.pixels.height


@dataclass(frozen=True)
class CandidateMask:
    """One segmenter proposal, numbered 1..n in score order."""
    candidate_id: int
    source_phrase: str
    score: float
    mask: RasterMask


class SegmenterBackend(ABC):
    """Returns raw (score, mask) proposals for a phrase; ordering is not trusted."""

    @abstractmethod
    def segment(self, image: ImageRef, phrase: str) -> List[Tuple[float, RasterMask]]:
        raise NotImplementedError


class VlmBackend(ABC):

    @abstractmethod
    def chat(self, messages: Sequence[dict]) -> str:
        raise NotImplementedError


# ===== OPERATIONS =====

def segment_phrase(backend: SegmenterBackend, image: ImageRef, phrase: str,
                   cap: int = DEFAULT_CANDIDATE_CAP) -> List[CandidateMask]:
    """
    Ask the segmenter for a phrase and number the proposals.

    Proposals are sorted by descending score (stable), truncated to cap, and
    given ids 1..n. An empty list means the concept was not found.
    """
    if not phrase or not phrase.strip():
        raise EmptyInput('segment phrase must be non-empty')
    proposals = backend.segment(image, phrase)
    for score, mask in proposals:
        if not 0.0 <= score <= 1.0:
            raise MalformedBackendReply(f"candidate score {score} outside [0, 1]")
        if (mask.width, mask.height) != (image.width, image.height):
            raise MalformedBackendReply(
                f"candidate mask {mask.width}x{mask.height} does not match image {image.width}x{image.height}"
            )
    ranked = sorted(proposals, key=lambda proposal: -proposal[0])[:cap]
    return [
        CandidateMask(candidate_id=index, source_phrase=phrase, score=float(score), mask=mask)
        for index, (score, mask) in enumerate(ranked, start=1)
    ]


def chat(backend: VlmBackend, messages: Sequence[dict]) -> str:
    if not messages:
        raise EmptyInput('chat needs at least one message')
    return backend.chat(messages)


# ===== SCRIPTED BACKENDS =====

class ScriptedVlm(VlmBackend):
    """Replays a fixed list of replies, one per turn, ignoring the messages."""

    def __init__(self, turns: Sequence[str]):
        self.turns = [_turn_text(turn) for turn in turns]
        self.cursor = 0
        self._lock = threading.Lock()

    def chat(self, messages: Sequence[dict]) -> str:
        with self._lock:
            if self.cursor >= len(self.turns):
                raise ScriptExhausted(f"script has {len(self.turns)} turns; turn {self.cursor} requested")
            reply = self.turns[self.cursor]
            self.cursor += 1
            return reply


def _turn_text(turn) -> str:
    if isinstance(turn, str):
        return turn
    return json.dumps(turn, ensure_ascii=False)


class ScriptBook:
    """
    Per-session scripts loaded from a file.

    The file holds either a list of turns (every session replays it from the
    start) or an object mapping item id -> list of turns.
    """

    def __init__(self, default: Optional[Sequence] = None, by_item: Optional[Dict[str, Sequence]] = None):
        self.default = default
        self.by_item = by_item or {}

    @classmethod
    def load(cls, path) -> 'ScriptBook':
        try:
            payload = json.loads(Path(path).read_text(encoding='utf-8'))
        except (OSError, ValueError) as exc:
            raise MalformedManifest(f"cannot read VLM script {path}: {exc}")
        if isinstance(payload, dict) and 'turns' in payload:
            payload = payload['turns']
        if isinstance(payload, list):
            return cls(default=payload)
        if isinstance(payload, dict) and all(isinstance(v, list) for v in payload.values()):
            return cls(by_item={str(k): v for k, v in payload.items()})
        raise MalformedManifest(f"VLM script {path} must be a list of turns or a mapping item id -> turns")

    def for_item(self, item_id: Optional[str] = None) -> ScriptedVlm:
        if item_id is not None and item_id in self.by_item:
            return ScriptedVlm(self.by_item[item_id])
        if self.default is not None:
            return ScriptedVlm(self.default)
        raise ScriptExhausted(f"no script for item {item_id!r}")


class FixtureSegmenter(SegmenterBackend):
    """Serves (image_id, phrase) -> proposals from a validated fixture table."""

    def __init__(self, table: Dict[str, Dict[str, List[Tuple[float, RasterMask]]]]):
        self.table = table

    def segment(self, image: ImageRef, phrase: str) -> List[Tuple[float, RasterMask]]:
        return list(self.table.get(image.image_id, {}).get(_phrase_key(phrase), []))


def _phrase_key(phrase: str) -> str:
    return ' '.join(phrase.lower().split())


def load_fixture_oracle(path) -> FixtureSegmenter:
    """
    Build a FixtureSegmenter from a JSON manifest:

        {"images": {"img1": {"size": [h, w],
                             "phrases": {"cat head": [{"score": 0.9, "rle": {...}}]}}}}

    Every RLE is decoded and checked against its image size at load time.
    """
    try:
        payload = json.loads(Path(path).read_text(encoding='utf-8'))
    except (OSError, ValueError) as exc:
        raise MalformedManifest(f"cannot read fixture manifest {path}: {exc}")
    if not isinstance(payload, dict):
        raise MalformedManifest('fixture manifest must be a JSON object')
    images = payload.get('images', {})
    if not isinstance(images, dict):
        raise MalformedManifest("'images' must map image ids to entries")

    table = {}
    for image_id, entry in images.items():
        if not isinstance(entry, dict):
            raise MalformedManifest('image entry must be an object', item_id=image_id)
        size = entry.get('size')
        if (not isinstance(size, list) or len(size) != 2
                or not all(isinstance(v, int) and not isinstance(v, bool) and v > 0 for v in size)):
            raise MalformedManifest("'size' must be [height, width]", item_id=image_id)
        height, width = size
        raw_phrases = entry.get('phrases') or {}
        if not isinstance(raw_phrases, dict):
            raise MalformedManifest("'phrases' must map phrases to proposal lists", item_id=image_id)
        phrases = {}
        for phrase, proposals in raw_phrases.items():
            if not isinstance(proposals, list):
                raise MalformedManifest(f"phrase {phrase!r} must map to a list", item_id=image_id)
            decoded = []
            for proposal in proposals:
                form = FixtureCandidateForm(data=proposal if isinstance(proposal, dict) else {})
                if not form.is_valid():
                    raise MalformedManifest(f"bad proposal for {phrase!r}", item_id=image_id,
                                            errors=form_errors(form))
                rle: Rle = form.cleaned_data['rle']
                if (rle.width, rle.height) != (width, height):
                    raise MalformedManifest(
                        f"proposal for {phrase!r} is {rle.width}x{rle.height}, image is {width}x{height}",
                        item_id=image_id,
                    )
                decoded.append((form.cleaned_data['score'], rle_decode(rle, width, height)))
            phrases[_phrase_key(phrase)] = decoded
        table[str(image_id)] = phrases
    logger.debug("loaded fixture oracle %s with %d images", path, len(table))
    return FixtureSegmenter(table)


# ===== LIVE HTTP BACKENDS =====

TRANSPORT_ERRORS = (requests.ConnectionError, requests.Timeout, requests.exceptions.ChunkedEncodingError)
RETRYABLE_STATUS = {502, 503, 504}


def with_transport_retries(call: Callable[[], requests.Response], retries: int, backoff: float,
                           sleep: Callable[[float], None] = time.sleep, what: str = 'backend') -> requests.Response:
    """
    Run call() up to retries + 1 times, backing off exponentially between
    transport failures. Raises BackendUnavailable when every attempt failed.

    Any other requests error (bad URL, undecodable body, ...) is not worth
    retrying and becomes BackendUnavailable at once.
    """
    last_error = None
    for attempt in range(retries + 1):
        if attempt:
            delay = backoff * (2 ** (attempt - 1))
            logger.warning("%s transport failure (%s); retry %d/%d in %.2fs",
                           what, last_error, attempt, retries, delay)
            sleep(delay)
        try:
            response = call()
        except TRANSPORT_ERRORS as exc:
            last_error = exc
            continue
        except requests.RequestException as exc:
            raise BackendUnavailable(f"{what} request failed: {type(exc).__name__}: {exc}",
                                     attempts=attempt + 1)
        if response.status_code in RETRYABLE_STATUS:
            last_error = f"HTTP {response.status_code}"
            continue
        return response
    raise BackendUnavailable(f"{what} unavailable after {retries + 1} attempts: {last_error}",
                             attempts=retries + 1)


class HttpSegmenter(SegmenterBackend):
    """Client for a one-route segmentation service: POST {endpoint}/segment."""

    def __init__(self, endpoint: str, timeout: float = 60.0, retries: int = 2, backoff: float = 0.5,
                 session: Optional[requests.Session] = None, sleep: Callable[[float], None] = time.sleep):
        self.url = endpoint.rstrip('/') + '/segment'
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.session = session or requests.Session()
        self.sleep = sleep

    def segment(self, image: ImageRef, phrase: str) -> List[Tuple[float, RasterMask]]:
        body = {'image': to_data_uri(image.pixels), 'phrase': phrase}
        response = with_transport_retries(
            lambda: self.session.post(self.url, json=body, timeout=self.timeout),
            self.retries, self.backoff, self.sleep, what='segmenter',
        )
        if response.status_code != 200:
            raise MalformedBackendReply(f"segmenter answered HTTP {response.status_code}")
        try:
            payload = response.json()
            proposals = []
            for candidate in payload['candidates']:
                score = candidate['score']
                if isinstance(score, bool) or not isinstance(score, (int, float)):
                    raise TypeError(f"score {score!r} is not a number")
                rle = Rle.from_json(candidate['rle'])
                # Per-instance boxes, if any, are ignored.
                proposals.append((float(score), rle_decode(rle, rle.width, rle.height)))
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedBackendReply(f"unreadable segmenter reply: {exc}")
        return proposals


class ChatCompletionsVlm(VlmBackend):
    """Client for an OpenAI-compatible /chat/completions endpoint."""

    def __init__(self, endpoint: str, model: str, api_key: str = '', timeout: float = 60.0,
                 retries: int = 2, backoff: float = 0.5, temperature: float = 0.0,
                 session: Optional[requests.Session] = None, sleep: Callable[[float], None] = time.sleep):
        self.url = endpoint.rstrip('/') + '/chat/completions'
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.temperature = temperature
        self.session = session or requests.Session()
        self.sleep = sleep

    def chat(self, messages: Sequence[dict]) -> str:
        headers = {'Content-Type': 'application/json'}
        if self.api_key:
            headers['Authorization'] = f"Bearer {self.api_key}"
        body = {'model': self.model, 'messages': list(messages), 'temperature': self.temperature}
        response = with_transport_retries(
            lambda: self.session.post(self.url, json=body, headers=headers, timeout=self.timeout),
            self.retries, self.backoff, self.sleep, what='vlm',
        )
        if response.status_code != 200:
            raise MalformedBackendReply(f"VLM answered HTTP {response.status_code}")
        try:
            content = response.json()['choices'][0]['message']['content']
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedBackendReply(f"unreadable chat completion: {exc}")
        if isinstance(content, list):
            content = ''.join(part.get('text', '') for part in content if isinstance(part, dict))
        if not isinstance(content, str):
            raise MalformedBackendReply('chat completion content is not text')
        return content
