"""
The action language spoken between the engine and the VLM.

The VLM answers every turn with free-form reasoning followed by one JSON
action object. parse_action() pulls that object out, validates it against
the action forms and the live candidate pool, and classifies anything it
cannot use as a FormatError instead of raising.
"""

import json
import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple, Union

from django.template.loader import render_to_string

from .choices import STRATEGY_HINTS, ActionName, EditOp, FormatErrorKind, Strategy
from .exceptions import EmptyInput
from .forms import (
    FinalizeForm,
    SegmentPhraseForm,
    SetStrategyForm,
    UpdateWorkingMaskForm,
    form_errors,
)
from .overlays import to_data_uri

logger = logging.getLogger(__name__)

TOOL_SCHEMA_VERSION = 'vasa-actions/1'


# ===== ACTIONS =====

@dataclass(frozen=True)
class SegmentPhrase:
    prompt: str

    def to_payload(self) -> dict:
        return {'action': ActionName.SEGMENT_PHRASE.value, 'prompt': self.prompt}


@dataclass(frozen=True)
class UpdateWorkingMask:
    op: EditOp
    candidate_ids: Tuple[int, ...]

    def to_payload(self) -> dict:
        return {
            'action': ActionName.UPDATE_WORKING_MASK.value,
            'op': EditOp(self.op).value,
            'candidate_ids': list(self.candidate_ids),
        }


@dataclass(frozen=True)
class SetStrategy:
    strategy: Strategy
    reason: str = ''

    def to_payload(self) -> dict:
        return {'action': ActionName.SET_STRATEGY.value, 'strategy': Strategy(self.strategy).value,
                'reason': self.reason}


@dataclass(frozen=True)
class Finalize:
    verified: bool
    reason: str = ''

    def to_payload(self) -> dict:
        return {'action': ActionName.FINALIZE.value, 'verified': self.verified, 'reason': self.reason}


AgentAction = Union[SegmentPhrase, UpdateWorkingMask, SetStrategy, Finalize]


@dataclass(frozen=True)
class FormatError:
    """An unusable VLM reply; raw_text is kept verbatim for the trace."""
    kind: FormatErrorKind
    raw_text: str
    detail: str

    def to_payload(self) -> dict:
        return {'kind': FormatErrorKind(self.kind).value, 'raw_text': self.raw_text, 'detail': self.detail}


def serialize_action(action: AgentAction) -> str:
    return json.dumps(action.to_payload(), ensure_ascii=False)


def action_from_payload(payload: dict) -> AgentAction:
    """Rebuild an action from a trace payload (assumed valid)."""
    name = payload['action']
    if name == ActionName.SEGMENT_PHRASE:
        return SegmentPhrase(payload['prompt'])
    if name == ActionName.UPDATE_WORKING_MASK:
        return UpdateWorkingMask(EditOp(payload['op']), tuple(payload['candidate_ids']))
    if name == ActionName.SET_STRATEGY:
        return SetStrategy(Strategy(payload['strategy']), payload.get('reason', ''))
    return Finalize(payload['verified'], payload.get('reason', ''))


EXAMPLE_ACTIONS = (
    SegmentPhrase('cat head'),
    UpdateWorkingMask(EditOp.REMOVE, (2,)),
    SetStrategy(Strategy.OVERSEGMENT_AND_REMOVE, 'the query excludes the ears'),
    Finalize(True, 'head present, ears and eyes removed'),
)


# ===== PARSING =====

def extract_json_objects(text: str) -> List[dict]:
    """Every top-level JSON object embedded in text, in order of appearance."""
    decoder = json.JSONDecoder()
    objects = []
    index = text.find('{')
    while index != -1:
        try:
            obj, end = decoder.raw_decode(text, index)
        except (ValueError, RecursionError):
            index = text.find('{', index + 1)
            continue
        if isinstance(obj, dict):
            objects.append(obj)
        index = text.find('{', end)
    return objects


def _normalize_choice(value):
    if isinstance(value, str):
        return value.strip().lower().replace('_', '-')
    return value


def _as_text(vlm_text) -> str:
    if isinstance(vlm_text, str):
        return vlm_text
    if isinstance(vlm_text, (bytes, bytearray)):
        return bytes(vlm_text).decode('utf-8', errors='replace')
    return str(vlm_text)


def parse_action(vlm_text, pool_ids: Iterable[int]) -> Union[AgentAction, FormatError]:
    """
    Parse the last JSON action object in a VLM reply.

    Never raises: malformed input comes back as a FormatError.
    """
    text = _as_text(vlm_text)
    try:
        return _parse_action(text, set(pool_ids))
    except Exception as exc:  # noqa: BLE001 - the contract is "never throws"
        logger.debug("parse_action failed unexpectedly: %s", exc)
        return FormatError(FormatErrorKind.NOT_PARSABLE, text, f"unreadable reply: {exc}")


def _parse_action(text: str, pool_ids: set) -> Union[AgentAction, FormatError]:
    objects = extract_json_objects(text)
    if not objects:
        return FormatError(FormatErrorKind.NOT_PARSABLE, text, 'no JSON action object found')

    with_action = [obj for obj in objects if 'action' in obj]
    if not with_action:
        return FormatError(FormatErrorKind.SCHEMA_VIOLATION, text, 'JSON object has no "action" field')
    payload = dict(with_action[-1])

    name = payload.get('action')
    if isinstance(name, str):
        name = name.strip().lower()
    if name not in ActionName.values:
        return FormatError(FormatErrorKind.UNKNOWN_ACTION, text, f'unknown action {payload.get("action")!r}')

    if name == ActionName.SEGMENT_PHRASE:
        form = SegmentPhraseForm(data=payload)
    elif name == ActionName.UPDATE_WORKING_MASK:
        payload['op'] = _normalize_choice(payload.get('op'))
        form = UpdateWorkingMaskForm(data=payload)
    elif name == ActionName.SET_STRATEGY:
        payload['strategy'] = _normalize_choice(payload.get('strategy'))
        form = SetStrategyForm(data=payload)
    else:
        form = FinalizeForm(data=payload)

    if not form.is_valid():
        details = '; '.join(f"{field}: {' '.join(msgs)}" for field, msgs in form_errors(form).items())
        return FormatError(FormatErrorKind.SCHEMA_VIOLATION, text, details)

    data = form.cleaned_data
    if name == ActionName.SEGMENT_PHRASE:
        return SegmentPhrase(data['prompt'])
    if name == ActionName.UPDATE_WORKING_MASK:
        unknown = [i for i in data['candidate_ids'] if i not in pool_ids]
        if unknown:
            return FormatError(
                FormatErrorKind.UNKNOWN_CANDIDATE_ID, text,
                f"candidate ids {unknown} are not in the current pool {sorted(pool_ids)}",
            )
        return UpdateWorkingMask(EditOp(data['op']), tuple(data['candidate_ids']))
    if name == ActionName.SET_STRATEGY:
        return SetStrategy(Strategy(data['strategy']), data.get('reason') or '')
    return Finalize(data['verified'], data.get('reason') or '')


# ===== PROMPTS =====

def _catalog():
    return [{'value': s.value, 'label': s.label, 'hint': STRATEGY_HINTS[s]} for s in Strategy]


def _examples():
    return [serialize_action(a) for a in EXAMPLE_ACTIONS]


def render_system_prompt(query: str, strategy: Strategy,
                         tool_schema_version: str = TOOL_SCHEMA_VERSION) -> str:
    """
    System prompt for one inference session.

    The query is embedded as a JSON string literal so braces and quotes in it
    cannot be mistaken for an action object.
    """
    if not query or not query.strip():
        raise EmptyInput('query must be non-empty')
    return render_to_string('harness/prompts/system.txt', {
        'query_json': json.dumps(query, ensure_ascii=False),
        'strategy': Strategy(strategy).value,
        'catalog': _catalog(),
        'examples': _examples(),
        'schema_version': tool_schema_version,
    })


def render_strategy_prompt(query: str) -> str:
    if not query or not query.strip():
        raise EmptyInput('query must be non-empty')
    return render_to_string('harness/prompts/strategy.txt', {
        'query_json': json.dumps(query, ensure_ascii=False),
        'catalog': _catalog(),
    })


def id_list(ids: Sequence[int]) -> str:
    return ', '.join(str(i) for i in ids)


def render_reminder(error: FormatError, pool_ids: Sequence[int],
                    tool_schema_version: str = TOOL_SCHEMA_VERSION) -> str:
    return render_to_string('harness/prompts/reminder.txt', {
        'kind': FormatErrorKind(error.kind).value,
        'detail': error.detail,
        'examples': _examples(),
        'pool_ids': id_list(sorted(pool_ids)),
        'schema_version': tool_schema_version,
    })


def render_scrutiny_prompt(query: str, working_area: int) -> str:
    return render_to_string('harness/prompts/scrutiny.txt', {
        'query_json': json.dumps(query, ensure_ascii=False),
        'working_area': working_area,
    })


# ===== MESSAGE BUNDLES =====

@dataclass(frozen=True)
class RoundDigest:
    """Textual state summary shown to the agent each turn."""
    round_index: int
    budget: int
    strategy: str
    working_area: int
    history: Tuple[str, ...] = ()
    pool_phrase: Optional[str] = None
    pool_ids: Tuple[int, ...] = ()
    verdict: str = ''
    verdict_detail: str = ''


def text_part(text: str) -> dict:
    return {'type': 'text', 'text': text}


def image_part(data_uri: str) -> dict:
    return {'type': 'image_url', 'image_url': {'url': data_uri}}


def system_message(text: str) -> dict:
    return {'role': 'system', 'content': text}


def assistant_message(text: str) -> dict:
    return {'role': 'assistant', 'content': text}


def user_message(text: str, overlays=(), max_side: int = 1024) -> dict:
    """User turn with a text part followed by captioned overlay images."""
    if not overlays:
        return {'role': 'user', 'content': text}
    parts = [text_part(text)]
    for caption, image in overlays:
        parts.append(text_part(caption))
        parts.append(image_part(to_data_uri(image, max_side)))
    return {'role': 'user', 'content': parts}


def render_round_digest(digest: RoundDigest, remaining_budget: int, notice: str = '') -> str:
    return render_to_string('harness/prompts/round_context.txt', {
        'digest': digest,
        'pool_ids': id_list(digest.pool_ids),
        'remaining_budget': remaining_budget,
        'notice': notice,
    })


def render_round_context(digest: RoundDigest, overlays, remaining_budget: int,
                         max_side: int = 1024, notice: str = '') -> List[dict]:
    """
    Ordered message bundle for one turn: the textual digest, then each
    overlay preceded by its caption.
    """
    return [user_message(render_round_digest(digest, remaining_budget, notice), overlays, max_side)]
