"""
The agent loop: a VLM edits a persistent working mask through segmenter
calls and Boolean updates until the result is verified, progress stalls,
the budget runs out, or failures pile up.

One session is strictly sequential. Sessions share nothing but their
backends, so several can run on different threads at once.
"""

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, List, Optional, Sequence, Tuple, Union

from .choices import (
    EditOp,
    EntryKind,
    FormatErrorKind,
    OverlayMode,
    RecoveryAction,
    Strategy,
    TerminationReason,
    Verdict,
)
from .clients import (
    CandidateMask,
    ImageRef,
    SegmenterBackend,
    VlmBackend,
    chat,
    segment_phrase,
)
from .conf import EngineConfig
from .exceptions import BackendUnavailable, MalformedBackendReply
from .masks import RasterMask, apply_edit, area, mask_digest, merge_all, rle_encode, subtract
from .overlays import (
    WORKING_COLOR,
    OverlayStyle,
    compose_grid,
    dump_overlays,
    examine_each_mask,
    render_overlay,
)
from .protocol import (
    Finalize,
    FormatError,
    RoundDigest,
    SegmentPhrase,
    SetStrategy,
    UpdateWorkingMask,
    assistant_message,
    extract_json_objects,
    parse_action,
    render_reminder,
    render_round_context,
    render_scrutiny_prompt,
    render_strategy_prompt,
    render_system_prompt,
    system_message,
    user_message,
)

logger = logging.getLogger(__name__)

BACKEND_FAILURES = (BackendUnavailable, MalformedBackendReply)
DIGEST_HISTORY_LINES = 8


# ===== STATE =====

@dataclass
class HistoryEntry:
    """
    One append-only record of the session.

    Update entries carry enough to recompute the edit offline: the merged
    selection as RLE and a digest of the working mask after the edit.
    """
    round: int
    kind: str
    action: Optional[dict] = None
    error: Optional[dict] = None
    segment_prompt: Optional[str] = None
    candidate_count: Optional[int] = None
    op: Optional[str] = None
    candidate_ids: Optional[List[int]] = None
    pixels_added: int = 0
    pixels_removed: int = 0
    area_after: Optional[int] = None
    selection: Optional[dict] = None
    mask_digest: Optional[str] = None
    snapshot: Optional[dict] = None
    verdict: Optional[str] = None
    recovery: Optional[str] = None
    raw_text: Optional[str] = None
    note: str = ''

    def to_dict(self) -> dict:
        return {key: value for key, value in asdict(self).items() if value is not None}

    @classmethod
    def from_dict(cls, payload: dict) -> 'HistoryEntry':
        known = {f.name for f in fields(cls)}
        return cls(**{key: value for key, value in payload.items() if key in known})


@dataclass
class WorkingState:
    """
    Everything one session carries between turns.

    The working mask starts empty; candidate ids in the pool are 1..n or the
    pool is empty. history is append-only.
    """
    image: ImageRef
    query: str
    strategy: Strategy
    working_mask: RasterMask
    config: EngineConfig = field(default_factory=EngineConfig)
    round_index: int = 0
    candidate_pool: List[CandidateMask] = field(default_factory=list)
    pool_phrase: Optional[str] = None
    history: List[HistoryEntry] = field(default_factory=list)
    messages: List[dict] = field(default_factory=list)
    consecutive_failures: int = 0
    backend_streak: int = 0
    vlm_turns: int = 0
    verdict: str = ''
    verdict_detail: str = ''

    @classmethod
    def start(cls, image: ImageRef, query: str, config: EngineConfig,
              strategy: Strategy = Strategy.DIRECT_RETRIEVAL) -> 'WorkingState':
        return cls(image=image, query=query, strategy=Strategy(strategy),
                   working_mask=RasterMask.empty(image.width, image.height), config=config)

    @property
    def budget(self) -> int:
        return self.config.max_rounds

    @property
    def pool_ids(self) -> List[int]:
        return [c.candidate_id for c in self.candidate_pool]

    def record(self, entry: HistoryEntry) -> HistoryEntry:
        self.history.append(entry)
        logger.debug("round %d %s %s", entry.round, entry.kind, entry.note or entry.action or '')
        return entry

    def clear_pool(self):
        self.candidate_pool = []
        self.pool_phrase = None


@dataclass
class Trace:
    """Complete record of one session; wall_time is excluded from equality."""
    image_id: str
    query: str
    width: int
    height: int
    entries: List[HistoryEntry]
    termination: TerminationReason
    final_mask: RasterMask
    reasoning_steps: int
    strategy: str
    config: dict
    note: str = ''
    wall_time: float = field(default=0.0, compare=False)


# ===== STRATEGY =====

def parse_strategy(text: str) -> Optional[Strategy]:
    """A strategy from a {"strategy": ...} object, else the first strategy name in the text."""
    for obj in reversed(extract_json_objects(text)):
        value = obj.get('strategy')
        if isinstance(value, str):
            value = value.strip().lower().replace('_', '-').replace(' ', '-')
            if value in Strategy.values:
                return Strategy(value)
    lowered = text.lower().replace('_', '-')
    found = [(lowered.find(value), value) for value in Strategy.values if value in lowered]
    if found:
        return Strategy(min(found)[1])
    return None


def select_strategy(vlm: VlmBackend, image: ImageRef, query: str, attempts: int = 3,
                    history: Optional[List[HistoryEntry]] = None,
                    max_side: int = 1024) -> Strategy:
    """
    Ask the VLM for an initial strategy.

    Falls back to direct retrieval after `attempts` unusable replies; each
    miss is appended to history as a format error.
    """
    history = history if history is not None else []
    prompt = render_strategy_prompt(query)
    messages = [user_message(prompt, [('input image', image.pixels)], max_side)]
    for _ in range(attempts):
        try:
            reply = chat(vlm, messages)
        except BACKEND_FAILURES as exc:
            history.append(HistoryEntry(round=0, kind=EntryKind.BACKEND_ERROR,
                                        note=f"strategy selection: {exc}"))
            continue
        strategy = parse_strategy(reply)
        if strategy is not None:
            history.append(HistoryEntry(round=0, kind=EntryKind.STRATEGY,
                                        action={'strategy': strategy.value}, raw_text=reply))
            return strategy
        error = FormatError(FormatErrorKind.NOT_PARSABLE, reply, 'no strategy name in reply')
        history.append(HistoryEntry(round=0, kind=EntryKind.FORMAT_ERROR,
                                    error=error.to_payload(), note='strategy selection'))
        messages = messages + [assistant_message(reply), user_message(prompt)]

    logger.info("strategy selection failed %d times; falling back to %s",
                attempts, Strategy.DIRECT_RETRIEVAL.value)
    history.append(HistoryEntry(round=0, kind=EntryKind.STRATEGY,
                                action={'strategy': Strategy.DIRECT_RETRIEVAL.value},
                                note=f"fallback after {attempts} unusable replies"))
    return Strategy.DIRECT_RETRIEVAL


# ===== SCRUTINY =====

def _normalize_verdict(value: str) -> str:
    return value.strip().lower().replace('-', '_').replace(' ', '_')


def parse_verdict(text: str) -> Optional[Tuple[Verdict, str]]:
    """
    (verdict, detail) from a {"verdict": ...} object or a line such as
    "extra regions: ears". Lines are read from the end of the reply.
    """
    for obj in reversed(extract_json_objects(text)):
        value = obj.get('verdict')
        if isinstance(value, str) and _normalize_verdict(value) in Verdict.values:
            detail = obj.get('detail')
            return Verdict(_normalize_verdict(value)), detail if isinstance(detail, str) else ''
    for line in reversed(text.strip().splitlines()):
        line = line.strip().strip('*').strip()
        label, _, rest = line.partition(':')
        normalized = _normalize_verdict(label)
        if normalized in Verdict.values:
            return Verdict(normalized), rest.strip()
    return None


def _ask(vlm: VlmBackend, state: WorkingState) -> str:
    state.vlm_turns += 1
    return chat(vlm, state.messages)


def _working_overlay(state: WorkingState):
    style = OverlayStyle(fill_color=WORKING_COLOR, fill_alpha=state.config.overlay_alpha,
                         outline_width=state.config.outline_width, caption='working')
    return ('working', render_overlay(state.image.pixels, state.working_mask, style))


def verify_progress(vlm: VlmBackend, state: WorkingState) -> Verdict:
    """
    One scrutiny turn: show the working-mask overlay and classify it.

    Unusable replies (and backend failures) count as a failure and default
    to Continue. The verdict is recorded in history and kept on the state.
    """
    prompt = render_scrutiny_prompt(state.query, area(state.working_mask))
    state.messages.append(user_message(prompt, [_working_overlay(state)], state.config.max_image_side))
    try:
        reply = _ask(vlm, state)
    except BACKEND_FAILURES as exc:
        state.messages.pop()
        reply, parsed = None, None
        note = f"scrutiny failed: {exc}"
    else:
        state.messages.append(assistant_message(reply))
        parsed = parse_verdict(reply)
        note = '' if parsed else 'unparseable scrutiny reply; treated as continue'

    if parsed is None:
        state.consecutive_failures += 1
        verdict, detail = Verdict.CONTINUE, ''
    else:
        verdict, detail = parsed
    state.verdict, state.verdict_detail = verdict.value, detail
    state.record(HistoryEntry(round=state.round_index, kind=EntryKind.VERIFY, verdict=verdict.value,
                              raw_text=reply, note=note or detail))
    return verdict


# ===== STALL AND RECOVERY =====

def detect_stall(history: Sequence[HistoryEntry], window: int, min_delta: int) -> bool:
    """
    True when the last `window` rounds changed at most `min_delta` pixels in
    total and asked for no segment prompt that was new to those rounds.
    """
    if window < 1:
        return False
    rounds = sorted({e.round for e in history if e.round > 0})
    if len(rounds) < window:
        return False
    recent = set(rounds[-window:])
    first_recent = rounds[-window]

    delta = sum(e.pixels_added + e.pixels_removed for e in history
                if e.round in recent and e.kind == EntryKind.UPDATE)
    if delta > min_delta:
        return False

    seen = {e.segment_prompt for e in history
            if e.round < first_recent and e.segment_prompt is not None}
    for entry in history:
        if entry.round in recent and entry.segment_prompt is not None:
            if entry.segment_prompt not in seen:
                return False
    return True


def recover(failure: Union[FormatError, BackendUnavailable, MalformedBackendReply],
            state: WorkingState, failure_limit: Optional[int] = None) -> RecoveryAction:
    """
    Decide how to continue after a failure already counted on the state.

    Format errors get a reminder; a backend failure gets one local
    reinitialization per failure streak. Past the limit, abort.
    """
    limit = state.config.failure_limit if failure_limit is None else failure_limit
    if state.consecutive_failures > limit:
        return RecoveryAction.ABORT
    if isinstance(failure, FormatError):
        return RecoveryAction.RETRY_WITH_REMINDER
    if state.backend_streak > 1:
        return RecoveryAction.ABORT
    return RecoveryAction.REINIT_LOCAL_STEP


def count_reasoning_steps(trace: Union[Trace, Sequence[HistoryEntry]]) -> int:
    """Segment calls plus applied working-mask updates."""
    entries = trace.entries if isinstance(trace, Trace) else trace
    return sum(1 for e in entries if e.kind in (EntryKind.SEGMENT, EntryKind.UPDATE))


# ===== SESSION =====

class _Terminate(Exception):

    def __init__(self, reason: TerminationReason, note: str = ''):
        super().__init__(note)
        self.reason = reason
        self.note = note


def describe_entry(entry: HistoryEntry) -> str:
    if entry.kind == EntryKind.SEGMENT:
        return f"round {entry.round}: segment_phrase {entry.segment_prompt!r} -> {entry.candidate_count} candidates"
    if entry.kind == EntryKind.UPDATE:
        return (f"round {entry.round}: {entry.op} {entry.candidate_ids} "
                f"(+{entry.pixels_added}/-{entry.pixels_removed} px, area {entry.area_after})")
    if entry.kind == EntryKind.VERIFY:
        return f"round {entry.round}: scrutiny {entry.verdict}"
    if entry.kind == EntryKind.SET_STRATEGY:
        return f"round {entry.round}: strategy -> {entry.action['strategy']}"
    if entry.kind == EntryKind.FORMAT_ERROR:
        return f"round {entry.round}: unusable reply ({entry.error['kind']})"
    if entry.kind == EntryKind.FINALIZE:
        return f"round {entry.round}: finalize {entry.note}".rstrip()
    return f"round {entry.round}: {entry.kind} {entry.note}".rstrip()


class InferenceSession:
    """
    Drives one query on one image.

    Args:
        image: Input image
        query: Natural-language target description
        vlm: Chat backend playing the agent
        seg: Text-prompted segmenter
        config: Engine knobs
        clock: Monotonic clock, injectable for tests
    """

    def __init__(self, image: ImageRef, query: str, vlm: VlmBackend, seg: SegmenterBackend,
                 config: Optional[EngineConfig] = None, clock: Callable[[], float] = time.monotonic):
        self.vlm = vlm
        self.seg = seg
        self.config = config or EngineConfig()
        self.clock = clock
        self.state = WorkingState.start(image, query, self.config)
        self.started = None
        self._backend_failures = {'vlm': 0, 'segmenter': 0}

    # ----- public -----

    def run(self) -> Tuple[RasterMask, Trace]:
        self.started = self.clock()
        state = self.state
        state.strategy = select_strategy(self.vlm, state.image, state.query,
                                         attempts=self.config.failure_limit, history=state.history,
                                         max_side=self.config.max_image_side)
        state.messages = [system_message(render_system_prompt(state.query, state.strategy))]
        self._push_context([('input image', state.image.pixels), _working_overlay(state)])

        try:
            while True:
                self._turn()
        except _Terminate as stop:
            return self._finish(stop.reason, stop.note)

    # ----- turns -----

    def _turn(self):
        state = self.state
        if self.config.time_limit is not None and self.clock() - self.started >= self.config.time_limit:
            raise _Terminate(TerminationReason.BUDGET_EXHAUSTED, 'time limit')
        if state.vlm_turns >= self.config.max_vlm_turns:
            raise _Terminate(TerminationReason.BUDGET_EXHAUSTED, 'VLM turn limit')

        try:
            reply = _ask(self.vlm, state)
        except BACKEND_FAILURES as exc:
            state.record(HistoryEntry(round=state.round_index, kind=EntryKind.BACKEND_ERROR,
                                      note=f"vlm: {exc}"))
            self._backend_failure(exc, 'vlm', dropped_turn=False)
            return
        self._backend_failures['vlm'] = 0

        action = parse_action(reply, state.pool_ids)
        if isinstance(action, FormatError):
            self._format_failure(action, reply)
            return

        state.consecutive_failures = 0
        state.messages.append(assistant_message(reply))

        if isinstance(action, SegmentPhrase):
            self._segment(action, reply)
        elif isinstance(action, UpdateWorkingMask):
            self._update(action, reply)
        elif isinstance(action, SetStrategy):
            self._set_strategy(action, reply)
        else:
            self._finalize(action, reply)

    def _segment(self, action: SegmentPhrase, reply: str):
        state = self.state
        if detect_stall(state.history, self.config.stall_window, self.config.stall_min_delta):
            raise _Terminate(TerminationReason.STALLED,
                             f"no progress in the last {self.config.stall_window} rounds")
        if state.round_index >= state.budget:
            raise _Terminate(TerminationReason.BUDGET_EXHAUSTED, f"{state.budget} segment rounds used")

        state.round_index += 1
        try:
            candidates = segment_phrase(self.seg, state.image, action.prompt, self.config.candidate_cap)
        except BACKEND_FAILURES as exc:
            state.clear_pool()
            state.record(HistoryEntry(round=state.round_index, kind=EntryKind.BACKEND_ERROR,
                                      action=action.to_payload(), raw_text=reply,
                                      note=f"segmenter: {exc}"))
            self._backend_failure(exc, 'segmenter', dropped_turn=True)
            return
        self._backend_failures['segmenter'] = 0

        state.candidate_pool = candidates
        state.pool_phrase = action.prompt
        state.record(HistoryEntry(round=state.round_index, kind=EntryKind.SEGMENT,
                                  action=action.to_payload(), segment_prompt=action.prompt,
                                  candidate_count=len(candidates), raw_text=reply))
        overlays = examine_each_mask(state.image.pixels, candidates, state.working_mask,
                                     alpha=self.config.overlay_alpha,
                                     outline_width=self.config.outline_width)
        if self.config.dump_overlays_dir:
            dump_overlays(self.config.dump_overlays_dir, state.round_index, overlays)
        if self.config.overlay_mode == OverlayMode.GRID:
            overlays = [compose_grid(overlays)]
        notice = '' if candidates else f'the segmenter found nothing for "{action.prompt}"'
        self._push_context(overlays, notice)

    def _update(self, action: UpdateWorkingMask, reply: str):
        state = self.state
        by_id = {c.candidate_id: c for c in state.candidate_pool}
        selected = [by_id[i].mask for i in action.candidate_ids]
        before = state.working_mask
        after = apply_edit(before, action.op, selected)
        added = area(subtract(after, before))
        removed = area(subtract(before, after))

        state.working_mask = after
        state.record(HistoryEntry(
            round=state.round_index, kind=EntryKind.UPDATE, action=action.to_payload(),
            op=EditOp(action.op).value,
            candidate_ids=list(action.candidate_ids), pixels_added=added, pixels_removed=removed,
            area_after=area(after), selection=rle_encode(merge_all(selected)).to_json(),
            mask_digest=mask_digest(after),
            snapshot=rle_encode(after).to_json() if self.config.keep_snapshots else None,
            raw_text=reply,
        ))
        if self.config.dump_overlays_dir:
            dump_overlays(self.config.dump_overlays_dir, state.round_index, [_working_overlay(state)])

        if self.config.verify_after_update:
            verify_progress(self.vlm, state)
            self._check_scrutiny_failures()
        self._push_context([_working_overlay(state)])

    def _set_strategy(self, action: SetStrategy, reply: str):
        state = self.state
        state.strategy = Strategy(action.strategy)
        state.record(HistoryEntry(round=state.round_index, kind=EntryKind.SET_STRATEGY,
                                  action=action.to_payload(), raw_text=reply, note=action.reason))
        self._push_context([])

    def _finalize(self, action: Finalize, reply: str):
        state = self.state
        if not action.verified:
            state.record(HistoryEntry(round=state.round_index, kind=EntryKind.FINALIZE,
                                      action=action.to_payload(), raw_text=reply,
                                      note='agent gave up'))
            raise _Terminate(TerminationReason.STALLED, action.reason or 'agent finalized unverified')

        entry = state.record(HistoryEntry(round=state.round_index, kind=EntryKind.FINALIZE,
                                          action=action.to_payload(), raw_text=reply))
        verdict = verify_progress(self.vlm, state)
        if verdict == Verdict.SATISFIED:
            entry.note = 'accepted'
            raise _Terminate(TerminationReason.VERIFIED, action.reason)
        entry.note = f"rejected by scrutiny ({verdict.value})"
        self._check_scrutiny_failures()
        self._push_context([_working_overlay(state)],
                           f"finalize was rejected: scrutiny says {verdict.value}")

    # ----- failures -----

    def _format_failure(self, error: FormatError, reply: str):
        state = self.state
        state.consecutive_failures += 1
        entry = state.record(HistoryEntry(round=state.round_index, kind=EntryKind.FORMAT_ERROR,
                                          error=error.to_payload(), raw_text=reply))
        decision = recover(error, state)
        entry.recovery = decision.value
        if decision == RecoveryAction.ABORT:
            raise _Terminate(TerminationReason.UNRECOVERABLE,
                             f"{state.consecutive_failures} consecutive failures")
        state.messages.append(assistant_message(reply))
        state.messages.append(user_message(render_reminder(error, state.pool_ids)))

    def _backend_failure(self, exc: Exception, role: str, dropped_turn: bool):
        state = self.state
        self._backend_failures[role] += 1
        state.backend_streak = self._backend_failures[role]
        state.consecutive_failures += 1
        decision = recover(exc, state)
        state.history[-1].recovery = decision.value
        if decision == RecoveryAction.ABORT:
            raise _Terminate(TerminationReason.UNRECOVERABLE, f"backend failure: {exc}")
        state.clear_pool()
        if dropped_turn:
            state.messages.pop()
        self._push_context([], 'a backend call failed; the candidate pool was cleared. Choose your next action.')

    def _check_scrutiny_failures(self):
        state = self.state
        if state.consecutive_failures == 0:
            return
        error = FormatError(FormatErrorKind.NOT_PARSABLE, state.history[-1].raw_text or '',
                            'scrutiny reply had no verdict')
        decision = recover(error, state)
        state.history[-1].recovery = decision.value
        if decision == RecoveryAction.ABORT:
            raise _Terminate(TerminationReason.UNRECOVERABLE,
                             f"{state.consecutive_failures} consecutive failures")

    # ----- helpers -----

    def _digest(self) -> RoundDigest:
        state = self.state
        lines = [describe_entry(e) for e in state.history if e.round > 0]
        return RoundDigest(
            round_index=state.round_index, budget=state.budget, strategy=state.strategy.value,
            working_area=area(state.working_mask), history=tuple(lines[-DIGEST_HISTORY_LINES:]),
            pool_phrase=state.pool_phrase, pool_ids=tuple(state.pool_ids),
            verdict=state.verdict, verdict_detail=state.verdict_detail,
        )

    def _push_context(self, overlays, notice: str = ''):
        state = self.state
        state.messages.extend(render_round_context(
            self._digest(), overlays, state.budget - state.round_index,
            self.config.max_image_side, notice,
        ))

    def _finish(self, reason: TerminationReason, note: str) -> Tuple[RasterMask, Trace]:
        state = self.state
        trace = Trace(
            image_id=state.image.image_id, query=state.query,
            width=state.image.width, height=state.image.height,
            entries=list(state.history), termination=reason, final_mask=state.working_mask,
            reasoning_steps=count_reasoning_steps(state.history), strategy=state.strategy.value,
            config=self.config.snapshot(), note=note, wall_time=self.clock() - self.started,
        )
        logger.info("session on %s ended %s after %d rounds (%d steps, area %d)%s",
                    trace.image_id, reason.value, state.round_index, trace.reasoning_steps,
                    area(state.working_mask), f": {note}" if note else '')
        return state.working_mask, trace


def run_inference(image: ImageRef, query: str, vlm: VlmBackend, seg: SegmenterBackend,
                  config: Optional[EngineConfig] = None,
                  clock: Callable[[], float] = time.monotonic) -> Tuple[RasterMask, Trace]:
    """Run one session; returns the working mask at termination and its trace."""
    return InferenceSession(image, query, vlm, seg, config, clock).run()
