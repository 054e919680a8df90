"""
Closed enumerations shared across the harness.

Django TextChoices keep the wire values (what the VLM writes, what the
trace stores) next to their human labels, and plug straight into form
ChoiceFields.
"""

from django.db import models


class EditOp(models.TextChoices):
    """Boolean edit applied to the working mask."""
    ADD = 'add', 'Add'
    REMOVE = 'remove', 'Remove'
    REPLACE = 'replace', 'Replace'


class Strategy(models.TextChoices):
    """High-level construction plan for a query."""
    DIRECT_RETRIEVAL = 'direct-retrieval', 'Direct retrieval'
    UNDERSEGMENT_AND_ADD = 'undersegment-and-add', 'Undersegment and add'
    OVERSEGMENT_AND_REMOVE = 'oversegment-and-remove', 'Oversegment and remove'
    COARSE_TO_FINE_REFINEMENT = 'coarse-to-fine-refinement', 'Coarse-to-fine refinement'


STRATEGY_HINTS = {
    Strategy.DIRECT_RETRIEVAL: 'the target is one nameable concept; segment it and accept the right instances',
    Strategy.UNDERSEGMENT_AND_ADD: 'the target is a composition; find each piece and add them together',
    Strategy.OVERSEGMENT_AND_REMOVE: 'the target excludes something; take a broader mask, then remove the forbidden regions',
    Strategy.COARSE_TO_FINE_REFINEMENT: 'start from a coarse region and replace it with tighter masks as they appear',
}


class ActionName(models.TextChoices):
    SEGMENT_PHRASE = 'segment_phrase', 'Segment phrase'
    UPDATE_WORKING_MASK = 'update_working_mask', 'Update working mask'
    SET_STRATEGY = 'set_strategy', 'Set strategy'
    FINALIZE = 'finalize', 'Finalize'


class FormatErrorKind(models.TextChoices):
    NOT_PARSABLE = 'not_parsable', 'Not parsable'
    UNKNOWN_ACTION = 'unknown_action', 'Unknown action'
    SCHEMA_VIOLATION = 'schema_violation', 'Schema violation'
    UNKNOWN_CANDIDATE_ID = 'unknown_candidate_id', 'Unknown candidate id'


class Verdict(models.TextChoices):
    """Outcome of a scrutiny pass over the working mask."""
    SATISFIED = 'satisfied', 'Satisfied'
    MISSING_REGIONS = 'missing_regions', 'Missing regions'
    EXTRA_REGIONS = 'extra_regions', 'Extra regions'
    CONCEPT_CONFUSION = 'concept_confusion', 'Concept confusion'
    CONTINUE = 'continue', 'Continue'


class RecoveryAction(models.TextChoices):
    RETRY_WITH_REMINDER = 'retry_with_reminder', 'Retry with reminder'
    REINIT_LOCAL_STEP = 'reinit_local_step', 'Reinitialize local step'
    ABORT = 'abort', 'Abort'


class TerminationReason(models.TextChoices):
    VERIFIED = 'verified', 'Verified'
    STALLED = 'stalled', 'Stalled'
    BUDGET_EXHAUSTED = 'budget_exhausted', 'Budget exhausted'
    UNRECOVERABLE = 'unrecoverable', 'Unrecoverable'


class Split(models.TextChoices):
    AD_HOC = 'ad-hoc', 'Ad-hoc'
    COMMON = 'common', 'Common'
    NONE = 'none', 'None'


class QueryField(models.TextChoices):
    SHORT = 'short', 'Short (class label)'
    LONG = 'long', 'Long (definition query)'


class OverlayMode(models.TextChoices):
    PER_CANDIDATE = 'per_candidate', 'One image per candidate'
    GRID = 'grid', 'Single grid image'


class EntryKind(models.TextChoices):
    """What a trace history entry records."""
    STRATEGY = 'strategy', 'Strategy selection'
    SEGMENT = 'segment', 'Segment call'
    UPDATE = 'update', 'Working-mask update'
    SET_STRATEGY = 'set_strategy', 'Strategy revision'
    FINALIZE = 'finalize', 'Finalize'
    VERIFY = 'verify', 'Scrutiny'
    FORMAT_ERROR = 'format_error', 'Format error'
    BACKEND_ERROR = 'backend_error', 'Backend failure'
