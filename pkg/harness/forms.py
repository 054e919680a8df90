"""
Forms that validate JSON payloads coming from outside the harness:
VLM actions, dataset manifest items, and segmenter fixture entries.

Payloads are plain dicts decoded from JSON, so the fields below are strict
about JSON types instead of coercing everything through str().
"""

from django import forms
from django.core.exceptions import ValidationError

from .choices import EditOp, Split, Strategy
from .exceptions import MalformedRle
from .masks import Rle


# ===== JSON-STRICT FIELDS =====

class JsonStringField(forms.CharField):
    """CharField that refuses numbers, lists and objects."""

    def to_python(self, value):
        if value not in self.empty_values and not isinstance(value, str):
            raise ValidationError('Expected a string, got %(kind)s.', code='type',
                                  params={'kind': type(value).__name__})
        return super().to_python(value)


class ItemIdField(forms.CharField):
    """Identifiers may be written as strings or integers; stored as str."""

    def to_python(self, value):
        if isinstance(value, bool) or (value not in self.empty_values and not isinstance(value, (str, int))):
            raise ValidationError('Expected a string or integer id.', code='type')
        if isinstance(value, int):
            value = str(value)
        return super().to_python(value)


class JsonBooleanField(forms.Field):
    """Requires a literal JSON true/false (forms.BooleanField treats False as missing)."""

    def to_python(self, value):
        if value is None:
            return None
        if not isinstance(value, bool):
            raise ValidationError('Expected true or false.', code='type')
        return value

    def validate(self, value):
        if value is None and self.required:
            raise ValidationError(self.error_messages['required'], code='required')


class JsonScoreField(forms.FloatField):
    """Confidence in [0, 1]; accepts JSON numbers only."""

    def __init__(self, **kwargs):
        kwargs.setdefault('min_value', 0.0)
        kwargs.setdefault('max_value', 1.0)
        super().__init__(**kwargs)

    def to_python(self, value):
        if isinstance(value, bool) or (value not in self.empty_values and not isinstance(value, (int, float))):
            raise ValidationError('Expected a number.', code='type')
        return super().to_python(value)


class CandidateIdListField(forms.Field):
    """Non-empty, duplicate-free list of integer candidate ids."""

    def to_python(self, value):
        if value in self.empty_values:
            return []
        if not isinstance(value, (list, tuple)):
            raise ValidationError('candidate_ids must be a list of integers.', code='type')
        ids = []
        for item in value:
            if isinstance(item, bool) or not isinstance(item, int):
                raise ValidationError('candidate id %(value)r is not an integer.', code='type',
                                      params={'value': item})
            ids.append(item)
        return ids

    def validate(self, value):
        super().validate(value)
        if len(set(value)) != len(value):
            raise ValidationError('candidate_ids contains duplicates.', code='duplicate')


class RleField(forms.Field):
    """Uncompressed RLE object {"size": [h, w], "counts": [...]} -> Rle."""

    def to_python(self, value):
        if value in self.empty_values:
            return None
        try:
            return Rle.from_json(value)
        except MalformedRle as exc:
            raise ValidationError(str(exc), code='rle')


# ===== AGENT ACTIONS =====

class SegmentPhraseForm(forms.Form):
    prompt = JsonStringField(max_length=200)


class UpdateWorkingMaskForm(forms.Form):
    op = forms.ChoiceField(choices=EditOp.choices)
    candidate_ids = CandidateIdListField()


class SetStrategyForm(forms.Form):
    strategy = forms.ChoiceField(choices=Strategy.choices)
    reason = JsonStringField(required=False)


class FinalizeForm(forms.Form):
    verified = JsonBooleanField()
    reason = JsonStringField(required=False)


# ===== DATASET MANIFEST =====

class ManifestItemForm(forms.Form):
    """
    One benchmark item.

    query_long falls back to query_short for referring-expression style
    datasets that carry a single phrase.
    """
    id = ItemIdField(max_length=200)
    image = JsonStringField(max_length=1000)
    image_id = ItemIdField(max_length=200, required=False)
    query_short = JsonStringField(max_length=500)
    query_long = JsonStringField(required=False)
    split = forms.ChoiceField(choices=Split.choices, required=False)
    gt = RleField()
    others = RleField(required=False)

    def clean(self):
        cleaned_data = super().clean()
        if not cleaned_data.get('query_long'):
            cleaned_data['query_long'] = cleaned_data.get('query_short')
        if not cleaned_data.get('split'):
            cleaned_data['split'] = Split.NONE
        gt = cleaned_data.get('gt')
        others = cleaned_data.get('others')
        if gt and others and (gt.width, gt.height) != (others.width, others.height):
            raise ValidationError(
                'others mask is %(ow)sx%(oh)s but gt is %(gw)sx%(gh)s',
                params={'ow': others.width, 'oh': others.height, 'gw': gt.width, 'gh': gt.height},
            )
        return cleaned_data


class PredictionForm(forms.Form):
    id = ItemIdField(max_length=200)
    rle = RleField()


# ===== SEGMENTER FIXTURES =====

class FixtureCandidateForm(forms.Form):
    score = JsonScoreField()
    rle = RleField()


def form_errors(form) -> dict:
    """Plain {field: [messages]} mapping for diagnostics."""
    return {field: [str(m) for m in messages] for field, messages in form.errors.items()}
