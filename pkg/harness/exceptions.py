"""
Error kinds raised by the harness.

Value-shaped failures also subclass ValueError and I/O-shaped ones OSError,
so callers that only know the builtin hierarchy still catch them.
"""

from django.core.exceptions import ImproperlyConfigured


class HarnessError(Exception):
    """Base class for every harness failure."""


class DimensionMismatch(HarnessError, ValueError):
    pass


class EmptyInput(HarnessError, ValueError):
    pass


class MalformedRle(HarnessError, ValueError):
    pass


class MissingOthersUnion(HarnessError, ValueError):
    pass


class BackendUnavailable(HarnessError):
    """Transport failure talking to a model backend (after retries)."""

    def __init__(self, message, attempts=0):
        super().__init__(message)
        self.attempts = attempts


class MalformedBackendReply(HarnessError, ValueError):
    pass


class ScriptExhausted(HarnessError):
    """A scripted backend was asked for more turns than it holds."""


class MalformedTrace(HarnessError, ValueError):
    """A trace file that cannot be read back."""


class MalformedManifest(HarnessError, ValueError):
    """
    Manifest or fixture file failed validation.

    Attributes:
        item_id: Offending item (None for file-level problems)
        errors: Mapping of field name -> list of messages
    """

    def __init__(self, message, item_id=None, errors=None):
        super().__init__(message)
        self.item_id = item_id
        self.errors = errors or {}

    def __str__(self):
        base = super().__str__()
        if self.item_id is not None:
            base = f"item {self.item_id!r}: {base}"
        if self.errors:
            details = '; '.join(
                f"{field}: {' '.join(str(m) for m in messages)}"
                for field, messages in sorted(self.errors.items())
            )
            base = f"{base} ({details})"
        return base


class MissingImage(HarnessError, FileNotFoundError):
    pass


class InvalidConfig(HarnessError, ImproperlyConfigured):
    pass


class IoFailure(HarnessError, OSError):
    pass
