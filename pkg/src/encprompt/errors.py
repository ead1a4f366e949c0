"""Exception hierarchy shared by every module."""

from __future__ import annotations


class EncPromptError(Exception):
    """Base class for all errors raised by this package."""


# token format
class InvalidPayload(EncPromptError):
    """A payload handed to the encoder violates its invariants."""


class MalformedPayload(EncPromptError):
    """Bytes or token text that do not decode to a valid payload."""


class InvalidSignatureLength(EncPromptError):
    """Signature presence does not agree with the payload mode."""


# crypto
class UnsupportedScheme(EncPromptError):
    """The scheme id is unknown or cannot produce signatures."""


class SigningFailure(EncPromptError):
    """The underlying signature primitive refused to sign."""


class KeyFileError(EncPromptError):
    """A key or registry file could not be read."""


# policy
class UnknownApi(EncPromptError):
    def __init__(self, api: str):
        super().__init__(f"unknown api: {api!r}")
        self.api = api


class ModelMismatch(EncPromptError):
    """The permission model cannot be evaluated against an api's requirement."""


class ConfigError(EncPromptError):
    """A configuration document failed validation.

    ``problems`` holds ``(field_path, message)`` pairs, one per defect found.
    """

    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = list(problems)
        lines = "; ".join(f"{path}: {msg}" for path, msg in self.problems)
        super().__init__(lines or "invalid configuration")


# gateway
class StepBudgetExceeded(EncPromptError):
    def __init__(self, budget: int, session=None):
        super().__init__(f"adapter did not finish within {budget} steps")
        self.budget = budget
        self.session = session


class UnknownChallenge(EncPromptError):
    def __init__(self, challenge_id: str):
        super().__init__(f"unknown challenge: {challenge_id!r}")
        self.challenge_id = challenge_id


# scenarios
class FixtureMissing(EncPromptError):
    pass
