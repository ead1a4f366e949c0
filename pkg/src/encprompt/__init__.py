"""Signed permission tokens for LLM prompts and a gateway that enforces them.

A device appends ``<D>payload.signature</D>`` to each prompt. The server
checks the signature, that the key is trusted for the claimed permission,
expiry and replay, then lets the model run while refusing every tool call the
permission does not cover.
"""

from .crypto import (
    KeyPair,
    KeyRegistry,
    NonceCache,
    SchemeId,
    check_and_record_nonce,
    check_registered,
    generate_keypair,
    sign,
    verify,
)
from .errors import (
    ConfigError,
    EncPromptError,
    FixtureMissing,
    InvalidPayload,
    InvalidSignatureLength,
    MalformedPayload,
    ModelMismatch,
    SigningFailure,
    StepBudgetExceeded,
    UnknownApi,
    UnknownChallenge,
    UnsupportedScheme,
)
from .gateway import (
    Call,
    FailureMode,
    Gateway,
    GatewayConfig,
    Say,
    Session,
    VerificationOutcome,
    handle_input,
    verify_input,
)
from .minter import Device, DeviceStatus, LocationClass, PermissionRule, demo_rules, derive_permission, mint
from .policy import (
    Capabilities,
    Execute,
    Level,
    Registry,
    Reject,
    RequestVerification,
    SequenceGraph,
    Sequential,
    SessionPolicyState,
    check,
    demo_registry,
    graph_run,
    load_registry,
    permission_class,
)
from .token_format import (
    EncodedToken,
    Mode,
    ParsedInput,
    TokenPayload,
    decode_payload,
    encode_payload,
    extract,
    render_token,
)

__version__ = "0.1.0"
