"""Server-side enforcement: verify the token, run the model loop, gate every call.

The only path from an LLM step to :meth:`ToolExecutor.execute` goes through
:func:`encprompt.policy.check` under the permission of a verified token.
"""

from __future__ import annotations

import enum
import json
import logging
import secrets
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Protocol, Union

from . import policy
from .crypto import KeyRegistry, NonceCache, check_registered, verify
from .errors import MalformedPayload, StepBudgetExceeded, UnknownApi, UnknownChallenge
from .policy import Decision, Execute, Registry, Reject, RequestVerification, SessionPolicyState
from .token_format import Mode, ParsedInput, TokenPayload, extract, prompt_digest

log = logging.getLogger(__name__)

DENIAL_NOTICE = "ACTION DENIED: insufficient permission"
VERIFICATION_NOTICE = "ACTION HELD: additional user verification required"
UNKNOWN_API_NOTICE = "ACTION DENIED: unknown api"
DEFAULT_STEP_BUDGET = 16


class VerificationOutcome(enum.Enum):
    VALID = "valid"
    INVALID_SIGNATURE = "invalid_signature"
    UNREGISTERED_KEY = "unregistered_key"
    EXPIRED = "expired"
    REPLAYED_NONCE = "replayed_nonce"
    MISSING_TOKEN = "missing_token"
    MALFORMED = "malformed"


@dataclass(frozen=True)
class VerifiedInput:
    parsed: ParsedInput
    outcome: VerificationOutcome
    payload: Optional[TokenPayload] = None
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.outcome is VerificationOutcome.VALID


def verify_input(
    user_input: str,
    registry: Registry,
    keys: KeyRegistry,
    nonce_cache: NonceCache,
    now: float,
    accept_on_device: bool = False,
) -> VerifiedInput:
    """Check a combined user input; the first failing check names the outcome.

    Order: extract, decode, signature, key registration, expiry, nonce,
    prompt hash. The nonce is consumed as soon as that check passes, so a
    token that fails the prompt-hash check cannot be retried either.
    """
    V = VerificationOutcome
    parsed = extract(user_input)
    if parsed.token is None:
        return VerifiedInput(parsed, V.MISSING_TOKEN, detail="no token at end of input")
    try:
        payload, signature = parsed.token.decode()
        payload_bytes = parsed.token.payload_bytes()
    except MalformedPayload as exc:
        return VerifiedInput(parsed, V.MALFORMED, detail=str(exc))
    problem = registry.permission_problem(payload.permission)
    if problem:
        return VerifiedInput(parsed, V.MALFORMED, payload, problem)

    if payload.mode is Mode.ON_DEVICE:
        if not accept_on_device:
            return VerifiedInput(parsed, V.INVALID_SIGNATURE, payload, "unsigned on-device token")
    else:
        if not verify(payload_bytes, signature, payload.public_key, payload.scheme_id):
            return VerifiedInput(parsed, V.INVALID_SIGNATURE, payload, "signature does not verify")
        pclass = policy.permission_class(payload.permission)
        if not check_registered(payload.public_key, pclass, keys):
            return VerifiedInput(parsed, V.UNREGISTERED_KEY, payload, f"key not trusted for {pclass}")

    if now >= payload.expires_at:
        return VerifiedInput(parsed, V.EXPIRED, payload, f"expired at {payload.expires_at}")
    if not nonce_cache.check_and_record(payload.nonce, payload.expires_at, now):
        return VerifiedInput(parsed, V.REPLAYED_NONCE, payload, "nonce already used")
    if prompt_digest(parsed.user_prompt) != payload.prompt_hash:
        return VerifiedInput(parsed, V.INVALID_SIGNATURE, payload, "token was minted for a different prompt")
    return VerifiedInput(parsed, V.VALID, payload)


# -- model loop types ---------------------------------------------------------------


@dataclass(frozen=True)
class Say:
    text: str


@dataclass(frozen=True)
class Call:
    api: str
    args: Mapping[str, str] = field(default_factory=dict)

    def render(self) -> str:
        return f"CALL {self.api}({json.dumps(dict(self.args), sort_keys=True)})"


LlmStep = Union[Say, Call]


def step_to_dict(step: LlmStep) -> dict:
    if isinstance(step, Say):
        return {"type": "say", "text": step.text}
    return {"type": "call", "api": step.api, "args": dict(sorted(step.args.items()))}


@dataclass(frozen=True)
class Message:
    """One history entry shown to the model. Roles: user, assistant, tool, gate."""

    role: str
    content: str


class LlmAdapter(Protocol):
    def next_step(self, history: list[Message]) -> LlmStep: ...


class ToolExecutor(Protocol):
    def execute(self, api: str, args: Mapping[str, str]) -> str: ...


class FailureMode(enum.Enum):
    REFUSE_ALL = "refuse_all"
    ABORT = "abort"


@dataclass
class GatewayConfig:
    failure_mode: FailureMode = FailureMode.REFUSE_ALL
    step_budget: int = DEFAULT_STEP_BUDGET
    accept_on_device: bool = False

    def __post_init__(self):
        if self.step_budget <= 0:
            raise ValueError("step_budget must be positive")
        self.failure_mode = FailureMode(self.failure_mode)


@dataclass(frozen=True)
class TranscriptEntry:
    index: int
    step: LlmStep
    decision: Optional[Decision]
    observation: str

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "step": step_to_dict(self.step),
            "decision": None if self.decision is None else policy.decision_to_dict(self.decision),
            "observation": self.observation,
        }


@dataclass
class Challenge:
    id: str
    call: Call
    entry_index: int
    attempts: list[Decision] = field(default_factory=list)
    result: Optional[tuple[Decision, str]] = None
    last_outcome: Optional[VerificationOutcome] = None


@dataclass
class Session:
    id: str
    verification: VerifiedInput
    policy_state: SessionPolicyState = field(default_factory=SessionPolicyState)
    transcript: list[TranscriptEntry] = field(default_factory=list)
    history: list[Message] = field(default_factory=list)
    pending_challenges: dict[str, Challenge] = field(default_factory=dict)
    resolved_challenges: dict[str, Challenge] = field(default_factory=dict)
    aborted: bool = False
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def token_context(self) -> Optional[TokenPayload]:
        return self.verification.payload if self.verification.ok else None

    def decisions(self) -> list[tuple[str, str]]:
        """``(api, decision name)`` for every call in the transcript."""
        return [(e.step.api, e.decision.name) for e in self.transcript if isinstance(e.step, Call)]

    def transcript_dicts(self) -> list[dict]:
        return [e.to_dict() for e in self.transcript]

    def to_dict(self) -> dict:
        return {
            "session_id": self.id,
            "verification_outcome": self.verification.outcome.value,
            "verification_detail": self.verification.detail,
            "suspicious_delimiters": self.verification.parsed.suspicious_delimiters,
            "aborted": self.aborted,
            "transcript": self.transcript_dicts(),
            "pending_challenges": [
                {"id": c.id, "api": c.call.api, "args": dict(c.call.args), "entry_index": c.entry_index}
                for c in self.pending_challenges.values()
            ],
        }


def transcript_json(session: Session) -> str:
    """One JSON object per line with a fixed key order, for golden files."""
    return "".join(json.dumps(d) + "\n" for d in session.transcript_dicts())


class Gateway:
    """Holds the server's trust state and the live sessions."""

    def __init__(
        self,
        registry: Registry,
        keys: KeyRegistry,
        nonce_cache: NonceCache,
        executor: ToolExecutor,
        config: Optional[GatewayConfig] = None,
        clock: Callable[[], float] = time.time,
        id_source: Callable[[], str] = lambda: secrets.token_hex(16),
    ):
        self.registry = registry
        self.keys = keys
        self.nonce_cache = nonce_cache
        self.executor = executor
        self.config = config or GatewayConfig()
        self.clock = clock
        self.id_source = id_source
        self.sessions: dict[str, Session] = {}
        self._challenge_owner: dict[str, Session] = {}
        self._lock = threading.Lock()

    def verify_input(self, user_input: str) -> VerifiedInput:
        return verify_input(
            user_input,
            self.registry,
            self.keys,
            self.nonce_cache,
            self.clock(),
            self.config.accept_on_device,
        )

    def _decide(self, session: Session, call: Call) -> Decision:
        payload = session.token_context
        if payload is None:
            return RequestVerification(f"token verification failed: {session.verification.outcome.value}")
        try:
            decision, state = policy.check(payload.permission, call.api, session.policy_state, self.registry)
        except UnknownApi:
            return Reject(f"unknown api {call.api!r}")
        session.policy_state = state
        return decision

    def _run_tool(self, call: Call) -> str:
        try:
            return str(self.executor.execute(call.api, dict(call.args)))
        except Exception as exc:
            log.warning("tool %s failed: %s", call.api, exc)
            return f"TOOL ERROR: {exc}"

    def handle_input(self, user_input: str, adapter: LlmAdapter) -> Session:
        verified = self.verify_input(user_input)
        session = Session(id=self.id_source(), verification=verified)
        with self._lock:
            self.sessions[session.id] = session
        with session.lock:
            self._run_loop(session, adapter)
        return session

    def _run_loop(self, session: Session, adapter: LlmAdapter) -> None:
        verified = session.verification
        if not verified.ok:
            log.info("session %s: token %s (%s)", session.id, verified.outcome.value, verified.detail)
            if self.config.failure_mode is FailureMode.ABORT:
                session.aborted = True
                return
        session.history.append(Message("user", verified.parsed.user_prompt))

        for index in range(self.config.step_budget):
            step = adapter.next_step(list(session.history))
            if isinstance(step, Say):
                session.history.append(Message("assistant", step.text))
                session.transcript.append(TranscriptEntry(index, step, None, ""))
                return
            if not isinstance(step, Call):
                raise TypeError(f"adapter returned {step!r}, expected Say or Call")

            session.history.append(Message("assistant", step.render()))
            decision = self._decide(session, step)
            if isinstance(decision, Execute):
                observation = self._run_tool(step)
                session.history.append(Message("tool", observation))
            elif isinstance(decision, Reject):
                notice = UNKNOWN_API_NOTICE if step.api not in self.registry else DENIAL_NOTICE
                observation = f"{notice} ({step.api})"
                session.history.append(Message("gate", observation))
            else:
                challenge = Challenge(self.id_source(), step, index)
                session.pending_challenges[challenge.id] = challenge
                with self._lock:
                    self._challenge_owner[challenge.id] = session
                observation = f"{VERIFICATION_NOTICE} ({step.api})"
                session.history.append(Message("gate", observation))
            session.transcript.append(TranscriptEntry(index, step, decision, observation))

        raise StepBudgetExceeded(self.config.step_budget, session)

    def find_challenge(self, challenge_id: str) -> tuple[Session, Challenge]:
        with self._lock:
            session = self._challenge_owner.get(challenge_id)
        if session is None:
            raise UnknownChallenge(challenge_id)
        challenge = session.pending_challenges.get(challenge_id) or session.resolved_challenges[challenge_id]
        return session, challenge

    def resolve_challenge(self, challenge_id: str, elevated_input: str) -> Decision:
        """Retry a held call under a freshly minted token.

        On success the tool output is stored in ``challenge.result``. A
        challenge that already succeeded answers Execute again without
        re-running the tool.
        """
        session, _ = self.find_challenge(challenge_id)

        with session.lock:
            done = session.resolved_challenges.get(challenge_id)
            if done is not None:
                return done.result[0]
            challenge = session.pending_challenges[challenge_id]
            verified = self.verify_input(elevated_input)
            challenge.last_outcome = verified.outcome
            if not verified.ok:
                decision: Decision = Reject(f"verification failed: {verified.outcome.value}")
                challenge.attempts.append(decision)
                return decision

            permission = verified.payload.permission
            same = session.token_context is not None and session.token_context.permission == permission
            state = session.policy_state if same else SessionPolicyState()
            try:
                decision, new_state = policy.check(permission, challenge.call.api, state, self.registry)
            except UnknownApi:
                decision, new_state = Reject(f"unknown api {challenge.call.api!r}"), state

            if not isinstance(decision, Execute):
                reason = getattr(decision, "reason", "") or getattr(decision, "challenge_hint", "")
                decision = Reject(reason)
                challenge.attempts.append(decision)
                return decision

            if same:
                session.policy_state = new_state
            observation = self._run_tool(challenge.call)
            challenge.attempts.append(decision)
            challenge.result = (decision, observation)
            del session.pending_challenges[challenge_id]
            session.resolved_challenges[challenge_id] = challenge
            return decision


def handle_input(
    user_input: str,
    adapter: LlmAdapter,
    executor: ToolExecutor,
    registry: Registry,
    keys: KeyRegistry,
    nonce_cache: NonceCache,
    config: Optional[GatewayConfig] = None,
    clock: Callable[[], float] = time.time,
) -> Session:
    """One-shot form of :meth:`Gateway.handle_input` for callers without a long-lived gateway."""
    return Gateway(registry, keys, nonce_cache, executor, config, clock).handle_input(user_input, adapter)
