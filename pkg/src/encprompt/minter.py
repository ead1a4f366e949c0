"""Device side: derive a permission from device status and mint the token."""

from __future__ import annotations

import enum
import operator
import secrets
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional, Sequence

import yaml

from .crypto import KeyPair, sign
from .errors import ConfigError
from .policy import Permission, permission_class, permission_from_config
from .token_format import NONCE_LEN, Mode, TokenPayload, encode_payload, prompt_digest, render_token

DEFAULT_TTL = 300


class LocationClass(enum.Enum):
    TRUSTED = "trusted"
    UNTRUSTED = "untrusted"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class DeviceStatus:
    account: str
    seconds_since_auth: Optional[int] = None
    location_class: LocationClass = LocationClass.UNKNOWN
    peer_device_ok: bool = False
    now: Optional[int] = None

    def __post_init__(self):
        if self.seconds_since_auth is not None and self.seconds_since_auth < 0:
            raise ValueError("seconds_since_auth must be >= 0")
        if not isinstance(self.location_class, LocationClass):
            object.__setattr__(self, "location_class", LocationClass(str(self.location_class).lower()))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DeviceStatus":
        return cls(
            account=str(data.get("account", "")),
            seconds_since_auth=data.get("seconds_since_auth"),
            location_class=LocationClass(str(data.get("location_class", "unknown")).lower()),
            peer_device_ok=bool(data.get("peer_device_ok", False)),
            now=data.get("now"),
        )


_OPS: dict[str, Callable[[Any, Any], bool]] = {
    "eq": operator.eq,
    "ne": operator.ne,
    "lt": operator.lt,
    "le": operator.le,
    "gt": operator.gt,
    "ge": operator.ge,
}
_FIELDS = {"seconds_since_auth", "account", "location_class", "peer_device_ok"}


@dataclass(frozen=True)
class Condition:
    field: str
    op: str
    value: Any

    def holds(self, status: DeviceStatus) -> bool:
        actual = getattr(status, self.field)
        if isinstance(actual, enum.Enum):
            actual = actual.value
        if actual is None:
            # a missing reading never satisfies a comparison
            return False
        try:
            return bool(_OPS[self.op](actual, self.value))
        except TypeError:
            return False


@dataclass(frozen=True)
class PermissionRule:
    grant: Permission
    when: tuple[Condition, ...] = ()

    def matches(self, status: DeviceStatus) -> bool:
        return all(c.holds(status) for c in self.when)


def derive_permission(rules: Sequence[PermissionRule], status: DeviceStatus) -> Permission:
    """Grant of the first rule whose conditions all hold."""
    if not rules or rules[-1].when:
        raise ValueError("rule list must end with an unconditional default")
    for rule in rules:
        if rule.matches(status):
            return rule.grant
    raise AssertionError("unreachable: default rule always matches")


def rules_from_dict(data: Any) -> list[PermissionRule]:
    problems: list[tuple[str, str]] = []
    raw_rules = data.get("rules") if isinstance(data, Mapping) else None
    if not isinstance(raw_rules, list) or not raw_rules:
        raise ConfigError([("rules", "must be a non-empty list")])
    rules = []
    for i, raw in enumerate(raw_rules):
        path = f"rules[{i}]"
        if not isinstance(raw, Mapping):
            problems.append((path, "must be a mapping"))
            continue
        try:
            grant = permission_from_config(raw.get("grant"))
        except ValueError as exc:
            problems.append((f"{path}.grant", str(exc)))
            continue
        conds = []
        for j, c in enumerate(raw.get("when") or []):
            cpath = f"{path}.when[{j}]"
            if not isinstance(c, Mapping) or not {"field", "op", "value"} <= set(c):
                problems.append((cpath, "needs field, op and value"))
            elif c["field"] not in _FIELDS:
                problems.append((f"{cpath}.field", f"unknown field {c['field']!r}"))
            elif c["op"] not in _OPS:
                problems.append((f"{cpath}.op", f"unknown op {c['op']!r}"))
            else:
                conds.append(Condition(c["field"], c["op"], c["value"]))
        rules.append(PermissionRule(grant=grant, when=tuple(conds)))
    if rules and rules[-1].when:
        problems.append((f"rules[{len(raw_rules) - 1}]", "last rule must be an unconditional default"))
    if problems:
        raise ConfigError(problems)
    return rules


def load_rules(text: str) -> list[PermissionRule]:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([("$", f"not valid YAML: {exc}")]) from None
    return rules_from_dict(data)


def demo_rules() -> list[PermissionRule]:
    from importlib.resources import files

    return load_rules(files("encprompt").joinpath("data/rules.yaml").read_text())


def mint(
    user_prompt: str,
    permission: Permission,
    key: Optional[KeyPair],
    clock: Callable[[], float] = time.time,
    ttl: int = DEFAULT_TTL,
    mode: Mode = Mode.SERVER_VERIFIED,
    nonce_source: Callable[[int], bytes] = secrets.token_bytes,
) -> str:
    """Append a freshly signed token to ``user_prompt`` and return the combined input."""
    if ttl <= 0:
        raise ValueError("ttl must be positive")
    if mode is Mode.SERVER_VERIFIED and key is None:
        raise ValueError("server-verified tokens need a signing key")
    now = int(clock())
    payload = TokenPayload(
        mode=mode,
        permission=permission,
        prompt_hash=prompt_digest(user_prompt),
        nonce=nonce_source(NONCE_LEN),
        issued_at=now,
        expires_at=now + ttl,
        public_key=key.public_key if mode is Mode.SERVER_VERIFIED else None,
        scheme_id=key.scheme_id if mode is Mode.SERVER_VERIFIED else None,
    )
    signature = sign(encode_payload(payload), key) if mode is Mode.SERVER_VERIFIED else b""
    return user_prompt + render_token(payload, signature).text


@dataclass
class Device:
    """A user device: permission rules plus one signing key per permission class."""

    rules: list[PermissionRule]
    keys: dict[str, KeyPair] = field(default_factory=dict)
    clock: Callable[[], float] = time.time
    ttl: int = DEFAULT_TTL
    mode: Mode = Mode.SERVER_VERIFIED
    nonce_source: Callable[[int], bytes] = secrets.token_bytes

    def prepare(self, user_prompt: str, status: DeviceStatus, permission: Optional[Permission] = None) -> str:
        if permission is None:
            permission = derive_permission(self.rules, status)
        key = None
        if self.mode is Mode.SERVER_VERIFIED:
            cls = permission_class(permission)
            try:
                key = self.keys[cls]
            except KeyError:
                raise KeyError(f"device holds no key for permission class {cls!r}") from None
        clock = self.clock if status.now is None else (lambda: status.now)
        return mint(user_prompt, permission, key, clock, self.ttl, self.mode, self.nonce_source)
