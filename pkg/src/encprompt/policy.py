"""Permission models and the decision engine that gates tool calls.

Three permission shapes are supported:

* ``Level(n)`` -- an integer level; an api runs when ``n >= min_level``.
* ``Capabilities(bits)`` -- one boolean per api, indexed by declaration order.
* ``Sequential(graph_id)`` -- a deterministic automaton over api names; a call
  runs when the session's current state has a transition on it.

:func:`check` is the only place an allow/deny verdict is computed. It never
mutates its inputs; the caller owns per-session state and must serialize
updates within a session.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Optional, Union

import yaml

from .errors import ConfigError, ModelMismatch, UnknownApi


# -- permissions -------------------------------------------------------------


@dataclass(frozen=True)
class Level:
    value: int

    def __post_init__(self):
        if isinstance(self.value, bool) or not isinstance(self.value, int) or self.value < 1:
            raise ValueError(f"level must be an integer >= 1, got {self.value!r}")


@dataclass(frozen=True)
class Capabilities:
    bits: tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(bool(b) for b in self.bits))

    @classmethod
    def from_string(cls, text: str) -> "Capabilities":
        """Parse the ``TFFTTFFF`` notation."""
        if any(ch not in "TF" for ch in text):
            raise ValueError(f"capability string may only contain T/F: {text!r}")
        return cls(tuple(ch == "T" for ch in text))

    def __str__(self) -> str:
        return "".join("T" if b else "F" for b in self.bits)


@dataclass(frozen=True)
class Sequential:
    graph_id: str

    def __post_init__(self):
        if not isinstance(self.graph_id, str) or not self.graph_id:
            raise ValueError("graph_id must be a non-empty string")


Permission = Union[Level, Capabilities, Sequential]


def permission_class(permission: Permission) -> str:
    """Identifier used to look up trusted keys for a permission."""
    if isinstance(permission, Level):
        return f"level:{permission.value}"
    if isinstance(permission, Capabilities):
        return f"capabilities:{permission}"
    if isinstance(permission, Sequential):
        return f"graph:{permission.graph_id}"
    raise TypeError(f"not a permission: {permission!r}")


def permission_to_config(permission: Permission) -> dict:
    if isinstance(permission, Level):
        return {"level": permission.value}
    if isinstance(permission, Capabilities):
        return {"capabilities": str(permission)}
    if isinstance(permission, Sequential):
        return {"graph": permission.graph_id}
    raise TypeError(f"not a permission: {permission!r}")


def permission_from_config(data: Any) -> Permission:
    """Inverse of :func:`permission_to_config`; raises ValueError on bad input."""
    if not isinstance(data, Mapping) or len(data) != 1:
        raise ValueError("permission must be a mapping with exactly one of level/capabilities/graph")
    (key, value), = data.items()
    if key == "level":
        return Level(value)
    if key == "capabilities":
        if not isinstance(value, str):
            raise ValueError("capabilities must be a T/F string")
        return Capabilities.from_string(value)
    if key == "graph":
        return Sequential(value)
    raise ValueError(f"unknown permission kind {key!r}")


# -- registry ------------------------------------------------------------------


class OnDeny(enum.Enum):
    REJECT = "reject"
    REQUEST_VERIFICATION = "request_verification"


class ApiKind(enum.Enum):
    READ = "read"
    WRITE = "write"


@dataclass(frozen=True)
class Requirement:
    """What an api demands from each permission model.

    An api may carry both fields so one registry can serve level and
    capability tokens alike.
    """

    min_level: Optional[int] = None
    capability: Optional[int] = None


@dataclass(frozen=True)
class ApiSpec:
    name: str
    required: Requirement
    on_deny: OnDeny = OnDeny.REJECT
    kind: ApiKind = ApiKind.READ
    # output of this api is untrusted text (web pages, mail bodies ...)
    taints: bool = False


@dataclass(frozen=True)
class SequenceGraph:
    states: frozenset[str]
    start: str
    transitions: Mapping[tuple[str, str], str]

    def step(self, state: str, api: str) -> Optional[str]:
        return self.transitions.get((state, api))


@dataclass(frozen=True)
class Registry:
    apis: tuple[ApiSpec, ...] = ()
    max_level: int = 1
    graphs: Mapping[str, SequenceGraph] = field(default_factory=dict)
    # when set, overrides on_deny once untrusted tool output is in the session
    deny_after_untrusted: Optional[OnDeny] = None

    def __post_init__(self):
        object.__setattr__(self, "_by_name", {a.name: a for a in self.apis})

    def api(self, name: str) -> ApiSpec:
        try:
            return self._by_name[name]
        except KeyError:
            raise UnknownApi(name) from None

    def __contains__(self, name: object) -> bool:
        return name in self._by_name

    @property
    def api_names(self) -> list[str]:
        return [a.name for a in self.apis]

    def permission_problem(self, permission: Permission) -> Optional[str]:
        """Describe why ``permission`` cannot be used with this registry, or None."""
        if isinstance(permission, Level):
            if permission.value > self.max_level:
                return f"level {permission.value} exceeds max_level {self.max_level}"
        elif isinstance(permission, Capabilities):
            if len(permission.bits) != len(self.apis):
                return f"capability vector has {len(permission.bits)} bits, registry has {len(self.apis)} apis"
        elif isinstance(permission, Sequential):
            if permission.graph_id not in self.graphs:
                return f"unknown graph {permission.graph_id!r}"
        else:
            return f"not a permission: {permission!r}"
        return None

    def summary(self) -> dict:
        return {
            "max_level": self.max_level,
            "apis": [
                {
                    "name": a.name,
                    "min_level": a.required.min_level,
                    "capability": a.required.capability,
                    "on_deny": a.on_deny.value,
                    "kind": a.kind.value,
                }
                for a in self.apis
            ],
            "graphs": sorted(self.graphs),
        }


# -- decisions -----------------------------------------------------------------


@dataclass(frozen=True)
class Execute:
    name = "execute"


@dataclass(frozen=True)
class Reject:
    reason: str = ""
    name = "reject"


@dataclass(frozen=True)
class RequestVerification:
    challenge_hint: str = ""
    name = "request_verification"


Decision = Union[Execute, Reject, RequestVerification]


def decision_to_dict(decision: Decision) -> dict:
    if isinstance(decision, Execute):
        return {"type": "execute"}
    if isinstance(decision, Reject):
        return {"type": "reject", "reason": decision.reason}
    return {"type": "request_verification", "challenge_hint": decision.challenge_hint}


@dataclass(frozen=True)
class SessionPolicyState:
    current_state: Optional[str] = None
    tainted: bool = False


def check(
    permission: Permission,
    api: str,
    state: SessionPolicyState,
    registry: Registry,
) -> tuple[Decision, SessionPolicyState]:
    """Decide whether ``api`` may run under ``permission``.

    Returns the decision and the session state to carry forward. A denied
    call always returns ``state`` itself.
    """
    spec = registry.api(api)
    problem = registry.permission_problem(permission)
    if problem:
        raise ModelMismatch(problem)

    next_graph_state = state.current_state
    if isinstance(permission, Level):
        need = spec.required.min_level
        if need is None:
            raise ModelMismatch(f"{api} declares no min_level; cannot evaluate a level permission")
        allowed = permission.value >= need
        why = f"{api} requires level {need}, token grants level {permission.value}"
    elif isinstance(permission, Capabilities):
        idx = spec.required.capability
        if idx is None:
            raise ModelMismatch(f"{api} declares no capability index; cannot evaluate a capability permission")
        allowed = permission.bits[idx]
        why = f"{api} requires capability bit {idx}, which the token does not grant"
    else:
        graph = registry.graphs[permission.graph_id]
        current = state.current_state if state.current_state is not None else graph.start
        if current not in graph.states:
            raise ModelMismatch(f"session state {current!r} is not in graph {permission.graph_id!r}")
        next_graph_state = graph.step(current, api)
        allowed = next_graph_state is not None
        why = f"{api} is not allowed from state {current!r} of graph {permission.graph_id!r}"

    if allowed:
        new_state = replace(
            state,
            current_state=next_graph_state,
            tainted=state.tainted or spec.taints,
        )
        return Execute(), new_state

    on_deny = spec.on_deny
    if state.tainted and registry.deny_after_untrusted is not None:
        on_deny = registry.deny_after_untrusted
        why += " (requested after untrusted content entered the session)"
    if on_deny is OnDeny.REQUEST_VERIFICATION:
        return RequestVerification(why), state
    return Reject(why), state


def graph_run(graph: SequenceGraph, sequence) -> bool:
    """True iff every call of ``sequence`` has a transition, starting from ``graph.start``."""
    state = graph.start
    for api in sequence:
        state = graph.step(state, api)
        if state is None:
            return False
    return True


# -- config loading --------------------------------------------------------------


def _enum_value(enum_cls, raw, path, problems, default):
    if raw is None:
        return default
    try:
        return enum_cls(str(raw).lower())
    except ValueError:
        choices = ", ".join(e.value for e in enum_cls)
        problems.append((path, f"must be one of {choices}, got {raw!r}"))
        return default


def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def registry_from_dict(data: Any) -> Registry:
    """Validate a parsed policy document and build a :class:`Registry`.

    All defects are collected and reported together in one ConfigError.
    """
    problems: list[tuple[str, str]] = []
    if not isinstance(data, Mapping):
        raise ConfigError([("$", "policy must be a mapping")])

    max_level = data.get("max_level", 1)
    if not _is_int(max_level) or max_level < 1:
        problems.append(("max_level", "must be an integer >= 1"))
        max_level = 1

    raw_apis = data.get("apis", [])
    if not isinstance(raw_apis, list):
        problems.append(("apis", "must be a list"))
        raw_apis = []

    apis: list[ApiSpec] = []
    seen_names: dict[str, int] = {}
    seen_caps: dict[int, str] = {}
    for i, raw in enumerate(raw_apis):
        path = f"apis[{i}]"
        if not isinstance(raw, Mapping):
            problems.append((path, "must be a mapping"))
            continue
        name = raw.get("name")
        if not isinstance(name, str) or not name:
            problems.append((f"{path}.name", "must be a non-empty string"))
            continue
        if name in seen_names:
            problems.append((f"{path}.name", f"duplicate api {name!r} (first declared at apis[{seen_names[name]}])"))
            continue
        seen_names[name] = i

        req = raw.get("required", {})
        if not isinstance(req, Mapping):
            problems.append((f"{path}.required", "must be a mapping"))
            req = {}
        unknown = set(req) - {"min_level", "capability"}
        if unknown:
            problems.append((f"{path}.required", f"unknown keys {sorted(unknown)}"))
        min_level = req.get("min_level")
        capability = req.get("capability")
        if min_level is None and capability is None:
            problems.append((f"{path}.required", "needs min_level and/or capability"))
        if min_level is not None and (not _is_int(min_level) or not 1 <= min_level <= max_level):
            problems.append((f"{path}.required.min_level", f"must be an integer in 1..{max_level}"))
            min_level = None
        if capability is not None:
            if not _is_int(capability) or not 0 <= capability < len(raw_apis):
                problems.append((f"{path}.required.capability", f"must be an integer in 0..{len(raw_apis) - 1}"))
                capability = None
            elif capability in seen_caps:
                problems.append((f"{path}.required.capability", f"index {capability} already used by {seen_caps[capability]!r}"))
                capability = None
            else:
                seen_caps[capability] = name

        apis.append(
            ApiSpec(
                name=name,
                required=Requirement(min_level=min_level, capability=capability),
                on_deny=_enum_value(OnDeny, raw.get("on_deny"), f"{path}.on_deny", problems, OnDeny.REJECT),
                kind=_enum_value(ApiKind, raw.get("kind"), f"{path}.kind", problems, ApiKind.READ),
                taints=bool(raw.get("untrusted_output", False)),
            )
        )

    graphs: dict[str, SequenceGraph] = {}
    raw_graphs = data.get("graphs") or {}
    if not isinstance(raw_graphs, Mapping):
        problems.append(("graphs", "must be a mapping of graph id to graph"))
        raw_graphs = {}
    for gid, raw in raw_graphs.items():
        path = f"graphs.{gid}"
        if not isinstance(raw, Mapping):
            problems.append((path, "must be a mapping"))
            continue
        states = raw.get("states")
        if not isinstance(states, list) or not all(isinstance(s, str) for s in states) or not states:
            problems.append((f"{path}.states", "must be a non-empty list of strings"))
            continue
        state_set = frozenset(states)
        start = raw.get("start")
        if start not in state_set:
            problems.append((f"{path}.start", f"{start!r} is not a declared state"))
        transitions: dict[tuple[str, str], str] = {}
        for j, t in enumerate(raw.get("transitions") or []):
            tpath = f"{path}.transitions[{j}]"
            if not isinstance(t, Mapping) or not {"from", "api", "to"} <= set(t):
                problems.append((tpath, "needs from, api and to"))
                continue
            src, api, dst = t["from"], t["api"], t["to"]
            for key, st in (("from", src), ("to", dst)):
                if st not in state_set:
                    problems.append((f"{tpath}.{key}", f"{st!r} is not a declared state"))
            if apis and api not in seen_names:
                problems.append((f"{tpath}.api", f"{api!r} is not a declared api"))
            if (src, api) in transitions and transitions[(src, api)] != dst:
                problems.append((tpath, f"second successor for ({src!r}, {api!r}); graphs must be deterministic"))
            transitions[(src, api)] = dst
        graphs[str(gid)] = SequenceGraph(states=state_set, start=start, transitions=transitions)

    deny_after_untrusted = _enum_value(
        OnDeny, data.get("deny_after_untrusted"), "deny_after_untrusted", problems, None
    )

    if problems:
        raise ConfigError(problems)
    return Registry(
        apis=tuple(apis),
        max_level=max_level,
        graphs=graphs,
        deny_after_untrusted=deny_after_untrusted,
    )


def load_registry(config: str) -> Registry:
    """Parse a YAML (or JSON) policy document."""
    try:
        data = yaml.safe_load(config)
    except yaml.YAMLError as exc:
        raise ConfigError([("$", f"not valid YAML: {exc}")]) from None
    return registry_from_dict(data)


def demo_registry() -> Registry:
    from importlib.resources import files

    return load_registry(files("encprompt").joinpath("data/policy.yaml").read_text())
