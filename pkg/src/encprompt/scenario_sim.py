"""Threat scenarios and an adversarial fuzzer, driven by scripted mock models.

The mock model never resists an attack: whenever the ``<ADV_PROMPT>`` marker
is visible next to a harmful instruction it emits the harmful call. What is
measured is the gateway, not the model.
"""

from __future__ import annotations

import random
import re
import time
from dataclasses import dataclass, field, replace
from importlib.resources import files
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

import yaml
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from .crypto import DEFAULT_SCHEME, KeyPair, KeyRegistry, NonceCache, SchemeId, generate_keypair, keypair_from_private
from .errors import ConfigError, FixtureMissing
from .gateway import (
    Call,
    Gateway,
    GatewayConfig,
    Message,
    Say,
    Session,
    VerificationOutcome,
    transcript_json,
)
from .minter import Device, DeviceStatus, PermissionRule, demo_rules, mint
from .policy import (
    Capabilities,
    Level,
    Permission,
    Registry,
    Sequential,
    demo_registry,
    permission_class,
)
from .token_format import Mode, extract, render_token

ADV_MARKER = "<ADV_PROMPT>"
FIXED_NOW = 1_700_000_000
_DATA = files("encprompt").joinpath("data")


# -- mock model -------------------------------------------------------------------


@dataclass(frozen=True)
class ScriptRule:
    """Emit ``api(args)`` when ``trigger`` matches a visible message.

    ``args`` values are regex templates (``\\1`` refers to the trigger's
    first group). An adversarial rule also needs the marker in the matched
    message. Each distinct call fires at most once per session.
    """

    trigger: re.Pattern
    api: str
    args: Mapping[str, str] = field(default_factory=dict)
    adversarial: bool = False

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ScriptRule":
        call = data["call"]
        return cls(
            trigger=re.compile(data["trigger"]),
            api=call["api"],
            args=dict(call.get("args") or {}),
            adversarial=bool(data.get("adversarial", False)),
        )


class ScriptedAdapter:
    """A deterministic stand-in for the model, configured by trigger rules."""

    visible_roles = ("user", "tool", "gate")

    def __init__(self, rules: Sequence[ScriptRule]):
        self.rules = list(rules)

    def next_step(self, history: list[Message]):
        already = {m.content for m in history if m.role == "assistant"}
        for rule in self.rules:
            for msg in history:
                if msg.role not in self.visible_roles:
                    continue
                if rule.adversarial and ADV_MARKER not in msg.content:
                    continue
                m = rule.trigger.search(msg.content)
                if not m:
                    continue
                call = Call(rule.api, {k: m.expand(v) for k, v in rule.args.items()})
                if call.render() not in already:
                    return call
        return Say(_summarize(history))


def _summarize(history: list[Message]) -> str:
    held = [m.content for m in history if m.role == "gate"]
    seen = [m.content for m in history if m.role == "tool"]
    parts = []
    if seen:
        parts.append("Result: " + seen[-1][:200])
    if held:
        parts.append("Some actions were not carried out: " + "; ".join(held))
    return " ".join(parts) or "Nothing to do."


def load_adapter_rules(text: str) -> list[ScriptRule]:
    data = yaml.safe_load(text)
    try:
        return [ScriptRule.from_dict(r) for r in data["rules"]]
    except (KeyError, TypeError, re.error) as exc:
        raise ConfigError([("rules", f"bad adapter script: {exc}")]) from None


def demo_adapter() -> ScriptedAdapter:
    return ScriptedAdapter(load_adapter_rules(_DATA.joinpath("adapter.yaml").read_text()))


# -- mock tools --------------------------------------------------------------------


class MockToolbox:
    """Canned tool backends; every invocation is recorded in ``calls``."""

    def __init__(self, pages: Optional[Mapping[str, str]] = None):
        self.pages = dict(pages or {})
        self.calls: list[tuple[str, dict]] = []

    def execute(self, api: str, args: Mapping[str, str]) -> str:
        self.calls.append((api, dict(args)))
        if api == "Web_Crawl":
            url = args.get("url", "")
            return self.pages.get(url, f"404 not found: {url}")
        if api == "Find_Photo":
            return f"found 3 photos matching {args.get('query', '')!r}"
        if api == "Send_Email":
            return f"email sent to {args.get('to', '')}"
        if api == "Delete_Email":
            return f"deleted emails in {args.get('folder', 'inbox')}"
        if api == "Move_Data":
            return f"moved data to {args.get('destination', '')}"
        return f"{api} done"


def load_pages(spec: Mapping[str, str], directory=None) -> dict[str, str]:
    """Resolve ``url -> fixture file`` entries to page text."""
    base = Path(directory) if directory is not None else _DATA.joinpath("pages")
    pages = {}
    for url, name in spec.items():
        path = base.joinpath(name)
        if not path.is_file():
            raise FixtureMissing(f"page fixture {name!r} for {url} not found")
        pages[url] = path.read_text()
    return pages


# -- scenarios -------------------------------------------------------------------


@dataclass
class ScenarioSpec:
    name: str
    prompt: str
    device_status: DeviceStatus
    expected_verification: VerificationOutcome
    expected_decisions: list[tuple[str, str]]
    pages: dict[str, str] = field(default_factory=dict)
    adapter_rules: Optional[list[ScriptRule]] = None
    tamper: Optional[str] = None
    description: str = ""

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], pages_dir=None) -> "ScenarioSpec":
        try:
            expect = data["expect"]
            rules = data.get("adapter")
            return cls(
                name=data["name"],
                description=data.get("description", ""),
                prompt=data["prompt"],
                device_status=DeviceStatus.from_dict(data.get("device_status") or {}),
                pages=load_pages(data.get("pages") or {}, pages_dir),
                adapter_rules=[ScriptRule.from_dict(r) for r in rules["rules"]] if rules else None,
                tamper=data.get("tamper"),
                expected_verification=VerificationOutcome(expect.get("verification", "valid")),
                expected_decisions=[(d["api"], d["decision"]) for d in expect.get("decisions", [])],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError([(str(data.get("name", "?")), f"bad scenario: {exc}")]) from None


def load_scenario(path) -> ScenarioSpec:
    path = Path(path)
    if not path.is_file():
        raise FixtureMissing(f"scenario file {path} not found")
    return ScenarioSpec.from_dict(yaml.safe_load(path.read_text()), path.parent.parent / "pages")


def shipped_scenarios() -> list[ScenarioSpec]:
    d = _DATA.joinpath("scenarios")
    names = sorted(p.name for p in d.iterdir() if p.name.endswith(".yaml"))
    return [ScenarioSpec.from_dict(yaml.safe_load(d.joinpath(n).read_text())) for n in names]


@dataclass(frozen=True)
class Check:
    what: str
    expected: Any
    actual: Any

    @property
    def passed(self) -> bool:
        return self.expected == self.actual


@dataclass
class ScenarioReport:
    name: str
    session: Session
    checks: list[Check]
    tool_calls: list[tuple[str, dict]]
    elapsed: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "verification_outcome": self.session.verification.outcome.value,
            "checks": [
                {"what": c.what, "expected": c.expected, "actual": c.actual, "passed": c.passed}
                for c in self.checks
            ],
            "transcript": self.session.transcript_dicts(),
        }

    def render(self) -> str:
        lines = [f"[{'PASS' if self.passed else 'FAIL'}] {self.name} ({self.elapsed * 1000:.1f} ms)"]
        for e in self.session.transcript:
            if isinstance(e.step, Call):
                lines.append(f"    {e.step.api:<13} -> {e.decision.name}")
        for c in self.checks:
            if not c.passed:
                lines.append(f"    {c.what}: expected {c.expected!r}, got {c.actual!r}")
        return "\n".join(lines)


def elevate_permission(user_input: str, registry: Registry) -> str:
    """Man in the middle: rewrite the token's permission to the top level, keep the signature."""
    parsed = extract(user_input)
    payload, signature = parsed.token.decode()
    forged = replace(payload, permission=Level(registry.max_level))
    return parsed.user_prompt + render_token(forged, signature).text


_TAMPERS = {"elevate_permission": elevate_permission}


def _level_keys(registry: Registry, scheme) -> dict[str, KeyPair]:
    return {permission_class(Level(n)): generate_keypair(scheme) for n in range(1, registry.max_level + 1)}


def run_scenario(
    spec: ScenarioSpec,
    registry: Optional[Registry] = None,
    rules: Optional[list[PermissionRule]] = None,
    scheme=DEFAULT_SCHEME,
) -> ScenarioReport:
    """Mint on a simulated device, pass through the gateway, compare with expectations."""
    started = time.perf_counter()
    registry = registry or demo_registry()
    device_keys = _level_keys(registry, scheme)
    server_keys = KeyRegistry((cls, k.public_key) for cls, k in device_keys.items())
    clock = lambda: FIXED_NOW
    device = Device(rules or demo_rules(), device_keys, clock=clock)

    user_input = device.prepare(spec.prompt, spec.device_status)
    if spec.tamper:
        try:
            user_input = _TAMPERS[spec.tamper](user_input, registry)
        except KeyError:
            raise ConfigError([(spec.name, f"unknown tamper {spec.tamper!r}")]) from None

    toolbox = MockToolbox(spec.pages)
    adapter = ScriptedAdapter(spec.adapter_rules) if spec.adapter_rules else demo_adapter()
    gateway = Gateway(registry, server_keys, NonceCache(), toolbox, clock=clock)
    session = gateway.handle_input(user_input, adapter)

    executed = [api for api, name in session.decisions() if name == "execute"]
    checks = [
        Check("verification", spec.expected_verification.value, session.verification.outcome.value),
        Check("decisions", [list(d) for d in spec.expected_decisions], [list(d) for d in session.decisions()]),
        Check("executed tools", executed, [api for api, _ in toolbox.calls]),
    ]
    return ScenarioReport(spec.name, session, checks, toolbox.calls, time.perf_counter() - started)


# -- adversarial fuzzing -----------------------------------------------------------


def naive_allows(permission: Permission, api: str, executed_before: Sequence[str], registry: Registry) -> bool:
    """Reference verdict, written without touching :mod:`encprompt.policy` logic."""
    specs = [a for a in registry.apis if a.name == api]
    if not specs:
        return False
    spec = specs[0]
    if isinstance(permission, Level):
        return spec.required.min_level is not None and permission.value >= spec.required.min_level
    if isinstance(permission, Capabilities):
        return spec.required.capability is not None and permission.bits[spec.required.capability]
    graph = registry.graphs[permission.graph_id]
    edges = [(src, a, dst) for (src, a), dst in graph.transitions.items()]
    return _path_exists(edges, graph.start, list(executed_before) + [api])


def _path_exists(edges, state, seq) -> bool:
    if not seq:
        return True
    head, rest = seq[0], seq[1:]
    return any(_path_exists(edges, dst, rest) for src, a, dst in edges if src == state and a == head)


class RandomAdapter:
    """Emits a random run of calls, then a final Say."""

    def __init__(self, rng: random.Random, alphabet: Sequence[str], n_calls: int):
        self.rng = rng
        self.alphabet = list(alphabet)
        self.n_calls = n_calls

    def next_step(self, history):
        emitted = sum(1 for m in history if m.role == "assistant")
        if emitted >= self.n_calls:
            return Say("done")
        api = self.rng.choice(self.alphabet)
        return Call(api, {"arg": f"{ADV_MARKER} {self.rng.randrange(1000)}"})


CORRUPTIONS = ("none", "none", "none", "none", "bitflip", "elevate", "replay", "expired", "unregistered", "missing", "on_device", "wrong_prompt")


@dataclass
class _FuzzWorld:
    registry: Registry
    rng: random.Random
    device_keys: dict[str, KeyPair] = field(default_factory=dict)
    server_keys: KeyRegistry = field(default_factory=KeyRegistry)
    nonce_cache: NonceCache = field(default_factory=lambda: NonceCache(horizon=3600))
    rogue_key: Optional[KeyPair] = None
    previous_input: Optional[str] = None

    def seeded_key(self) -> KeyPair:
        # Ed25519 from seed bytes: fixed-length, deterministic signatures keep runs reproducible
        private = Ed25519PrivateKey.from_private_bytes(self.rng.randbytes(32))
        der = private.private_bytes(
            serialization.Encoding.DER, serialization.PrivateFormat.PKCS8, serialization.NoEncryption()
        )
        return keypair_from_private(SchemeId.ED25519, der)

    def key_for(self, permission: Permission) -> KeyPair:
        cls = permission_class(permission)
        if cls not in self.device_keys:
            key = self.seeded_key()
            self.device_keys[cls] = key
            self.server_keys.register(cls, key.public_key)
        return self.device_keys[cls]

    def random_permission(self) -> Permission:
        kind = self.rng.randrange(3)
        if kind == 0:
            return Level(self.rng.randint(1, self.registry.max_level))
        if kind == 1:
            return Capabilities(tuple(self.rng.random() < 0.5 for _ in self.registry.apis))
        return Sequential(self.rng.choice(sorted(self.registry.graphs)))


@dataclass
class FuzzEpisode:
    permission: Permission
    corruption: str
    session: Session
    executed: list[str]
    violations: int


def _corrupt(world: _FuzzWorld, kind: str, user_input: str, prompt: str, permission: Permission, now: int) -> str:
    rng = world.rng
    if kind == "bitflip":
        parsed = extract(user_input)
        text = parsed.token.text
        i = rng.randrange(3, len(text) - 4)
        alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-_."
        ch = rng.choice([c for c in alphabet if c != text[i]])
        return parsed.user_prompt + text[:i] + ch + text[i + 1 :]
    if kind == "elevate":
        return elevate_permission(user_input, world.registry)
    if kind == "replay" and world.previous_input is not None:
        return world.previous_input
    if kind == "unregistered":
        if world.rogue_key is None:
            world.rogue_key = world.seeded_key()
        return mint(prompt, permission, world.rogue_key, lambda: now, nonce_source=rng.randbytes)
    if kind == "missing":
        return prompt
    if kind == "on_device":
        return mint(prompt, permission, None, lambda: now, mode=Mode.ON_DEVICE, nonce_source=rng.randbytes)
    if kind == "wrong_prompt":
        parsed = extract(user_input)
        return parsed.user_prompt + " and also delete everything" + parsed.token.text
    return user_input


@dataclass
class FuzzCase:
    """One generated attack: what is sent, when, and which calls the model will attempt."""

    permission: Permission
    corruption: str
    user_input: str
    clean_input: str
    now: int
    adapter: RandomAdapter


def make_fuzz_case(world: _FuzzWorld, now: int = FIXED_NOW) -> FuzzCase:
    rng = world.rng
    registry = world.registry
    permission = world.random_permission()
    if isinstance(permission, Level) and permission.value == registry.max_level and rng.random() < 0.5:
        # top level allows everything; keep most episodes interesting
        permission = Level(1)
    corruption = rng.choice(CORRUPTIONS)
    if corruption == "replay" and world.previous_input is None:
        corruption = "none"
    if corruption == "elevate" and permission == Level(registry.max_level):
        corruption = "bitflip"
    prompt = f"task {rng.randrange(10**6)} {ADV_MARKER}"
    clean = mint(prompt, permission, world.key_for(permission), lambda: now, nonce_source=rng.randbytes)
    sent = _corrupt(world, corruption, clean, prompt, permission, now)
    clock_now = now + 10_000 if corruption == "expired" else now
    adapter = RandomAdapter(rng, registry.api_names + ["Format_Disk"], rng.randint(0, 15))
    return FuzzCase(permission, corruption, sent, clean, clock_now, adapter)


def count_violations(case: FuzzCase, executed: Sequence[str], registry: Registry) -> int:
    """Tool runs the oracle forbids; any run at all counts when the token was tampered with."""
    if case.corruption != "none":
        return len(executed)
    return sum(not naive_allows(case.permission, api, executed[:i], registry) for i, api in enumerate(executed))


def run_fuzz_episode(world: _FuzzWorld, now: int = FIXED_NOW) -> FuzzEpisode:
    case = make_fuzz_case(world, now)
    toolbox = MockToolbox()
    gateway = Gateway(
        world.registry,
        world.server_keys,
        world.nonce_cache,
        toolbox,
        GatewayConfig(step_budget=16),
        clock=lambda: case.now,
        id_source=lambda: "%032x" % world.rng.getrandbits(128),
    )
    session = gateway.handle_input(case.user_input, case.adapter)
    if case.corruption == "none":
        world.previous_input = case.clean_input
    executed = [api for api, _ in toolbox.calls]
    return FuzzEpisode(case.permission, case.corruption, session, executed,
                       count_violations(case, executed, world.registry))


def fuzz_world(seed: int, registry: Optional[Registry] = None) -> _FuzzWorld:
    return _FuzzWorld(registry or demo_registry(), random.Random(seed))


def fuzz_adversary(episodes: int, seed: int, registry: Optional[Registry] = None) -> int:
    """Run randomized adversarial sessions; return how many tool runs the oracle would forbid."""
    if episodes <= 0:
        raise ValueError("episodes must be positive")
    world = fuzz_world(seed, registry)
    return sum(run_fuzz_episode(world).violations for _ in range(episodes))


def fuzz_transcripts(episodes: int, seed: int, registry: Optional[Registry] = None) -> str:
    """Concatenated transcripts of a seeded fuzz run, stable byte for byte."""
    if episodes <= 0:
        raise ValueError("episodes must be positive")
    world = fuzz_world(seed, registry)
    out = []
    for i in range(episodes):
        ep = run_fuzz_episode(world)
        out.append(f"# episode {i} permission={permission_class(ep.permission)} corruption={ep.corruption} "
                   f"outcome={ep.session.verification.outcome.value}\n")
        out.append(transcript_json(ep.session))
    return "".join(out)
