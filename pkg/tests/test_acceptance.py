"""Acceptance criteria, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -s`` or directly with
``python3 tests/test_acceptance.py``. Criterion 7 is a latency report and
never fails.
"""

from __future__ import annotations

import itertools
import random
import statistics
import sys
import time
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from encprompt._b64 import b64url_encode  # noqa: E402
from encprompt.crypto import KeyRegistry, NonceCache, SchemeId, generate_keypair, sign, verify  # noqa: E402
from encprompt.gateway import VerificationOutcome, verify_input  # noqa: E402
from encprompt.minter import mint  # noqa: E402
from encprompt.policy import (  # noqa: E402
    Capabilities,
    Level,
    SessionPolicyState,
    Sequential,
    check,
    demo_registry,
    graph_run,
    load_registry,
    permission_class,
)
from encprompt.scenario_sim import fuzz_world, run_fuzz_episode, run_scenario, shipped_scenarios  # noqa: E402
from encprompt.token_format import (  # noqa: E402
    Mode,
    TokenPayload,
    extract,
    prompt_digest,
)
from test_policy import (  # noqa: E402
    ALPHABET,
    CAP_INDEX,
    DENY_KIND,
    EIGHT_API_POLICY,
    MIN_LEVEL,
    _accepted_by_enumeration,
    _graph,
)

pytestmark = pytest.mark.acceptance

NOW = 1_700_000_000


@dataclass
class Result:
    number: int
    title: str
    passed: bool
    detail: str
    report_only: bool = False

    def line(self) -> str:
        status = "REPORT" if self.report_only else ("PASS" if self.passed else "FAIL")
        return f"[{status}] {self.number}. {self.title}: {self.detail}"


# -- 1 ---------------------------------------------------------------------------

NAMED_SCENARIOS = {
    "delete_email_blocked",
    "find_photo_executed",
    "malicious_user",
    "malicious_web",
    "malicious_llm",
}


def criterion_1() -> Result:
    started = time.perf_counter()
    reports = {s.name: run_scenario(s) for s in shipped_scenarios()}
    elapsed = time.perf_counter() - started
    named = [reports[n] for n in sorted(NAMED_SCENARIOS)]
    n_ok = sum(r.passed for r in named)
    extra_ok = all(r.passed for r in reports.values())
    ok = n_ok == len(NAMED_SCENARIOS) and extra_ok and elapsed < 5.0
    return Result(1, "scenario reproduction", ok,
                  f"{n_ok}/{len(NAMED_SCENARIOS)} decision tables match "
                  f"(all {len(reports)} shipped incl. tamper: {'ok' if extra_ok else 'FAIL'}), "
                  f"{elapsed:.2f} s (limit 5 s)")


# -- 2 ---------------------------------------------------------------------------


def criterion_2(episodes: int = 10_000, seed: int = 20240601) -> Result:
    started = time.perf_counter()
    world = fuzz_world(seed)
    violations = executed = 0
    corruptions: Counter = Counter()
    for _ in range(episodes):
        ep = run_fuzz_episode(world)
        violations += ep.violations
        executed += len(ep.executed)
        corruptions[ep.corruption] += 1
    elapsed = time.perf_counter() - started
    ok = violations == 0 and elapsed < 60.0
    return Result(2, "non-executability", ok,
                  f"{episodes} episodes, {executed} sanctioned tool runs, {violations} unsanctioned, "
                  f"{sum(v for k, v in corruptions.items() if k != 'none')} tampered inputs, "
                  f"{elapsed:.1f} s (limit 60 s)")


# -- 3 ---------------------------------------------------------------------------


def criterion_3() -> Result:
    eight = load_registry(EIGHT_API_POLICY)
    level_cases = level_bad = 0
    for level in range(1, 5):
        for api in MIN_LEVEL:
            expected = "execute" if level >= MIN_LEVEL[api] else DENY_KIND[api]
            level_cases += 1
            level_bad += check(Level(level), api, SessionPolicyState(), eight)[0].name != expected
    cap_cases = cap_bad = 0
    for bits in itertools.product([False, True], repeat=8):
        for api in CAP_INDEX:
            expected = "execute" if bits[CAP_INDEX[api]] else DENY_KIND[api]
            cap_cases += 1
            cap_bad += check(Capabilities(bits), api, SessionPolicyState(), eight)[0].name != expected
    graph = _graph()
    accepted = _accepted_by_enumeration(4)
    seqs = [s for n in range(1, 5) for s in itertools.product(ALPHABET, repeat=n)]
    graph_bad = sum(graph_run(graph, s) != (s in accepted) for s in seqs)
    ok = (level_cases, cap_cases, len(seqs)) == (32, 2048, 780) and level_bad + cap_bad + graph_bad == 0
    return Result(3, "policy-oracle equivalence", ok,
                  f"levels {level_cases - level_bad}/{level_cases}, "
                  f"capabilities {cap_cases - cap_bad}/{cap_cases}, "
                  f"graph sequences {len(seqs) - graph_bad}/{len(seqs)}")


# -- 4 ---------------------------------------------------------------------------


def criterion_4(seed: int = 4) -> Result:
    rng = random.Random(seed)
    key = generate_keypair(SchemeId.ECDSA_P256_SHA256)

    # signature layer: every single-byte change of a 64-byte signed payload
    msg = rng.randbytes(64)
    sig = sign(msg, key)
    single = single_rejected = 0
    for i in range(len(msg)):
        for v in range(256):
            if v != msg[i]:
                m = bytearray(msg)
                m[i] = v
                single += 1
                single_rejected += not verify(bytes(m), sig, key.public_key)
    multi = multi_rejected = 0
    for _ in range(1000):
        m = bytearray(msg)
        for i in rng.sample(range(len(m)), rng.randint(2, 16)):
            m[i] ^= rng.randint(1, 255)
        multi += 1
        multi_rejected += not verify(bytes(m), sig, key.public_key)

    # end to end: every single-byte change of a real token payload, re-rendered canonically
    registry = demo_registry()
    keys = KeyRegistry([(permission_class(Level(1)), key.public_key)])
    user_input = mint("find photos of the beach", Level(1), key, lambda: NOW)
    parsed = extract(user_input)
    payload_bytes, signature = parsed.token.payload_bytes(), parsed.token.signature()
    outcomes: Counter = Counter()
    for i in range(len(payload_bytes)):
        for v in range(256):
            if v == payload_bytes[i]:
                continue
            mutated = bytearray(payload_bytes)
            mutated[i] = v
            forged = parsed.user_prompt + _render_raw(bytes(mutated), signature)
            outcomes[verify_input(forged, registry, keys, NonceCache(), NOW).outcome] += 1
    false_accepts = outcomes[VerificationOutcome.VALID]
    e2e = sum(outcomes.values())

    ok = single_rejected == single == 64 * 255 and multi_rejected == multi == 1000 and false_accepts == 0
    breakdown = ", ".join(f"{o.value} {n}" for o, n in sorted(outcomes.items(), key=lambda kv: kv[0].value))
    return Result(4, "tamper rejection", ok,
                  f"signature check rejects {single_rejected}/{single} single-byte and "
                  f"{multi_rejected}/{multi} multi-byte mutations; "
                  f"token payload {e2e} single-byte mutations, {false_accepts} accepted ({breakdown})")


def _render_raw(payload_bytes: bytes, signature: bytes) -> str:
    return f"<D>{b64url_encode(payload_bytes)}.{b64url_encode(signature)}</D>"


# -- 5 ---------------------------------------------------------------------------


def criterion_5(tmp_dir: Path, n: int = 200) -> Result:
    registry = demo_registry()
    key = generate_keypair(SchemeId.ED25519)
    keys = KeyRegistry([(permission_class(Level(1)), key.public_key)])
    journal = tmp_dir / "nonces.jsonl"
    inputs = [mint(f"prompt {i}", Level(1), key, lambda: NOW) for i in range(n)]

    cache = NonceCache(horizon=300, path=journal, clock=lambda: NOW)
    first = [verify_input(s, registry, keys, cache, NOW).outcome for s in inputs]
    again = [verify_input(s, registry, keys, cache, NOW + 1).outcome for s in inputs]
    cache.close()

    # restart inside the retention window
    later = NOW + 200
    cache = NonceCache(horizon=300, path=journal, clock=lambda: later)
    after_restart = [verify_input(s, registry, keys, cache, later).outcome for s in inputs]
    cache.close()

    valid_first = first.count(VerificationOutcome.VALID)
    replay = VerificationOutcome.REPLAYED_NONCE
    same_run, restarted = again.count(replay), after_restart.count(replay)
    ok = valid_first == n and same_run == n and restarted == n
    return Result(5, "replay rejection", ok,
                  f"{valid_first}/{n} accepted once, {same_run}/{n} duplicates refused in-process, "
                  f"{restarted}/{n} refused after restart")


# -- 6 ---------------------------------------------------------------------------


PROMPT_CHARS = "abcdefghij XYZ 0123456789 .,!?<>/Dé中\U0001f600\n\t"


def criterion_6(n: int = 1000, seed: int = 6) -> Result:
    rng = random.Random(seed)
    registry = demo_registry()
    classes: dict[str, object] = {}
    keys = KeyRegistry()
    schemes = [SchemeId.ECDSA_P256_SHA256, SchemeId.ED25519, SchemeId.RSA_PSS_SHA256]

    def key_for(permission):
        cls = permission_class(permission)
        if cls not in classes:
            classes[cls] = generate_keypair(schemes[len(classes) % len(schemes)])
            keys.register(cls, classes[cls].public_key)
        return classes[cls]

    cache = NonceCache(horizon=0)
    ok_count = 0
    failures = []
    for i in range(n):
        kind = rng.randrange(3)
        if kind == 0:
            permission = Level(rng.randint(1, registry.max_level))
        elif kind == 1:
            permission = Capabilities(tuple(rng.random() < 0.5 for _ in registry.apis))
        else:
            permission = Sequential(rng.choice(sorted(registry.graphs)))
        prompt = "".join(rng.choice(PROMPT_CHARS) for _ in range(rng.randint(0, 80)))
        issued = NOW + rng.randint(0, 10**6)
        ttl = rng.randint(1, 3600)
        key = key_for(permission)
        nonce = rng.randbytes(16)
        expected = TokenPayload(
            mode=Mode.SERVER_VERIFIED,
            permission=permission,
            prompt_hash=prompt_digest(prompt),
            nonce=nonce,
            issued_at=issued,
            expires_at=issued + ttl,
            public_key=key.public_key,
            scheme_id=key.scheme_id,
        )
        user_input = mint(prompt, permission, key, lambda: issued, ttl=ttl, nonce_source=lambda _n: nonce)
        parsed = extract(user_input)
        recovered, _ = parsed.token.decode()
        result = verify_input(user_input, registry, keys, cache, issued + rng.randrange(ttl))
        if parsed.user_prompt == prompt and recovered == expected and result.outcome is VerificationOutcome.VALID:
            ok_count += 1
        else:
            failures.append((i, result.outcome.value))
    detail = f"{ok_count}/{n} cycles verified with identical payload"
    if failures:
        detail += f"; first failure {failures[0]}"
    return Result(6, "round trip", ok_count == n, detail)


# -- 7 ---------------------------------------------------------------------------


def criterion_7(n: int = 1000) -> Result:
    registry = demo_registry()
    key = generate_keypair(SchemeId.ECDSA_P256_SHA256)
    keys = KeyRegistry([(permission_class(Level(1)), key.public_key)])
    cache = NonceCache()
    inputs = [mint("find photos of my cat", Level(1), key, lambda: NOW) for _ in range(n)]
    timings = []
    for s in inputs:
        t0 = time.perf_counter()
        outcome = verify_input(s, registry, keys, cache, NOW).outcome
        timings.append(time.perf_counter() - t0)
        assert outcome is VerificationOutcome.VALID
    median_ms = statistics.median(timings) * 1000
    p99_ms = sorted(timings)[int(0.99 * n) - 1] * 1000
    return Result(7, "verification latency", median_ms < 5.0,
                  f"median {median_ms:.3f} ms, p99 {p99_ms:.3f} ms over {n} ECDSA P-256 tokens "
                  f"(target < 5 ms, {'met' if median_ms < 5.0 else 'not met'})",
                  report_only=True)


# -- pytest wiring ---------------------------------------------------------------


def _emit(capsys, result: Result) -> None:
    with capsys.disabled():
        print("\n" + result.line())


def test_criterion_1_scenarios(capsys):
    r = criterion_1()
    _emit(capsys, r)
    assert r.passed, r.detail


def test_criterion_2_non_executability(capsys):
    r = criterion_2()
    _emit(capsys, r)
    assert r.passed, r.detail


def test_criterion_3_oracle_equivalence(capsys):
    r = criterion_3()
    _emit(capsys, r)
    assert r.passed, r.detail


def test_criterion_4_tamper_rejection(capsys):
    r = criterion_4()
    _emit(capsys, r)
    assert r.passed, r.detail


def test_criterion_5_replay_rejection(capsys, tmp_path):
    r = criterion_5(tmp_path)
    _emit(capsys, r)
    assert r.passed, r.detail


def test_criterion_6_round_trip(capsys):
    r = criterion_6()
    _emit(capsys, r)
    assert r.passed, r.detail


def test_criterion_7_latency_report(capsys):
    _emit(capsys, criterion_7())


if __name__ == "__main__":
    import tempfile

    with tempfile.TemporaryDirectory() as d:
        results = [criterion_1(), criterion_2(), criterion_3(), criterion_4(),
                   criterion_5(Path(d)), criterion_6(), criterion_7()]
    for r in results:
        print(r.line())
    sys.exit(0 if all(r.passed or r.report_only for r in results) else 1)
