"""Command line entry point: ``encprompt <command> ...``.

Exit codes:

    0   success (for ``verify``: outcome valid)
    1   scenario or fuzz failure
    2   usage, configuration or file error
    3   invalid_signature
    4   unregistered_key
    5   expired
    6   replayed_nonce
    7   missing_token
    8   malformed
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from importlib.resources import files
from pathlib import Path

import yaml

from . import crypto
from ._b64 import b64url_encode
from .errors import ConfigError, EncPromptError, MalformedPayload
from .gateway import VerificationOutcome, verify_input
from .minter import DEFAULT_TTL, Device, DeviceStatus, demo_rules, derive_permission, load_rules
from .policy import demo_registry, load_registry, permission_class, permission_to_config
from .token_format import Mode, extract

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
OUTCOME_EXIT = {
    VerificationOutcome.VALID: 0,
    VerificationOutcome.INVALID_SIGNATURE: 3,
    VerificationOutcome.UNREGISTERED_KEY: 4,
    VerificationOutcome.EXPIRED: 5,
    VerificationOutcome.REPLAYED_NONCE: 6,
    VerificationOutcome.MISSING_TOKEN: 7,
    VerificationOutcome.MALFORMED: 8,
}


def key_stem(pclass: str) -> str:
    return pclass.replace(":", "_")


def _read_text_arg(value, stdin) -> str:
    if value is not None:
        return value
    text = stdin.read()
    return text[:-1] if text.endswith("\n") else text


def _registry(path):
    if path is None:
        return demo_registry()
    return load_registry(Path(path).read_text())


def cmd_keygen(args, out) -> int:
    key = crypto.generate_keypair(crypto.SchemeId.parse(args.scheme))
    priv, pub = crypto.save_keypair(key, args.out_dir, key_stem(args.permission_class))
    if args.registry:
        reg_path = Path(args.registry)
        reg = crypto.KeyRegistry.load(reg_path) if reg_path.exists() else crypto.KeyRegistry()
        reg.register(args.permission_class, key.public_key)
        reg.save(reg_path)
    print(f"wrote {priv} and {pub}", file=out)
    return EXIT_OK


def cmd_mint(args, out, stdin) -> int:
    rules = load_rules(Path(args.rules).read_text()) if args.rules else demo_rules()
    status = DeviceStatus.from_dict(yaml.safe_load(Path(args.status).read_text()) or {})
    mode = Mode.ON_DEVICE if args.mode == "on-device" else Mode.SERVER_VERIFIED
    device = Device(rules, ttl=args.ttl, mode=mode)
    if args.now is not None:
        device.clock = lambda: args.now
    if mode is Mode.SERVER_VERIFIED:
        pclass = permission_class(derive_permission(rules, status))
        device.keys[pclass] = crypto.load_keypair(Path(args.keys_dir) / f"{key_stem(pclass)}.key.json")
    prompt = _read_text_arg(args.prompt, stdin)
    out.write(device.prepare(prompt, status) + "\n")
    return EXIT_OK


def cmd_inspect(args, out, stdin) -> int:
    parsed = extract(_read_text_arg(args.input, stdin))
    if parsed.token is None:
        print("no token found", file=sys.stderr)
        return OUTCOME_EXIT[VerificationOutcome.MISSING_TOKEN]
    try:
        payload, signature = parsed.token.decode()
    except MalformedPayload as exc:
        print(f"malformed token: {exc}", file=sys.stderr)
        return OUTCOME_EXIT[VerificationOutcome.MALFORMED]
    doc = {
        "user_prompt": parsed.user_prompt,
        "suspicious_delimiters": parsed.suspicious_delimiters,
        "version": payload.version,
        "mode": "server_verified" if payload.mode is Mode.SERVER_VERIFIED else "on_device",
        "permission": permission_to_config(payload.permission),
        "permission_class": permission_class(payload.permission),
        "scheme_id": payload.scheme_id.label if payload.scheme_id else None,
        "public_key": b64url_encode(payload.public_key) if payload.public_key else None,
        "prompt_hash": payload.prompt_hash.hex(),
        "nonce": payload.nonce.hex(),
        "issued_at": payload.issued_at,
        "expires_at": payload.expires_at,
        "signature": b64url_encode(signature),
    }
    out.write(json.dumps(doc, indent=2) + "\n")
    return EXIT_OK


def cmd_verify(args, out, stdin) -> int:
    registry = _registry(args.policy)
    keys = crypto.KeyRegistry.load(args.registry)
    clock = (lambda: args.now) if args.now is not None else time.time
    cache = crypto.NonceCache(horizon=args.horizon, path=args.nonce_cache, clock=clock)
    try:
        result = verify_input(_read_text_arg(args.input, stdin), registry, keys, cache, clock())
    finally:
        cache.close()
    line = result.outcome.value + (f": {result.detail}" if result.detail else "")
    out.write(line + "\n")
    return OUTCOME_EXIT[result.outcome]


def cmd_simulate(args, out) -> int:
    from .scenario_sim import fuzz_adversary, load_scenario, run_scenario, shipped_scenarios

    if args.scenario:
        specs = []
        for name in args.scenario:
            path = Path(name)
            if not path.exists():
                path = Path(str(files("encprompt").joinpath("data/scenarios", f"{name}.yaml")))
            specs.append(load_scenario(path))
    else:
        specs = shipped_scenarios()
    reports = [run_scenario(s) for s in specs]
    ok = all(r.passed for r in reports)
    if args.json:
        out.write(json.dumps([r.to_dict() for r in reports], indent=2) + "\n")
    else:
        for r in reports:
            out.write(r.render() + "\n")
        out.write(f"{sum(r.passed for r in reports)}/{len(reports)} scenarios passed\n")
    if args.fuzz:
        violations = fuzz_adversary(args.fuzz, args.seed)
        out.write(f"fuzz: {args.fuzz} episodes, seed {args.seed}, {violations} violations\n")
        ok = ok and violations == 0
    return EXIT_OK if ok else EXIT_FAIL


def cmd_policy_check(args, out) -> int:
    try:
        registry = load_registry(Path(args.file).read_text())
    except ConfigError as exc:
        for path, msg in exc.problems:
            print(f"{args.file}: {path}: {msg}", file=sys.stderr)
        return EXIT_USAGE
    out.write(f"ok: {len(registry.apis)} apis, max_level {registry.max_level}, {len(registry.graphs)} graphs\n")
    return EXIT_OK


def cmd_serve(args, out) -> int:  # pragma: no cover - blocking
    from .service import load_service_config, serve

    config = load_service_config(args.config)
    if args.listen:
        config.listen = args.listen
    serve(config)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="encprompt", description="Signed permission tokens for LLM tool calls.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="generate a signing key for one permission class")
    p.add_argument("--scheme", default=crypto.DEFAULT_SCHEME.label,
                   choices=[s.label for s in crypto.SchemeId])
    p.add_argument("--permission-class", required=True, help="e.g. level:1, graph:browse")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--registry", help="also register the public key in this registry file")

    p = sub.add_parser("mint", help="derive a permission and append a signed token to a prompt")
    p.add_argument("prompt", nargs="?", help="prompt text (default: stdin)")
    p.add_argument("--status", required=True, help="device status file (YAML/JSON)")
    p.add_argument("--rules", help="permission rules file (default: demo rules)")
    p.add_argument("--keys-dir", default=".")
    p.add_argument("--ttl", type=int, default=DEFAULT_TTL)
    p.add_argument("--mode", choices=["server", "on-device"], default="server")
    p.add_argument("--now", type=int, help="override the clock (epoch seconds)")

    p = sub.add_parser("inspect", help="decode a token without verifying it")
    p.add_argument("input", nargs="?", help="user input (default: stdin)")

    p = sub.add_parser("verify", help="run the full server-side verification")
    p.add_argument("input", nargs="?", help="user input (default: stdin)")
    p.add_argument("--registry", required=True, help="trusted key registry file")
    p.add_argument("--policy", help="policy file (default: demo policy)")
    p.add_argument("--nonce-cache", help="persistent nonce journal")
    p.add_argument("--horizon", type=int, default=300)
    p.add_argument("--now", type=int)

    p = sub.add_parser("serve", help="start the HTTP gateway")
    p.add_argument("--config", help="service config (default: $ENCPROMPT_CONFIG)")
    p.add_argument("--listen", help="host:port, overrides config and $ENCPROMPT_LISTEN")

    p = sub.add_parser("simulate", help="run the threat scenarios")
    p.add_argument("--scenario", action="append", help="scenario name or file; repeatable")
    p.add_argument("--json", action="store_true")
    p.add_argument("--fuzz", type=int, default=0, metavar="EPISODES")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("policy-check", help="validate a policy file")
    p.add_argument("file")
    return parser


def main(argv=None, out=None, stdin=None) -> int:
    out = out or sys.stdout
    stdin = stdin or sys.stdin
    args = build_parser().parse_args(argv)
    handlers = {
        "keygen": lambda: cmd_keygen(args, out),
        "mint": lambda: cmd_mint(args, out, stdin),
        "inspect": lambda: cmd_inspect(args, out, stdin),
        "verify": lambda: cmd_verify(args, out, stdin),
        "serve": lambda: cmd_serve(args, out),
        "simulate": lambda: cmd_simulate(args, out),
        "policy-check": lambda: cmd_policy_check(args, out),
    }
    try:
        return handlers[args.command]()
    except (EncPromptError, OSError, ValueError, KeyError, yaml.YAMLError) as exc:
        print(f"encprompt {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
