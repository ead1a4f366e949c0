"""HTTP front end for the gateway, plus service configuration and state."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Optional

import httpx
import yaml
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .crypto import KeyRegistry, NonceCache
from .errors import ConfigError, EncPromptError, StepBudgetExceeded, UnknownChallenge
from .gateway import Call, FailureMode, Gateway, GatewayConfig, LlmAdapter, Message, Say
from .policy import Registry, decision_to_dict, load_registry
from .scenario_sim import MockToolbox, ScriptedAdapter, demo_adapter, load_adapter_rules

log = logging.getLogger(__name__)

ENV_CONFIG = "ENCPROMPT_CONFIG"
ENV_LISTEN = "ENCPROMPT_LISTEN"


@dataclass
class ServiceConfig:
    policy: Path
    key_registry: Path
    nonce_cache: Path
    listen: str = "127.0.0.1:8080"
    failure_mode: FailureMode = FailureMode.REFUSE_ALL
    step_budget: int = 16
    token_ttl: int = 300
    # retention beyond expiry; tokens are refused after expiry anyway
    nonce_horizon: int = 300
    adapter: Mapping[str, Any] = field(default_factory=lambda: {"type": "scripted"})
    pages_dir: Optional[Path] = None

    @property
    def host_port(self) -> tuple[str, int]:
        host, _, port = self.listen.rpartition(":")
        return host or "127.0.0.1", int(port)


def load_service_config(path=None, env: Mapping[str, str] = os.environ) -> ServiceConfig:
    """Read the YAML service config; relative paths resolve against its directory.

    ``ENCPROMPT_CONFIG`` supplies the path when none is given and
    ``ENCPROMPT_LISTEN`` overrides the listen address. Every referenced file
    must exist.
    """
    path = path or env.get(ENV_CONFIG)
    if not path:
        raise ConfigError([("config", f"no config path given and {ENV_CONFIG} is unset")])
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError([("config", str(exc))]) from None
    base = path.parent

    def resolve(key, must_exist=True):
        raw = data.get(key)
        if raw is None:
            problems.append((key, "required"))
            return None
        p = base / raw
        if must_exist and not p.exists():
            problems.append((key, f"{p} does not exist"))
        return p

    problems: list[tuple[str, str]] = []
    cfg_policy = resolve("policy")
    cfg_keys = resolve("key_registry")
    cfg_nonce = resolve("nonce_cache", must_exist=False)
    pages_dir = base / data["pages_dir"] if data.get("pages_dir") else None
    if pages_dir is not None and not pages_dir.is_dir():
        problems.append(("pages_dir", f"{pages_dir} is not a directory"))
    try:
        failure_mode = FailureMode(data.get("failure_mode", "refuse_all"))
    except ValueError:
        problems.append(("failure_mode", "must be refuse_all or abort"))
        failure_mode = FailureMode.REFUSE_ALL
    adapter = dict(data.get("adapter") or {"type": "scripted"})
    if adapter.get("rules"):
        adapter["rules"] = base / adapter["rules"]
        if not adapter["rules"].exists():
            problems.append(("adapter.rules", f"{adapter['rules']} does not exist"))
    if problems:
        raise ConfigError(problems)

    cfg = ServiceConfig(
        policy=cfg_policy,
        key_registry=cfg_keys,
        nonce_cache=cfg_nonce,
        listen=str(data.get("listen", "127.0.0.1:8080")),
        failure_mode=failure_mode,
        step_budget=int(data.get("step_budget", 16)),
        token_ttl=int(data.get("token_ttl", 300)),
        nonce_horizon=int(data.get("nonce_horizon", 300)),
        adapter=adapter,
        pages_dir=pages_dir,
    )
    if env.get(ENV_LISTEN):
        cfg.listen = env[ENV_LISTEN]
    return cfg


class ChatCompletionsAdapter:
    """Adapter for an OpenAI-style ``/chat/completions`` endpoint.

    Tool results and gate notices are relayed as user-role messages tagged
    with their origin. Not used by the deterministic test suite beyond a
    mocked transport.
    """

    def __init__(self, url: str, model: str, registry: Registry, api_key: Optional[str] = None,
                 client: Optional[httpx.Client] = None, timeout: float = 60.0):
        self.url = url
        self.model = model
        self.registry = registry
        self.client = client or httpx.Client(timeout=timeout)
        self.headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}

    def _tools(self) -> list[dict]:
        return [
            {
                "type": "function",
                "function": {
                    "name": name,
                    "parameters": {"type": "object", "additionalProperties": {"type": "string"}},
                },
            }
            for name in self.registry.api_names
        ]

    @staticmethod
    def _messages(history: list[Message]) -> list[dict]:
        out = []
        for m in history:
            if m.role in ("user", "assistant"):
                out.append({"role": m.role, "content": m.content})
            else:
                out.append({"role": "user", "content": f"[{m.role}] {m.content}"})
        return out

    def next_step(self, history: list[Message]):
        body = {"model": self.model, "messages": self._messages(history), "tools": self._tools()}
        resp = self.client.post(self.url, json=body, headers=self.headers)
        resp.raise_for_status()
        message = resp.json()["choices"][0]["message"]
        calls = message.get("tool_calls") or []
        if calls:
            fn = calls[0]["function"]
            args = json.loads(fn.get("arguments") or "{}")
            return Call(fn["name"], {str(k): str(v) for k, v in args.items()})
        return Say(message.get("content") or "")


def _adapter_factory(config: ServiceConfig, registry: Registry) -> Callable[[], LlmAdapter]:
    kind = config.adapter.get("type", "scripted")
    if kind == "scripted":
        rules_path = config.adapter.get("rules")
        if rules_path:
            rules = load_adapter_rules(Path(rules_path).read_text())
            return lambda: ScriptedAdapter(rules)
        return demo_adapter
    if kind == "chat_completions":
        url = config.adapter["url"]
        model = config.adapter.get("model", "default")
        api_key = os.environ.get(config.adapter.get("api_key_env", "ENCPROMPT_LLM_API_KEY"))
        return lambda: ChatCompletionsAdapter(url, model, registry, api_key)
    raise ConfigError([("adapter.type", f"unknown adapter {kind!r}")])


@dataclass
class ServiceState:
    gateway: Gateway
    adapter_factory: Callable[[], LlmAdapter]

    @classmethod
    def from_config(cls, config: ServiceConfig, clock=None) -> "ServiceState":
        registry = load_registry(Path(config.policy).read_text())
        keys = KeyRegistry.load(config.key_registry)
        nonce_kwargs = {"clock": clock} if clock is not None else {}
        nonce_cache = NonceCache(horizon=config.nonce_horizon, path=config.nonce_cache, **nonce_kwargs)
        pages = {}
        if config.pages_dir is not None:
            pages = {p.name.removesuffix(".txt"): p.read_text() for p in Path(config.pages_dir).glob("*.txt")}
        gw_kwargs = {"clock": clock} if clock is not None else {}
        gateway = Gateway(
            registry,
            keys,
            nonce_cache,
            MockToolbox(pages),
            GatewayConfig(failure_mode=config.failure_mode, step_budget=config.step_budget),
            **gw_kwargs,
        )
        return cls(gateway, _adapter_factory(config, registry))

    def close(self) -> None:
        self.gateway.nonce_cache.close()


async def _json_body(request: Request, field_name: str) -> Optional[str]:
    try:
        body = await request.json()
    except (json.JSONDecodeError, UnicodeDecodeError):
        return None
    if not isinstance(body, dict) or not isinstance(body.get(field_name), str):
        return None
    return body[field_name]


def _bad_request(msg: str) -> JSONResponse:
    return JSONResponse({"error": msg}, status_code=400)


def create_app(state: ServiceState) -> FastAPI:
    app = FastAPI(title="encprompt gateway")
    gateway = state.gateway

    @app.get("/v1/health")
    def health():
        return {"status": "ok", "sessions": len(gateway.sessions)}

    @app.get("/v1/policy")
    def policy_summary():
        return gateway.registry.summary()

    @app.post("/v1/chat")
    async def chat(request: Request):
        user_input = await _json_body(request, "user_input")
        if user_input is None:
            return _bad_request("body must be a JSON object with a string 'user_input'")
        try:
            session = gateway.handle_input(user_input, state.adapter_factory())
        except StepBudgetExceeded as exc:
            body = exc.session.to_dict() if exc.session else {}
            body["error"] = str(exc)
            return JSONResponse(body, status_code=502)
        status = 200 if session.verification.ok else 422
        return JSONResponse(session.to_dict(), status_code=status)

    @app.post("/v1/challenge/{challenge_id}")
    async def challenge(challenge_id: str, request: Request):
        elevated = await _json_body(request, "elevated_input")
        if elevated is None:
            return _bad_request("body must be a JSON object with a string 'elevated_input'")
        try:
            decision = gateway.resolve_challenge(challenge_id, elevated)
            _, ch = gateway.find_challenge(challenge_id)
        except UnknownChallenge:
            return JSONResponse({"error": f"unknown challenge {challenge_id}"}, status_code=404)
        body = {
            "decision": decision_to_dict(decision),
            "observation": ch.result[1] if ch.result else "",
            "verification_outcome": ch.last_outcome.value if ch.last_outcome else None,
        }
        failed = ch.last_outcome is not None and ch.last_outcome.value != "valid" and ch.result is None
        return JSONResponse(body, status_code=422 if failed else 200)

    @app.exception_handler(EncPromptError)
    async def _encprompt_error(request: Request, exc: EncPromptError):
        log.error("request failed: %s", exc)
        return JSONResponse({"error": str(exc)}, status_code=500)

    return app


def serve(config: ServiceConfig) -> None:  # pragma: no cover - blocking
    import uvicorn

    state = ServiceState.from_config(config)
    host, port = config.host_port
    try:
        uvicorn.run(create_app(state), host=host, port=port)
    finally:
        state.close()
