"""
Holding an action for verification
==================================

A denied write is parked as a challenge. A freshly minted, higher-permission
token releases it.
"""

from encprompt import Gateway, KeyRegistry, NonceCache, demo_registry, generate_keypair, mint, permission_class
from encprompt.gateway import Call, Say
from encprompt.policy import Level
from encprompt.scenario_sim import MockToolbox


class OneCall:
    def __init__(self, call):
        self.steps = [call]

    def next_step(self, history):
        return self.steps.pop() if self.steps else Say("ok")


keys = {permission_class(Level(n)): generate_keypair() for n in (1, 2)}
gateway = Gateway(
    demo_registry(),
    KeyRegistry((c, k.public_key) for c, k in keys.items()),
    NonceCache(),
    MockToolbox(),
)

# Stale login, so the device mints level 1; the email is held.
session = gateway.handle_input(
    mint("mail the report to bob@example.org", Level(1), keys["level:1"]),
    OneCall(Call("Send_Email", {"to": "bob@example.org"})),
)
for entry in session.transcript:
    print(entry.to_dict())
(challenge_id,) = session.pending_challenges

# The user re-authenticates; the device mints a level 2 token for the same request.
decision = gateway.resolve_challenge(challenge_id, mint("yes, send it", Level(2), keys["level:2"]))
print(decision.name, gateway.executor.calls)
