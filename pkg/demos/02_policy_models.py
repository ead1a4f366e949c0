"""
Three ways to express a permission
==================================

Levels, capability vectors and sequence graphs, checked against the demo
registry of five APIs.
"""

from encprompt import Capabilities, Level, Sequential, SessionPolicyState, check, demo_registry

registry = demo_registry()
print(registry.api_names)

# A level permits every API whose minimum level it reaches.
for api in registry.api_names:
    decision, _ = check(Level(1), api, SessionPolicyState(), registry)
    print(f"level 1  {api:<13} {decision.name}")

# A capability vector names APIs one bit at a time.
caps = Capabilities.from_string("TFTFF")
print()
for api in registry.api_names:
    print(f"{caps}    {api:<13} {check(caps, api, SessionPolicyState(), registry)[0].name}")

# A sequence graph also constrains order: photos must be found before one is sent.
state = SessionPolicyState()
print()
for api in ["Send_Email", "Find_Photo", "Send_Email", "Send_Email"]:
    decision, state = check(Sequential("share_photo"), api, state, registry)
    print(f"share_photo  {api:<13} {decision.name:<22} now in {state.current_state or 'start'}")

# Once a call returns untrusted content, later denials become hard rejects.
_, state = check(Level(1), "Web_Crawl", SessionPolicyState(), registry)
print()
print("after Web_Crawl, Send_Email ->", check(Level(1), "Send_Email", state, registry)[0].name)
