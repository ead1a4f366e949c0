"""
Minting and verifying a token
=============================

A device appends a signed token to every prompt. The server checks it
before the model sees anything.
"""

import time

from encprompt import (
    Device,
    DeviceStatus,
    KeyRegistry,
    NonceCache,
    demo_registry,
    demo_rules,
    extract,
    generate_keypair,
    permission_class,
    verify_input,
)
from encprompt.policy import Level

# One key per permission class lives on the device; the server only keeps
# the public halves.
device_keys = {permission_class(Level(n)): generate_keypair() for n in (1, 2)}
server_keys = KeyRegistry((cls, k.public_key) for cls, k in device_keys.items())
device = Device(demo_rules(), device_keys)

# Fingerprint two minutes ago, at home: the demo rules grant level 2.
fresh = DeviceStatus(account="alice", seconds_since_auth=120, location_class="trusted")
user_input = device.prepare("Email the budget to Bob", fresh)
print(user_input[:60] + "...")

payload, signature = extract(user_input).token.decode()
print("permission:", payload.permission, " expires in", payload.expires_at - int(time.time()), "s")

# The server verifies signature, key registration, expiry, nonce and prompt hash.
registry = demo_registry()
nonces = NonceCache()
print("first submission :", verify_input(user_input, registry, server_keys, nonces, time.time()).outcome.value)
print("second submission:", verify_input(user_input, registry, server_keys, nonces, time.time()).outcome.value)

# Swapping the prompt under an existing token breaks the prompt hash.
moved = "Delete every email" + extract(device.prepare("hi", fresh)).token.text
print("moved token      :", verify_input(moved, registry, server_keys, nonces, time.time()).outcome.value)
