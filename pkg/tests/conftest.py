import pytest

from encprompt.crypto import KeyRegistry, NonceCache, SchemeId, generate_keypair
from encprompt.policy import Level, demo_registry, permission_class

NOW = 1_700_000_000


@pytest.fixture(scope="session")
def registry():
    return demo_registry()


@pytest.fixture(scope="session")
def level_keys():
    """One ECDSA key per demo level, as a device would hold them."""
    return {permission_class(Level(n)): generate_keypair(SchemeId.ECDSA_P256_SHA256) for n in (1, 2)}


@pytest.fixture
def server_keys(level_keys):
    return KeyRegistry((cls, k.public_key) for cls, k in level_keys.items())


@pytest.fixture
def nonce_cache():
    return NonceCache(horizon=300)


@pytest.fixture
def clock():
    return lambda: NOW
