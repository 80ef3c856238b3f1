"""Shared fixtures: a seeded CA, a CSS identity, gateways and scenarios."""

import os
import random
import sys
from pathlib import Path

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import pytest

from helpers import NETWORK, make_manager, make_profile
from securebox.chain import MiddleboxManager
from securebox.cloud import CloudConfig, CloudService
from securebox.config import load_from_yaml
from securebox.gateway import Securebox
from securebox.trust import CSS_SUBJECT_ID, CertificateAuthority, LinkKey, TrustAnchor

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


@pytest.fixture
def ca():
    return CertificateAuthority(rng=random.Random("test:ca"))


@pytest.fixture
def css_identity(ca):
    return ca.register(CSS_SUBJECT_ID)


@pytest.fixture
def anchor(ca, css_identity):
    return TrustAnchor.pin(ca.root_public_key, css_identity[1])


@pytest.fixture
def make_cloud(ca, css_identity):
    def factory(config: CloudConfig | None = None, manager: MiddleboxManager | None = None):
        keys, cert = css_identity
        return CloudService(config or CloudConfig(), ca=ca, keypair=keys, cert=cert,
                            manager=manager or make_manager())
    return factory


@pytest.fixture
def cloud(make_cloud):
    return make_cloud()


@pytest.fixture
def make_box(ca, anchor):
    """Register a box with the CA; pass ``cloud`` to also register it with the CSS."""
    def factory(box_id: int = 1, cloud: CloudService | None = None, profile=None, **kw):
        keys, cert = ca.register(box_id)
        link = LinkKey.generate(random.Random(f"test:link:{box_id}"))
        box = Securebox(box_id, keypair=keys, cert=cert, anchor=anchor, link_key=link,
                        local_network=NETWORK, **kw)
        if cloud is not None:
            cloud.register_box(box_id, cert, profile or make_profile(box_id), link_key=link)
        return box
    return factory


@pytest.fixture(scope="session")
def canonical():
    return load_from_yaml(SCENARIOS / "canonical.yaml")


@pytest.fixture(scope="session")
def home():
    return load_from_yaml(SCENARIOS / "home.yaml")
