from pathlib import Path

import pytest

from specmon.env import load_spec

SPEC_DIR = Path(__file__).resolve().parent.parent / "specs"


@pytest.fixture(scope="session")
def spec_dir():
    return SPEC_DIR


@pytest.fixture(scope="session")
def spec_a():
    return load_spec(SPEC_DIR / "SpecA.spec")


@pytest.fixture(scope="session")
def spec_b1():
    return load_spec(SPEC_DIR / "SpecB1.spec")


@pytest.fixture(scope="session")
def spec_b2():
    return load_spec(SPEC_DIR / "SpecB2.spec")


@pytest.fixture(scope="session")
def spec_c1():
    return load_spec(SPEC_DIR / "SpecC1.spec")


@pytest.fixture(scope="session")
def spec_c2():
    return load_spec(SPEC_DIR / "SpecC2.spec")


@pytest.fixture(scope="session")
def spec_f1():
    return load_spec(SPEC_DIR / "SpecF1.spec")
