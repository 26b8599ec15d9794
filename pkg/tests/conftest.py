import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

FIXTURE_500 = Path(__file__).parent / "data" / "logreg500.libsvm"


@pytest.fixture(scope="session")
def fixture_path() -> Path:
    return FIXTURE_500
