import pytest

from posetta.harness.pretrain import PretrainConfig, pretrain
from posetta.streamgen import StreamConfig


@pytest.fixture(scope="session")
def pretrained_default():
    """Default-config pretraining, shared by every test that needs it (about 90 s)."""
    return pretrain(StreamConfig(), PretrainConfig())
