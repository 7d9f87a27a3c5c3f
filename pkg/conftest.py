import os
import sys
import pytest
from pathlib import Path

# Add the project root to the Python path to make imports work
PROJECT_ROOT = Path(__file__).parent.absolute()
sys.path.insert(0, str(PROJECT_ROOT))

from models.config import DatasetConfig, GeneratorConfig, ModelConfig, ModelDims, TrainConfig, WorldConfig  # noqa: E402

TEST_DATA_DIR = Path("./test_data")


@pytest.fixture(scope="session", autouse=True)
def setup_test_environment():
    """
    Point the data and runs roots at a local test_data directory.
    """
    TEST_DATA_DIR.mkdir(exist_ok=True)
    os.environ["FACTORED_AGENT_DATA_ROOT"] = str(TEST_DATA_DIR / "data")
    os.environ["FACTORED_AGENT_RUNS_ROOT"] = str(TEST_DATA_DIR / "runs")
    os.environ["TESTING"] = "True"
    yield


@pytest.fixture(scope="session")
def world_config():
    return WorldConfig()


@pytest.fixture(scope="session")
def tiny_dataset_config():
    """A handful of episodes per split; enough for pipeline tests."""
    return DatasetConfig(
        master_seed=3,
        train_episodes=6,
        valid_seen_episodes=3,
        valid_unseen_episodes=3,
        generator=GeneratorConfig(train_arrangements=4, unseen_arrangements=2),
    )


@pytest.fixture(scope="session")
def tiny_model_config():
    return ModelConfig(
        dims=ModelDims(token_emb=8, enc_hidden=8, action_emb=4, visual_channels=8,
                       n_filters=2, dec_hidden=16, dropout=0.0),
    )


@pytest.fixture(scope="session")
def tiny_train_config():
    return TrainConfig(epochs=2, batch_size=4)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_dataset_config):
    """A generated dataset shared by the integration tests; built once per session."""
    from services.expert import build_dataset

    root = tmp_path_factory.mktemp("dataset")
    build_dataset(tiny_dataset_config, root)
    return root
