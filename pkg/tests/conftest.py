import pytest

from abnet.model import ModelConfig


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run slow end-to-end tests"
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: minutes-long desk runs, skipped without --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_config():
    """Factory for a two-layer d=16 model; keyword arguments override fields."""

    def make(**overrides):
        values = dict(
            src_vocab_size=12,
            tgt_vocab_size=12,
            d_hidden=16,
            n_heads=2,
            encoder_layers=2,
            decoder_layers=2,
            d_ffn=32,
            d_adapter=8,
            decoder_adapter_layers="all",
            max_source_length=8,
            max_target_length=8,
        )
        values.update(overrides)
        return ModelConfig(**values)

    return make


@pytest.fixture
def tiny_run(tmp_path):
    """Flat config values for a seconds-long pipeline run under tmp_path."""
    return {
        "task": "reverse",
        "symbols": 6,
        "min_length": 2,
        "max_length": 4,
        "train_size": 40,
        "valid_size": 5,
        "test_size": 5,
        "src_vocab_size": 32,
        "tgt_vocab_size": 32,
        "d_hidden": 16,
        "n_heads": 2,
        "encoder_layers": 2,
        "decoder_layers": 2,
        "d_ffn": 32,
        "d_adapter": 8,
        "max_source_length": 8,
        "max_target_length": 8,
        "pretrain_epochs": 1,
        "pretrain_batch_size": 8,
        "epochs": 1,
        "batch_size": 8,
        "iterations": 2,
        "length_beam": 2,
        "beam_width": 2,
        "output_dir": str(tmp_path / "run"),
    }
