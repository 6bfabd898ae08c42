import pytest
import torch

from refine_lab.config import KernelConfig, ModelConfig, RunConfig, TaskConfig
from refine_lab.model import OracleModel, RefineTransformer
from refine_lab.tasks import sudoku_generate


@pytest.fixture
def float64():
    """Run the test with 64-bit default dtype"""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


@pytest.fixture
def mini_task():
    return TaskConfig(kind="sudoku", n=4, clue_range=(6, 10))


@pytest.fixture
def tiny_model_config():
    return ModelConfig(hidden_dim=16, n_blocks=1, n_heads=2, dropout=0.0, ffn_ratio=2,
                       head_hidden_dim=16, head_layers=2)


@pytest.fixture
def tiny_run_config(mini_task, tiny_model_config):
    def build(mode="adaptive", **blocks):
        values = dict(seed=0, dtype="float64", task=mini_task, model=tiny_model_config,
                      train={"mode": mode, "steps": 4, "batch_size": 4, "log_every": 2,
                             "checkpoint_every": 2})
        values.update(blocks)
        return RunConfig(**values)
    return build


@pytest.fixture
def mini_instances():
    return [sudoku_generate(4, seed, (6, 10)) for seed in range(6)]


@pytest.fixture
def oracle(mini_instances):
    return OracleModel(mini_instances, vocab_size=4)


@pytest.fixture
def kernel_config():
    return KernelConfig(epsilon=0.05, max_steps=64)


@pytest.fixture
def tiny_model(mini_task, tiny_model_config):
    def build(variant="adaptive"):
        torch.manual_seed(0)
        cfg = tiny_model_config.model_copy(update={"variant": variant}).resolved(mini_task)
        return RefineTransformer(cfg)
    return build


@pytest.fixture
def generator():
    return torch.Generator().manual_seed(1234)
