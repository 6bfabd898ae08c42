import math

import pandas as pd
import pytest

from refine_lab import training
from refine_lab.checkpoint import load_checkpoint
from refine_lab.config import TaskConfig
from refine_lab.dataset import DatasetBuilder, PuzzleDataset
from refine_lab.errors import ConfigError, NumericalError
from refine_lab.run_manager import RunManager
from refine_lab.training import TRAIN_LOG_COLUMNS, Trainer


def train_block(mode="adaptive", **values):
    block = {"mode": mode, "steps": 4, "batch_size": 4, "log_every": 2, "checkpoint_every": 2}
    block.update(values)
    return block


@pytest.fixture
def train_data(mini_task):
    return DatasetBuilder(mini_task).build(8, seed=0)


@pytest.fixture
def val_data(mini_task):
    return DatasetBuilder(mini_task).build(3, seed=1, split="val")


def test_same_seed_same_records(tiny_run_config, train_data):
    config = tiny_run_config()
    first = Trainer(config, train_data).fit()
    second = Trainer(config, train_data).fit()
    assert len(first) == 4
    assert first == second
    assert all(math.isfinite(r.total) for r in first)


def test_adaptive_states_leave_the_path(tiny_run_config, train_data):
    records = Trainer(tiny_run_config(), train_data).fit()
    assert any(r.off_path_fraction > 0 for r in records)
    assert not any(r.rollout_used for r in records)


def test_rollout_coin(tiny_run_config, train_data):
    config = tiny_run_config(loss={"on_policy": "rollout"}, kernel={"rollout_prob": 1.0, "rollout_len": 2})
    assert all(r.rollout_used for r in Trainer(config, train_data).fit())


def test_baseline_stays_on_the_masking_path(tiny_run_config, train_data, monkeypatch):
    def no_kernel(*args, **kwargs):
        raise AssertionError("baseline training must not run the refinement kernel")

    monkeypatch.setattr(training, "rollout", no_kernel)
    records = Trainer(tiny_run_config("baseline"), train_data).fit()
    assert all(r.off_path_fraction == 0.0 for r in records)
    assert all(r.term2 == 0.0 and r.term3 == 0.0 and r.term1 == r.total for r in records)


def test_gidd_mode_trains(tiny_run_config, train_data):
    records = Trainer(tiny_run_config("gidd"), train_data).fit()
    assert all(math.isfinite(r.total) for r in records)


def test_resume_continues_the_same_run(tmp_path, tiny_run_config, train_data):
    config = tiny_run_config()
    full = Trainer(config, train_data, run=RunManager(tmp_path / "full")).fit()

    resumed = Trainer(config, train_data)
    resumed.resume(load_checkpoint(tmp_path / "full" / "checkpoints" / "ckpt_2.h5"))
    assert resumed.step == 2
    assert resumed.fit() == full[2:]


def test_run_directory_outputs(tmp_path, tiny_run_config, train_data, val_data):
    config = tiny_run_config(train=train_block(eval_every=2, eval_instances=2), kernel={"max_steps": 8})
    run = RunManager(tmp_path / "run")
    Trainer(config, train_data, run=run, val_dataset=val_data).fit()

    log = pd.read_csv(run.train_log)
    assert list(log.columns) == TRAIN_LOG_COLUMNS
    assert log["step"].tolist() == [1, 2, 3, 4]
    assert (run.checkpoint_dir / "ckpt_2.h5").exists() and (run.checkpoint_dir / "ckpt_4.h5").exists()
    assert run.state.step == 4 and run.latest_checkpoint() == run.checkpoint_path(4)

    metrics = pd.read_csv(run.metrics_file)
    assert metrics["method"].tolist() == ["adaptive@2", "adaptive@4"]


def test_final_checkpoint_off_cadence(tmp_path, tiny_run_config, train_data):
    config = tiny_run_config(train=train_block(steps=3))
    run = RunManager(tmp_path / "run")
    Trainer(config, train_data, run=run).fit()
    assert run.state.step == 3 and run.checkpoint_path(3).exists()


def test_dataset_must_match_task(tiny_run_config):
    countdown = DatasetBuilder(TaskConfig(kind="countdown", k=3, operand_max=20, target_range=(10, 99),
                                             result_max=400)).build(4, seed=0)
    with pytest.raises(ConfigError):
        Trainer(tiny_run_config(), countdown)


def test_empty_dataset(tiny_run_config, train_data):
    with pytest.raises(ConfigError):
        Trainer(tiny_run_config(), PuzzleDataset(train_data.header, []))


def test_numerical_failure_names_the_step(tiny_run_config, train_data, monkeypatch):
    def broken(*args, **kwargs):
        raise NumericalError("term1 is non-finite at index (0, 3)")

    monkeypatch.setattr(training, "adaptive_loss", broken)
    trainer = Trainer(tiny_run_config(), train_data)
    with pytest.raises(NumericalError, match="Training step 1"):
        trainer.train_step()
    assert trainer.step == 0
