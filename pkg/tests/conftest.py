import numpy as np
import pytest

from revlearn import adapters
from revlearn.harness import ExperimentSpec, prepare_baseline
from revlearn.model import ModelConfig, Prompt, init_core


@pytest.fixture(scope="session")
def baseline():
    return prepare_baseline(ExperimentSpec(kind="rf_comparison"))


@pytest.fixture(scope="session")
def core(baseline):
    return baseline.core


@pytest.fixture(scope="session")
def task(baseline):
    spec = ExperimentSpec(kind="rf_comparison")
    return spec.task.build(baseline.prompts, baseline.core.config, spec.corpus_seed, seed=11)


@pytest.fixture(scope="session")
def adapted(core, task):
    module = adapters.attach(core, adapters.new_module(core, rank=4, seed=11))
    return adapters.adapt_behavioral(core, module, task)


@pytest.fixture
def tiny_config():
    return ModelConfig(vocab_size=5, context_len=3, hidden_widths=(4, 3), scale_tag="M", init_seed=3)


@pytest.fixture
def tiny_core(tiny_config):
    return init_core(tiny_config)


def random_prompts(config, n, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, config.vocab_size, size=(n, config.context_len))
    return [Prompt(tuple(int(t) for t in row), f"r{i:03d}") for i, row in enumerate(X)]


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
