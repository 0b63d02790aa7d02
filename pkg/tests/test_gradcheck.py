import numpy as np
import pytest

from mpfgvc.errors import ConfigError
from mpfgvc.events import EventHub, MemorySink
from mpfgvc.gradcheck import (
    CASES,
    DEFAULT_SEEDS,
    THRESHOLD,
    CaseReport,
    SuiteReport,
    check_gradients,
    relative_error,
    run_suite,
    tiny_run_config,
)
from mpfgvc.tensor import Tensor, get_default_dtype, precision


def test_relative_error():
    assert relative_error([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert relative_error([2.0, 0.0], [1.0, 0.0]) == pytest.approx(0.5)
    assert relative_error([0.0], [1e-12]) == pytest.approx(1e-4)


def test_check_gradients_on_quadratic():
    with precision("float64"):
        x = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
        assert check_gradients(lambda: (x * x * x).sum(), [x]) < 1e-8


def test_check_gradients_treats_unused_input_as_zero():
    with precision("float64"):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        y = Tensor(np.array([3.0]), requires_grad=True)
        assert check_gradients(lambda: (y * y).sum(), [x, y]) < 1e-8


def test_registry_covers_model_paths():
    for name in ("matmul", "softmax", "layer_norm", "attention", "vlfm", "through_selection",
                 "frozen_text_path", "stage1_loss", "stage2_loss"):
        assert name in CASES
    assert CASES["stage1_loss"].sampled and not CASES["matmul"].sampled
    assert len(DEFAULT_SEEDS) >= 10


@pytest.mark.parametrize("name", sorted(CASES))
def test_case_passes_on_two_seeds(name):
    report = run_suite([name], seeds=(0, 1))
    assert report.passed, report.lines()
    assert report.cases[0].seeds == 2


def test_suite_runs_in_float64_and_restores():
    run_suite(["add"], seeds=(0,))
    assert get_default_dtype() is np.float32


def test_unknown_case():
    with pytest.raises(ConfigError, match="nope"):
        run_suite(["nope"], seeds=(0,))


def test_report_lines_and_events():
    sink = MemorySink()
    report = run_suite(["add", "exp"], seeds=(0, 1), hub=EventHub([sink]))
    assert [c.name for c in report.cases] == ["add", "exp"]
    assert all(line.endswith("ok") for line in report.lines())
    assert [e["case"] for e in sink.of("gradcheck")] == ["add", "exp"]


def test_failure_is_reported():
    report = SuiteReport(cases=[CaseReport("bad", 1e-2, 3, 10)])
    assert not report.passed
    assert report.failures[0].worst_seed == 3
    assert report.lines()[0].endswith("FAIL")
    assert CaseReport("good", THRESHOLD, 0, 1).passed


def test_tiny_run_config_is_float64():
    cfg = tiny_run_config(3)
    assert cfg.precision == "float64" and cfg.train.seed == 3
    assert cfg.vit.k < cfg.vit.num_patches


@pytest.mark.slow
def test_full_suite_over_ten_seeds():
    report = run_suite()
    assert report.passed, report.lines()
