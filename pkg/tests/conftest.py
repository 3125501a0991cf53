import numpy as np
import pytest

from wsihyb.synth import GenConfig, generate_synthetic_dataset

SMALL_GEN = dict(n_slides=12, test_fraction=0.5, positive_fraction=0.34, extent=1024,
                 n_fine_patches=4, tissue_ellipses=(2, 3), tissue_radius=(250, 400),
                 distractor_count=(2, 4), lesion_count=(1, 2), blob_radius=(40, 80))


@pytest.fixture(scope="session")
def small_gen_config():
    return GenConfig(**SMALL_GEN)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory, small_gen_config):
    """A dozen 1024px slides, half train / half test, with fine patches."""
    root = tmp_path_factory.mktemp("small_ds")
    generate_synthetic_dataset(small_gen_config, 7, root)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one summary line per acceptance criterion, printed whether or not -s is given
_criteria = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    number = int(report.nodeid.split("test_criterion_")[1].split("_")[0])
    detail = dict(report.user_properties).get("detail", "")
    if report.when == "call" or report.failed or report.skipped:
        outcome = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        if number not in _criteria or outcome != "PASS":
            _criteria[number] = f"criterion {number:2d}: {outcome}  {detail}".rstrip()


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_criteria):
            terminalreporter.write_line(_criteria[number])
