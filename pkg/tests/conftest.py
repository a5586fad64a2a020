import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def _items(n_good, n_bad, seed):
    from coatinspect.pipeline import LabeledImage
    from coatinspect.synthgen import iter_dataset

    return [LabeledImage(n, s.image, s.label, s.defect_mask if s.label == "bad" else None)
            for n, s in iter_dataset(n_good, n_bad, seed)]


@pytest.fixture(scope="session")
def small_data():
    """A few goods for training, a mixed calibration set and a mixed test set."""
    return {"train": _items(12, 0, 11), "calib": _items(0, 8, 12), "test": _items(6, 8, 13)}


@pytest.fixture(scope="session")
def small_config():
    from coatinspect.config import RunConfig

    return RunConfig.from_dict({"flow": {"epochs": 4, "lr": 2e-3, "depth": 4, "hidden": 16},
                                "eval": {"val_fraction": 0.25}})


@pytest.fixture(scope="session")
def small_model(small_data, small_config):
    """Quickly trained and calibrated system; fresh copies via model_from_bytes."""
    from coatinspect.flow import model_to_bytes
    from coatinspect.pipeline import fit_system

    model, _ = fit_system(small_data["train"], small_data["calib"], small_config)
    return model_to_bytes(model)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
