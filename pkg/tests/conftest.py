import numpy as np

from poisonbrew import datapipe as data, nn
from poisonbrew.rng import stream


def blobs(n_per=60, seed=0, split="train"):
    """Three well-separated 2-d Gaussian blobs stored as 1x1x2 images."""
    gen = stream(seed, "blobs", split)
    centres = np.array([[0.2, 0.2], [0.8, 0.2], [0.5, 0.8]])
    labels = np.repeat(np.arange(3), n_per)
    x = np.clip(centres[labels] + gen.normal(scale=0.07, size=(len(labels), 2)), 0, 1)
    return data.Dataset(x.reshape(-1, 1, 1, 2), labels, np.arange(len(labels)), 3, split)


def blob_mlp(hidden=16):
    return nn.ModelSpec(kind="mlp", widths=(hidden,), input_shape=(1, 1, 2), classes=3,
                        input_mean=0.5, input_std=0.25)


# ------------------------------------------------------------ acceptance lines

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
