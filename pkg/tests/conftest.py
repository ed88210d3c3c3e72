import time
from dataclasses import dataclass, field

import numpy as np
import pytest

from chmseg.chm import chm_infer, chm_train
from chmseg.core import ChmConfig, ImagePlane, LabelMap
from chmseg.metrics import binary_scores
from chmseg.synth import generate

# desk-scale hierarchy used by the texture experiments (see README)
TEXTURE_CONFIG = dict(ldnn_groups=8, ldnn_per_group=8, epochs=10, max_samples=20_000, seed=0)
TEXTURE_SEED = 0

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@dataclass
class TextureRun:
    train: list
    test: list
    flat: object  # L = 1, S = 1
    deep: object  # L = 3, S = 2
    flat_seconds: float
    deep_seconds: float
    deep_log: list = field(default_factory=list)

    def f_value(self, model, split, stages=None):
        pairs = self.train if split == "train" else self.test
        probs = np.concatenate([chm_infer(model, im, stages).plane(0).ravel() for im, _ in pairs])
        truth = np.concatenate([lab.data.ravel() for _, lab in pairs])
        return binary_scores(probs, truth).f_value


@pytest.fixture(scope="session")
def texture_run():
    pairs = [(ImagePlane(im), LabelMap(lab)) for im, lab in generate("textures", 70, 64, TEXTURE_SEED)]
    train, test = pairs[:50], pairs[50:]
    start = time.perf_counter()
    flat = chm_train(train, ChmConfig(levels=1, stages=1, **TEXTURE_CONFIG))
    flat_seconds = time.perf_counter() - start
    log = []
    start = time.perf_counter()
    deep = chm_train(train, ChmConfig(levels=3, stages=2, **TEXTURE_CONFIG), log=log.append)
    deep_seconds = time.perf_counter() - start
    return TextureRun(train, test, flat, deep, flat_seconds, deep_seconds, log)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
