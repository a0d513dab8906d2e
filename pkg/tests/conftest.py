import os
import time

import numpy as np
import pytest

from garmentanim.autograd import ParamSet
from garmentanim.backbone import BackboneConfig, init_backbone
from garmentanim.dual_module import init_adapters
from garmentanim.toy import heldout_corpus, toy_corpus, toy_triplet

# Toy overfit configuration shared by the acceptance run and the sampling checks.
OVERFIT_CFG = BackboneConfig(num_blocks=8, model_dim=64, num_heads=4, patch=(1, 2, 2))
OVERFIT_STEPS = 2000
OVERFIT_FRAMES = 2
OVERFIT_TRAIN = dict(steps=OVERFIT_STEPS, batch_size=16, lr=2e-3, seed=0, lr_schedule="cosine",
                     recolor_prob=0.5)


@pytest.fixture
def tiny_cfg():
    return BackboneConfig(num_blocks=2, model_dim=16, num_heads=2, patch=(1, 2, 2), text_dim=8)


@pytest.fixture
def l4_cfg():
    return BackboneConfig(num_blocks=4, model_dim=16, num_heads=2, patch=(1, 2, 2), text_dim=8)


def randomize_adapters(params: ParamSet, seed: int, scale: float = 0.05, prefixes=("ham.", "gtm.")):
    """Perturb adapter weights so residuals are non-zero."""
    rng = np.random.default_rng(seed)
    for p in prefixes:
        for name in params.names(p):
            arr = params.array(name)
            params.assign(name, (arr + scale * rng.standard_normal(arr.shape)).astype(arr.dtype))
    return params


def model_params(cfg, seed=0, adapters=True, trained_seed=None):
    params = init_backbone(cfg, seed)
    if adapters:
        init_adapters(params, cfg)
        if trained_seed is not None:
            randomize_adapters(params, trained_seed)
    return params


@pytest.fixture
def small_samples():
    """Two 2-frame toy triplets at 32x32."""
    return [toy_triplet(0, "red", "walk-right", "gray", frames=2),
            toy_triplet(1, "green", "wave", "white", frames=2)]


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """Train the dual-module toy model once per session (about 12 min on one core)."""
    from garmentanim.training import TrainConfig, TrainState, evaluation_loss, train

    data = toy_corpus(frames=OVERFIT_FRAMES)
    state = TrainState.fresh(OVERFIT_CFG, TrainConfig(**OVERFIT_TRAIN))
    initial = evaluation_loss(data, state)
    t0 = time.perf_counter()
    train(data, state)
    seconds = time.perf_counter() - t0
    final = evaluation_loss(data, state)
    path = state.save(tmp_path_factory.mktemp("overfit") / "overfit.ckpt")
    return {"state": state, "path": path, "initial": initial, "final": final, "seconds": seconds,
            "data": data, "heldout": heldout_corpus(frames=OVERFIT_FRAMES)}


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])


def pytest_report_header(config):
    return f"garmentanim tests; cpu count {os.cpu_count()}"
