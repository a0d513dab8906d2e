import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from garmentanim.estimator import TryOnAnimator, check_requests, check_triplets
from garmentanim.sampling import GenerationRequest
from garmentanim.toy import toy_triplet

SMALL = dict(num_blocks=2, model_dim=16, num_heads=2, steps=3, batch_size=2, sample_steps=2)


@pytest.fixture
def triplets():
    return [toy_triplet(0, "red", "walk-right", "gray", frames=2),
            toy_triplet(1, "blue", "wave", "white", frames=2)]


def test_params_and_clone():
    est = TryOnAnimator(**SMALL)
    assert est.get_params()["model_dim"] == 16
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin is not est


def test_unfitted_raises(triplets):
    with pytest.raises(NotFittedError):
        TryOnAnimator(**SMALL).predict(triplets)


def test_fit_predict_score(triplets):
    est = TryOnAnimator(**SMALL).fit(triplets)
    assert len(est.history_) == 3
    videos = est.predict(triplets)
    assert [v.shape for v in videos] == [t.truth.shape for t in triplets]
    again = TryOnAnimator(**SMALL).fit(triplets).predict(triplets)
    assert all(np.array_equal(a, b) for a, b in zip(videos, again))
    assert np.isfinite(est.score(triplets))


def test_save_load(tmp_path, triplets):
    est = TryOnAnimator(**SMALL).fit(triplets)
    path = est.save(tmp_path / "est.ckpt")
    back = TryOnAnimator.load(path)
    assert back.get_params()["model_dim"] == 16
    back.sample_steps = est.sample_steps
    assert np.array_equal(back.predict(triplets[:1])[0], est.predict(triplets[:1])[0])


def test_input_checks(triplets):
    with pytest.raises(ValueError):
        check_triplets([])
    with pytest.raises(TypeError):
        check_triplets([1, 2])
    small = toy_triplet(0, "red", "wave", "gray", frames=2, size=16)
    with pytest.raises(ValueError):
        check_triplets([triplets[0], small])
    reqs = check_requests(triplets[0], steps=2, seed=0, alpha=0.5, beta=0.5)
    assert isinstance(reqs[0], GenerationRequest)
    assert check_requests(reqs, 2, 0, 0.5, 0.5) == reqs
    with pytest.raises(TypeError):
        check_requests(["x"], 2, 0, 0.5, 0.5)
