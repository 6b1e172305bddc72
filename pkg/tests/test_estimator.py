import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dualrr.estimator import DualRerank, check_requests
from dualrr.streamsim import EnvConfig, StreamEnv
from dualrr.trainloop import TrainConfig

BASE = TrainConfig(d_ffn=8, group_size=3, n_enc_layers=1, n_teacher_layers=1, eval_every=0)
ENV = EnvConfig(n_cand=5, l_out=3, seed=2)


def small(**kw):
    args = dict(steps=4, batch_size=4, group_size=3, d_model=8, n_samples=3, seed=1, config=BASE)
    args.update(kw)
    return DualRerank(**args)


def test_params_and_clone():
    est = small(mode="grpo")
    params = est.get_params()
    assert params["mode"] == "grpo" and params["steps"] == 4
    assert clone(est).get_params()["mode"] == "grpo"


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        small().predict([])


def test_bad_mode():
    with pytest.raises(ValueError):
        small(mode="ppo").fit(StreamEnv(ENV))


def test_fit_on_stream_then_predict_and_transform():
    env = StreamEnv(ENV)
    est = small().fit(env)
    assert len(est.history_) == 4 and est.state_.step == 4
    recs = env.eval_batch(3).records()
    slates = est.predict(recs)
    assert slates.shape == (3, 3)
    assert all(len(set(r)) == 3 for r in slates)
    cubes = est.transform(recs)
    assert cubes.shape == (3, 3, 5)
    np.testing.assert_array_equal(est.predict(recs), slates)


def test_fit_on_records_and_partial_fit():
    env = StreamEnv(ENV)
    recs = env.next_batch(0, 8).records()
    est = small(config=BASE.replace(n_cand=5, l_out=3)).fit(recs)
    assert est.state_.step == 2
    est.partial_fit(env.next_batch(1, 4))
    assert est.state_.step == 3


def test_check_requests_shapes():
    env = StreamEnv(ENV)
    recs = env.eval_batch(2).records()
    with pytest.raises(ValueError, match="candidates"):
        check_requests(recs, 6, 24)
    with pytest.raises(ValueError, match="features"):
        check_requests(recs, 5, 12)
    with pytest.raises(ValueError):
        check_requests([3], 5, 24)
