"""Estimator facade tests: sklearn conventions over windowed inputs."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cabada.data import SynthConfig, synth_generate
from cabada.errors import ConfigError, DataError
from cabada.estimator import MixerClassifier


def corpus_arrays(**overrides):
    base = dict(subjects=2, sessions_per_subject=1, blocks_per_session=2,
                trials_per_block=8, timesteps=8, features=4, spatial_groups=2,
                class_count=2, noise_std=0.05, class_signal=2.0, seed=3)
    base.update(overrides)
    index = synth_generate(SynthConfig(**base))
    return index.values_array, index.labels_array, index.keys_array


def fast_clf(**overrides):
    base = dict(groups=2, width=4, depth=1, temporal_hidden=8,
                channel_hidden=8, learning_rate=1e-2, batch_size=8,
                patience=200, max_epochs=120, random_state=0)
    base.update(overrides)
    return MixerClassifier(**base)


def test_fit_predict_memorizes_separable_data():
    X, y, _ = corpus_arrays()
    clf = fast_clf().fit(X, y)
    assert (clf.predict(X) == y).mean() == 1.0
    assert clf.score(X, y) == 1.0


def test_predict_proba_rows_sum_to_one():
    X, y, _ = corpus_arrays()
    clf = fast_clf(max_epochs=5).fit(X, y)
    proba = clf.predict_proba(X)
    assert proba.shape == (len(X), 2)
    assert np.allclose(proba.sum(axis=1), 1.0)
    assert np.all(proba >= 0)
    assert np.array_equal(clf.classes_[proba.argmax(axis=1)], clf.predict(X))


def test_non_contiguous_labels_round_trip():
    X, y, _ = corpus_arrays()
    relabeled = np.where(y == 0, 3, 7)
    clf = fast_clf(max_epochs=60).fit(X, relabeled)
    assert set(clf.classes_) == {3, 7}
    assert set(clf.predict(X)) <= {3, 7}


def test_da_mode_requires_keys():
    X, y, keys = corpus_arrays()
    with pytest.raises(ConfigError):
        fast_clf(da_mode="block").fit(X, y)
    clf = fast_clf(da_mode="block", alpha=0.5, max_epochs=3).fit(X, y, keys=keys)
    assert clf.predict(X).shape == y.shape


def test_unfitted_predict_raises():
    X, _, _ = corpus_arrays()
    with pytest.raises(NotFittedError):
        fast_clf().predict(X)


def test_input_validation():
    X, y, _ = corpus_arrays()
    clf = fast_clf()
    with pytest.raises(DataError):
        clf.fit(X.reshape(len(X), -1).reshape(len(X), 4, 8)[:, :, :3], y)
    with pytest.raises(DataError):
        clf.fit(X, y[:-1])
    fitted = fast_clf(max_epochs=2).fit(X, y)
    with pytest.raises(DataError):
        fitted.predict(np.zeros((3, 8, 6)))


def test_get_params_clone_compatible():
    clf = fast_clf(alpha=0.7, da_mode="session")
    params = clf.get_params()
    assert params["alpha"] == 0.7
    assert params["da_mode"] == "session"
    cloned = clone(clf)
    assert cloned.get_params() == params
    clf.set_params(alpha=1.1)
    assert clf.get_params()["alpha"] == 1.1


def test_fit_is_deterministic_given_random_state():
    X, y, keys = corpus_arrays()
    a = fast_clf(max_epochs=4).fit(X, y, keys=keys)
    b = fast_clf(max_epochs=4).fit(X, y, keys=keys)
    for name in a.params_.tensors:
        assert np.array_equal(a.params_.tensors[name], b.params_.tensors[name])
    assert a.history_ == b.history_
