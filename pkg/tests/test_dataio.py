import json
import warnings

import numpy as np
import pytest

from sodgp.dataio import (FORMAT_VERSION, HISTORY_COLUMNS, Dataset, Standardization, load_csv,
                          load_model, read_history, save_csv, save_model, split, write_history)
from sodgp.errors import ChecksumMismatch, InvalidFraction, MissingTarget, ParseError, VersionMismatch
from sodgp.model import Architecture, ModelConfig, init_model, parameter_vector
from sodgp.predict import predict
from sodgp.subset import random_subset
from sodgp.train import TrainConfig, train

BOSTON = __import__("pathlib").Path(__file__).resolve().parents[1] / "data" / "boston.csv"


def _write(tmp_path, text, name="t.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_toy(tmp_path):
    p = _write(tmp_path, "a,b,y\n1,2,3\n4,5,6\n7,8,9\n")
    d = load_csv(p, "y")
    assert d.x.shape == (3, 2) and d.y.shape == (3,)
    assert d.feature_names == ["a", "b"]
    np.testing.assert_array_equal(d.y, [3, 6, 9])
    by_index = load_csv(p, "0")
    np.testing.assert_array_equal(by_index.y, [1, 4, 7])
    np.testing.assert_array_equal(load_csv(p).y, d.y)


def test_load_rejects_bad_rows(tmp_path):
    p = _write(tmp_path, "a,y\n1,2\n3,oops\n5,6\n")
    with pytest.raises(ParseError) as err:
        load_csv(p)
    assert err.value.line == 3 and "line 3" in str(err.value)
    q = _write(tmp_path, "a,y\n1,2\n3,4,5\n", "q.csv")
    with pytest.raises(ParseError) as err:
        load_csv(q)
    assert err.value.line == 3


def test_missing_target(tmp_path):
    p = _write(tmp_path, "a,y\n1,2\n")
    with pytest.raises(MissingTarget):
        load_csv(p, "nope")
    with pytest.raises(MissingTarget):
        load_csv(p, 5)


def test_boston_shape():
    d = load_csv(BOSTON)
    assert (d.n, d.input_dim) == (506, 13)


def _dataset(rng, n=100, h=3):
    x = rng.standard_normal((n, h)) * [1, 5, 0.1] + [0, 10, -3]
    return Dataset(x, x @ [1.0, -0.5, 2.0] + rng.standard_normal(n))


def test_split_sizes_and_seed(rng):
    d = _dataset(rng)
    tr, te = split(d, 0.1, seed=3)
    assert (tr.n, te.n) == (90, 10)
    tr2, te2 = split(d, 0.1, seed=3)
    np.testing.assert_array_equal(te.x, te2.x)
    with pytest.raises(InvalidFraction):
        split(d, 1.0)
    with pytest.raises(InvalidFraction):
        split(d, 0.0)


def test_split_standardization_from_train_only(rng):
    tr, te = split(_dataset(rng), 0.2, seed=1)
    xs = tr.x_std
    assert np.all(np.abs(xs.mean(0)) < 1e-10)
    assert np.all(np.abs(xs.std(0) - 1) < 1e-6)
    assert abs(tr.y_std.mean()) < 1e-10 and abs(tr.y_std.std() - 1) < 1e-6
    assert te.standardization is tr.standardization
    assert np.all(np.abs(te.x_std.mean(0)) > 1e-6)
    np.testing.assert_allclose(tr.standardization.inverse_x(xs), tr.x, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(tr.standardization.inverse_y(tr.y_std), tr.y, rtol=1e-12, atol=1e-12)


def test_constant_column_warns():
    x = np.column_stack([np.arange(5.0), np.full(5, 2.0)])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        std = Standardization.fit(x, np.arange(5.0), ["a", "b"])
    assert std.x_scale[1] == 1.0 and std.warnings and caught
    assert "b" in std.warnings[0]


def _trained_model(rng):
    x = rng.standard_normal((40, 2))
    y = np.sin(x[:, 0])
    std = Standardization.fit(x, y)
    model = init_model(Architecture(2, 1), std.transform_x(x), std.transform_y(y),
                       random_subset(40, 5, 0), 0, ModelConfig(ard=True), std)
    train(model, std.transform_x(x), std.transform_y(y), TrainConfig(iterations=3, batch_size=10, t_train=2))
    return model, x


def test_model_round_trip(tmp_path, rng):
    model, x = _trained_model(rng)
    path = tmp_path / "m.json"
    save_model(model, path)
    loaded = load_model(path)
    for a, b in zip(parameter_vector(model), parameter_vector(loaded)):
        assert a.tobytes() == b.tobytes()
    np.testing.assert_array_equal(loaded.subset.s, model.subset.s)
    assert loaded.architecture == model.architecture
    assert loaded.config.ard and loaded.iterations_trained == 3
    pa = predict(model, x[:6], 4, seed=2)
    pb = predict(loaded, x[:6], 4, seed=2)
    assert pa.means.tobytes() == pb.means.tobytes()
    assert pa.variances.tobytes() == pb.variances.tobytes()
    assert not (tmp_path / "m.json.tmp").exists()


def test_model_file_errors(tmp_path, rng):
    model, _ = _trained_model(rng)
    path = tmp_path / "m.json"
    save_model(model, path)
    doc = json.loads(path.read_text())
    doc["version"] = FORMAT_VERSION + 1
    bumped = tmp_path / "v.json"
    bumped.write_text(json.dumps(doc))
    with pytest.raises(VersionMismatch):
        load_model(bumped)
    doc["version"] = FORMAT_VERSION
    doc["payload"]["iterations_trained"] = 99
    tampered = tmp_path / "c.json"
    tampered.write_text(json.dumps(doc))
    with pytest.raises(ChecksumMismatch):
        load_model(tampered)
    text = path.read_text()
    for cut in (10, len(text) // 2, len(text) - 5):
        truncated = tmp_path / f"t{cut}.json"
        truncated.write_text(text[:cut])
        with pytest.raises((ParseError, ChecksumMismatch)):
            load_model(truncated)


def test_history_and_csv_round_trip(tmp_path, rng):
    x = rng.standard_normal((30, 2))
    y = x[:, 0]
    model = init_model(Architecture(2, 1), x, y, random_subset(30, 4, 0), 0)
    hist = train(model, x, y, TrainConfig(iterations=20, batch_size=8, t_train=2, log_every=5))
    write_history(tmp_path / "h.csv", hist)
    rows = read_history(tmp_path / "h.csv")
    assert tuple(rows[0]) == HISTORY_COLUMNS
    assert [r["iteration"] for r in rows] == [0, 5, 10, 15]
    assert [r["elbo_total"] for r in rows] == [r["elbo_total"] for r in hist.rows()]
    d = Dataset(x, y, ["p", "q"])
    save_csv(tmp_path / "d.csv", d)
    back = load_csv(tmp_path / "d.csv")
    assert back.x.tobytes() == x.tobytes() and back.y.tobytes() == y.tobytes()
