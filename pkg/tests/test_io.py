import json

import numpy as np
import pytest

from cfam.errors import ConfigError, DataError
from cfam.io import ModelArtifact, RunConfig, SCHEMA_VERSION, read_trial, table_from_trial, write_trial
from cfam.solver import interaction_scores
from cfam.tuning import fit_pipeline

from conftest import small_trial


def write(path, text):
    path.write_text(text)


def toy_dir(tmp_path, nan=False):
    d = tmp_path / "toy"
    d.mkdir()
    write(d / "outcome.csv", "id,y,a\ns1,1.5,0\ns2,2.5,5\ns3,-1,5\n")
    write(d / "scalars.csv", "id,age,score\ns1,30,0.1\ns2,41,0.2\ns3,35,%s\n" % ("nan" if nan else "0.3"))
    write(d / "functional_eeg.csv", "grid,0,0.5,1\ns1,1,2,3\ns3,0,0,1\ns2,3,2,1\n")
    return d


def test_toy_directory(tmp_path):
    t = read_trial(toy_dir(tmp_path))
    assert t.n == 3 and t.functional_names == ["eeg"] and t.scalar_names == ["age", "score"]
    data = t.to_trial()
    assert data.n == 3 and data.L == 2
    np.testing.assert_array_equal(data.a, [1, 2, 2])
    np.testing.assert_allclose(data.center, [1.5, 0.75])
    # rows are matched by id, not by position
    np.testing.assert_array_equal(data.x[0].values[1], [3, 2, 1])
    np.testing.assert_array_equal(data.x[0].grid.points, [0, 0.5, 1])
    assert t.arm_labels() == [0, 5]


def test_nan_names_file_row_column(tmp_path):
    with pytest.raises(DataError, match=r"scalars\.csv: row 4, column 'score'"):
        read_trial(toy_dir(tmp_path, nan=True))


def test_itemized_report(tmp_path):
    d = toy_dir(tmp_path)
    write(d / "functional_eeg.csv", "grid,0,0.5,0.5\ns1,1,2,3\ns2,3,x,1\n")
    write(d / "outcome.csv", "id,y,a\ns1,1.5,0\ns2,2.5,5\ns3,-1,1.5\n")
    with pytest.raises(DataError) as err:
        read_trial(d)
    msg = str(err.value)
    assert "functional_eeg.csv: row 3, column '0.5'" in msg
    assert "invalid grid" in msg
    assert "outcome.csv: row 4, column 'a'" in msg


def test_missing_ids_and_files(tmp_path):
    d = toy_dir(tmp_path)
    write(d / "scalars.csv", "id,age\ns1,30\ns2,41\n")
    with pytest.raises(DataError, match="missing id"):
        read_trial(d)
    with pytest.raises(DataError, match="not a directory"):
        read_trial(tmp_path / "absent")
    (d / "outcome.csv").unlink()
    with pytest.raises(DataError, match="outcome.csv: file not found"):
        read_trial(d)


def test_single_arm_rejected(tmp_path):
    d = toy_dir(tmp_path)
    write(d / "outcome.csv", "id,y,a\ns1,1.5,2\ns2,2.5,2\ns3,-1,2\n")
    with pytest.raises(DataError, match="at least 2"):
        read_trial(d).to_trial()


def test_round_trip(tmp_path):
    src = toy_dir(tmp_path)
    t = read_trial(src)
    write_trial(tmp_path / "copy", t)
    u = read_trial(tmp_path / "copy")
    assert u.ids == t.ids and u.scalar_names == t.scalar_names
    np.testing.assert_array_equal(u.y, t.y)
    np.testing.assert_array_equal(u.arms, t.arms)
    np.testing.assert_array_equal(u.z, t.z)
    np.testing.assert_array_equal(u.x[0].values, t.x[0].values)
    np.testing.assert_array_equal(u.x[0].grid.points, t.x[0].grid.points)


def test_round_trip_in_memory_trial(tmp_path):
    data = small_trial(n=30)
    write_trial(tmp_path / "d", table_from_trial(data))
    back = read_trial(tmp_path / "d").to_trial()
    np.testing.assert_array_equal(back.raw_y, data.raw_y)
    np.testing.assert_array_equal(back.z, data.z)
    for a, b in zip(back.x, data.x):
        np.testing.assert_array_equal(a.values, b.values)
        np.testing.assert_array_equal(a.grid.weights, b.grid.weights)


def test_run_config_round_trip(tmp_path):
    cfg = RunConfig(lam=0.25, folds=5, augment="fam", linear_mode=True, pi=[0.3, 0.7], dim=6, methods=["cfam"])
    cfg.to_json(tmp_path / "c.json")
    assert RunConfig.from_json(tmp_path / "c.json") == cfg
    assert RunConfig.from_dict(RunConfig().to_dict()) == RunConfig()
    assert RunConfig().folds == 10 and RunConfig().fit_options().dim is None


def test_run_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.from_dict({"lambda_": 1})
    with pytest.raises(ConfigError):
        RunConfig(folds=1)
    with pytest.raises(ConfigError):
        RunConfig(augment="owl")
    with pytest.raises(ConfigError):
        RunConfig(lam=-1.0)
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        RunConfig.from_json(tmp_path / "bad.json")


@pytest.mark.parametrize("augment", ["lasso", "fam", "none"])
def test_artifact_reproduces_predictions(tmp_path, augment):
    data = small_trial(n=90, seed=2)
    table = table_from_trial(data)
    res = fit_pipeline(data, augment=augment, folds=5, n_lambda=6)
    art = ModelArtifact.from_pipeline(res, table, RunConfig(folds=5))
    art.save(tmp_path / "m.json")
    back = ModelArtifact.load(tmp_path / "m.json")
    np.testing.assert_array_equal(interaction_scores(back.fit, data.x, data.z),
                                  interaction_scores(res.fit, data.x, data.z))
    for (b0, c0), (b1, c1) in zip(res.fit.functional, back.fit.functional):
        np.testing.assert_array_equal(b0.gamma, b1.gamma)
        np.testing.assert_array_equal(c0.offset, c1.offset)
    if res.main_effect is not None:
        np.testing.assert_array_equal(back.main_effect.predict(data.x, data.z), res.main_effect.predict(data.x, data.z))
    assert back.report is not None and back.report.chosen == res.report.chosen
    assert back.config["folds"] == 5


def test_artifact_versioning(tmp_path):
    data = small_trial(n=60)
    res = fit_pipeline(data, augment="none", lam=0.1)
    d = ModelArtifact.from_pipeline(res, table_from_trial(data)).to_dict()
    d["schema_version"] = SCHEMA_VERSION + 1
    (tmp_path / "future.json").write_text(json.dumps(d))
    with pytest.raises(DataError, match="newer than supported"):
        ModelArtifact.load(tmp_path / "future.json")
    (tmp_path / "other.json").write_text(json.dumps({"hello": 1}))
    with pytest.raises(DataError, match="not a cfam model"):
        ModelArtifact.load(tmp_path / "other.json")
    d["schema_version"] = SCHEMA_VERSION
    del d["fit"]["pi"]
    (tmp_path / "broken.json").write_text(json.dumps(d))
    with pytest.raises(DataError, match="malformed"):
        ModelArtifact.load(tmp_path / "broken.json")


def test_align_checks_names_and_grids(tmp_path):
    data = small_trial(n=60)
    table = table_from_trial(data)
    art = ModelArtifact.from_pipeline(fit_pipeline(data, augment="none", lam=0.1), table)
    x, z = art.align(table)
    np.testing.assert_array_equal(z, data.z)
    write_trial(tmp_path / "d", table)
    (tmp_path / "d" / "functional_x2.csv").unlink()
    with pytest.raises(DataError, match="functional_x2.csv"):
        art.align(read_trial(tmp_path / "d"))
