import json
import shutil

import numpy as np
import pytest

from usflow import io
from usflow.cli import COEFF_COLUMNS, SWEEP_COLUMNS, _hash, a_hash, main, operator_for
from usflow.collision import ConfigError
from usflow.config import DEFAULTS, PROFILES, load_config, validate
from usflow.dynamics import TRAJECTORY_COLUMNS


def write_config(path, **blocks):
    path.write_text(json.dumps(blocks))
    return path


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


@pytest.fixture(scope="module")
def cache_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("cache")


class TestConfig:
    def test_defaults(self):
        cfg = validate({})
        assert cfg.grid == PROFILES["standard"]
        assert cfg.shear["alpha"] == 0.1 and cfg.estimates["ell2"] == 0.5
        assert cfg.as_dict()["dynamics"] == DEFAULTS["dynamics"]

    def test_unknown_keys(self):
        with pytest.raises(ConfigError, match="unknown key"):
            validate({"grid": {"RR": 3}})
        with pytest.raises(ConfigError, match="unknown key"):
            validate({"extra": 1})

    def test_trace_renormalized(self):
        A = [[1e-13, 1.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]
        with pytest.warns(UserWarning, match="renormalized"):
            cfg = validate({"shear": {"A": A}})
        assert np.trace(np.array(cfg.shear["A"])) == 0.0
        assert cfg.shear_config().A[0, 1] == 1.0

    def test_trace_rejected(self):
        with pytest.raises(ConfigError, match="trace"):
            validate({"shear": {"A": [[1e-3, 0, 0], [0, 0, 0], [0, 0, 0]]}})

    @pytest.mark.parametrize("doc", [
        {"grid": {"N": 2}}, {"grid": {"n_cos": 3}}, {"shear": {"gamma": 0}}, {"shear": {"m": 3.5}},
        {"dynamics": {"initial": "hot"}}, {"dynamics": {"dt": -1}}, {"dynamics": {"cadence": 0}},
        {"dynamics": {"factor_end": 1.0}}, {"estimates": {"M": [2, 1]}}, {"estimates": {"ell2": -1}},
        {"grid": "x"},
    ])
    def test_preconditions(self, doc):
        with pytest.raises(ConfigError):
            validate(doc)

    def test_profile_overrides_file(self, tmp_path):
        p = write_config(tmp_path / "c.json", grid={"R": 9.0, "N": 20})
        assert load_config(p, "fast").grid == PROFILES["fast"]
        assert load_config(p).grid["N"] == 20

    def test_fingerprint_stable(self):
        assert validate({}).fingerprint() == validate({}).fingerprint()
        assert validate({}).fingerprint() != validate({"shear": {"alpha": 0.2}}).fingerprint()

    def test_bad_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{\n  'grid': }")
        with pytest.raises(ConfigError, match=":2:"):
            load_config(p)


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


class TestCommands:
    def test_assemble_idempotent(self, workdir, cache_dir, capsys):
        code, out, _ = run(["assemble", "--profile", "fast", "--cache-dir", str(cache_dir)], capsys)
        assert code == 0 and "eps_sym" in out and "eps_ker" in out
        code, out, _ = run(["assemble", "--profile", "fast", "--cache-dir", str(cache_dir)], capsys)
        assert code == 0 and out.startswith("cache hit")

    def test_cache_collision_needs_force(self, workdir, cache_dir, capsys):
        run(["assemble", "--profile", "fast", "--cache-dir", str(cache_dir)], capsys)
        other = workdir / "other"
        other.mkdir()
        src = next(cache_dir.glob("L-*.usfk"))
        cfg = write_config(workdir / "b0.json", shear={"b0": 2.0})
        # plant a cache for different parameters under the file name the new config will use
        fp = operator_for(load_config(cfg, "fast")).fingerprint()
        shutil.copy(src, other / f"L-{_hash(fp)}.usfk")
        code, _, err = run(["assemble", "--profile", "fast", "--config", str(cfg), "--cache-dir", str(other)],
                           capsys)
        assert code == 4 and "--force" in err
        code, out, _ = run(["assemble", "--profile", "fast", "--config", str(cfg), "--cache-dir", str(other),
                            "--force"], capsys)
        assert code == 0 and out.startswith("assembled")

    def test_coeffs(self, workdir, cache_dir, capsys):
        code, out, _ = run(["coeffs", "--profile", "fast", "--cache-dir", str(cache_dir)], capsys)
        assert code == 0
        cols = io.read_csv_columns(workdir / "usflow-out" / "coeffs.csv", ["rho0", "rho1", "N"])
        assert cols["rho0"][0] == pytest.approx(0.029572916642, rel=1e-8)
        assert cols["N"][0] == 8
        header = (workdir / "usflow-out" / "coeffs.csv").read_text().splitlines()[0].split(",")
        assert header == list(COEFF_COLUMNS) + ["fingerprint"]
        hdr, G1 = io.read_snapshot(workdir / "usflow-out" / "G1_unit_N8.usfb")
        assert hdr.N == 8 and np.any(G1)

    def test_coeffs_deterministic(self, workdir, cache_dir, capsys):
        args = ["coeffs", "--profile", "fast", "--cache-dir", str(cache_dir)]
        run(args, capsys)
        first = (workdir / "usflow-out" / "coeffs.csv").read_bytes()
        snap = (workdir / "usflow-out" / "G2_unit_N8.usfb").read_bytes()
        run(args + ["--force"], capsys)
        assert (workdir / "usflow-out" / "coeffs.csv").read_bytes() == first
        assert (workdir / "usflow-out" / "G2_unit_N8.usfb").read_bytes() == snap

    def test_zero_shear(self, workdir, cache_dir, capsys):
        cfg = write_config(workdir / "c.json", shear={"A": [[0, 0, 0], [0, 0, 0], [0, 0, 0]]})
        code, _, _ = run(["coeffs", "--profile", "fast", "--config", str(cfg), "--cache-dir", str(cache_dir)],
                         capsys)
        assert code == 0
        cols = io.read_csv_columns(workdir / "usflow-out" / "coeffs.csv", ["rho0", "rho1"])
        assert cols["rho0"][0] == 0 and cols["rho1"][0] == 0

    def test_evolve_and_fit(self, workdir, cache_dir, capsys):
        cfg = write_config(workdir / "c.json", dynamics={"duration": 300.0, "cadence": 3})
        code, out, _ = run(["evolve", "--profile", "fast", "--config", str(cfg), "--cache-dir", str(cache_dir)],
                           capsys)
        assert code == 0
        path = workdir / "usflow-out" / "trajectory.csv"
        header = path.read_text().splitlines()[0].split(",")
        assert header == list(TRAJECTORY_COLUMNS) + ["fingerprint"]
        fp = validate(json.loads(cfg.read_text()) | {"grid": PROFILES["fast"]}).fingerprint()
        assert all(line.endswith("," + fp) for line in path.read_text().splitlines()[1:])
        code, out, _ = run(["fit", str(path), "--x", "t", "--y", "theta", "--x-affine", "1", str(0.0002957),
                            "--window", "1.01", "2"], capsys)
        assert code == 0 and out.startswith("exponent 2.0")

    def test_evolve_without_shear_keeps_temperature(self, workdir, cache_dir, capsys):
        cfg = write_config(workdir / "c.json", shear={"alpha": 0.0},
                           dynamics={"duration": 200.0, "dt": 10.0, "initial": "maxwellian", "cadence": 1})
        code, _, _ = run(["evolve", "--profile", "fast", "--config", str(cfg), "--cache-dir", str(cache_dir)],
                         capsys)
        assert code == 0
        theta = io.read_csv_columns(workdir / "usflow-out" / "trajectory.csv", ["theta"])["theta"]
        assert np.allclose(theta, 1.0, atol=1e-8)

    def test_estimates(self, workdir, cache_dir, capsys):
        cfg = write_config(workdir / "c.json", estimates={"M": [0.5, 1.0, 1.5, 2.0]})
        code, out, _ = run(["estimates", "--profile", "fast", "--config", str(cfg), "--cache-dir",
                            str(cache_dir)], capsys)
        assert code == 0 and "riesz-thorin pass" in out
        cols = io.read_csv_columns(workdir / "usflow-out" / "sweep.csv", list(SWEEP_COLUMNS))
        assert cols["M"].tolist() == [0.5, 1.0, 1.5, 2.0]
        assert np.all(np.diff(cols["n1"]) <= 0)

    def test_fit_synthetic(self, workdir, capsys):
        p = workdir / "s.csv"
        io.write_csv(p, ("x", "y"), [(x, 3 * x ** 1.5) for x in (1.0, 2.0, 3.0, 5.0)], "fp")
        code, out, _ = run(["fit", str(p), "--x", "x", "--y", "y"], capsys)
        assert code == 0 and out.startswith("exponent 1.5") and "r2 1.0000000000" in out


class TestExitCodes:
    def test_config_error(self, workdir, capsys):
        cfg = write_config(workdir / "c.json", grid={"bogus": 1})
        assert run(["assemble", "--config", str(cfg)], capsys)[0] == 2

    def test_duration_needed_without_shear(self, workdir, cache_dir, capsys):
        cfg = write_config(workdir / "c.json", shear={"alpha": 0.0})
        assert run(["evolve", "--profile", "fast", "--config", str(cfg), "--cache-dir", str(cache_dir)],
                   capsys)[0] == 2

    def test_numerical_violation(self, workdir, cache_dir, capsys):
        cfg = write_config(workdir / "c.json", shear={"alpha": 3.0}, dynamics={"duration": 10.0})
        code, _, err = run(["evolve", "--profile", "fast", "--config", str(cfg), "--cache-dir", str(cache_dir)],
                           capsys)
        assert code == 3 and "numerical invariant" in err

    def test_missing_config(self, workdir, capsys):
        assert run(["assemble", "--config", str(workdir / "none.json")], capsys)[0] == 4

    def test_fit_schema_error(self, workdir, capsys):
        p = workdir / "s.csv"
        p.write_text("x,y\n1,2\n2,oops\n")
        code, _, err = run(["fit", str(p), "--x", "x", "--y", "y"], capsys)
        assert code == 4 and ":3:" in err

    def test_corrupt_cache(self, workdir, cache_dir, capsys):
        d = workdir / "cc"
        shutil.copytree(cache_dir, d)
        for f in d.glob("L-*.usfk"):
            raw = bytearray(f.read_bytes())
            raw[-100] ^= 0xFF
            f.write_bytes(bytes(raw))
        assert run(["coeffs", "--profile", "fast", "--cache-dir", str(d)], capsys)[0] == 4


def test_a_hash():
    assert a_hash(np.eye(3)) == a_hash(np.eye(3).tolist())
    assert a_hash(np.eye(3)) != a_hash(2 * np.eye(3))
