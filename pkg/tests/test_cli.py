import json

import pytest

from mfdelay import cli

FLAT = """# consumption run
scenario = consumption
t_end = 1.0
delta = 0.4     # delay
n_steps_per_delay = 20
n_paths = 500
seed = 9
xi1 = 1
beta = 0.0
"""


def write(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_flat_and_json_parse_identically(tmp_path):
    flat = cli.load_config(write(tmp_path, FLAT))
    doc = {"scenario": "consumption", "t_end": 1.0, "delta": 0.4, "n_steps_per_delay": 20, "n_paths": 500,
           "seed": 9, "xi1": 1, "beta": "0.0"}
    js = cli.load_config(write(tmp_path, json.dumps(doc), "run.json"))
    assert flat == js and flat.config_hash == js.config_hash


def test_nested_json_sections(tmp_path):
    doc = {"scenario": "lq", "picard": {"damping": 0.7, "tol": 1e-4, "max_iter": 9}, "lsmc": {"degree": 1, "ridge": 0}}
    cfg = cli.load_config(write(tmp_path, json.dumps(doc), "lq.json"))
    assert (cfg.picard_damping, cfg.picard_tol, cfg.picard_max_iter) == (0.7, 1e-4, 9)
    assert (cfg.lsmc_degree, cfg.lsmc_ridge) == (1, 0.0)


def test_seed_override_changes_hash(tmp_path):
    path = write(tmp_path, FLAT)
    a, b = cli.load_config(path), cli.load_config(path, seed_override=10)
    assert b.seed == 10 and a.config_hash != b.config_hash


@pytest.mark.parametrize(
    "line",
    ["delta = 0", "h = 0.5", "n_paths = 1", "scenario = other", "bogus = 1", "n_paths = 2.5",
     "beta = ramp:1", "picard_damping = 1.5", "delta = 0.3", "seed = -1", "xi1 = 0"],
)
def test_invalid_config_exit_2_without_outputs(tmp_path, line, capsys):
    out = tmp_path / "out"
    code = cli.main(["run", str(write(tmp_path, FLAT + line + "\n")), "--out", str(out)])
    assert code == cli.EXIT_CONFIG
    assert not out.exists()
    assert "config error" in capsys.readouterr().err


def test_missing_scenario(tmp_path):
    assert cli.run(write(tmp_path, "h = 0.7\n"), tmp_path / "o") == cli.EXIT_CONFIG
    assert cli.run(tmp_path / "nope.cfg", tmp_path / "o") == cli.EXIT_CONFIG


def test_ramp_parsing():
    f = cli.parse_time_function("ramp:0.5:2")
    assert f(0.25) == pytest.approx(1.0)
    assert cli.parse_time_function("3")(0.1) == 3.0


def test_consumption_outputs(tmp_path, capsys):
    out = tmp_path / "out"
    code = cli.main(["run", str(write(tmp_path, FLAT)), "--out", str(out)])
    assert code == cli.EXIT_OK
    printed = capsys.readouterr().out.splitlines()
    assert printed and all(line.split()[0] in ("PASS", "FAIL") for line in printed)
    names = {"p.csv", "control.csv", "state_moments.csv", "report.json", "dominance.csv"}
    assert names == {p.name for p in out.iterdir()}
    lines = (out / "p.csv").read_text().splitlines()
    assert lines[0].startswith("# mfdelay 0.1.0 config_sha256=")
    assert lines[1] == "t,p"
    t0, p0 = lines[2].split(",")
    assert float(t0) == 0.0 and abs(float(p0) - 1.62) <= 1e-12
    for name in names - {"report.json"}:
        assert (out / name).read_text().startswith(lines[0] + "\n")
    report = json.loads((out / "report.json").read_text())
    assert report["meta"]["config_sha256"] == lines[0].split("=")[1]
    assert all(g["pass"] for g in report["gates"])


def test_quiet_suppresses_summary(tmp_path, capsys):
    assert cli.main(["run", str(write(tmp_path, FLAT)), "--out", str(tmp_path / "o"), "--quiet"]) == 0
    assert capsys.readouterr().out == ""


def test_fbm_stats_scenario(tmp_path):
    cfg = "scenario = fbm-stats\nh = 0.75\nt_end = 1\ndelta = 0.25\nn_steps_per_delay = 4\nn_paths = 20000\nseed = 3\n"
    out = tmp_path / "o"
    assert cli.run(write(tmp_path, cfg), out, quiet=True) == cli.EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert set(report["samplers"]) == {"cholesky", "circulant"}
    assert report["samplers"]["cholesky"]["max_abs_z"] <= 4


def test_gate_failure_exit_1(tmp_path):
    cfg = "scenario = isometry\nt_end = 1\ndelta = 0.25\nn_steps_per_delay = 4\nn_paths = 2000\ntol_sigmas = 1e-9\n"
    assert cli.run(write(tmp_path, cfg), tmp_path / "o", quiet=True) == cli.EXIT_GATE


def test_numerical_failure_exit_3(tmp_path):
    cfg = ("scenario = lq\nt_end = 1\ndelta = 0.4\nn_steps_per_delay = 4\nn_paths = 2000\n"
           "picard_damping = 1\npicard_max_iter = 2\nbeta1 = 0.5\n")
    assert cli.run(write(tmp_path, cfg), tmp_path / "o", quiet=True) == cli.EXIT_NUMERIC


def test_lq_and_verify_scenarios(tmp_path):
    lq = "scenario = lq\nt_end = 1\ndelta = 0.4\nn_steps_per_delay = 4\nn_paths = 4000\nbeta1 = ramp:0.5:0\n"
    out = tmp_path / "lq"
    assert cli.run(write(tmp_path, lq), out, quiet=True) == cli.EXIT_OK
    assert (out / "control.csv").read_text().splitlines()[1] == "particle_id,t,alpha"
    ver = "scenario = verify\nproblem = lq\nt_end = 1\ndelta = 0.4\nn_steps_per_delay = 4\nn_paths = 4000\n"
    out2 = tmp_path / "ver"
    code = cli.run(write(tmp_path, ver, "v.cfg"), out2, quiet=True)
    report = json.loads((out2 / "report.json").read_text())
    assert {"necessary", "dominance", "gateaux"} <= set(report)
    assert code in (cli.EXIT_OK, cli.EXIT_GATE)
    assert code == (cli.EXIT_OK if all(g["pass"] for g in report["gates"]) else cli.EXIT_GATE)


def test_rerun_is_byte_identical(tmp_path):
    path = write(tmp_path, FLAT.replace("beta = 0.0", "beta = 0.3"))
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.run(path, a, quiet=True) == cli.run(path, b, quiet=True)
    for f in a.iterdir():
        assert f.read_bytes() == (b / f.name).read_bytes()
