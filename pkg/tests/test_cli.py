import json
import subprocess
import sys

import pytest

from boussinesq_annulus.cli import SCHEMA, dispatch, emit_config, git_hash, parse_config
from boussinesq_annulus.errors import ParseError, ValidationError

STABLE = """\
schema = 1
[grid]
Nr = 12
Ntheta = 16
[equilibrium]
potential = log_radial
gamma = 1.0
"""

SMALL_RUN = """\
[grid]
Nr = 12
Ntheta = 32
[equilibrium]
potential = uniform_vertical
profile = z
[time]
dt = 1e-3
T_end = 0.02
[seed]
kind = random
amplitude = 1e-2
seed = 7
rho_scale = 1.0
[output]
cadence = 5
gamma_lyap = 0.0
"""


def write(tmp_path, text, name="cfg.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestConfig:
    def test_defaults_filled(self):
        cfg = parse_config("schema = 1\n")
        for sec, keys in SCHEMA.items():
            for key, (_, default) in keys.items():
                assert cfg.get(sec, key) == default

    def test_negative_viscosity(self):
        with pytest.raises(ValidationError) as exc:
            parse_config("[physics]\n\nnu = -0.1\n")
        assert exc.value.key == "physics.nu" and exc.value.line == 3
        assert "nu" in str(exc.value)

    @pytest.mark.parametrize("text,key", [
        ("[grid]\na = 2.0\nb = 1.0\n", "grid.b"),
        ("[physics]\nrho_star = 0\n", "physics.rho_star"),
        ("[physics]\nnu = 0.1\nalpha = -0.2\n", "physics.alpha"),
        ("[seed]\nkind = gaussian\n", "seed.kind"),
        ("[grid]\nNr = many\n", "grid.Nr"),
    ])
    def test_validation_names_key(self, text, key):
        with pytest.raises(ValidationError) as exc:
            parse_config(text)
        assert exc.value.key == key

    @pytest.mark.parametrize("text,line", [
        ("[grid]\nNz = 3\n", 2),
        ("[mesh]\n", 1),
        ("[grid]\nNr = 8\nNr = 9\n", 3),
        ("just words\n", 1),
    ])
    def test_parse_errors(self, text, line):
        with pytest.raises(ParseError) as exc:
            parse_config(text)
        assert exc.value.line == line

    def test_round_trip(self):
        text = emit_config(parse_config(SMALL_RUN))
        assert emit_config(parse_config(text)) == text

    def test_overrides(self):
        cfg = parse_config(STABLE).with_overrides(["gamma=-1", "physics.nu=0.5"])
        assert cfg.get("equilibrium", "gamma") == -1.0 and cfg.get("physics", "nu") == 0.5
        with pytest.raises(ValidationError):
            parse_config(STABLE).with_overrides(["modes=3"])  # seed.modes or eig.modes

    def test_git_hash(self):
        # the hash git gives an empty blob
        assert git_hash(b"") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"


class TestDispatch:
    def test_help(self, capsys):
        assert dispatch(["--help"]) == 0
        assert "simulate" in capsys.readouterr().out

    def test_console_script_help(self):
        res = subprocess.run([sys.executable, "-m", "boussinesq_annulus.cli", "--help"],
                             capture_output=True, text=True)
        assert res.returncode == 0 and "usage" in res.stdout

    def test_classify(self, tmp_path, capsys):
        cfg = write(tmp_path, STABLE)
        assert dispatch(["classify", "--config", str(cfg), "--out", str(tmp_path / "runs")]) == 0
        assert capsys.readouterr().out.strip() == "Stable(h0=-1)"
        (run,) = (tmp_path / "runs").iterdir()
        assert (run / "config.ini").is_file() and (run / "manifest.json").is_file()

    def test_invalid_exit_code(self, tmp_path, capsys):
        cfg = write(tmp_path, "[physics]\nnu = -0.1\n")
        assert dispatch(["classify", "--config", str(cfg), "--out", str(tmp_path)]) == 2
        assert "nu" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert dispatch(["classify", "--config", str(tmp_path / "none.ini")]) == 2

    def test_sweep(self, tmp_path, capsys):
        cfg = write(tmp_path, STABLE)
        out = tmp_path / "runs"
        assert dispatch(["sweep", "--config", str(cfg), "--out", str(out), "--param", "gamma",
                         "--values", "-1,1"]) == 0
        text = capsys.readouterr().out
        lines = text.strip().splitlines()
        assert lines[1].startswith("-1") and "Unstable" in lines[1]
        assert lines[2].startswith("1") and "Stable(h0=-1)" in lines[2]
        (sweep,) = out.iterdir()
        assert len([p for p in sweep.iterdir() if p.is_dir()]) == 2

    def test_eig(self, tmp_path, capsys):
        cfg = write(tmp_path, STABLE + "[eig]\nmodes = 0-3\n")
        out = tmp_path / "runs"
        assert dispatch(["eig", "--config", str(cfg), "--out", str(out),
                         "--override", "gamma=-1", "--override", "profile=exp(z)"]) == 0
        (run,) = out.iterdir()
        summary = json.loads((run / "summary.json").read_text())
        assert summary["lambda"] > 0
        assert (run / "alpha.csv").read_text().startswith("m,s,alpha\n")

    def test_reruns_get_new_directories(self, tmp_path):
        cfg = write(tmp_path, STABLE)
        out = tmp_path / "runs"
        for _ in range(2):
            assert dispatch(["classify", "--config", str(cfg), "--out", str(out)]) == 0
        names = sorted(p.name for p in out.iterdir())
        assert len(names) == 2 and names[1] == names[0] + "-2"

    def test_numerical_failure_exit(self, tmp_path):
        cfg = write(tmp_path, SMALL_RUN)
        out = tmp_path / "runs"
        code = dispatch(["simulate", "--config", str(cfg), "--out", str(out),
                         "--override", "dt=5", "--override", "T_end=100", "--override", "amplitude=1"])
        assert code == 3
        (run,) = out.iterdir()
        assert json.loads((run / "summary.json").read_text())["status"] == "failed"


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    """The same small simulation with one and with three workers."""
    base = tmp_path_factory.mktemp("sim")
    cfg = write(base, SMALL_RUN)
    dirs = []
    for workers in (1, 3):
        out = base / f"w{workers}"
        assert dispatch(["simulate", "--config", str(cfg), "--out", str(out), "--workers", str(workers)]) == 0
        (run,) = out.iterdir()
        dirs.append(run)
    return dirs


class TestSimulateAndDiagnose:
    def test_outputs(self, runs):
        run = runs[0]
        header = (run / "timeseries.csv").read_text().splitlines()[0].split(",")
        assert header[:10] == ["t", "KE", "PE_coupling", "H1u", "L2ut", "Lyap", "L2_rho_total_drift",
                               "bc_res_a", "bc_res_b", "CFL"]
        assert json.loads((run / "summary.json").read_text())["status"] == "ok"

    def test_worker_count_does_not_change_outputs(self, runs):
        a, b = (json.loads((r / "manifest.json").read_text()) for r in runs)
        assert a == b

    def test_diagnose_is_reproducible(self, runs, capsys):
        run = runs[0]
        code = dispatch(["diagnose", str(run)])
        first = (run / "report.json").read_bytes()
        assert dispatch(["diagnose", "--run", str(run)]) == code
        assert (run / "report.json").read_bytes() == first
        report = json.loads(first)
        assert report["checks"]["bc_residual"]["pass"]
        assert (code == 0) == report["passed"]
        assert "PASS" in capsys.readouterr().out

    def test_diagnose_failure_exit(self, runs, tmp_path):
        run = runs[1]
        cfg = (run / "config.ini").read_text().replace("energy_tol = 1e-06", "energy_tol = 1e-300")
        (run / "config.ini").write_text(cfg)
        assert dispatch(["diagnose", str(run)]) == 4

    def test_diagnose_rejects_non_run(self, tmp_path):
        assert dispatch(["diagnose", str(tmp_path)]) == 2
