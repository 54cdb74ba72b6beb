import csv
import subprocess
import sys

import pytest

from itospde import cli
from itospde.errors import SolverDivergence

SMALL_ITO = """
[run]
seed = 17
paths = 130
scheme = semi-implicit

[problem]
bounds = 0 1
h = 0.1
K = 1
a = 1.0
nu = 0.5
u0 = sin_pi
K_bound = 0.5

[ito]
T = 0.2
dts = 0.02 0.01 0.005
lift_n = 4 16 64 256
"""

SMALL_MAXPRIN = """
[run]
seed = 5
paths = 100

[problem]
bounds = 0 1
h = 0.1
K = 1
a = 1.0
sigma = 1.0
u0 = neg_parabola

[maxprin]
T = 1.0
dts = 0.01 0.005
power_f = {power_f}
"""


def write(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def rows(path):
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    return list(csv.DictReader(lines))


def test_resolvent_verify_default_config(tmp_path):
    assert cli.run(["resolvent-verify", "--out", str(tmp_path)]) == 0
    table = rows(tmp_path / "resolvent.csv")
    assert len(table) > 100 and all(r["pass"] == "pass" for r in table)
    assert (tmp_path / "resolvent.png").stat().st_size > 0


def test_missing_seed_is_config_error(tmp_path):
    cfg = write(tmp_path, SMALL_ITO.replace("seed = 17\n", ""))
    assert cli.run(["ito-verify", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert cli.run(["ito-verify", "--config", cfg, "--seed", "17", "--paths", "100",
                    "--out", str(tmp_path / "o")]) in (0, 1)


@pytest.mark.parametrize("edit", [
    lambda t: t.replace("dts = 0.02 0.01 0.005", "dts = 0.01 0.02"),
    lambda t: t.replace("dts = 0.02 0.01 0.005", "dts = 0.02 0.01 0.004"),
    lambda t: t.replace("u0 = sin_pi", "u0 = no_such_field"),
    lambda t: t.replace("h = 0.1", "h = tiny"),
    lambda t: t.replace("[problem]", "problem]"),
])
def test_malformed_configs_exit_2(tmp_path, edit):
    cfg = write(tmp_path, edit(SMALL_ITO))
    assert cli.run(["ito-verify", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_missing_config_file_exit_2(tmp_path):
    assert cli.run(["simulate", "--config", str(tmp_path / "nope.ini"), "--out", str(tmp_path)]) == 2


def test_power_check_exit_codes(tmp_path):
    hot = write(tmp_path, SMALL_MAXPRIN.format(power_f=1.0), "hot.ini")
    cold = write(tmp_path, SMALL_MAXPRIN.format(power_f=-1.0), "cold.ini")
    assert cli.run(["maxprin", "--power-check", "--config", hot, "--out", str(tmp_path / "h")]) == 0
    assert cli.run(["maxprin", "--power-check", "--config", cold, "--out", str(tmp_path / "c")]) == 1


def test_maxprin_full_run(tmp_path):
    cfg = write(tmp_path, SMALL_MAXPRIN.format(power_f=1.0))
    assert cli.run(["maxprin", "--config", cfg, "--out", str(tmp_path)]) == 0
    table = rows(tmp_path / "maxprin.csv")
    assert [r["ledger"] for r in table] == ["positive_part", "positive_part", "power_check"]
    assert (tmp_path / "gronwall.csv").exists() and (tmp_path / "gronwall.png").exists()


def test_outputs_byte_identical_across_workers_and_hash_matches(tmp_path):
    cfg = write(tmp_path, SMALL_ITO)
    outs = []
    for i, w in enumerate(("1", "4", "4")):
        out = tmp_path / f"o{i}"
        code = cli.run(["ito-verify", "--config", cfg, "--out", str(out), "--workers", w])
        outs.append((code, out))
    names = ["ito_refinement.csv", "lifting.csv", "ito_checks.csv"]
    for name in names:
        ref = (outs[0][1] / name).read_bytes()
        assert all((o / name).read_bytes() == ref for _, o in outs[1:])
    assert len({c for c, _ in outs}) == 1
    meta = cli.read_csv_header(outs[0][1] / "ito_refinement.csv")
    normalized = (outs[0][1] / "config.normalized.ini").read_text()
    assert meta["config_hash"] == cli.config_hash(normalized)
    assert meta["seed"] == "17" and meta["scheme"] == "semi-implicit" and meta["rng"].startswith("numpy-PCG64")


def test_seed_override_changes_hash(tmp_path):
    cfg = write(tmp_path, SMALL_ITO.replace("[ito]", "[simulate]\nT = 0.05\ndt = 0.01\n[ito]"))
    assert cli.run(["simulate", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert cli.run(["simulate", "--config", cfg, "--seed", "18", "--out", str(tmp_path / "b")]) == 0
    ha = cli.read_csv_header(tmp_path / "a" / "trajectory.csv")
    hb = cli.read_csv_header(tmp_path / "b" / "trajectory.csv")
    assert ha["config_hash"] != hb["config_hash"] and hb["seed"] == "18"


def test_simulate_default(tmp_path):
    assert cli.run(["simulate", "--out", str(tmp_path)]) == 0
    table = rows(tmp_path / "trajectory.csv")
    assert len(table) == 4 * 1001 and (tmp_path / "trajectory.png").exists()


def test_assumption_gate_and_override(tmp_path):
    bad = SMALL_ITO.replace("a = 1.0", "a = 0.4\nsigma = 1.0").replace("[ito]", "[simulate]\nT = 0.05\ndt = 0.01\n[ito]")
    cfg = write(tmp_path, bad)
    assert cli.run(["simulate", "--config", cfg, "--out", str(tmp_path / "a")]) == 1
    assert cli.run(["simulate", "--config", cfg, "--out", str(tmp_path / "b"), "--override-assumptions"]) == 0


def test_solver_failure_exit_3(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise SolverDivergence("cap reached", iterations=1, residual=1.0)

    monkeypatch.setattr(cli, "verify_resolvent_properties", boom)
    assert cli.run(["resolvent-verify", "--out", str(tmp_path)]) == 3


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "itospde", "maxprin", "--power-check", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "detected" in proc.stdout
