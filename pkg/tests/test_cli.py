import csv
import json

import numpy as np
import pytest

from swe4dvar import cli
from swe4dvar.adi import NonConvergence, SweModel
from swe4dvar.pod import load_basis
from swe4dvar.rom import load_rom

SMALL = ["--nx", "9", "--ny", "7", "--nt", "6", "--t-final", "600"]


def test_forward_writes_trajectory(tmp_path):
    assert cli.main(["forward", *SMALL, "--out", str(tmp_path)]) == 0
    data = np.load(tmp_path / "trajectory.npz")
    assert data["correctors"].shape == (6, 3 * 63)
    assert data["predictors"].shape == (5, 3 * 63)
    assert float(data["dt"]) == pytest.approx(120.0)


def test_rom_build_persists_bases_and_operators(tmp_path):
    assert cli.main(["rom-build", *SMALL, "--variant", "hybrid", "--k", "6", "--m", "5",
                     "--out", str(tmp_path)]) == 0
    for name in ("u", "v", "phi"):
        U, s = load_basis(tmp_path / f"basis_{name}.podb")
        assert U.shape == (40, 6) and s.shape == (6,)
        np.testing.assert_allclose(U.T @ U, np.eye(6), atol=1e-12)
    tensors, deim = load_rom(tmp_path / "rom.romt")
    assert set(tensors.tensors) == {"F12", "F23", "F31", "F33"}
    assert all(d.m == 5 for d in deim.terms.values())


def test_rom_build_refuses_full_variant(tmp_path, capsys):
    assert cli.main(["rom-build", *SMALL, "--variant", "full", "--out", str(tmp_path)]) == 2
    assert "reduced variant" in capsys.readouterr().err


def test_assimilate_csv_and_json(tmp_path):
    out = tmp_path / "a"
    assert cli.main(["assimilate", *SMALL, "--variant", "tensorial", "--k", "8", "--mxfun", "4",
                     "--n-out", "1", "--seed", "5", "--out", str(out)]) == 0
    rows = list(csv.reader(l for l in (out / "runs.csv").open() if not l.startswith("#")))
    assert rows[1][rows[0].index("seed")] == "5"
    assert cli.main(["assimilate", *SMALL, "--variant", "full", "--format", "json", "--out", str(out)]) == 0
    doc = json.loads((out / "runs.json").read_text())
    assert doc["records"][0]["variant"] == "full"
    assert doc["provenance"]["config"]["nx"] == 9


def test_config_file_with_overrides(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[mesh]\nnx = 9\nny = 7\n[time]\nnt = 6\ndt = 120\n[reduction]\nvariant = full\n"
                   "[optimizer]\nfull_maxfun = 3\n")
    out = tmp_path / "o"
    assert cli.main(["assimilate", "--config", str(cfg), "--nt", "4", "--out", str(out)]) == 0
    doc = (out / "runs.csv").read_text()
    assert "full 9x7" in doc
    prov = json.loads(doc.splitlines()[0].split("provenance: ", 1)[1])
    assert prov["config"]["nt"] == 4 and prov["config"]["t_final"] == pytest.approx(360.0)


def test_verify_outputs(tmp_path, capsys):
    assert cli.main(["verify", *SMALL, "--variant", "tensorial", "--k", "8", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "verify.csv").read_text().splitlines()
    assert lines[0] == "system,scale,adj_test,tl_test,adj_dev,tl_dev"
    assert len(lines) == 1 + 14
    assert "adj_test=" in capsys.readouterr().out


def test_benchmark_empty_sweep(tmp_path):
    assert cli.main(["benchmark", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "runs.csv").exists() and (tmp_path / "history.csv").exists()


def test_benchmark_with_configs(tmp_path):
    paths = []
    for i, variant in enumerate(("tensorial", "deim")):
        p = tmp_path / f"{i}.ini"
        p.write_text(f"[mesh]\nnx = 9\nny = 7\n[time]\nnt = 6\nt_final = 600\n[reduction]\nvariant = {variant}\n"
                     "k = 6\nm = 6\n[optimizer]\nmxfun = 3\nn_out = 1\n")
        paths.append(str(p))
    out = tmp_path / "b"
    assert cli.main(["benchmark", *paths, "--format", "json", "--out", str(out), "--step-timing"]) == 0
    recs = json.loads((out / "runs.json").read_text())["records"]
    assert [r["variant"] for r in recs] == ["tensorial", "deim"]
    assert all(r["online_step_time"] > 0 for r in recs)


@pytest.mark.parametrize("args, code", [
    (["assimilate", "--nx", "2", "--ny", "7"], 2),
    (["assimilate", "--config", "/nonexistent/run.ini"], 4),
    (["benchmark", "/nonexistent/run.ini"], 4),
])
def test_exit_codes(args, code, tmp_path):
    assert cli.main([*args, "--out", str(tmp_path)] if args[0] != "benchmark" else args) == code


def test_unwritable_output_is_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["forward", *SMALL, "--out", str(blocker / "sub")]) == 4


def test_numerical_failure_exit_code(monkeypatch, tmp_path):
    def fail(self, w0):
        raise NonConvergence("stalled")

    monkeypatch.setattr(SweModel, "forward", fail)
    assert cli.main(["forward", *SMALL, "--out", str(tmp_path)]) == 3


def test_version_and_usage(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["--version"])
    assert info.value.code == 0
    with pytest.raises(SystemExit) as info:
        cli.main([])
    assert info.value.code == 2
