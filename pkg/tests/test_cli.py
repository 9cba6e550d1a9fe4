import json
from pathlib import Path

import numpy as np
import pytest

from aqx.cli import main
from aqx.config import OUTPUT_ENV
from aqx.spectral import read_aqxf, read_field, write_field, Grid, PeriodicField

ROOT = Path(__file__).resolve().parents[1]

SMALL = """
seed = 0

[operator]
name = "divergence_perturbed"
a = "{a}"

[integrand]
f = "{f}"
p = 4

[grids]
macro = [4, 4]
micro = [8, 8]

[solver]
random_starts = 2
n_max = 2
eps = ["1/2", "1/4"]

[twoscale]
u = [0.0, 1.0]
micro = [4, 4]
band = 1
"""


@pytest.fixture
def outdir(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path))
    return tmp_path


def write_config(path, a="3/4 + sin(2*pi*x1)/4", f="(xi1^2 + xi2^2 - 1)^2"):
    cfg = path / "run.toml"
    cfg.write_text(SMALL.format(a=a, f=f))
    return str(cfg)


def body(path):
    return json.loads(Path(path).read_text())["body"]


class TestExitCodes:
    def test_rank_ok(self, outdir, capsys):
        assert main(["rank", "--config", str(ROOT / "configs" / "ex36.toml")]) == 0
        assert "rank 1" in capsys.readouterr().out
        assert body(outdir / "rank.json")["rank"] == 1

    def test_parse_error_reports_offset(self, outdir, capsys):
        cfg = write_config(outdir, f="xi1^^2")
        assert main(["rank", "--config", cfg]) == 1
        err = capsys.readouterr().err
        assert "offset 4" in err and "config.load_config" in err

    def test_missing_config(self, outdir):
        assert main(["rank", "--config", str(outdir / "nope.toml")]) == 1

    def test_rank_violation(self, outdir, capsys):
        cfg = write_config(outdir, a="sin(2*pi*x1)")
        assert main(["rank", "--config", cfg]) == 2
        assert "operator.check_constant_rank: ConstantRankViolation" in capsys.readouterr().err

    def test_numerical_failure(self, outdir, capsys):
        cfg = write_config(outdir, f="exp(1000*xi1^2)")
        assert main(["envelope", "--config", cfg, "--xi", "1,0"]) == 3
        assert "envelope.qa_envelope: NoDescent" in capsys.readouterr().err

    def test_bad_point(self, outdir):
        assert main(["envelope", "--config", write_config(outdir), "--xi", "1,0,0"]) == 1


class TestCommands:
    def test_envelope_at_the_origin(self, outdir):
        cfg = write_config(outdir)
        assert main(["envelope", "--config", cfg, "--xi", "0,0", "--x", "0.25,0"]) == 0
        rep = body(outdir / "envelope.json")
        assert rep["points"][0]["value"] <= 5e-3
        assert rep["config"]["grids"]["micro"] == [8, 8]

    def test_envelope_sweep_writes_csv(self, outdir):
        assert main(["envelope", "--config", write_config(outdir), "--sweep=-1:1:3", "--out", "sw.json"]) == 0
        lines = (outdir / "sw.csv").read_text().splitlines()
        assert len(lines) == 1 + 9

    def test_project_round_trip(self, outdir):
        cfg = write_config(outdir)
        rng = np.random.default_rng(0)
        write_field(outdir / "w.aqxf", PeriodicField(Grid.micro((8, 8)), rng.standard_normal((8, 8, 2))))
        assert main(["project", "--config", cfg, "--in", str(outdir / "w.aqxf"), "--x", "0.3,0.1", "--out", "pw.aqxf"]) == 0
        pw = read_field(outdir / "pw.aqxf")
        assert pw.values.shape == (8, 8, 2)
        rep = body(outdir / "project.json")
        assert rep["idempotency_gap"] <= 1e-12 and rep["residual"] <= 1e-10

    def test_fhom_and_ehom(self, outdir):
        cfg = write_config(outdir)
        assert main(["fhom", "--config", cfg, "--xi", "1.5,0"]) == 0
        assert (outdir / "fhom.csv").read_text().startswith("point,n,value,residual")
        assert main(["ehom", "--config", cfg, "--u-expr", "0.2;0.5*sin(2*pi*x1)"]) == 0
        assert body(outdir / "ehom.json")["feasible"] is True
        assert main(["ehom", "--config", cfg, "--u-expr", "sin(2*pi*x1);0", "--out", "bad.json"]) == 0
        assert body(outdir / "bad.json")["value"] == "inf"

    def test_twoscale_modes(self, outdir):
        cfg = write_config(outdir)
        assert main(["twoscale", "--config", cfg, "--mode", "unfold", "--u-expr", "sin(2*pi*x1);0",
                     "--out", "unf.json"]) == 0
        assert body(outdir / "unf.json")["isometry_gap"][0] <= 1e-12
        t = read_aqxf(outdir / "unf_unfold_1_4.aqxf")
        assert t.shape[:-1] == (4, 4, 4, 4)
        assert main(["twoscale", "--config", cfg, "--mode", "generate", "--out-grid", "16", "16"]) == 0
        # the x-dependence of the projector leaves a residual that decays with eps
        res = body(outdir / "twoscale.json")["macro_residuals"]
        assert res[1] < res[0]
        assert main(["twoscale", "--config", cfg, "--mode", "residual", "--out", "res.json"]) == 0
        assert "pairing_gap" in body(outdir / "res.json")

    def test_relaxcheck(self, outdir):
        cfg = write_config(outdir, f="xi1^2 + xi2^2")
        assert main(["relaxcheck", "--config", cfg, "--u-expr", "0.5;0.2"]) == 0
        rep = body(outdir / "relaxcheck.json")
        assert np.allclose(rep["gaps"], 0.0, atol=1e-12)

    def test_report_body_is_deterministic(self, outdir):
        cfg = write_config(outdir)
        bodies = []
        for _ in range(2):
            assert main(["envelope", "--config", cfg, "--xi", "0.3,0.2"]) == 0
            bodies.append(body(outdir / "envelope.json"))
        assert bodies[0] == bodies[1]


class TestVerify:
    def test_subset(self, outdir, capsys):
        assert main(["verify", "--criteria", "2,4", "--once", "--out", "v.json"]) == 0
        out = capsys.readouterr().out
        assert "[PASS] criterion 2" in out and "[PASS] criterion 4" in out
        doc = json.loads((outdir / "v.json").read_text())
        assert [r["id"] for r in doc["body"]["criteria"]] == [2, 4]

    def test_operator_gate(self, outdir, capsys):
        cfg = outdir / "verify.toml"
        cfg.write_text('[verify]\ncriteria = [2]\n\n[verify.operator]\nN = 2\nd = 2\nl = 1\n'
                       'coeffs = [[["sin(2*pi*x1)", "0"]], [["0", "1"]]]\n')
        assert main(["verify", "--config", str(cfg), "--once"]) == 2
        assert "ConstantRankViolation" in capsys.readouterr().err
