from fractions import Fraction
from pathlib import Path

import pytest

from aqx.config import OUTPUT_ENV, load_config, parse_config
from aqx.errors import ConfigError

ROOT = Path(__file__).resolve().parents[1]

BASE = {
    "operator": {"name": "divergence_perturbed", "a": "3/4 + sin(2*pi*x1)/4"},
    "integrand": {"f": "(xi1^2 + xi2^2 - 1)^2", "p": 4},
    "grids": {"macro": [8, 8], "micro": 16},
    "solver": {"random_starts": 3, "n_max": 4, "eps": ["1/4", "1/8"]},
}


def with_(section, **kw):
    data = {k: dict(v) for k, v in BASE.items()}
    data[section] = {**data[section], **kw}
    return data


class TestParse:
    def test_shipped_example(self, monkeypatch):
        monkeypatch.delenv(OUTPUT_ENV, raising=False)
        cfg = load_config(ROOT / "configs" / "ex36.toml")
        assert cfg.op.name == "divergence_perturbed"
        assert cfg.integrand.p == 4.0
        assert cfg.macro == (8, 8) and cfg.micro == (16, 16)
        assert cfg.eps_list == [Fraction(1, 4), Fraction(1, 8), Fraction(1, 16)]
        assert cfg.output_dir == Path("out")

    def test_defaults_and_scalars(self):
        cfg = parse_config(BASE)
        assert cfg.micro == (16, 16)
        assert cfg.options.grid == (16, 16)
        assert cfg.options.random_starts == 3
        assert cfg.n_max == 4

    def test_output_env_overrides(self, monkeypatch, tmp_path):
        monkeypatch.setenv(OUTPUT_ENV, str(tmp_path))
        data = dict(BASE, output={"dir": "elsewhere"})
        assert parse_config(data).output_dir == tmp_path

    def test_threads_override(self):
        cfg = parse_config(BASE).with_threads(3)
        assert cfg.options.threads == 3
        with pytest.raises(ConfigError):
            cfg.with_threads(0)

    def test_metadata_is_plain(self):
        meta = parse_config(BASE).metadata()
        assert meta["grids"] == {"macro": [8, 8], "micro": [16, 16]}
        assert meta["solver"]["eps"] == ["1/4", "1/8"]

    def test_scaled_constant_and_custom(self):
        sc = parse_config(dict(BASE, operator={"name": "scaled_constant", "m": "2 + cos(2*pi*x2)",
                                               "A_c": [[[1, 0]], [[0, 1]]]}))
        assert sc.op.name == "scaled_constant"
        cu = parse_config(dict(BASE, operator={"name": "custom", "N": 2, "d": 2, "l": 1,
                                               "coeffs": [[["1", "0"]], [["0", "1"]]], "rank": 1}))
        assert cu.op.declared_rank == 1


class TestErrors:
    @pytest.mark.parametrize("data", [
        dict(BASE, bogus=1),
        with_("operator", name="laplace"),
        with_("integrand", f="xi1^^2"),
        with_("integrand", f="xi1^2 + z"),
        with_("integrand", p=1),
        with_("grids", macro=[7, 8]),
        with_("grids", micro=[16]),
        with_("solver", n_max=6),
        with_("solver", eps=["2/5"]),
        with_("solver", random_starts="many"),
        {k: v for k, v in BASE.items() if k != "integrand"},
    ])
    def test_rejected(self, data):
        with pytest.raises(ConfigError):
            parse_config(data)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "missing.toml")

    def test_bad_toml(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text("[operator\nname = 1\n")
        with pytest.raises(ConfigError):
            load_config(p)
