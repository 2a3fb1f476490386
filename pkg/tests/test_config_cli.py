import os

import numpy as np
import pytest

from brwlab.cli import main
from brwlab.config import parse_config, parse_config_text, serialize_config
from brwlab.errors import ValidationError
from brwlab.io_utils import parse_grid_spec, read_csv, read_fit_summary

MINIMAL = """\
[experiment]
kind = simulate
replicas = 50
seed = 3

[kernel]
family = lazy_nearest_neighbor
q0 = 0.2

[domain]
space = discrete
dimension = 1
side = 11

[run]
lambda = 3.0
t_max = 20.0
n_cap = 200
"""

CONT = """\
[experiment]
kind = couple
replicas = 40
seed = 5

[kernel]
family = uniform_ball
radius = 1.0

[domain]
space = continuous
dimension = 1
side = 10

[run]
lambda = 5.0
t_max = 10.0
n_cap = 200
"""


class TestConfigParsing:
    def test_minimal_config_with_defaults(self):
        cfg = parse_config_text("[experiment]\nkind = simulate\n")
        assert cfg.replicas == 1000
        assert cfg.seed == 0
        assert cfg.t_max == 100.0
        with pytest.raises(ValidationError):
            cfg.params()  # no kernel/domain sections

    def test_full_config(self):
        cfg = parse_config_text(MINIMAL)
        params = cfg.params()
        assert params.lam == 3.0
        assert params.domain.side == 11

    def test_negative_lambda_names_field(self):
        bad = MINIMAL.replace("lambda = 3.0", "lambda = -1")
        with pytest.raises(ValidationError, match="lambda"):
            parse_config_text(bad)

    def test_unknown_key_rejected(self):
        bad = MINIMAL + "\nwarp_speed = 9\n"
        with pytest.raises(ValidationError, match="warp_speed"):
            parse_config_text(bad)

    def test_unknown_section_rejected(self):
        bad = MINIMAL + "\n[quantum]\nfoo = 1\n"
        with pytest.raises(ValidationError, match="quantum"):
            parse_config_text(bad)

    def test_cross_field_space_mismatch(self):
        bad = MINIMAL.replace("family = lazy_nearest_neighbor\nq0 = 0.2",
                              "family = uniform_ball\nradius = 1.0")
        with pytest.raises(ValidationError, match="mismatch"):
            parse_config_text(bad)

    def test_all_errors_reported_at_once(self):
        bad = MINIMAL.replace("lambda = 3.0", "lambda = -1").replace(
            "t_max = 20.0", "t_max = 0"
        )
        with pytest.raises(ValidationError) as exc:
            parse_config_text(bad)
        msg = str(exc.value)
        assert "lambda" in msg and "t_max" in msg

    def test_roundtrip_identity(self):
        for text in (MINIMAL, CONT):
            cfg1 = parse_config_text(text)
            cfg2 = parse_config_text(serialize_config(cfg1))
            assert cfg1 == cfg2
            assert serialize_config(cfg1) == serialize_config(cfg2)

    def test_extra_section_roundtrip(self):
        text = CONT + "\n[couple]\nresolution = auto\n"
        cfg = parse_config_text(text)
        assert cfg.extra["resolution"] == "auto"
        assert parse_config_text(serialize_config(cfg)) == cfg

    def test_duplicate_key_rejected(self):
        bad = MINIMAL + "\n[extra_dup]\n"
        with pytest.raises(ValidationError):
            parse_config_text(MINIMAL.replace("seed = 3", "seed = 3\nseed = 4"))


class TestGridSpec:
    def test_range_spec(self):
        g = parse_grid_spec("0:10:2")
        assert list(g) == [0, 2, 4, 6, 8, 10]

    def test_list_spec(self):
        assert list(parse_grid_spec("1,2.5,4")) == [1.0, 2.5, 4.0]

    def test_bad_spec(self):
        with pytest.raises(ValidationError):
            parse_grid_spec("0:10")
        with pytest.raises(ValidationError):
            parse_grid_spec("a:b:c")


@pytest.fixture()
def conf_file(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text(MINIMAL)
    return str(path)


@pytest.fixture()
def cont_conf_file(tmp_path):
    path = tmp_path / "couple.conf"
    path.write_text(CONT)
    return str(path)


class TestCLI:
    def test_simulate_roundtrip(self, conf_file, tmp_path):
        out = str(tmp_path / "records.csv")
        rc = main(["simulate", "--config", conf_file, "--out", out,
                   "--out-dir", str(tmp_path), "--quiet", "--threads", "1"])
        assert rc == 0
        header, rows = read_csv(out)
        assert header == ["replica", "seed", "outcome", "tau", "peak_pop", "events"]
        assert len(rows) == 50
        assert os.path.exists(tmp_path / "manifest.txt")

    def test_zero_replicas_empty_csv(self, conf_file, tmp_path):
        out = str(tmp_path / "empty.csv")
        rc = main(["simulate", "--config", conf_file, "--replicas", "0",
                   "--out", out, "--out-dir", str(tmp_path), "--quiet"])
        assert rc == 0
        header, rows = read_csv(out)
        assert header == ["replica", "seed", "outcome", "tau", "peak_pop", "events"]
        assert rows == []

    def test_validation_exit_code(self, tmp_path):
        bad = tmp_path / "bad.conf"
        bad.write_text(MINIMAL.replace("lambda = 3.0", "lambda = -2"))
        rc = main(["simulate", "--config", str(bad), "--out",
                   str(tmp_path / "x.csv"), "--out-dir", str(tmp_path), "--quiet"])
        assert rc == 2

    def test_missing_config_exit_code(self, tmp_path):
        rc = main(["simulate", "--config", str(tmp_path / "none.conf"),
                   "--out", str(tmp_path / "x.csv"), "--out-dir", str(tmp_path),
                   "--quiet"])
        assert rc == 2

    def test_genealogy_dump(self, conf_file, tmp_path):
        out = str(tmp_path / "records.csv")
        gene = str(tmp_path / "gene.jsonl")
        rc = main(["simulate", "--config", conf_file, "--replicas", "5",
                   "--out", out, "--genealogy", gene, "--out-dir", str(tmp_path),
                   "--quiet"])
        assert rc == 0
        assert os.path.getsize(gene) > 0

    def test_percolate_tail_fit_pipeline(self, tmp_path):
        perc = str(tmp_path / "perc.csv")
        rc = main(["percolate", "--p", "0.8", "--height", "100", "--replicas",
                   "20000", "--seed", "3", "--out", perc, "--out-dir",
                   str(tmp_path), "--quiet"])
        assert rc == 0
        tail = str(tmp_path / "tail.csv")
        rc = main(["tail", "--in", perc, "--grid", "0:50:1", "--out", tail,
                   "--out-dir", str(tmp_path), "--quiet"])
        assert rc == 0
        fit = str(tmp_path / "fit.txt")
        rc = main(["fit", "--in", tail, "--out", fit, "--floor", "1e-3",
                   "--ceil", "0.1", "--out-dir", str(tmp_path), "--quiet"])
        assert rc == 0
        summary = read_fit_summary(fit)
        assert float(summary["q_hat"]) > 0

    def test_fit_insufficient_points_exit_2(self, tmp_path):
        tail = tmp_path / "tail.csv"
        tail.write_text("s,tail,lo,hi\n0.0,0.4,0.3,0.5\n1.0,0.2,0.1,0.3\n")
        rc = main(["fit", "--in", str(tail), "--out", str(tmp_path / "f.txt"),
                   "--out-dir", str(tmp_path), "--quiet"])
        assert rc == 2

    def test_tail_rejects_schema_mismatch(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("a,b\n1,2\n")
        rc = main(["tail", "--in", str(bad), "--grid", "0:5:1",
                   "--out", str(tmp_path / "t.csv"), "--out-dir", str(tmp_path),
                   "--quiet"])
        assert rc == 2

    def test_couple_with_kernel_dump(self, cont_conf_file, tmp_path):
        out = str(tmp_path / "couple.csv")
        dump = str(tmp_path / "an.csv")
        rc = main(["couple", "--config", cont_conf_file, "--resolution", "auto",
                   "--out", out, "--dump-kernel", dump, "--out-dir", str(tmp_path),
                   "--quiet"])
        assert rc == 0
        header, rows = read_csv(out)
        assert header == [
            "replica", "grid_outcome", "cont_outcome", "max_grid_pop",
            "max_cont_pop", "domination_ok",
        ]
        kheader, krows = read_csv(dump)
        assert kheader == ["j_1", "mass"]

    def test_oracle_prints(self, capsys):
        rc = main(["oracle", "--lambda", "2.0", "--t", "1.0"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "extinction_probability=0.5" in out
        assert "cdf_at_t=" in out

    def test_probe(self, conf_file, tmp_path):
        out = str(tmp_path / "probe.csv")
        rc = main(["probe", "--config", conf_file, "--grid=-4:4:4",
                   "--replicas", "200", "--out", out, "--out-dir", str(tmp_path),
                   "--quiet"])
        assert rc == 0
        header, rows = read_csv(out)
        assert header == ["y_1", "freq", "lo", "hi", "replicas"]
        assert len(rows) == 3

    def test_renorm_search_and_run(self, conf_file, tmp_path):
        rc = main(["renorm", "--config", conf_file, "--search", "--p", "0.7",
                   "--m-grid", "1,2", "--t-grid", "4", "--search-replicas", "150",
                   "--out-dir", str(tmp_path), "--quiet"])
        assert rc == 0
        block = str(tmp_path / "block.txt")
        assert os.path.exists(block)
        header, rows = read_csv(str(tmp_path / "block_matrix.csv"))
        assert header == ["i", "j", "c_hat", "ci_lo", "ci_hi"]
        assert len(rows) == 4
        rc = main(["renorm", "--config", conf_file, "--block", block,
                   "--replicas", "10", "--height", "4", "--out-dir", str(tmp_path),
                   "--quiet"])
        assert rc == 0
        header, rows = read_csv(str(tmp_path / "ledger_summary.csv"))
        assert header == ["replica", "tau", "g", "bound_ok", "perc_survived"]
        assert len(rows) == 10


class TestManifestDeterminism:
    def run_pipeline(self, tmp_path, name, conf_text):
        base = tmp_path / name
        base.mkdir()
        conf = base / "run.conf"
        conf.write_text(conf_text)
        out = str(base / "records.csv")
        assert main(["simulate", "--config", str(conf), "--out", out,
                     "--out-dir", str(base), "--quiet", "--threads", "2"]) == 0
        tail = str(base / "tail.csv")
        assert main(["tail", "--in", out, "--grid", "0:10:0.5", "--out", tail,
                     "--out-dir", str(base), "--quiet"]) == 0
        return (base / "manifest.txt").read_bytes()

    def test_identical_config_and_seed_identical_manifest(self, tmp_path):
        m1 = self.run_pipeline(tmp_path, "a", MINIMAL)
        m2 = self.run_pipeline(tmp_path, "b", MINIMAL)
        assert m1 == m2

    def test_different_seed_changes_manifest(self, tmp_path):
        m1 = self.run_pipeline(tmp_path, "c", MINIMAL)
        m2 = self.run_pipeline(tmp_path, "d", MINIMAL.replace("seed = 3", "seed = 4"))
        assert m1 != m2
