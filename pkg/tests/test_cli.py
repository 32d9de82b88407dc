import csv
import json
import shutil
import subprocess
import sys

import pytest

from daquant.cli import EXIT_CONFIG, EXIT_FAIL, EXIT_OK, main, summarize, summary_table
from daquant.config import ConfigError, load_config, parse_config
from daquant.quant import bits_bound, set_size
from daquant.verify import brute_force_set, golden_fixture_path

LSQ_CFG = """\
# small least-squares run
task.kind = least_squares
task.d = 4
task.N = 60
schemes = daqu_full, dataq_only, unquantized
train.n = 120
train.lr = 0.2
train.D_radius = 2.0
train.record_every = 40
"""


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "lsq.cfg"
    path.write_text(LSQ_CFG)
    return path


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


class TestConfig:
    def test_defaults_and_echo(self):
        cfg = load_config(None)
        again = parse_config(cfg.dumps())
        assert again.values == cfg.values

    def test_overrides_after_file(self, cfg_file):
        cfg = load_config(cfg_file, ["train.n=5", "task.d = 2"], seed=3)
        assert cfg["train.n"] == 5 and cfg["task.d"] == 2 and cfg["seed"] == 3

    @pytest.mark.parametrize("text,key", [
        ("task.colour = red", "task.colour"),
        ("train.lr = fast", "train.lr"),
        ("schemes = daqu_full, warp", "schemes"),
        ("train.shared_randomness = maybe", "train.shared_randomness"),
    ])
    def test_errors_name_the_key(self, text, key):
        with pytest.raises(ConfigError, match=rf"cfg:1: {key}:"):
            parse_config(text, "cfg")

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="cfg:2"):
            parse_config("# ok\nnonsense\n", "cfg")

    @pytest.mark.parametrize("override,key", [
        ("schemes=", "schemes"),
        ("train.lr=-1", "train.lr"),
        ("selection.c=0.5", "selection.c"),
        ("train.batch_size=0", "train.batch_size"),
        ("quant.mode=batch_max", "quant.mode"),
    ])
    def test_validation_errors(self, override, key):
        with pytest.raises(ConfigError, match=rf"^{key}:"):
            load_config(None, [override])

    def test_zero_schedule_constant_allowed(self):
        assert load_config(None, ["selection.kind=theory", "selection.c=0"])["selection.c"] == 0.0


class TestRun:
    def test_outputs_and_determinism(self, capsys, cfg_file, tmp_path):
        outs = []
        for name in ("a", "b"):
            code, out, _ = run_cli(capsys, "run", "--config", cfg_file, "--seed", 7, "--out", tmp_path / name)
            assert code == EXIT_OK
            outs.append(tmp_path / name)
        names = sorted(p.name for p in outs[0].iterdir())
        assert names == ["daqu_full.csv", "dataq_only.csv", "resolved.cfg", "unquantized.csv"]
        for n in names:
            assert (outs[0] / n).read_bytes() == (outs[1] / n).read_bytes()

    def test_csv_columns(self, capsys, cfg_file, tmp_path):
        run_cli(capsys, "run", "--config", cfg_file, "--out", tmp_path)
        lines = (tmp_path / "daqu_full.csv").read_text().splitlines()
        assert lines[0].startswith("# schema_version=")
        header = lines[1].split(",")
        assert header[:6] == ["iteration", "cumulative_bits", "train_loss", "grad_norm",
                              "transmitted_fraction", "cap_exceeded_count"]
        rows = list(csv.DictReader(lines[1:]))
        assert [int(r["iteration"]) for r in rows] == [40, 80, 120]

    def test_resolved_config_reruns(self, capsys, cfg_file, tmp_path):
        run_cli(capsys, "run", "--config", cfg_file, "--seed", 4, "--out", tmp_path / "a")
        run_cli(capsys, "run", "--config", tmp_path / "a" / "resolved.cfg", "--out", tmp_path / "b")
        assert (tmp_path / "a" / "daqu_full.csv").read_text() == (tmp_path / "b" / "daqu_full.csv").read_text()

    def test_missing_config_writes_nothing(self, capsys, tmp_path):
        out = tmp_path / "never"
        code, _, err = run_cli(capsys, "run", "--config", tmp_path / "nope.cfg", "--out", out)
        assert code == EXIT_CONFIG and "cannot read config" in err
        assert not out.exists()

    def test_bad_override_writes_nothing(self, capsys, cfg_file, tmp_path):
        code, _, err = run_cli(capsys, "run", "--config", cfg_file, "--set", "train.momentum=2",
                               "--out", tmp_path / "x")
        assert code == EXIT_CONFIG and "train.momentum" in err
        assert not (tmp_path / "x").exists()

    def test_thread_cap(self, capsys, cfg_file, tmp_path, monkeypatch):
        run_cli(capsys, "run", "--config", cfg_file, "--out", tmp_path / "serial")
        monkeypatch.setenv("DAQUANT_THREADS", "3")
        run_cli(capsys, "run", "--config", cfg_file, "--out", tmp_path / "pool")
        for name in ("daqu_full.csv", "unquantized.csv"):
            assert (tmp_path / "serial" / name).read_text() == (tmp_path / "pool" / name).read_text()
        monkeypatch.setenv("DAQUANT_THREADS", "zero")
        assert run_cli(capsys, "run", "--config", cfg_file, "--out", tmp_path / "bad")[0] == EXIT_CONFIG


class TestCompare:
    def test_identical_schemes(self, capsys, tmp_path):
        code, out, _ = run_cli(capsys, "compare", "--set", "schemes=dataq_only,dataq_only,unquantized",
                               "--set", "train.n=30", "--out", tmp_path)
        assert code == EXIT_OK
        rows = list(csv.DictReader((tmp_path / "summary.csv").read_text().splitlines()))
        assert [r["scheme"] for r in rows] == ["dataq_only", "unquantized"]
        assert float(rows[0]["ratio_to_first"]) == 1.0
        assert float(rows[1]["ratio_to_first"]) > 1.0
        assert "bits/iteration" in out

    def test_target_not_reached(self, capsys, tmp_path):
        code, out, _ = run_cli(capsys, "compare", "--set", "schemes=unquantized,dataq_only",
                               "--set", "train.n=20", "--set", "compare.target_loss=1e-9", "--out", tmp_path)
        assert code == EXIT_OK
        assert "not reached" in out and "undefined" in out
        rows = list(csv.DictReader((tmp_path / "summary.csv").read_text().splitlines()))
        assert rows[0]["bits_to_target"] == "" and rows[0]["ratio_to_first"] == ""

    def test_empty_schemes(self, capsys, tmp_path):
        code, _, err = run_cli(capsys, "compare", "--set", "schemes=", "--out", tmp_path / "o")
        assert code == EXIT_CONFIG and "schemes" in err

    def test_summary_ratio_uses_bits_to_target(self):
        from daquant.sim import run_experiment
        cfg = load_config(None, ["schemes=unquantized,dataq_only", "train.n=200", "train.record_every=10"])
        results = {s: run_experiment(cfg.experiment(s)) for s in cfg.schemes}
        target = max(r.records[-1].train_loss for r in results.values()) * 1.5
        rows = summarize(results, target)
        assert rows[0]["ratio_to_first"] == 1.0
        assert rows[1]["ratio_to_first"] == rows[1]["bits_to_target"] / rows[0]["bits_to_target"]
        assert "target loss:" in summary_table(rows, target)


class TestVerify:
    def test_passes(self, capsys):
        code, out, _ = run_cli(capsys, "verify")
        assert code == EXIT_OK
        assert "FAIL" not in out and out.strip().endswith("0 failed")

    def test_module_filter(self, capsys):
        code, out, _ = run_cli(capsys, "verify", "--module", "quant-core")
        lines = [l for l in out.splitlines() if l.startswith(("PASS", "FAIL"))]
        assert code == EXIT_OK and lines
        assert all(" quant-core/" in l for l in lines)

    def test_unknown_module(self, capsys):
        assert run_cli(capsys, "verify", "--module", "nope")[0] == EXIT_CONFIG

    def test_corrupted_fixture(self, capsys, tmp_path):
        bad = tmp_path / "wire_golden.json"
        data = json.loads(golden_fixture_path().read_text())
        data["cases"]["skip"] = "0300000001"
        bad.write_text(json.dumps(data))
        code, out, _ = run_cli(capsys, "verify", "--module", "sim", "--fixtures", bad)
        assert code == EXIT_FAIL
        assert "golden fixture wire_golden.json" in out and "'skip'" in out

    def test_unreadable_fixture(self, capsys, tmp_path):
        bad = tmp_path / "broken.json"
        bad.write_text("{")
        code, out, _ = run_cli(capsys, "verify", "--module", "sim", "--fixtures", bad)
        assert code == EXIT_FAIL and "broken.json" in out


def parse_enumerate(out):
    return dict(line.split("=", 1) for line in out.split())


class TestEnumerate:
    def test_smallest(self, capsys):
        code, out, _ = run_cli(capsys, "enumerate", 1, 2)
        vals = parse_enumerate(out)
        assert code == EXIT_OK and vals["set_size"] == "3" and vals["bits"] == "2"

    def test_matches_brute_force(self, capsys):
        vals = parse_enumerate(run_cli(capsys, "enumerate", 2, 3)[1])
        assert int(vals["set_size"]) == len(brute_force_set(2, 3)) == 70
        assert int(vals["bits"]) <= float(vals["bound"]) + 1

    def test_large(self, capsys):
        vals = parse_enumerate(run_cli(capsys, "enumerate", 3072, 4000)[1])
        limit = sys.get_int_max_str_digits()
        sys.set_int_max_str_digits(0)
        try:
            assert int(vals["set_size"]) == set_size(3072, 4000)
        finally:
            sys.set_int_max_str_digits(limit)
        assert int(vals["bits"]) <= float(vals["bound"]) + 1
        assert float(vals["bound"]) == bits_bound(3072, 4000)

    def test_rejects(self, capsys):
        assert run_cli(capsys, "enumerate", 0, 2)[0] == EXIT_CONFIG


@pytest.mark.skipif(shutil.which("daquant") is None, reason="console script not installed")
class TestConsoleScript:
    def test_entry_point(self):
        proc = subprocess.run(["daquant", "enumerate", "1", "3"], capture_output=True, text=True)
        assert proc.returncode == 0 and "set_size=15" in proc.stdout

    def test_module_invocation(self):
        proc = subprocess.run([sys.executable, "-m", "daquant.cli", "run", "--config", "/no/such"],
                              capture_output=True, text=True)
        assert proc.returncode == EXIT_CONFIG and proc.stderr.startswith("error:")
