import json

import pytest

from maxlod.cli import ConfigError, RunConfig, dispatch, main, parse_config


def _write(tmp_path, text, name="config.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


class TestParseConfig:
    def test_minimal_verify(self, tmp_path):
        cfg = parse_config(_write(tmp_path, 'command = "verify"\n'))
        assert cfg.command == "verify"
        assert cfg.n_fine == 8

    def test_full_sections(self, tmp_path):
        cfg = parse_config(_write(tmp_path, """
command = "study-convergence"
seed = 7
[mesh]
n_fine = 4
coarse_sizes = [2]
[physics]
omega = 1.5
coeff_kind = "checkerboard"
contrast = 4.0
[method]
m = 2
[output]
out_dir = "runs"
record_timings = true
"""))
        assert cfg.omega == 1.5
        assert cfg.seed == 7
        assert cfg.m == 2
        assert cfg.record_timings is True
        assert cfg.out_dir == "runs"

    def test_missing_file(self):
        with pytest.raises(ConfigError, match="not found"):
            parse_config("/nonexistent/zzz.toml")

    def test_parse_error(self, tmp_path):
        with pytest.raises(ConfigError, match="parse error"):
            parse_config(_write(tmp_path, "command = [unclosed\n"))

    def test_unknown_top_key(self, tmp_path):
        with pytest.raises(ConfigError, match="bogus"):
            parse_config(_write(tmp_path, 'bogus = 1\ncommand = "verify"\n'))

    def test_unknown_section_key(self, tmp_path):
        with pytest.raises(ConfigError, match="mesh.bogus"):
            parse_config(_write(tmp_path,
                                'command = "verify"\n[mesh]\nbogus = 1\n'))

    def test_negative_omega_names_key(self, tmp_path):
        text = ('command = "solve"\n[physics]\nomega = -1.0\n'
                'coeff_kind = "identity"\n')
        with pytest.raises(ConfigError, match="omega"):
            parse_config(_write(tmp_path, text))

    def test_missing_omega_for_solve(self, tmp_path):
        text = 'command = "solve"\n[physics]\ncoeff_kind = "identity"\n'
        with pytest.raises(ConfigError, match="omega"):
            parse_config(_write(tmp_path, text))

    def test_missing_coeff_kind_for_study(self, tmp_path):
        text = 'command = "study-decay"\n[physics]\nomega = 1.0\n'
        with pytest.raises(ConfigError, match="coeff_kind"):
            parse_config(_write(tmp_path, text))

    def test_coarse_must_divide_fine(self, tmp_path):
        text = ('command = "verify"\n[mesh]\nn_fine = 8\n'
                'coarse_sizes = [3]\n')
        with pytest.raises(ConfigError, match="divide"):
            parse_config(_write(tmp_path, text))

    def test_override_beats_file(self, tmp_path):
        path = _write(tmp_path, 'command = "verify"\n[mesh]\nn_fine = 8\n')
        cfg = parse_config(path, overrides={"n_fine": 4})
        assert cfg.n_fine == 4

    def test_none_override_ignored(self, tmp_path):
        path = _write(tmp_path, 'command = "verify"\n[mesh]\nn_fine = 8\n')
        cfg = parse_config(path, overrides={"n_fine": None})
        assert cfg.n_fine == 8


class TestDispatch:
    def test_verify_exit_zero(self, capsys):
        cfg = RunConfig(command="verify").validate()
        assert dispatch(cfg) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 3
        assert "FAIL" not in out

    def test_config_error_exit_two(self, capsys):
        assert main(["--command", "solve"]) == 2
        assert "configuration error" in capsys.readouterr().err

    def test_solve_writes_report(self, tmp_path, capsys):
        text = """
command = "solve"
[mesh]
n_fine = 4
coarse_sizes = [2]
[physics]
omega = 1.0
coeff_kind = "identity"
[method]
m = 1
[output]
write_vectors = true
"""
        path = _write(tmp_path, text)
        rc = main([path, "--out", str(tmp_path / "out")])
        assert rc == 0
        runs = list((tmp_path / "out").iterdir())
        assert len(runs) == 1
        report = json.loads((runs[0] / "report.json").read_text())
        assert report["m"] == 1
        assert report["norm_u_ms_curl_omega"] > 0
        assert (runs[0] / "vectors" / "u_fine.txt").exists()
        assert (runs[0] / "config.json").exists()

    def test_study_writes_csv(self, tmp_path, capsys):
        text = """
command = "study-convergence"
[mesh]
n_fine = 4
coarse_sizes = [2]
[physics]
omega = 1.0
coeff_kind = "identity"
"""
        path = _write(tmp_path, text)
        rc = main([path, "--out", str(tmp_path / "out")])
        assert rc == 0
        runs = list((tmp_path / "out").iterdir())
        csv_text = (runs[0] / "results.csv").read_text()
        assert csv_text.startswith("run_id,")
        assert len(csv_text.splitlines()) == 2
        manifest = json.loads((runs[0] / "manifest.json").read_text())
        assert manifest["command"] == "study-convergence"

    def test_same_config_same_run_dir(self, tmp_path):
        text = """
command = "study-convergence"
[mesh]
n_fine = 4
coarse_sizes = [2]
[physics]
omega = 1.0
coeff_kind = "identity"
"""
        path = _write(tmp_path, text)
        out = str(tmp_path / "out")
        assert main([path, "--out", out]) == 0
        first = sorted((tmp_path / "out").iterdir())
        assert main([path, "--out", out]) == 0
        second = sorted((tmp_path / "out").iterdir())
        assert first == second and len(first) == 1

    def test_flag_only_verify(self, capsys):
        assert main(["--command", "verify"]) == 0
