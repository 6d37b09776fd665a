import shutil

import pytest

from mapchain.cli import EXIT_OK, EXIT_RUNTIME, EXIT_SCENARIO, main


@pytest.fixture
def golden_scn(golden_dir, tmp_path):
    path = tmp_path / "s.scn"
    shutil.copy(golden_dir / "convergence.scn", path)
    return str(path)


class TestRunCommand:
    def test_csv_to_file(self, golden_scn, tmp_path, capsys):
        out = tmp_path / "metrics.csv"
        code = main(["run", golden_scn, "--out", str(out)])
        assert code == EXIT_OK
        assert out.read_text().startswith("tick,")
        assert "converged at tick 10" in capsys.readouterr().err

    def test_csv_to_stdout_by_default(self, golden_scn, capsys):
        assert main(["run", golden_scn, "--quiet"]) == EXIT_OK
        captured = capsys.readouterr()
        assert captured.out.startswith("tick,")
        assert captured.err == ""

    def test_explicit_stdout_dash(self, golden_scn, capsys):
        assert main(["run", golden_scn, "--out", "-", "--quiet"]) == EXIT_OK
        assert len(capsys.readouterr().out.splitlines()) == 21

    def test_ticks_override(self, golden_scn, capsys):
        assert main(["run", golden_scn, "--ticks", "3", "--quiet"]) == EXIT_OK
        assert len(capsys.readouterr().out.splitlines()) == 4

    def test_seed_override_changes_lossy_run(self, golden_scn, tmp_path,
                                             capsys):
        text = (tmp_path / "s.scn").read_text().replace(
            "drop_probability = 0", "drop_probability = 0.2"
        )
        lossy = tmp_path / "lossy.scn"
        lossy.write_text(text)
        main(["run", str(lossy), "--quiet"])
        first = capsys.readouterr().out
        main(["run", str(lossy), "--quiet", "--seed-override", "777"])
        second = capsys.readouterr().out
        assert first != second

    def test_missing_scenario_file(self, capsys):
        assert main(["run", "/no/such/file.scn"]) == EXIT_SCENARIO
        assert "scenario error" in capsys.readouterr().err

    def test_invalid_scenario(self, tmp_path, capsys):
        bad = tmp_path / "bad.scn"
        bad.write_text("[run]\nduration = 0\n")
        assert main(["run", str(bad)]) == EXIT_SCENARIO

    def test_semantic_error_exit_2(self, tmp_path):
        bad = tmp_path / "bad.scn"
        bad.write_text(
            "[network]\nkind = chain\nsegments = 3\n"
            "[map]\nerror.0 = 99:speed_limit:80\n"
        )
        assert main(["run", str(bad)]) == EXIT_SCENARIO

    def test_unwritable_output_exit_3(self, golden_scn, capsys):
        code = main(["run", golden_scn, "--out",
                     "/nonexistent-dir/metrics.csv"])
        assert code == EXIT_RUNTIME
        assert "runtime error" in capsys.readouterr().err

    def test_parallel_flag_matches_serial(self, golden_scn, capsys):
        main(["run", golden_scn, "--quiet"])
        serial = capsys.readouterr().out
        main(["run", golden_scn, "--quiet", "--parallel"])
        assert capsys.readouterr().out == serial


class TestLogging:
    def test_mapchain_log_info_emits_diagnostics(self, golden_scn, capsys,
                                                 monkeypatch):
        monkeypatch.setenv("MAPCHAIN_LOG", "info")
        assert main(["run", golden_scn, "--out", "-"]) == EXIT_OK
        err = capsys.readouterr().err
        assert "healed" in err  # healing cycle logged at info level

    def test_default_level_silences_info(self, golden_scn, capsys,
                                         monkeypatch):
        monkeypatch.delenv("MAPCHAIN_LOG", raising=False)
        assert main(["run", golden_scn, "--out", "-"]) == EXIT_OK
        assert "healed" not in capsys.readouterr().err


class TestReportCommand:
    def test_writes_csv_and_figures(self, golden_scn, tmp_path, capsys):
        out_dir = tmp_path / "rep"
        code = main(["report", golden_scn, "--out-dir", str(out_dir),
                     "--quiet"])
        assert code == EXIT_OK
        names = {p.name for p in out_dir.iterdir()}
        assert names == {"metrics.csv", "healing.png", "channel.png",
                         "bytes.png"}
        for png in ("healing.png", "channel.png", "bytes.png"):
            assert (out_dir / png).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_report_csv_matches_run_csv(self, golden_scn, tmp_path, capsys):
        out_dir = tmp_path / "rep"
        main(["report", golden_scn, "--out-dir", str(out_dir), "--quiet"])
        main(["run", golden_scn, "--quiet"])
        run_csv = capsys.readouterr().out
        assert (out_dir / "metrics.csv").read_text() == run_csv
