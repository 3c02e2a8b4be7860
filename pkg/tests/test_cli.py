"""CLI subcommands, flags, exit codes."""

import filecmp

from qmesh.cli import EXIT_CONFIG, EXIT_OK, main

CONFIG = """\
front: 10.243.2.*:80
back: 10.244.2.*
samples: 20%
rngSeed: 42
service: {kind: sharded-search, shardCount: 4, docsPerShard: 50, answerSize: 10,
          onlineTimeout: 0.5}
trace: {duration: 20, arrivalRate: 4}
"""


def write_config(tmp_path, text=CONFIG):
    path = tmp_path / "run.yaml"
    path.write_text(text)
    return str(path)


def test_run_writes_artifacts_and_exits_zero(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "out"
    code = main(["run", "--config", cfg, "--mode", "ubora", "--out", str(out)])
    assert code == EXIT_OK
    for artifact in ("runlog.csv", "quality.csv", "controller.csv", "manifest.json"):
        assert (out / artifact).exists()
    assert "throughput=" in capsys.readouterr().out


def test_config_error_exits_two(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("recordTimeout: 15\n")  # no front addresses
    code = main(["run", "--config", str(bad)])
    assert code == EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_missing_config_file_exits_two(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.yaml")]) == EXIT_CONFIG


def test_seed_flag_overrides_config(tmp_path):
    cfg = write_config(tmp_path)
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    main(["run", "--config", cfg, "--seed", "1", "--out", str(out_a)])
    main(["run", "--config", cfg, "--seed", "1", "--out", str(out_b)])
    assert filecmp.cmp(out_a / "runlog.csv", out_b / "runlog.csv", shallow=False)
    out_c = tmp_path / "c"
    main(["run", "--config", cfg, "--seed", "2", "--out", str(out_c)])
    assert not filecmp.cmp(out_a / "runlog.csv", out_c / "runlog.csv", shallow=False)


def test_compare_subcommand(tmp_path, capsys):
    cfg = write_config(tmp_path)
    dirs = []
    for name in ("a", "b"):
        out = tmp_path / name
        main(["run", "--config", cfg, "--out", str(out)])
        dirs.append(str(out))
    code = main(["compare"] + dirs + ["--out", str(tmp_path / "cmp.csv")])
    assert code == EXIT_OK
    assert (tmp_path / "cmp.csv").exists()
    assert "gain=" in capsys.readouterr().out


def test_compare_mismatched_traces_errors(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    main(["run", "--config", cfg, "--seed", "1", "--out", str(out_a)])
    main(["run", "--config", cfg, "--seed", "2", "--out", str(out_b)])
    assert main(["compare", str(out_a), str(out_b)]) == EXIT_CONFIG


def test_control_subcommand(tmp_path):
    cfg = write_config(tmp_path, CONFIG.replace(
        "trace: {duration: 20, arrivalRate: 4}",
        "trace: {duration: 20, arrivalRate: 4, highPriorityFraction: 0.5}"))
    out = tmp_path / "ctl"
    code = main(["control", "--config", cfg, "--controller", "quality-pid",
                 "--out", str(out)])
    assert code == EXIT_OK
    assert (out / "controller.csv").exists()


def test_profile_subcommand(tmp_path, capsys):
    cfg = write_config(tmp_path, CONFIG.replace("duration: 20", "duration: 10"))
    out = tmp_path / "prof"
    code = main(["profile", "--config", cfg, "--assignments", "direct",
                 "--rates", "0.0,0.2", "--out", str(out)])
    assert code == EXIT_OK
    assert (out / "profile.csv").exists()
    assert "best" in capsys.readouterr().out
