import os

import pytest

from fracpmp.cli import EXIT_CONFIG, EXIT_FAIL, EXIT_PASS, format_config, main, parse_config_text
from fracpmp.errors import ConfigError, DivergenceError
from fracpmp.experiments import GLOBAL_DEFAULTS, REGISTRY, Check, Experiment, ExperimentResult, list_experiments, resolve


def _csvs(directory):
    return {f: open(os.path.join(directory, f), "rb").read() for f in sorted(os.listdir(directory)) if f.startswith("result_")}


def test_list_contents_and_order(capsys):
    names = [n for n, _ in list_experiments()]
    assert names == list(REGISTRY)
    for required in ("fbm-covariance", "lq-classical-riccati", "rho-divergence"):
        assert required in names
    assert all(desc for _, desc in list_experiments())
    assert main(["list"]) == EXIT_PASS
    printed = [line.split()[0] for line in capsys.readouterr().out.splitlines()]
    assert printed == names


def test_parse_comments_aliases_and_tolerances():
    values, tols = parse_config_text("# header\nexperiment = fbm-covariance  # trailing\n\nhurst = 0.6\ngrid_n=32\npaths = 100\ntol.z_max = 5\n")
    assert values == {"experiment": "fbm-covariance", "H": 0.6, "n": 32, "paths": 100}
    assert tols == {"z_max": 5.0}
    assert isinstance(values["n"], int)


@pytest.mark.parametrize(
    "text, line, column",
    [
        ("experiment = x\nbogus = 1\n", 2, 1),
        ("experiment = x\n  n 12\n", 2, 3),
        ("n = twelve\n", 1, 5),
        ("H =\n", 1, 4),
        ("= 3\n", 1, 1),
        ("n = 4\ngrid_n = 8\n", 2, 1),
        ("tol.z = 1\ntol.z = 2\n", 2, 1),
        ("H = 0.7x\n", 1, 5),
    ],
)
def test_parse_errors_carry_position(text, line, column):
    with pytest.raises(ConfigError) as info:
        parse_config_text(text)
    assert (info.value.line, info.value.column) == (line, column)
    assert f"line {line}" in str(info.value)


def test_unknown_key_named_in_diagnostic():
    with pytest.raises(ConfigError, match="'bogus'"):
        parse_config_text("bogus = 1\n")


def test_validate_fills_documented_defaults(tmp_path, capsys):
    cfg_file = tmp_path / "min.cfg"
    cfg_file.write_text("experiment = adjoint-q-malliavin\n")
    assert main(["validate", "--config", str(cfg_file)]) == EXIT_PASS
    values, tols = parse_config_text(capsys.readouterr().out)
    assert values["H"] == 0.75 and values["T"] == 1.0 and values["n"] == 1024
    assert values["paths"] == 20000 and values["seed"] == 42
    assert tols == REGISTRY["adjoint-q-malliavin"].tolerances
    assert GLOBAL_DEFAULTS["seed"] == 42


def test_flags_override_file(tmp_path, capsys):
    cfg_file = tmp_path / "a.cfg"
    cfg_file.write_text("experiment = fbm-covariance\nseed = 1\nn = 8\n")
    assert main(["validate", "--config", str(cfg_file), "--seed", "7", "--hurst", "0.8"]) == EXIT_PASS
    values, _ = parse_config_text(capsys.readouterr().out)
    assert values["seed"] == 7 and values["n"] == 8 and values["H"] == 0.8


@pytest.mark.parametrize(
    "argv, fragment",
    [
        (["--experiment", "no-such-thing"], "fbm-covariance"),
        (["--experiment", "fbm-covariance", "--hurst", "0.4"], "H must lie"),
        (["--experiment", "fbm-mp-residual", "--hurst", "0.5"], "classical"),
        (["--experiment", "rho-divergence", "--hurst", "0.5"], "classical"),
        (["--experiment", "h-half-degeneration", "--hurst", "0.7"], "H=0.5"),
        (["--experiment", "fbm-covariance", "--paths", "1"], "paths"),
        ([], "no experiment"),
    ],
)
def test_config_errors_exit_2(argv, fragment, capsys):
    for command in ("validate", "run"):
        assert main([command] + argv) == EXIT_CONFIG
        assert fragment in capsys.readouterr().err


def test_unknown_tolerance_and_missing_file(tmp_path, capsys):
    cfg_file = tmp_path / "t.cfg"
    cfg_file.write_text("experiment = fbm-covariance\ntol.nonsense = 1\n")
    assert main(["validate", "--config", str(cfg_file)]) == EXIT_CONFIG
    assert "nonsense" in capsys.readouterr().err
    assert main(["validate", "--config", str(tmp_path / "absent.cfg")]) == EXIT_CONFIG


def test_tolerance_override_changes_verdict(tmp_path):
    base = ["run", "--experiment", "fbm-covariance", "--grid-n", "16", "--paths", "256"]
    assert main(base + ["--out", str(tmp_path / "a")]) == EXIT_PASS
    strict = tmp_path / "strict.cfg"
    strict.write_text("tol.z_max = 0.0\n")
    assert main(base + ["--config", str(strict), "--out", str(tmp_path / "b")]) == EXIT_FAIL
    verdict = (tmp_path / "b" / "verdict.txt").read_text()
    assert verdict.startswith("FAIL fbm-covariance") and "<= 0 FAIL" in verdict
    assert _csvs(tmp_path / "a") == _csvs(tmp_path / "b")


def test_run_writes_artifacts_and_reruns_from_manifest(tmp_path):
    first = tmp_path / "first"
    argv = ["run", "--experiment", "sde-solver", "--grid-n", "32", "--paths", "4", "--seed", "5", "--out", str(first)]
    assert main(argv) in (EXIT_PASS, EXIT_FAIL)  # the verdict at toy size is not the point here
    files = set(os.listdir(first))
    assert {"manifest.txt", "verdict.txt"} <= files and any(f.startswith("result_") for f in files)
    manifest = (first / "manifest.txt").read_text()
    assert "# numpy" in manifest and "seed = 5" in manifest and "tol.order" in manifest
    second = tmp_path / "second"
    main(["run", "--config", str(first / "manifest.txt"), "--out", str(second)])
    assert _csvs(first) == _csvs(second)
    third = tmp_path / "third"
    main(argv[:-1] + [str(third)])
    assert _csvs(first) == _csvs(third)


def test_format_config_round_trip():
    cfg = resolve("operator-duality", {"n": 64, "H": 0.6}, {"trace": 0.5})
    values, tols = parse_config_text(format_config(cfg))
    assert resolve(values.pop("experiment"), values, tols) == cfg


def test_runtime_failure_exit_1_with_context(tmp_path, monkeypatch, capsys):
    def explode(cfg):
        raise DivergenceError("state overflow", step=17, path=3)

    broken = Experiment("fbm-covariance", "broken", explode, {"n": 16}, {"z_max": 4.0, "runtime_s": 60.0})
    monkeypatch.setitem(REGISTRY, "fbm-covariance", broken)
    assert main(["run", "--experiment", "fbm-covariance", "--out", str(tmp_path)]) == EXIT_FAIL
    out = capsys.readouterr().out
    assert "path 3, step 17" in out and "DivergenceError" in out
    assert "path 3, step 17" in (tmp_path / "verdict.txt").read_text()


def test_failed_checks_exit_1(tmp_path, monkeypatch):
    failing = Experiment("fbm-covariance", "fails", lambda cfg: ExperimentResult([Check("x", 2.0, cfg.tol("z_max"))], {}), {}, {"z_max": 1.0})
    monkeypatch.setitem(REGISTRY, "fbm-covariance", failing)
    assert main(["run", "--experiment", "fbm-covariance", "--out", str(tmp_path)]) == EXIT_FAIL
    assert "x: measured=2 <= 1 FAIL" in (tmp_path / "verdict.txt").read_text()
