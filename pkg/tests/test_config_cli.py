import io
import json

import pytest

from evil_lab import cli
from evil_lab import config as C
from evil_lab.errors import ConfigError

TINY = {
    "data": {"n": 300},
    "sparsity": {"t_total": 120, "t_pre": 40, "delta_t": 20},
    "train": {"widths": [16, 16], "log_every": 20},
    "metrics": {"lanczos_iterations": 8, "spectrum_samples": 100},
    "oracle": {"trials": 2000, "chunk": 500, "p_grid": [0.6, 0.9]},
    "sweep": {"alphas": [0.1, 0.2], "delta_ts": [1, 50]},
}


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def test_defaults_round_trip():
    cfg = C.parse_config_text(C.defaults_json())
    assert cfg == C.ExperimentConfig()
    assert cfg.sparsity.r == 0.6 and cfg.sparsity.t_total == 5000


def test_empty_text_is_defaults():
    assert C.parse_config_text("  \n") == C.ExperimentConfig()


def test_lambda_alias():
    cfg = C.parse_config_text('{"objective": {"kind": "rex", "lambda": 3.0}}')
    assert cfg.objective.lam == 3.0
    assert '"lambda": 3.0' in C.dump_config(cfg)


def test_out_of_range_names_key_and_range():
    with pytest.raises(ConfigError, match=r"sparsity\.r.*\(0, 1\)"):
        C.parse_config_text('{"sparsity": {"r": 1.5}}')


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="sparsity.bogus"):
        C.parse_config_text('{"sparsity": {"bogus": 1}}')


def test_bad_json_reports_position():
    with pytest.raises(ConfigError, match="line 2, column"):
        C.parse_config_text('{\n "seed": }')


def test_t_pre_must_precede_t_total():
    with pytest.raises(ConfigError):
        C.parse_config_text('{"sparsity": {"t_pre": 10, "t_total": 10}}')


def test_overrides():
    cfg = C.with_overrides(C.ExperimentConfig(), seed=7, variant="rigl_ablation")
    tc = C.to_train_config(cfg)
    assert tc.seed == 7 and tc.variant == "rigl_ablation"


def test_exit_code_config_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"sparsity": {"r": 2}}')
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "config error" in capsys.readouterr().err


def test_exit_code_runtime_error(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": {"source": "idx", "idx_images": "/missing", "idx_labels": "/missing"}}))
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_exit_code_acceptance_failure(tmp_path, tiny, monkeypatch):
    from evil_lab import prop_oracle

    monkeypatch.setattr(prop_oracle, "analytic_bounds", lambda *a: 1e-12)
    assert cli.main(["oracle", "--config", tiny, "--out", str(tmp_path / "o")]) == 3


def test_defaults_command(capsys):
    assert cli.main(["defaults"]) == 0
    assert json.loads(capsys.readouterr().out)["schema_version"] == 1


def test_config_from_stdin(tmp_path, monkeypatch):
    monkeypatch.setattr("sys.stdin", io.StringIO(json.dumps(TINY)))
    assert cli.main(["train", "--config", "-", "--out", str(tmp_path / "o")]) == 0
    assert json.loads((tmp_path / "o" / "config.json").read_text())["data"]["n"] == 300


def test_train_artifacts(tmp_path, tiny):
    out = tmp_path / "run"
    assert cli.main(["train", "--config", tiny, "--out", str(out)]) == 0
    for name in ("metrics.csv", "accuracy.svg", "loss.svg", "report.json", "checkpoint.evck", "config.json"):
        assert (out / name).exists(), name
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0].startswith("# evil-lab metrics") and "ood_acc" in lines[1]


# the oracle exits 3 on the tiny grid (real bound violations) but still writes its artifacts
@pytest.mark.parametrize("command,code", [("train", 0), ("oracle", 3)])
def test_repeat_runs_byte_identical(tmp_path, tiny, command, code):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main([command, "--config", tiny, "--out", str(a), "--seed", "3"]) == code
    assert cli.main([command, "--config", tiny, "--out", str(b), "--seed", "3"]) == code
    files = sorted(p.name for p in a.iterdir() if p.suffix in (".csv", ".svg"))
    assert files
    for name in files:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
