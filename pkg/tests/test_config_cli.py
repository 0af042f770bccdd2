import json

import numpy as np
import pytest

from semoran import container
from semoran.cli import main
from semoran.config import ConfigError, load_config, parse_snr, parse_snr_list

TINY = {
    "data": {"n_samples": 120},
    "vae": {"hidden_widths": [16], "bottleneck_hidden": False, "epochs": 1},
    "localizer": {"hidden_widths": [8], "epochs": 1, "alpha": 0.0005},
    "sweep": {"bottlenecks": [25], "seeds_per_point": 1, "knn_k": 3, "sim_requests": 2},
    "sim": {"requests": 4},
}


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return path


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_snr_parsing():
    assert parse_snr("off") is None and parse_snr("10") == 10.0
    assert parse_snr_list("0,10,off") == [0.0, 10.0, None]
    with pytest.raises(ConfigError):
        parse_snr("loud")


def test_precedence(cfg_file):
    cfg = load_config(cfg_file, {"seed": 9, "vae": {"epochs": 4}})
    assert cfg.seed == 9
    assert cfg.vae.epochs == 4
    assert cfg.vae.hidden_widths == (16,)
    assert cfg.localizer.batch_size == 64
    assert load_config().sweep.bottlenecks == [25, 50, 100, 200, 270, 400, 500]


def test_invalid_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"vae": {"nonsense": 1}}))
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(None, {"sweep": {"seeds_per_point": 0}})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_cli_pipeline(tmp_path, cfg_file, capsys):
    out = tmp_path / "run"
    for cmd in ("gen-data", "train-codec", "train-localizer"):
        code, stdout, _ = _run(capsys, cmd, "--config", cfg_file, "--out", out)
        assert code == 0, cmd
        assert json.loads(stdout)["status"] == "ok"

    code, stdout, _ = _run(capsys, "simulate", "--config", cfg_file, "--out", out, "--codec", "identity")
    assert code == 0
    ident = json.loads(stdout)
    assert ident["bytes_per_request_on_air"] == 54_000

    code, stdout, _ = _run(capsys, "simulate", "--config", cfg_file, "--out", out, "--snr-db", "10")
    assert code == 0
    assert json.loads(stdout)["bytes_per_request_on_air"] == 2_160
    assert (out / "trace.jsonl").read_text().count("\n") > 10

    code, stdout, _ = _run(capsys, "report", "--out", out / "rep", out / "errors_sim.csv")
    assert code == 0
    assert (out / "rep" / "cdf_sim.csv").exists()
    assert not [p for p in out.rglob("*") if p.name.startswith(".")]


def test_cli_data_flag_reuses_dataset(tmp_path, cfg_file, capsys):
    out = tmp_path / "d"
    assert _run(capsys, "gen-data", "--config", cfg_file, "--out", out, "--n-samples", "50")[0] == 0
    code, stdout, _ = _run(capsys, "train-localizer", "--config", cfg_file, "--out", out, "--data", out / "dataset.sem")
    assert code == 0


def test_cli_errors(tmp_path, cfg_file, capsys):
    code, _, err = _run(capsys, "sweep", "--bogus")
    assert code == 2 and json.loads(err)["error"] == "config"
    code, _, err = _run(capsys, "simulate", "--config", cfg_file, "--out", tmp_path / "empty")
    assert code == 3 and "localizer" in json.loads(err)["message"]

    broken = tmp_path / "broken.sem"
    container.write(broken, {"x": np.zeros(3, dtype="float32")})
    broken.write_bytes(broken.read_bytes()[:-2])
    code, _, err = _run(capsys, "train-localizer", "--config", cfg_file, "--out", tmp_path, "--data", broken)
    assert code == 3 and json.loads(err)["error"] == "truncated"

    old = tmp_path / "old.sem"
    data = bytearray(container.encode({"x": np.zeros(3, dtype="float32")}))
    data[8] = 2
    old.write_bytes(bytes(data))
    code, _, err = _run(capsys, "simulate", "--config", cfg_file, "--out", tmp_path, "--localizer", old)
    assert code == 3 and json.loads(err)["error"] == "unsupported_version"


def test_sweep_outputs_and_determinism(tmp_path, cfg_file, capsys):
    bodies = []
    for run in ("a", "b"):
        out = tmp_path / run
        code, stdout, _ = _run(capsys, "sweep", "--config", cfg_file, "--out", out)
        assert code == 0
        text = (out / "sweep.csv").read_text()
        bodies.append("".join(line for line in text.splitlines(True) if not line.startswith("#")))
        names = {p.name for p in out.iterdir()}
        assert {"sweep.csv", "cdf_raw.csv", "trace.jsonl", "summary.jsonl"} <= names
        assert any(n.startswith("cdf_b") for n in names)
    assert bodies[0] == bodies[1]
    lines = bodies[0].splitlines()
    # baseline plus one row per bottleneck; 270 is always present
    assert [line.split(",")[0] for line in lines[1:]] == ["raw", "25", "270"]
    assert lines[1].split(",")[2] == "1.0"
