"""Config file parsing, hashing, multiplier resolution, CLI behaviour."""

import csv
import json

import numpy as np
import pytest

from axmoe import cli
from axmoe.config import ExperimentConfig, config_hash, load_config, parse_config_text, with_overrides
from axmoe.datasets import DATA_DIR_ENV
from axmoe.errors import ConfigError
from axmoe.multipliers import builtin_multiplier, save_lut


def test_parse_config_text_types_and_comments():
    text = """
    # experiment
    arch = toy_mlp
    variants = dense, hard   # trailing comment
    multipliers = exact,trunc2
    n_experts = 4
    moe_ratio = 0.5
    lr = 0.05
    deterministic = off
    data_path = none
    """
    values = parse_config_text(text)
    assert values["arch"] == "toy_mlp"
    assert values["variants"] == ("dense", "hard")
    assert values["multipliers"] == ("exact", "trunc2")
    assert values["n_experts"] == 4
    assert values["moe_ratio"] == 0.5
    assert values["lr"] == 0.05
    assert values["deterministic"] is False
    assert values["data_path"] is None


@pytest.mark.parametrize("line,fragment", [
    ("arch toy_mlp", "expected key = value"),
    ("colour = blue", "unknown key"),
    ("lr = fast", "bad value"),
    ("arch = a\narch = b", "duplicate key"),
])
def test_parse_config_text_errors_carry_line_numbers(line, fragment):
    with pytest.raises(ConfigError) as err:
        parse_config_text(line, source="exp.cfg")
    assert "exp.cfg:" in str(err.value)
    assert fragment in str(err.value)


def test_load_config_layering(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text("arch = toy_mlp\nseed = 3\nlr = 0.2\n")
    cfg = load_config(path, {"seed": 9})
    assert cfg.arch == "toy_mlp"
    assert cfg.seed == 9        # override wins
    assert cfg.lr == 0.2        # file wins over default
    assert cfg.batch_size == 64  # untouched default


def test_load_config_rejects_unknown_override():
    with pytest.raises(ConfigError):
        load_config(None, {"turbo": True})


def test_validate_catches_bad_fields():
    base = ExperimentConfig()
    cases = [
        {"arch": "alexnet"},
        {"variants": ()},
        {"variants": ("dense", "fuzzy")},
        {"multipliers": ()},
        {"n_experts": 0},
        {"moe_ratio": 1.5},
        {"dataset": "imagenet"},
        {"num_classes": 0},
        {"lr": 0.0},
        {"momentum": 1.0},
        {"gateway_macs": 0},
    ]
    for changes in cases:
        with pytest.raises(ConfigError):
            with_overrides(base, **changes)


def test_config_hash_ignores_out_but_not_science():
    a = ExperimentConfig()
    b = with_overrides(a, out="elsewhere")
    c = with_overrides(a, seed=1)
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(c)
    assert len(config_hash(a)) == 64
    int(config_hash(a), 16)  # hex digest


def test_resolve_multiplier_paths(tmp_path, monkeypatch):
    assert cli.resolve_multiplier("float") is None
    assert cli.resolve_multiplier("exact").name == "mul8s_1KV6"
    assert cli.resolve_multiplier("trunc3").name == "trunc3"

    m = builtin_multiplier("trunc2")
    lut_path = tmp_path / "custom.axm8"
    save_lut(m, lut_path)
    loaded = cli.resolve_multiplier(str(lut_path))
    assert np.array_equal(loaded.lut, m.lut)

    # reference design name resolves through the data dir
    monkeypatch.delenv(DATA_DIR_ENV, raising=False)
    with pytest.raises(ConfigError):
        cli.resolve_multiplier("mul8s_1L2J")
    ref = builtin_multiplier("trunc1")
    ref = type(ref)(name="mul8s_1L2J", power_nw=0.301, lut=ref.lut)
    save_lut(ref, tmp_path / "mul8s_1L2J.axm8")
    monkeypatch.setenv(DATA_DIR_ENV, str(tmp_path))
    got = cli.resolve_multiplier("mul8s_1L2J")
    assert got.power_nw == pytest.approx(0.301)

    with pytest.raises(ConfigError):
        cli.resolve_multiplier("warp_drive")


def _base_args(out, extra=()):
    return ["--arch", "toy_mlp", "--out", str(out),
            "--set", "resolution = 6",
            "--set", "samples = 96",
            "--set", "eval_samples = 48",
            "--set", "num_classes = 3",
            "--set", "pretrain_epochs = 2",
            "--set", "retrain_epochs = 1",
            "--set", "batch_size = 32",
            *extra]


def test_cli_count_and_mulinfo_run_clean(tmp_path, capsys):
    assert cli.main(["count", *_base_args(tmp_path), "--variant", "dense",
                     "--variant", "hard"]) == 0
    out = capsys.readouterr().out
    assert "dense" in out and "hard" in out and "p_norm" in out

    assert cli.main(["mulinfo", "--multiplier", "trunc2"]) == 0
    out = capsys.readouterr().out
    assert "mul8s_1KV6" in out and "trunc2" in out


def test_cli_sweep_writes_csv_and_run_json(tmp_path, capsys):
    rc = cli.main(["sweep", *_base_args(tmp_path), "--variant", "dense",
                   "--multiplier", "float", "--multiplier", "trunc2"])
    assert rc == 0
    csv_path = tmp_path / "sweep.csv"
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == cli.CSV_COLUMNS
    assert len(rows) == 3
    assert {r[2] for r in rows[1:]} == {"float", "trunc2"}
    assert all(r[8] == "false" for r in rows[1:])
    # CRLF line endings from the default csv dialect
    assert b"\r\n" in csv_path.read_bytes()

    record = json.loads((tmp_path / "run.json").read_text())
    assert record["version"] == cli.VERSION
    assert record["config"]["arch"] == "toy_mlp"
    assert len(record["config_hash"]) == 64
    assert len(record["rows"]) == 2
    assert record["wall_clock_s"] >= 0
    assert (tmp_path / "ckpt_dense").is_dir()


def test_cli_retrain_flags_rows_and_improves_reload(tmp_path, capsys):
    rc = cli.main(["retrain", *_base_args(tmp_path), "--variant", "dense",
                   "--multiplier", "trunc2"])
    assert rc == 0
    with open(tmp_path / "sweep.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[1][8] == "true"


def test_cli_sweep_reruns_byte_identical(tmp_path):
    args = ["sweep", *_base_args(tmp_path / "a"), "--variant", "dense",
            "--multiplier", "trunc2"]
    assert cli.main(args) == 0
    first = (tmp_path / "a" / "sweep.csv").read_bytes()
    args = ["sweep", *_base_args(tmp_path / "b"), "--variant", "dense",
            "--multiplier", "trunc2"]
    assert cli.main(args) == 0
    second = (tmp_path / "b" / "sweep.csv").read_bytes()
    assert first == second


def test_cli_pareto_flags_frontier(tmp_path, capsys):
    src = tmp_path / "sweep.csv"
    with open(src, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cli.CSV_COLUMNS)
        rows = [
            ("toy_mlp", "dense", "float", "10", "10", "0.0", "1.0", "0.90", "false", "0"),
            ("toy_mlp", "dense", "trunc2", "10", "10", "0.9", "0.80", "0.85", "false", "0"),
            ("toy_mlp", "hard", "trunc2", "30", "10", "0.9", "0.85", "0.84", "false", "0"),
        ]
        for r in rows:
            writer.writerow(r)
    rc = cli.main(["pareto", "--csv", str(src), "--out", str(tmp_path)])
    assert rc == 0
    with open(tmp_path / "pareto.csv", newline="") as fh:
        flagged = list(csv.reader(fh))
    assert tuple(flagged[0]) == cli.CSV_COLUMNS + ("pareto",)
    marks = {(r[1], r[2]): r[10] for r in flagged[1:]}
    assert marks[("dense", "float")] == "true"
    assert marks[("dense", "trunc2")] == "true"
    # dominated: higher power and lower accuracy than dense+trunc2
    assert marks[("hard", "trunc2")] == "false"
    dat = (tmp_path / "pareto.dat").read_text().splitlines()
    assert dat[0].startswith("#")
    assert len(dat) == 3


def test_cli_eval_reloads_checkpoints(tmp_path, capsys):
    assert cli.main(["sweep", *_base_args(tmp_path), "--variant", "dense",
                     "--multiplier", "float"]) == 0
    run = json.loads((tmp_path / "run.json").read_text())
    want = float(run["rows"][0]["top1"])
    capsys.readouterr()
    rc = cli.main(["eval", *_base_args(tmp_path), "--multiplier", "float",
                   "--set", f"checkpoint = {tmp_path / 'ckpt_dense'}"])
    assert rc == 0
    out = capsys.readouterr().out
    assert f"top1 {want:.4f}" in out


def test_cli_exit_codes(tmp_path, capsys):
    # unknown config key
    assert cli.main(["count", "--set", "quantum = 9"]) == 2
    # missing config file
    assert cli.main(["count", "--config", str(tmp_path / "missing.cfg")]) == 3
    # malformed sweep CSV header
    bad = tmp_path / "bad.csv"
    bad.write_text("nope,nope\n1,2\n")
    assert cli.main(["pareto", "--csv", str(bad), "--out", str(tmp_path)]) == 4
    # no subcommand prints help and fails
    assert cli.main([]) == 2
    capsys.readouterr()


def test_cli_nondeterministic_draws_fresh_seed(tmp_path, capsys):
    seeds = set()
    for _ in range(4):
        assert cli.main(["count", "--arch", "toy_mlp", "--no-deterministic",
                         "--out", str(tmp_path)]) == 0
        capsys.readouterr()
        seeds.add(cli._config(cli._build_parser().parse_args(
            ["count", "--arch", "toy_mlp", "--no-deterministic"])).seed)
    assert len(seeds) > 1
