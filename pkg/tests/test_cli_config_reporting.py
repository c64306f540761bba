import csv
import io
import json

import pytest

from attnreid import config as config_mod
from attnreid.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from attnreid.published import MARKET_COMBINATIONS, TRANSFER_ROWS, published_row
from attnreid.reporting import EmptyPlotWarning, Point, read_points_csv, render_scatter

TINY = {
    "n_train_ids": 4, "n_test_ids": 4, "imgs_per_id": 6, "input_hw": [32, 16],
    "epochs": 1, "warmup_epochs": 1, "milestones": [], "p_ids": 3, "k_instances": 2,
    "batch_size": 4, "timing": "modeled",
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


# --- config layering ---------------------------------------------------------

def test_defaults_follow_desk_training_config():
    from attnreid.training import desk_train_config

    desk = desk_train_config()
    cfg = config_mod.resolve()
    assert cfg["epochs"] == desk.epochs and cfg["base_lr"] == desk.base_lr
    assert config_mod.train_config(cfg) == desk


def test_three_layers_later_wins(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"schema": 1, "epochs": 5, "base_lr": 0.2, "metric": "euclidean"}))
    cfg = config_mod.resolve(path, {"epochs": 7}, ["base_lr=0.3", "kinds=se,cnl"])
    assert cfg["epochs"] == 7  # flag beats file
    assert cfg["base_lr"] == 0.3  # --set beats file
    assert cfg["metric"] == "euclidean"  # file beats default
    assert cfg["kinds"] == ["se", "cnl"]
    assert cfg["r"] == config_mod.DEFAULTS["r"]


def test_none_overrides_leave_lower_layers_alone():
    assert config_mod.resolve(None, {"epochs": None})["epochs"] == config_mod.DEFAULTS["epochs"]


@pytest.mark.parametrize("item", ["bogus=1", "epochs=abc", "epochs=1.5", "mixed=maybe", "metric=l1", "noequals"])
def test_bad_overrides_are_rejected(item):
    with pytest.raises(config_mod.ConfigError):
        config_mod.resolve(None, None, [item])


def test_bad_files_are_rejected(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(config_mod.ConfigError, match="not valid JSON"):
        config_mod.resolve(bad)
    bad.write_text("[1, 2]")
    with pytest.raises(config_mod.ConfigError):
        config_mod.resolve(bad)
    bad.write_text('{"unknown_key": 1}')
    with pytest.raises(config_mod.ConfigError, match="unknown_key"):
        config_mod.resolve(bad)


def test_dump_round_trip(tmp_path):
    cfg = config_mod.resolve(None, {"epochs": 3}, ["lr_grid=[0.01,0.1]"])
    path = tmp_path / "dumped.json"
    path.write_text(config_mod.dump(cfg))
    assert config_mod.resolve(path) == cfg


# --- plotting ----------------------------------------------------------------

def test_scatter_is_deterministic_and_labelled():
    pts = [Point("none", 0.5, 30.0, "baseline"), Point("cnl@6", 0.55, 29.0),
           Point("resnet101", 0.6, 20.0, "deep"), Point("<ref>", 0.58, 25.0, reference=True)]
    a, b = render_scatter(pts), render_scatter(list(pts))
    assert a == b
    assert a.startswith("<?xml") and a.rstrip().endswith("</svg>")
    assert "&lt;ref&gt;" in a and "<ref>" not in a
    assert a.count("<circle") == 2  # anchors are squares
    assert a.count("<rect") == 2 + 2  # background and frame too


def test_empty_plot_warns():
    with pytest.warns(EmptyPlotWarning):
        svg = render_scatter([])
    assert "<circle" not in svg and "</svg>" in svg


def test_read_points_csv_columns():
    pts = read_points_csv(io.StringIO("config_id,mAP,speed\nx,0.5,12\n,0.25,3\n"))
    assert pts == [Point("x", 0.5, 12.0), Point("row2", 0.25, 3.0)]
    with pytest.raises(ValueError, match="batches_per_sec"):
        read_points_csv(io.StringIO("mAP\n0.5\n"))
    with pytest.raises(ValueError, match="line 2"):
        read_points_csv(io.StringIO("mAP,speed\nhigh,1\n"))
    assert read_points_csv(io.StringIO("")) == []


def test_published_rows_render():
    rows = [Point(r.label, r.map_mean, r.batches_per_sec, reference=True) for r in MARKET_COMBINATIONS]
    svg = render_scatter(rows, title="reference")
    assert svg.count("<circle") == len(MARKET_COMBINATIONS)
    assert "cnl@6,8,14 (circle)" in svg
    best = published_row("cnl@6,8,14", "circle")
    assert best.map_mean >= max(r.map_mean for r in MARKET_COMBINATIONS if r.loss == "ce")
    with pytest.raises(KeyError):
        published_row("se@1", "ce")
    # fine-tuning helps in both rows of the transfer table
    by = {(ft, plan): m for _, ft, plan, m in TRANSFER_ROWS}
    assert by[True, "none"] > by[False, "none"] and by[True, "cnl@6,8,14"] > by[False, "cnl@6,8,14"]


# --- CLI ---------------------------------------------------------------------

def test_cli_usage_errors(tmp_path, capsys):
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["bench", "--out", str(tmp_path), "--plan", "xyz@3"]) == EXIT_USAGE
    assert main(["bench", "--out", str(tmp_path), "--set", "nope=1"]) == EXIT_USAGE
    assert main(["eval", "--out", str(tmp_path)]) == EXIT_USAGE
    assert "error" in capsys.readouterr().err


def test_cli_data_errors(tmp_path):
    assert main(["eval", "--out", str(tmp_path), "--checkpoint", str(tmp_path / "missing.npz")]) == EXIT_DATA
    assert main(["train", "--out", str(tmp_path), "--data", str(tmp_path / "nowhere")]) == EXIT_DATA
    assert main(["plot", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == EXIT_DATA


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_numeric_failure(tmp_path, tiny_config):
    code = main(["train", "--config", str(tiny_config), "--out", str(tmp_path), "--set", "base_lr=1e30"])
    assert code == EXIT_NUMERIC


def test_cli_bench_modeled_is_reproducible(tmp_path, tiny_config):
    args = ["bench", "--config", str(tiny_config), "--plan", "cnl@6,8,14", "--deep"]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    a = (tmp_path / "a" / "bench.csv").read_bytes()
    assert a == (tmp_path / "b" / "bench.csv").read_bytes()
    rows = list(csv.DictReader(io.StringIO(a.decode())))
    assert [r["config_id"] for r in rows] == ["none", "cnl@6,8,14", "resnet101"]


def test_cli_synth_train_eval(tmp_path, tiny_config, capsys):
    data = tmp_path / "data"
    assert main(["synth", "--config", str(tiny_config), "--out", str(data)]) == EXIT_OK
    run = tmp_path / "run"
    assert main(["train", "--config", str(tiny_config), "--out", str(run), "--data", str(data),
                 "--plan", "cnl@8", "--seeds", "2"]) == EXIT_OK
    summary = json.loads((run / "summary.json").read_text())
    assert summary["seeds"] == [0, 1] and len(summary["map_values"]) == 2
    ckpt = run / "seed1" / "checkpoint.npz"
    assert ckpt.exists()
    ev = tmp_path / "ev"
    assert main(["eval", "--out", str(ev), "--checkpoint", str(ckpt), "--data", str(data)]) == EXIT_OK
    assert json.loads((ev / "eval.json").read_text())["mAP"] == pytest.approx(summary["map_values"][1])
    assert main(["eval", "--out", str(ev), "--checkpoint", str(ckpt), "--data", str(data),
                 "--protocol", "roreas-shape"]) == EXIT_OK
    assert "mAP" in capsys.readouterr().out


def test_cli_search_resume_and_plot(tmp_path, tiny_config, capsys):
    out = tmp_path / "search"
    args = ["search", "--config", str(tiny_config), "--out", str(out), "--budget", "2",
            "--set", "kinds=se,cnl", "--set", "positions=6,8", "--set", "search_seeds=1"]
    assert main(args) == EXIT_OK
    first = (out / "trials.csv").read_bytes()
    rules = json.loads((out / "rules.json").read_text())
    assert rules
    capsys.readouterr()
    assert main(args) == EXIT_OK
    assert "resuming" in capsys.readouterr().out
    assert (out / "trials.csv").read_bytes() == first
    assert main(["plot", "--out", str(out)]) == EXIT_OK
    svg = (out / "scatter.svg").read_bytes()
    assert main(["plot", "--out", str(out), "--output", str(tmp_path / "again.svg")]) == EXIT_OK
    assert (tmp_path / "again.svg").read_bytes() == svg


def test_cli_plot_empty_csv_warns(tmp_path, capsys):
    src = tmp_path / "empty.csv"
    src.write_text("key,map_mean,batches_per_sec\n")
    assert main(["plot", str(src), "--out", str(tmp_path)]) == EXIT_OK
    captured = capsys.readouterr()
    assert "warning" in captured.err and "(0 points)" in captured.out
