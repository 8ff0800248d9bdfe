import json

import numpy as np
import pytest

from condenser.cli import main
from condenser.config import DEFAULTS, coerce, comma_list, dump_config, load_config
from condenser.distill import SyntheticSet
from condenser.errors import ConfigError


# ---------------------------------------------------------------------------
# config parsing

def test_defaults_returned_without_file():
    assert load_config() == DEFAULTS


def test_file_parsing(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("""
# a comment
distill.ipc = 3
eval.lr = 0.5    # trailing comment
data.source = idx
""")
    cfg = load_config(p)
    assert cfg["distill.ipc"] == 3
    assert cfg["eval.lr"] == 0.5
    assert cfg["data.source"] == "idx"
    assert cfg["distill.factor"] == DEFAULTS["distill.factor"]


def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("distill.speed = 9\n")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(None, ("nope=1",))


def test_type_coercion_errors():
    assert coerce("distill.ipc", "7") == 7
    assert coerce("perturb.alpha", "2") == 2.0
    with pytest.raises(ConfigError):
        coerce("distill.ipc", "seven")
    with pytest.raises(ConfigError):
        coerce("distill.ipc", "1.5")


def test_overrides_win(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("distill.ipc = 3\n")
    cfg = load_config(p, ("distill.ipc=9",))
    assert cfg["distill.ipc"] == 9


def test_missing_file_and_bad_lines(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")
    p = tmp_path / "run.cfg"
    p.write_text("just words\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_dump_roundtrip(tmp_path):
    cfg = load_config(None, ("distill.ipc=4", "eval.lr=0.125"))
    p = tmp_path / "echo.cfg"
    p.write_text(dump_config(cfg))
    assert load_config(p) == cfg


def test_comma_list():
    assert comma_list("a, b ,c") == ("a", "b", "c")
    assert comma_list("one") == ("one",)


# ---------------------------------------------------------------------------
# CLI workflow (tiny end-to-end run)

SMALL = (
    "data.train_per_class=6", "data.test_per_class=4", "data.noise=0.1",
    "net.width=4", "net.depth=2",
    "pool.n=2", "pool.epochs=1", "pool.batch_size=16",
    "distill.ipc=1", "distill.outer_steps=2", "distill.inner_steps=1",
    "distill.batch_real=4", "distill.augment=none",
    "eval.epochs=2", "eval.reps=1", "eval.batch_size=8",
)


def run(args):
    return main(list(args))


def sets(extra=()):
    out = []
    for kv in SMALL + tuple(extra):
        out += ["--set", kv]
    return out


@pytest.fixture(scope="module")
def workflow(tmp_path_factory):
    root = tmp_path_factory.mktemp("wf")
    assert run(["pretrain", "--out", str(root / "pool")] + sets()) == 0
    assert run(["distill", "--pool", str(root / "pool"),
                "--out", str(root / "run")] + sets()) == 0
    assert run(["eval", "--synthetic", str(root / "run" / "synthetic.ddsy"),
                "--out", str(root / "run")] + sets()) == 0
    assert run(["report", "--run", str(root / "run")]) == 0
    return root


def test_pretrain_outputs(workflow):
    pool = workflow / "pool"
    assert sorted(p.name for p in pool.glob("*.ddck")) == \
        ["model_000.ddck", "model_001.ddck"]
    assert (pool / "config_resolved.cfg").exists()


def test_distill_outputs(workflow):
    run_dir = workflow / "run"
    synth = SyntheticSet.load(run_dir / "synthetic.ddsy")
    assert synth.images.shape == (10, 1, 28, 28)
    lines = (run_dir / "run_log.jsonl").read_text().splitlines()
    assert len(lines) == 2
    assert json.loads(lines[0])["step"] == 0
    resolved = (run_dir / "config_resolved.cfg").read_text()
    assert "distill.outer_steps = 2" in resolved


def test_eval_outputs(workflow):
    blob = json.loads((workflow / "run" / "eval.json").read_text())
    assert set(blob) == {"distilled", "random_real", "margin", "protocol_match"}
    assert blob["distilled"]["config_hash"] == blob["random_real"]["config_hash"]
    assert blob["protocol_match"] is True
    assert len(blob["distilled"]["accuracies"]) == 1
    for field in ("steps", "wall_seconds", "flops"):
        assert blob["distilled"][field] > 0


def test_report_outputs(workflow):
    run_dir = workflow / "run"
    for name in ("run_log.csv", "curves.csv", "loss_curves.png",
                 "synthetic_grid.png", "eval.csv", "eval_bars.png"):
        assert (run_dir / name).exists(), name
    header = (run_dir / "run_log.csv").read_text().splitlines()[0]
    assert header.split(",")[:3] == ["step", "matching_loss_mean", "net_loss"]
    png = (run_dir / "loss_curves.png").read_bytes()
    assert png[:8] == b"\x89PNG\r\n\x1a\n"


def test_preset_flag_sets_steps(tmp_path):
    # parse-level check only: preset must override outer_steps in the config
    from condenser.cli import make_parser
    from condenser.config import load_config as lc
    args = make_parser().parse_args(
        ["distill", "--pool", "p", "--out", "o", "--preset", "x20"])
    overrides = [f"distill.outer_steps=100"] if args.preset == "x20" else []
    assert lc(None, tuple(overrides))["distill.outer_steps"] == 100


def test_exit_code_on_config_error(tmp_path):
    assert run(["pretrain", "--out", str(tmp_path / "o"),
                "--set", "bogus.key=1"]) == 2


def test_exit_code_on_missing_artifacts(tmp_path):
    assert run(["distill", "--pool", str(tmp_path / "nopool"),
                "--out", str(tmp_path / "o")] + sets()) == 2
    assert run(["eval", "--synthetic", str(tmp_path / "no.ddsy"),
                "--out", str(tmp_path / "o")] + sets()) == 2
    assert run(["report", "--run", str(tmp_path / "empty")]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exit_code_on_nan(tmp_path):
    # a rate near the float ceiling overflows the pixels, and the next
    # matching pass turns the overflow into NaN
    root = tmp_path
    assert run(["pretrain", "--out", str(root / "pool")] + sets()) == 0
    code = run(["distill", "--pool", str(root / "pool"),
                "--out", str(root / "run")]
               + sets(("distill.image_lr=1e308", "distill.outer_steps=5")))
    assert code == 3
