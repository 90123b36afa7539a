import hashlib
import json
from pathlib import Path

import pytest
import yaml

from flower import cli
from flower.checkpoint import save_checkpoint
from flower.errors import NumericalError
from flower.synthdata import load_dataset
from flower.trainer import ModelConfig, init_state

TINY = {
    "seed": 0,
    "data": {"count": 240, "num_classes": 4, "num_nuisance": 2, "frames": 4, "feat_dim": 4},
    "model": {"frame_hidden": 8, "embed_dim": 4, "flow_layers": 2, "flow_hidden": 8},
    "train": {"epochs": 3, "batch_size": 16, "beta": 0.01, "lr_embed": 0.01, "lr_flow": 0.01},
    "eval": {"pairs_per_class": 20},
    "paths": {"dataset": "data.jsonl", "out_dir": "run"},
    "mi_check": {"batch": 5000},
    "grad_check": {"instances": 1},
}


def write_cfg(path: Path, base=TINY, **sections) -> Path:
    cfg = json.loads(json.dumps(base))
    for name, values in sections.items():
        if isinstance(values, dict):
            cfg.setdefault(name, {}).update(values)
        else:
            cfg[name] = values
    path.write_text(yaml.safe_dump(cfg))
    return path


def digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@pytest.fixture
def work(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def run(*argv):
    return cli.main(list(argv))


def test_gen_data_writes_matching_header(work, capsys):
    cfg = write_cfg(work / "c.yaml")
    assert run("gen-data", "--config", str(cfg)) == 0
    header, utts = load_dataset(work / "data.jsonl")
    assert (header.T, header.F, header.C, header.Nn) == (4, 4, 4, 2)
    assert len(utts) == 240
    out = capsys.readouterr().out
    assert "y counts" in out and "n counts" in out


def test_gen_data_is_reproducible_and_seed_override(work):
    cfg = write_cfg(work / "c.yaml")
    assert run("gen-data", "--config", str(cfg), "--out", "a.jsonl") == 0
    assert run("gen-data", "--config", str(cfg), "--out", "b.jsonl") == 0
    assert run("gen-data", "--config", str(cfg), "--out", "c.jsonl", "--seed", "9") == 0
    assert digest(work / "a.jsonl") == digest(work / "b.jsonl") != digest(work / "c.jsonl")


def test_odd_feature_dim_is_config_error(work, capsys):
    cfg = write_cfg(work / "c.yaml", data={"feat_dim": 5})
    assert run("gen-data", "--config", str(cfg)) == 2
    assert "feat_dim" in capsys.readouterr().err


@pytest.mark.parametrize(
    "patch, key",
    [({"bogus": 1}, "bogus"), ({"train": {"betta": 0.1}}, "train.betta"), ({"data": {"count": "many"}}, "data.count"),
     ({"train": {"seed": 3}}, "train.seed")],
)
def test_unknown_or_bad_keys_rejected(work, capsys, patch, key):
    cfg = json.loads(json.dumps(TINY))
    for k, v in patch.items():
        if isinstance(v, dict):
            cfg[k].update(v)
        else:
            cfg[k] = v
    (work / "c.yaml").write_text(yaml.safe_dump(cfg))
    assert run("gen-data", "--config", "c.yaml") == 2
    assert key in capsys.readouterr().err


def test_scientific_notation_strings_accepted(work):
    (work / "c.yaml").write_text("train:\n  beta: 1e-3\n  lr_embed: 1e-3\n")
    from flower.config import load_config

    cfg = load_config(work / "c.yaml")
    assert cfg.train.beta == 0.001 and cfg.train.lr_embed == 0.001


def test_io_errors(work):
    assert run("gen-data", "--config", "missing.yaml") == 3
    cfg = write_cfg(work / "c.yaml")
    assert run("train", "--config", str(cfg)) == 3
    (work / "data.jsonl").write_text("not json\n")
    assert run("train", "--config", str(cfg)) == 3


def test_missing_config_flag_exits_2(work):
    with pytest.raises(SystemExit) as exc:
        run("train")
    assert exc.value.code == 2


@pytest.fixture
def trained(work):
    cfg = write_cfg(work / "c.yaml")
    assert run("gen-data", "--config", str(cfg)) == 0
    assert run("train", "--config", str(cfg)) == 0
    return work, cfg


def test_train_outputs(trained):
    work, _ = trained
    run_dir = work / "run"
    for name in ("metrics.jsonl", "timing.jsonl", "valid.jsonl", "final.ckpt", "best.ckpt"):
        assert (run_dir / name).exists(), name
    rows = [json.loads(l) for l in (run_dir / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [0, 1, 2]
    assert rows[0]["phase"] == "warmup" and rows[1]["L_redundancy"] is not None
    assert "wall_time" not in rows[0]
    timing = [json.loads(l) for l in (run_dir / "timing.jsonl").read_text().splitlines()]
    assert all(t["wall_time"] > 0 for t in timing)


def test_train_determinism_and_inputs_untouched(trained):
    work, cfg = trained
    first = digest(work / "run" / "metrics.jsonl")
    before = digest(work / "data.jsonl"), digest(cfg)
    assert run("train", "--config", str(cfg), "--out", "run2") == 0
    assert digest(work / "run2" / "metrics.jsonl") == first
    assert (digest(work / "data.jsonl"), digest(cfg)) == before


def test_resume_reproduces_uninterrupted_metrics(work):
    full = write_cfg(work / "full.yaml", train={"epochs": 4})
    short = write_cfg(work / "short.yaml", train={"epochs": 2})
    assert run("gen-data", "--config", str(full)) == 0
    assert run("train", "--config", str(full), "--out", "a") == 0
    assert run("train", "--config", str(short), "--out", "b") == 0
    assert run("train", "--config", str(full), "--out", "b", "--checkpoint", "b/final.ckpt") == 0
    assert digest(work / "a" / "metrics.jsonl") == digest(work / "b" / "metrics.jsonl")
    assert (work / "a" / "valid.jsonl").read_text() == (work / "b" / "valid.jsonl").read_text()


def test_beta_zero_matches_discriminative_only(work):
    zero = write_cfg(work / "z.yaml", train={"beta": 0.0})
    disc = write_cfg(work / "d.yaml", train={"beta": 0.0, "discriminative_only": True})
    assert run("gen-data", "--config", str(zero)) == 0
    assert run("train", "--config", str(zero), "--out", "z") == 0
    assert run("train", "--config", str(disc), "--out", "d") == 0
    rz = [json.loads(l) for l in (work / "z" / "metrics.jsonl").read_text().splitlines()]
    rd = [json.loads(l) for l in (work / "d" / "metrics.jsonl").read_text().splitlines()]
    assert [r["L_xent"] for r in rz] == [r["L_xent"] for r in rd]
    assert all(r["L_IB"] == r["L_xent"] for r in rz)
    assert (work / "z" / "valid.jsonl").read_text() == (work / "d" / "valid.jsonl").read_text()


def test_numeric_abort_exit_code(work, monkeypatch, capsys):
    cfg = write_cfg(work / "c.yaml")
    assert run("gen-data", "--config", str(cfg)) == 0

    def boom(*a, **k):
        raise NumericalError("non-finite loss", epoch=2, phase="flow", batch=5)

    monkeypatch.setattr(cli, "train", boom)
    assert run("train", "--config", str(cfg)) == 4
    err = capsys.readouterr().err
    assert "epoch=2" in err and "phase=flow" in err


def test_eval_outputs_and_report(trained, capsys):
    work, cfg = trained
    capsys.readouterr()
    assert run("eval", "--config", str(cfg), "--out", "ev") == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    report = json.loads(line)
    assert set(report) == {"eer", "class_probe_acc", "nuisance_probe_acc", "n_trials"}
    assert json.loads((work / "ev" / "report.json").read_text()) == report
    for name in ("embeddings.jsonl", "trials.txt", "scores.txt", "det.txt"):
        assert (work / "ev" / name).stat().st_size > 0
    assert len((work / "ev" / "trials.txt").read_text().splitlines()) == report["n_trials"]


def test_eval_checkpoint_errors(trained):
    work, cfg = trained
    assert run("eval", "--config", str(cfg), "--checkpoint", "nope.ckpt") == 5
    raw = bytearray((work / "run" / "final.ckpt").read_bytes())
    raw[-1] ^= 1
    (work / "bad.ckpt").write_bytes(bytes(raw))
    assert run("eval", "--config", str(cfg), "--checkpoint", "bad.ckpt") == 5
    other = write_cfg(work / "o.yaml", data={"feat_dim": 6}, paths={"dataset": "other.jsonl", "out_dir": "run"})
    assert run("gen-data", "--config", str(other)) == 0
    assert run("eval", "--config", str(other), "--checkpoint", "run/final.ckpt") == 5
    assert run("train", "--config", str(other), "--out", "x", "--checkpoint", "run/final.ckpt") == 5


def test_untrained_checkpoint_is_chance_on_structureless_data(work, capsys):
    # a random network keeps the input geometry, so chance needs label-free inputs
    cfg = write_cfg(work / "c.yaml", data={"count": 800, "class_scale": 0.0, "nuisance_scale": 0.0},
                    eval={"pairs_per_class": 200, "test_fraction": 0.5})
    assert run("gen-data", "--config", str(cfg)) == 0
    state = init_state(ModelConfig(**TINY["model"]), 0, 4, 4, 4)
    save_checkpoint(state, work / "untrained.ckpt")
    capsys.readouterr()
    assert run("eval", "--config", str(cfg), "--checkpoint", "untrained.ckpt") == 0
    report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert abs(report["eer"] - 0.5) < 0.07


@pytest.mark.slow
def test_trained_baseline_on_default_data(work, capsys):
    cfg = {
        "seed": 1,
        "data": {"count": 1200},
        "train": {"epochs": 8, "discriminative_only": True, "beta": 0.0},
        "paths": {"dataset": "d.jsonl", "out_dir": "r"},
    }
    (work / "c.yaml").write_text(yaml.safe_dump(cfg))
    assert run("gen-data", "--config", "c.yaml") == 0
    assert run("train", "--config", "c.yaml") == 0
    capsys.readouterr()
    assert run("eval", "--config", "c.yaml") == 0
    report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert report["eer"] < 0.15


def test_mi_check_passes(work, capsys):
    cfg = write_cfg(work / "c.yaml")
    assert run("mi-check", "--config", str(cfg)) == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") == 3 and "3/3" in out


def test_grad_check_and_corrupt_self_test(work, capsys):
    cfg = write_cfg(work / "c.yaml")
    assert run("grad-check", "--config", str(cfg)) == 0
    assert capsys.readouterr().out.count("[PASS]") == 5
    assert run("grad-check", "--config", str(cfg), "--corrupt") == 6
    corrupt_cfg = write_cfg(work / "k.yaml", grad_check={"corrupt": True})
    assert run("grad-check", "--config", str(corrupt_cfg)) == 6
