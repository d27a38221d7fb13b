import argparse
import json

import pytest

from meterlab import checks, cli, dialgen, mrlm
from meterlab import tensor as tt


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    assert cli.main(["gen", "--out", str(root / "data"), "--total", "40", "--image-size", "16",
                     "--workers", "1", "--seed", "2"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(corpus):
    mc = corpus / "model.json"
    mc.write_text(json.dumps(mrlm.with_flags(checks.TINY, dtype="float32").to_dict()))
    run = corpus / "train"
    assert cli.main(["train", "--data", str(corpus / "data"), "--out", str(run), "--model-config", str(mc),
                     "--stage1-iters", "4", "--stage2-iters", "2", "--batch-size", "4", "--eval"]) == 0
    return run


def test_gen_outputs(corpus, capsys):
    data = corpus / "data"
    summary = json.loads((data / "summary.json").read_text())
    assert summary["total"] == 40
    assert abs(summary["train"] / 40 - 0.81) <= 1 / 40
    assert len(list((data / "images").glob("*.png"))) == 40
    assert dialgen.load_gen_config(data / "gen_config.json").master_seed == 2


def test_gen_refuses_overwrite(corpus, capsys):
    assert cli.main(["gen", "--out", str(corpus / "data"), "--total", "40"]) == 1
    assert "--force" in capsys.readouterr().err


def test_gen_force_and_determinism(tmp_path):
    args = ["gen", "--total", "12", "--image-size", "16", "--workers", "1", "--corrupted"]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "a"), "--force"]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    for f in ("manifest.jsonl", "summary.json", "images/m1-00000.png"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_gen_paper_profile_size():
    ns = argparse.Namespace(config=None, profile="paper", total=600, image_size=64, corrupted=False, seed=None)
    assert sum(a.count for a in cli._gen_config(ns).archetypes) == 9830


def test_gen_from_config_file(tmp_path):
    cfg = dialgen.paper_profile(9, image_size=16)
    dialgen.save_config(cfg, tmp_path / "g.json")
    assert cli.main(["gen", "--config", str(tmp_path / "g.json"), "--out", str(tmp_path / "d"), "--workers", "1"]) == 0
    assert json.loads((tmp_path / "d" / "summary.json").read_text())["total"] == 9


def test_train_outputs(trained):
    for f in ("model.ckpt", "history.csv", "train_config.json", "model_config.json", "summary.json"):
        assert (trained / f).exists()
    s = json.loads((trained / "summary.json").read_text())
    assert s["steps"] == 6 and s["acc_eps"] is not None


def test_eval_mrlm(corpus, trained, capsys):
    out = corpus / "eval"
    assert cli.main(["eval", "--data", str(corpus / "data"), "--checkpoint", str(trained / "model.ckpt"),
                     "--out", str(out)]) == 0
    s = json.loads((out / "summary.json").read_text())
    assert set(s) >= {"archetype", "environment", "none"}
    assert list(s["environment"])[:8] == list(dialgen.CORRUPTION_KINDS)
    assert (out / "report_archetype.csv").exists()
    assert len((out / "predictions.jsonl").read_text().splitlines()) == s["n"]


def test_eval_georead_is_perfect_on_clean(tmp_path, capsys):
    # the angle reader needs a realistic canvas; 16 px dials are too coarse
    assert cli.main(["gen", "--out", str(tmp_path / "d64"), "--total", "24", "--workers", "1"]) == 0
    out = tmp_path / "geo"
    assert cli.main(["eval", "--data", str(tmp_path / "d64"), "--model", "georead", "--out", str(out),
                     "--group-by", "none"]) == 0
    row = json.loads((out / "summary.json").read_text())["none"]["Weighted"]
    assert row["acc_eps"] == 100.0 and row["acc_theta"] == 100.0


def test_eval_metric_gate_exit_code(corpus, capsys):
    code = cli.main(["eval", "--data", str(corpus / "data"), "--model", "georead", "--out",
                     str(corpus / "gate"), "--group-by", "none", "--min-acc-eps", "101"])
    assert code == 2


def test_eval_missing_checkpoint(corpus, capsys):
    code = cli.main(["eval", "--data", str(corpus / "data"), "--checkpoint", str(corpus / "nope.ckpt"),
                     "--out", str(corpus / "e2")])
    assert code == 1
    assert "checkpoint" in capsys.readouterr().err


def test_eval_corpus_mismatch(tmp_path, trained, capsys):
    assert cli.main(["gen", "--out", str(tmp_path / "other"), "--total", "10", "--image-size", "16",
                     "--workers", "1", "--seed", "99"]) == 0
    args = ["eval", "--data", str(tmp_path / "other"), "--checkpoint", str(trained / "model.ckpt")]
    assert cli.main(args + ["--out", str(tmp_path / "e")]) == 1
    assert cli.main(args + ["--out", str(tmp_path / "e2"), "--allow-corpus-mismatch"]) == 0


def test_report_writes_svgs(corpus, trained, capsys):
    (trained / "report_environment.csv").write_bytes((corpus / "eval" / "report_environment.csv").read_bytes())
    assert cli.main(["report", str(trained)]) == 0
    assert (trained / "loss.svg").read_text().lstrip().startswith("<?xml")
    assert (trained / "environment.svg").exists()


def test_report_missing_run(tmp_path, capsys):
    assert cli.main(["report", str(tmp_path / "nothing")]) == 1


def test_ablate_four_rows(corpus, capsys):
    mc = corpus / "model.json"
    out = corpus / "ablate"
    assert cli.main(["ablate", "--data", str(corpus / "data"), "--out", str(out), "--model-config", str(mc),
                     "--stage1-iters", "2", "--stage2-iters", "1", "--batch-size", "4", "--seeds", "0"]) == 0
    s = json.loads((out / "summary.json").read_text())
    assert len(s["results"]) == 4
    assert "Acc_eps" in (out / "ablation.md").read_text()


def test_verify_subset_passes(capsys):
    assert cli.main(["verify", "--only", "shape_laws", "metric_oracle", "op_gradients"]) == 0
    assert "3/3 checks passed" in capsys.readouterr().out


def test_verify_catches_softmax_sign_flip(monkeypatch, capsys):
    real = tt.softmax

    def flipped(a, axis=-1):
        out = real(a, axis)
        fwd = out.backward_fn
        if fwd is not None:
            out.backward_fn = lambda g: tuple(-x for x in fwd(g))
        return out

    monkeypatch.setattr(tt, "softmax", flipped)
    assert cli.main(["verify", "--only", "op_gradients", "normalization"]) == 2
    assert "FAIL  op gradients" in capsys.readouterr().out


def test_verify_unknown_check(capsys):
    assert cli.main(["verify", "--only", "nonsense"]) == 1


def test_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main([])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        cli.main(["eval", "--model", "yolo", "--data", "x"])
    assert e.value.code == 1


def test_train_bad_data_dir(tmp_path, capsys):
    assert cli.main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "r")]) == 1


def test_full_length_schedule_with_override():
    ns = argparse.Namespace(train_config="paper", stage1_iters=10, stage2_iters=None, batch_size=None,
                            lr_initial=None, lr_final=None, seed=None)
    cfg = cli._train_config(ns)
    assert (cfg.stage1_iters, cfg.stage2_iters, cfg.lr_initial) == (10, 50_000, 1e-4)
