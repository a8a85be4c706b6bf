import json

import pytest
import torch

from cofipara.checkpoint import load_checkpoint
from cofipara.cli import main
from cofipara.data import synthetic_msd, synthetic_msti, write_fixture
from cofipara.model import SHARED_TAGS, module_tag
from cofipara.trainer import TrainConfig, build_model

SMALL = dict(d_model=16, heads=2, encoder_layers=1, n_q=4, image_size=32, max_target_len=24)


@pytest.fixture
def workdir(tmp_path):
    write_fixture(tmp_path / "raw", "msd.jsonl", synthetic_msd(2, 32))
    write_fixture(tmp_path / "raw", "msti.jsonl", synthetic_msti(1, 32))
    return tmp_path


def config(path, **kw):
    path.write_text(json.dumps({**SMALL, **kw}))
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


def test_unknown_subcommand_prints_usage(capsys):
    with pytest.raises(SystemExit) as err:
        main(["frobnicate"])
    assert err.value.code != 0
    assert "usage:" in capsys.readouterr().err


def test_errors_are_one_line(workdir, capsys):
    assert run("evaluate", "--data", workdir / "nope.jsonl", "--checkpoint", workdir / "x", "--out", workdir / "r") == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: rejected_input: ")
    bad = workdir / "bad.jsonl"
    bad.write_text('{"id": "a", "text": "hi", "image_path": "missing.png"}\n')
    assert run("rationales", "--data", bad, "--out", workdir / "o.jsonl") == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: dataset_invalid: ")


def test_rationales_are_idempotent_and_leave_inputs_alone(workdir, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    raw = (workdir / "raw" / "msd.jsonl").read_bytes()
    for name in ("a", "b"):
        assert run("rationales", "--data", workdir / "raw" / "msd.jsonl", "--cache", workdir / f"{name}.cache.jsonl",
                   "--out", workdir / name / "msd.jsonl", "--jobs", 2) == 0
    assert (workdir / "a" / "msd.jsonl").read_bytes() == (workdir / "b" / "msd.jsonl").read_bytes()
    assert (workdir / "a.cache.jsonl").read_bytes() == (workdir / "b.cache.jsonl").read_bytes()
    assert (workdir / "raw" / "msd.jsonl").read_bytes() == raw
    rec = json.loads((workdir / "a" / "msd.jsonl").read_text().splitlines()[0])
    assert rec["rationale_pos"].startswith("RATIONALE[sarcastic|") and rec["image_path"].startswith("../raw/")


def test_pretrain_zero_epochs_equals_init(workdir):
    assert run("rationales", "--data", workdir / "raw" / "msd.jsonl", "--out", workdir / "aug" / "msd.jsonl") == 0
    cfg = config(workdir / "cfg.json", epochs=0)
    assert run("pretrain", "--config", cfg, "--data", workdir / "aug" / "msd.jsonl", "--out", workdir / "run",
               "--seed", 3) == 0
    ckpt = load_checkpoint(workdir / "run" / "pretrain.safetensors")
    init = build_model(TrainConfig.desk(**SMALL, epochs=0, seed=3))
    for name, p in init.named_parameters():
        if module_tag(name) in SHARED_TAGS:
            assert torch.equal(ckpt.tensors[name], p.detach())


def test_reannotate_writes_dataset_and_log(workdir):
    s = synthetic_msti(1, 32)[0]
    ocr = workdir / "ocr.jsonl"
    ocr.write_text(json.dumps({"sample_id": s.id, "box_index": 0, "text": "SALE"}) + "\n")
    out = workdir / "clean" / "msti.jsonl"
    assert run("reannotate", "--data", workdir / "raw" / "msti.jsonl", "--ocr", ocr, "--threshold", 0.0,
               "--out", out) == 0
    rec = json.loads(out.read_text())
    assert rec["visual_targets"] == [] and "SALE" in rec["textual_targets"] and "[ocr] SALE" in rec["text"]
    decisions = [json.loads(line) for line in (workdir / "clean" / "msti.decisions.jsonl").read_text().splitlines()]
    assert decisions[0]["action"] == "convert_to_text"
    assert run("reannotate", "--data", workdir / "raw" / "msti.jsonl", "--out", out) == 1


def test_finetune_evaluate_predict(workdir):
    aug = workdir / "aug" / "msti.jsonl"
    assert run("rationales", "--data", workdir / "raw" / "msti.jsonl", "--phase", "finetune", "--out", aug) == 0
    cfg = config(workdir / "cfg.json", epochs=150, batch_size=1)
    assert run("finetune", "--config", cfg, "--data", aug, "--from-scratch", "--out", workdir / "run") == 0
    ckpt = workdir / "run" / "finetune.safetensors"
    assert run("evaluate", "--data", aug, "--checkpoint", ckpt, "--out", workdir / "report.json") == 0
    report = json.loads((workdir / "report.json").read_text())
    assert report["em"] == 100.0
    assert run("predict", "--data", aug, "--checkpoint", ckpt, "--out", workdir / "pred.jsonl",
               "--conf-threshold", 0.0) == 0
    pred = json.loads((workdir / "pred.jsonl").read_text())
    assert pred["explanation"].startswith("RATIONALE[sarcastic|")
    assert len(pred["boxes"]) == 4 and all(0 <= b["confidence"] <= 1 for b in pred["boxes"])
    assert pred["targets"] == synthetic_msti(1, 32)[0].textual_targets


def test_finetune_without_checkpoint_fails(workdir, capsys):
    assert run("rationales", "--data", workdir / "raw" / "msti.jsonl", "--phase", "finetune",
               "--out", workdir / "aug.jsonl") == 0
    assert run("finetune", "--data", workdir / "aug.jsonl", "--out", workdir / "run") == 1
    assert "--checkpoint is required" in capsys.readouterr().err
