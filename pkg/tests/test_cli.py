import json
import os

import numpy as np
import pytest

from vtflow import world
from vtflow.cli import main


def run(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    return str(d)


@pytest.fixture(scope="module")
def dataset(workdir):
    path = os.path.join(workdir, "d.jsonl")
    assert run("gen-data", "--n", "8", "--seed", "0", "--out", path) == 0
    return path


@pytest.fixture(scope="module")
def stage0_ckpt(workdir, dataset):
    path = os.path.join(workdir, "s0.ckpt")
    assert run("train", "--stage", "0", "--data", dataset, "--out", path,
               "--steps", "3", "--quiet") == 0
    return path


@pytest.fixture(scope="module")
def stage1_ckpt(workdir, dataset, stage0_ckpt):
    path = os.path.join(workdir, "s1.ckpt")
    assert run("train", "--stage", "1", "--data", dataset, "--init", stage0_ckpt,
               "--out", path, "--steps", "3", "--quiet") == 0
    return path


def test_gen_data_binary_and_jsonl_agree(workdir):
    pj = os.path.join(workdir, "a.jsonl")
    pb = os.path.join(workdir, "a.bin")
    assert run("gen-data", "--n", "5", "--seed", "7", "--out", pj) == 0
    assert run("gen-data", "--n", "5", "--seed", "7", "--out", pb, "--binary") == 0
    sj = world.load_dataset_jsonl(pj)
    sb = world.load_dataset_binary(pb)
    for a, b in zip(sj, sb):
        assert a.scene == b.scene
        assert np.array_equal(a.frames, b.frames)


def test_gen_data_usage_errors(workdir):
    assert run("gen-data", "--n", "0", "--out", os.path.join(workdir, "x.jsonl")) == 1
    assert run("gen-data", "--n", "2", "--split", "nope",
               "--out", os.path.join(workdir, "x.jsonl")) == 1  # argparse choice


def test_unknown_subcommand_exits_1():
    assert run("frobnicate") == 1


def test_train_writes_metrics(dataset, stage0_ckpt):
    lines = [json.loads(l) for l in open(stage0_ckpt + ".metrics.jsonl")]
    assert lines and lines[-1]["step"] == 3


def test_train_stage_ordering_enforced(workdir, dataset, stage0_ckpt, stage1_ckpt):
    out = os.path.join(workdir, "bad.ckpt")
    # stage 0 refuses --init
    assert run("train", "--stage", "0", "--data", dataset, "--init", stage0_ckpt,
               "--out", out, "--steps", "1", "--quiet") == 1
    # stage 1 requires --init
    assert run("train", "--stage", "1", "--data", dataset, "--out", out,
               "--steps", "1", "--quiet") == 1
    # stage 2 from a stage-0 checkpoint is rejected
    assert run("train", "--stage", "2", "--data", dataset, "--init", stage0_ckpt,
               "--out", out, "--steps", "1", "--quiet") == 1
    # stage 2 from stage 1 works
    out2 = os.path.join(workdir, "s2.ckpt")
    assert run("train", "--stage", "2", "--data", dataset, "--init", stage1_ckpt,
               "--out", out2, "--steps", "2", "--quiet") == 0


def test_train_missing_data_file_exits_2(workdir):
    assert run("train", "--stage", "0", "--data", os.path.join(workdir, "absent.jsonl"),
               "--out", os.path.join(workdir, "x.ckpt"), "--steps", "1", "--quiet") == 2


def test_train_corrupt_init_exits_2(workdir, dataset):
    bad = os.path.join(workdir, "corrupt.ckpt")
    open(bad, "wb").write(b"UVGUgarbagegarbage")
    assert run("train", "--stage", "1", "--data", dataset, "--init", bad,
               "--out", os.path.join(workdir, "x.ckpt"), "--steps", "1", "--quiet") == 2


def test_infer_understand(workdir, dataset, stage1_ckpt):
    out = os.path.join(workdir, "u")
    assert run("infer", "--ckpt", stage1_ckpt, "--mode", "understand",
               "--input", dataset, "--steps", "3", "--out", out) == 0
    lines = open(out + ".captions.txt").read().strip("\n").split("\n")
    assert len(lines) == 8


def test_infer_generate_and_joint(workdir, dataset, stage1_ckpt):
    out = os.path.join(workdir, "g.bin")
    assert run("infer", "--ckpt", stage1_ckpt, "--mode", "generate",
               "--input", dataset, "--steps", "3", "--out", out) == 0
    assert len(world.load_dataset_binary(out)) == 8
    out_j = os.path.join(workdir, "j.bin")
    assert run("infer", "--ckpt", stage1_ckpt, "--mode", "joint", "--n", "3",
               "--steps", "3", "--out", out_j) == 0
    assert len(world.load_dataset_binary(out_j)) == 3


def test_infer_understand_requires_input(workdir, stage1_ckpt):
    assert run("infer", "--ckpt", stage1_ckpt, "--mode", "understand",
               "--steps", "2", "--out", os.path.join(workdir, "u2")) == 1


def test_eval_writes_report(workdir, dataset, stage1_ckpt):
    out = os.path.join(workdir, "report.json")
    assert run("eval", "--ckpt", stage1_ckpt, "--dataset", dataset,
               "--mode", "understand", "--steps", "2", "--out", out) == 0
    rep = json.load(open(out))
    assert rep["mode"] == "understand" and rep["sample_count"] == 8


def test_report_csv(workdir, stage0_ckpt):
    out = os.path.join(workdir, "m.csv")
    assert run("report", "--metrics", stage0_ckpt + ".metrics.jsonl", "--out", out) == 0
    lines = open(out).read().strip().split("\n")
    assert lines[0] == "step,loss_total,loss_v,loss_t"
    assert len(lines) >= 2
    assert run("report", "--metrics", os.path.join(workdir, "absent.jsonl"),
               "--out", out) == 2


def test_training_cli_determinism(workdir, dataset, monkeypatch):
    monkeypatch.setenv("UVGU_REFERENCE_MODE", "1")
    blobs = []
    for tag in ("r1", "r2"):
        out = os.path.join(workdir, f"{tag}.ckpt")
        assert run("train", "--stage", "0", "--data", dataset, "--out", out,
                   "--steps", "3", "--seed", "5", "--quiet") == 0
        blobs.append((open(out, "rb").read(), open(out + ".metrics.jsonl", "rb").read()))
    assert blobs[0][0] == blobs[1][0]   # checkpoints byte-identical
    assert blobs[0][1] == blobs[1][1]   # metrics byte-identical


def test_config_file_roundtrip(workdir, dataset):
    cfg = os.path.join(workdir, "run.json")
    json.dump({"train": {"steps": 2, "batch_size": 4}}, open(cfg, "w"))
    out = os.path.join(workdir, "cfg.ckpt")
    assert run("train", "--config", cfg, "--stage", "0", "--data", dataset,
               "--out", out, "--quiet") == 0
    lines = [json.loads(l) for l in open(out + ".metrics.jsonl")]
    assert lines[-1]["step"] == 2
    # unknown keys are a usage error
    json.dump({"train": {"bogus": 1}}, open(cfg, "w"))
    assert run("train", "--config", cfg, "--stage", "0", "--data", dataset,
               "--out", out, "--quiet") == 1
