import json

import pytest

from signrec.cli import main
from signrec.ctc import read_decodes

TINY = """\
model_dim = 8
num_heads = 2
num_layers = 1
kernel_size = 3
max_relative_distance = 8
level_channels = 4,8
embed_dim = 16
epochs = 2
batch_size = 4
pretrain_epochs = 1
vocab_size = 4
train_size = 6
dev_size = 3
test_size = 2
max_len = 3
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY)
    assert main(["gen-data", "--out", str(root / "data"), "--config", str(root / "tiny.cfg")]) == 0
    return root


def tree(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def cfg_args(root):
    return ["--config", str(root / "tiny.cfg")]


def test_gen_data_default_manifests(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--train-size", "3", "--dev-size", "2", "--test-size", "1"]) == 0
    for split, n in (("train", 3), ("dev", 2), ("test", 1)):
        lines = (tmp_path / f"{split}.tsv").read_text().splitlines()
        assert len(lines) == n and all(len(ln.split("\t")) == 3 for ln in lines)
    assert (tmp_path / "vocab.txt").read_text().splitlines()[0] == "<blank>"


def test_gen_data_same_seed_same_tree(workdir, tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "again"), *cfg_args(workdir)]) == 0
    assert tree(tmp_path / "again") == tree(workdir / "data")


def test_gen_data_seed_changes_tree(workdir, tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "s1"), "--seed", "1", *cfg_args(workdir)]) == 0
    assert tree(tmp_path / "s1") != tree(workdir / "data")


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["gen-data"], ["train", "--data", "x"]])
def test_usage_errors_exit_1(argv):
    assert main(argv) == 1


def test_bad_config_exits_1(workdir, tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("no_such_key = 3\n")
    assert main(["gen-data", "--out", str(tmp_path / "o"), "--config", str(bad)]) == 1


def test_pretrained_flag_without_checkpoint_is_usage_error(workdir, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--data", str(workdir / "data"), "--out", str(out), "--ablation", "a1", *cfg_args(workdir)]) == 1
    assert not out.exists()


def test_missing_data_exits_2(workdir, tmp_path):
    assert main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o"), "--ablation", "baseline",
                 *cfg_args(workdir)]) == 2


@pytest.fixture(scope="module")
def trained(workdir):
    pre = workdir / "pre"
    assert main(["pretrain", "--data", str(workdir / "data"), "--out", str(pre), *cfg_args(workdir)]) == 0
    out = workdir / "model"
    assert main(["train", "--data", str(workdir / "data"), "--out", str(out), "--ablation", "a3",
                 "--pretrained", str(pre / "pretrain.ckpt"), *cfg_args(workdir)]) == 0
    return out


def test_pretrain_outputs(workdir, trained):
    log = (workdir / "pre" / "pretrain_log.jsonl").read_text().splitlines()
    assert len(log) == 1 and "per_component" in json.loads(log[0])


def test_train_one_metrics_record_per_epoch(trained):
    recs = [json.loads(ln) for ln in (trained / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in recs] == [0, 1]
    for r in recs:
        assert {"train_loss", "dev_wer", "dev_S", "dev_D", "dev_I"} <= set(r)
    assert "pyramids = true" in (trained / "config.txt").read_text()


def test_eval_fixed_greedy_matches_decode(workdir, trained, tmp_path):
    data = workdir / "data"
    assert main(["decode", "--model", str(trained / "model.ckpt"), "--manifest", str(data / "dev.tsv"),
                 "--out", str(tmp_path / "greedy.txt"), "--mode", "greedy"]) == 0
    assert main(["eval", "--data", str(data), "--model", str(trained / "model.ckpt"), "--beam", "1", "--alpha", "0",
                 "--out", str(tmp_path / "ev")]) == 0
    assert (tmp_path / "ev" / "decodes_dev.txt").read_bytes() == (tmp_path / "greedy.txt").read_bytes()
    assert set(read_decodes(tmp_path / "greedy.txt")) == {
        ln.split("\t")[0] for ln in (data / "dev.tsv").read_text().splitlines()}


def test_eval_grid_report(workdir, trained, tmp_path, capsys):
    assert main(["eval", "--data", str(workdir / "data"), "--model", str(trained / "model.ckpt"),
                 "--out", str(tmp_path)]) == 0
    text = (tmp_path / "report.txt").read_text()
    assert "sub" in text and "del" in text and "ins" in text and "test" in text
    recs = [json.loads(ln) for ln in (tmp_path / "report.jsonl").read_text().splitlines()]
    assert sum(r["kind"] == "grid" for r in recs) == 55
    assert text in capsys.readouterr().out


def test_eval_beam_without_alpha(workdir, trained):
    assert main(["eval", "--data", str(workdir / "data"), "--model", str(trained / "model.ckpt"), "--beam", "3"]) == 1


def test_eval_missing_model_nonzero(workdir, tmp_path):
    assert main(["eval", "--data", str(workdir / "data"), "--model", str(tmp_path / "none.ckpt")]) != 0


def test_corrupt_model_exits_2(workdir, trained, tmp_path):
    raw = bytearray((trained / "model.ckpt").read_bytes())
    raw[len(raw) // 2] ^= 1
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(raw))
    assert main(["decode", "--model", str(bad), "--manifest", str(workdir / "data" / "dev.tsv"),
                 "--out", str(tmp_path / "d.txt")]) == 2
