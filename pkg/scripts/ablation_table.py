"""Four-row ablation table (baseline, a1, a2, a3) on a synthetic corpus, via the CLI.

    python3 scripts/ablation_table.py --work /tmp/ablation [--epochs 15] [--seed 0]

Writes one run directory per preset under --work and prints dev/test WER rows.
"""
import argparse
import json
import sys
from pathlib import Path

from signrec.cli import main as cli

HARD = """\
model_dim = 32
vocab_size = 20
train_size = 160
dev_size = 20
test_size = 20
max_len = 6
shared_fraction = 0.85
jitter = 0.04
style = 0.3
"""


def run(argv):
    code = cli(argv)
    if code:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", type=Path, required=True)
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    args.work.mkdir(parents=True, exist_ok=True)
    cfg = args.work / "run.cfg"
    cfg.write_text(HARD + f"epochs = {args.epochs}\nseed = {args.seed}\n")
    common = ["--config", str(cfg)]
    data = args.work / "data"
    run(["gen-data", "--out", str(data), *common])
    run(["pretrain", "--data", str(data), "--out", str(args.work / "pretrain"), *common])
    rows = []
    for preset in ("baseline", "a1", "a2", "a3"):
        out = args.work / preset
        run(["train", "--data", str(data), "--out", str(out), "--ablation", preset,
             "--pretrained", str(args.work / "pretrain" / "pretrain.ckpt"), *common])
        run(["eval", "--data", str(data), "--model", str(out / "model.ckpt"), "--beam", "1", "--alpha", "0",
             "--out", str(out / "eval")])
        recs = {r["split"]: r for r in map(json.loads, (out / "eval" / "report.jsonl").read_text().splitlines())
                if r["kind"] == "split"}
        rows.append((preset, recs["dev"]["wer"], recs["test"]["wer"]))
    print(f"\n{'preset':<10}{'dev WER':>9}{'test WER':>10}")
    for preset, dev, test in rows:
        print(f"{preset:<10}{dev:>9.2f}{test:>10.2f}")


if __name__ == "__main__":
    main()
