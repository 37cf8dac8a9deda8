"""
The command line
================

Every stage is a subcommand that reads ``key = value`` configuration,
writes its effective configuration, a metrics CSV and a checkpoint.
This runs the whole pipeline at a tiny scale.
"""
from pathlib import Path

from carnet.cli import run

root = Path("tutorial_runs/cli")
steps = [
    ["generate-data", "--steps", "800", "--out", f"{root}/data"],
    ["pretrain-ae", "--dataset", f"{root}/data", "--epochs", "1", "--out", f"{root}/ae"],
    ["train-carnet", "--dataset", f"{root}/data", "--pretrained", f"{root}/ae/autoencoder",
     "--epochs", "1", "--batch-size", "16", "--out", f"{root}/carnet"],
    ["train-il", "--dataset", f"{root}/data", "--backbone", f"{root}/carnet/carnet", "--epochs", "2",
     "--seeds", "0,1", "--out", f"{root}/il"],
    ["eval", "--checkpoint", f"{root}/il", "--dataset", f"{root}/data", "--out", f"{root}/eval"],
    ["export-metrics", "--inputs", f"{root}/carnet,{root}/il", "--out", f"{root}/export"],
]
for argv in steps:
    print("$ carnet", " ".join(argv))
    code = run(argv)
    print("exit", code)

# configuration mistakes exit with status 2 and say what is wrong
print("exit", run(["generate-data", "--stepz", "5", "--out", f"{root}/bad"]))
print((root / "il" / "config.txt").read_text())
