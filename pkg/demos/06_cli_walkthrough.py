"""The command line end to end: synthesize a cohort, then run every stage.

Usage: python demos/06_cli_walkthrough.py [output_dir]
Equivalent shell commands are printed before each step.
"""
import json
import sys
import tempfile
from pathlib import Path

from matchstudy.cli import main
from matchstudy.pipeline import config_template

root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="matchstudy-"))
root.mkdir(parents=True, exist_ok=True)
spec = {"n_football": 150, "n_nonsport": 250, "n_othersport": 120,
        "covariates": ["iq", "parent_edu", "hssize"],
        "outcomes": [{"tag": "LF", "wave": "2004", "effect": -0.5},
                     {"tag": "DWR", "wave": "2004", "effect": -0.5}, {"tag": "CESD", "wave": "2004"},
                     {"tag": "heavy", "wave": "2004", "kind": "binary"}]}
(root / "synth.json").write_text(json.dumps(spec, indent=2))
steps = [["synth", "--config", str(root / "synth.json"), "--seed", "7", "--out", str(root)]]

cfg = dict(config_template(), cohort_path=str(root / "cohort.csv"),
           schema_path=str(root / "cohort.schema.json"),
           secondary=[{"tag": "heavy", "wave": "2004"}], falsification=[])
cfg.pop("output_dir")
(root / "study.json").write_text(json.dumps(cfg, indent=2))
steps.append(["run", "--config", str(root / "study.json"), "--out", str(root / "results")])

for argv in steps:
    print("$ matchstudy " + " ".join(argv))
    code = main(argv)
    if code:
        sys.exit(code)
print(f"\nartifacts under {root / 'results'}; the manifest lists every file with its sha256")
