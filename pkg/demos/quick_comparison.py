"""Train both variants on a small benchmark and compare them per split.

A reduced dataset and two epochs keep this to a couple of minutes; the
numbers are noisy and only show the workflow.  The full comparison is
``ci-sed gen-data`` followed by ``ci-sed train`` and ``ci-sed compare``.

    python3 demos/quick_comparison.py [workdir]
"""

import sys
import tempfile
from pathlib import Path

from ci_sed.cli import compare_table
from ci_sed.metrics import read_metrics_csv
from ci_sed.synthdata import GeneratorConfig, emit_dataset
from ci_sed.trainer import TrainConfig, run_experiment


def main(workdir: Path):
    data = workdir / "data"
    if not (data / "dataset.json").exists():
        emit_dataset(GeneratorConfig(n=120), 400, 100, 100, out_dir=data)
    cfg = TrainConfig(epochs=2)
    csv_path = run_experiment(cfg, data, [0], workdir / "run")
    print(f"{'split':<18} {'metric':<14} {'baseline':>9} {'ci':>9} {'delta':>8}")
    for e in compare_table(read_metrics_csv(csv_path)):
        if e["metric"] in ("seg_f1", "event_f1", "sed_map", "event_f1_c0", "event_f1_c1"):
            print(f"{e['split']:<18} {e['metric']:<14} {e['baseline'][0]:>9.4f} {e['ci'][0]:>9.4f} "
                  f"{e['delta']:>+8.4f}")


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="ci-sed-demo-")))
