# Two synthetic domains in sequence.  Sequential MAML forgets the first;
# the Laplace-penalised learner mostly keeps it, at some cost on the second.
#
# One seed, desk settings; about 20 seconds on one core.  Use the configs/ directory and the
# `boml run` command for the full three-seed version.
from pathlib import Path

from boml.harness.config import load
from boml.harness.runner import run_experiment

cfg_dir = Path(__file__).resolve().parents[1] / "configs"
small = {"experiment.seeds": "0"}

for name in ("forgetting_maml_seq", "forgetting_bomla"):
    cfg = load(cfg_dir / f"{name}.cfg").with_overrides(**small)
    eop = run_experiment(cfg, write=False).end_of_phase()
    d1_before = eop[(0, 1, 1)].acc_mean
    d1_after = eop[(0, 2, 1)].acc_mean
    d2_after = eop[(0, 2, 2)].acc_mean
    print(f"{cfg.method:9s} domain 1: {d1_before:.3f} -> {d1_after:.3f}   domain 2 at end: {d2_after:.3f}")
