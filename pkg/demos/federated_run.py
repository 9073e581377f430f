"""Compare personalised mixtures against a single shared adapter.

Four clients each hold one synthetic task. Prints mean test accuracy per
round for both modes and the expert sets chosen for one module.
Takes about half a minute on one CPU core.
"""

from fedamole.config import ExperimentConfig
from fedamole.evalkit import mtal
from fedamole.fedsim import Federation

cfg = ExperimentConfig()
for mode in ("fedit", "fedamole"):
    fed = Federation(cfg, mode, seed=42)
    print(f"== {mode}")
    for _ in range(cfg.federation.rounds):
        rec = fed.run_round()
        loss = sum(rec.extras["loss"]) / len(rec.extras["loss"])
        print(f"  round {rec.round}: MTA {rec.mta:.3f}  train loss {loss:.3f}")
    print(f"  MTAL {mtal(fed.log):.3f}")
    print("  next-round experts for layer0.q:", fed.server.plan["layer0.q"])
