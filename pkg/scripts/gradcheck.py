"""Central-difference check of every model parameter in float64."""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))
from conftest import MICRO_PAIRS  # noqa: E402

from graph2graph.experiments import gradient_check  # noqa: E402

r = gradient_check(MICRO_PAIRS[:2])
print(f"{r.n_scalars} scalars, worst relative error {r.worst:.2e} ({r.worst_param}), {r.seconds:.0f}s")
for f in r.failures[:20]:
    print("  over tolerance:", f)
sys.exit(1 if r.failures else 0)
