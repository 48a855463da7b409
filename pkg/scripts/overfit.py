"""Overfit five hand-picked pairs and report teacher-forced exact matches."""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))
from conftest import MICRO_PAIRS  # noqa: E402

from graph2graph.config import RunConfig  # noqa: E402
from graph2graph.experiments import overfit  # noqa: E402

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("--hidden", type=int, default=64)
ap.add_argument("--steps", type=int, default=2000)
args = ap.parse_args()

cfg = RunConfig(hidden_dim=args.hidden, latent_dim=8, lr=1e-3, lr_decay=1.0, batch_size=5, max_nodes=20)
r = overfit(MICRO_PAIRS, cfg, max_steps=args.steps)
print(f"steps {r.steps}  loss {r.loss:.4f}  exact {r.exact}/{len(MICRO_PAIRS)}  {r.seconds:.0f}s")
