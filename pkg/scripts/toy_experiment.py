"""Train and evaluate the toy ring-adding translation task."""

import argparse
import json
from dataclasses import asdict

from graph2graph.experiments import TOY_CONFIG, run_toy

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("--hidden", type=int, default=TOY_CONFIG.hidden_dim)
ap.add_argument("--epochs", type=int, default=TOY_CONFIG.epochs)
ap.add_argument("--seed", type=int, default=TOY_CONFIG.seed)
ap.add_argument("--out", help="directory for checkpoints and the report")
args = ap.parse_args()

cfg = TOY_CONFIG.replace(hidden_dim=args.hidden, epochs=args.epochs, seed=args.seed)
res = run_toy(cfg, out_dir=args.out, verbose=True)
print(json.dumps(asdict(res.metrics), indent=2))
print(f"{res.n_pairs} training pairs, {res.seconds:.0f}s")
