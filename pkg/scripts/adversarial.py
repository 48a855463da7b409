"""Run critic/generator rounds on the toy task and print the real/fake gap trace."""

import argparse

from graph2graph.experiments import TOY_CONFIG, adversarial_rounds

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("--rounds", type=int, default=100)
ap.add_argument("--hidden", type=int, default=64)
ap.add_argument("--disc-lr", type=float, default=1e-4)
ap.add_argument("--gan-weight", type=float, default=TOY_CONFIG.gan_weight)
ap.add_argument("--pretrain", type=int, default=3)
ap.add_argument("--warmup", type=int, default=0)
args = ap.parse_args()

cfg = TOY_CONFIG.replace(hidden_dim=args.hidden, disc_lr=args.disc_lr, gan_weight=args.gan_weight)
r = adversarial_rounds(cfg, rounds=args.rounds, pretrain_epochs=args.pretrain, critic_warmup=args.warmup)
for i, (g, d) in enumerate(zip(r.gaps, r.disc_losses), 1):
    print(f"round {i:3d}  gap {g:8.4f}  critic {d:8.4f}")
print(f"finite {r.finite}  shrink {r.shrink:.1%}  {r.seconds:.0f}s")
