"""l1, l2 and hinge penalties at one strength: final sparsity and accuracy."""

from gatedlora.experiments import regularizer_ablation

from _common import changes, emit, parser, trunk

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    runs = regularizer_ablation(trunk(args), lam=args.lam, seed=args.seed, **changes(args))
    emit({k: {"final_active_pct": r.final_active_pct, "best_step": r.best_step, **r.metrics}
          for k, r in runs.items()}, args)
