"""Final active fraction against the l1 strength, several seeds per lambda."""

from gatedlora.experiments import LAMBDAS, lambda_sweep, mean_final_active

from _common import changes, emit, parser, seeds, trunk

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--lambdas", default=",".join(map(str, LAMBDAS)))
    args = p.parse_args()
    lams = [float(x) for x in args.lambdas.split(",")]
    sweep = lambda_sweep(trunk(args), lams, seeds(args), **changes(args))
    emit({str(lam): {"mean_final_active_pct": mean_final_active(runs),
                     "final_active_pct": [r.final_active_pct for r in runs],
                     "target_top1": [r.metrics["target_top1"] for r in runs],
                     "active_sites": [[str(g.site) for g in r.final_gates if g.active] for r in runs]}
          for lam, runs in sweep.items()}, args)
