"""Learned gate selection against random selections of the same size."""

from gatedlora.experiments import gated_run, random_vs_learned
from gatedlora.train import finetune

from _common import changes, emit, parser, seeds, trunk

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--learned-seed", type=int, default=0)
    args = p.parse_args()
    model = trunk(args)
    learned = finetune(gated_run(args.lam, args.learned_seed, **changes(args)), model)
    cmp = random_vs_learned(model, learned, seeds(args))
    emit({"n_active": cmp.n_active, "learned_sites": [str(g.site) for g in learned.final_gates if g.active],
          "learned_final_top1": cmp.learned_top1, "random_final_top1": cmp.random_top1,
          "random_mean": cmp.random_mean, "random_sites": cmp.random_sites, "learned_wins": cmp.learned_wins}, args)
