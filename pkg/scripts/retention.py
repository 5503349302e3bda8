"""Target accuracy and source K-NN retention: gated run against plain LoRA."""

from dataclasses import asdict

from gatedlora.experiments import retention

from _common import changes, emit, parser, seeds, trunk

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--lam", type=float, default=1.0)
    args = p.parse_args()
    rows = retention(trunk(args), seeds=seeds(args), lam=args.lam, **changes(args))
    emit({"rows": [{**asdict(r), "top1_gap_points": r.top1_gap, "retains": r.retains} for r in rows],
          "retains_in": sum(r.retains for r in rows)}, args)
