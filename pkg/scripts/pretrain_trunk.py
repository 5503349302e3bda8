"""Pretrain the desk-scale source trunk and cache it as a float64 checkpoint."""

from gatedlora.checkpoint import save_checkpoint
from gatedlora.config import desk_pretrain_config
from gatedlora.train import pretrain

from _common import emit, parser

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--pretrain-steps", type=int, default=None)
    args = p.parse_args()
    run = desk_pretrain_config() if args.pretrain_steps is None else desk_pretrain_config(steps=args.pretrain_steps)
    res = pretrain(run)
    save_checkpoint(args.trunk, res.model, run, precision="float64")
    emit({"trunk": args.trunk, "best_step": res.best_step, **res.metrics}, args)
