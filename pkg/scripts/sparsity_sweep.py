#!/usr/bin/env python3
"""Test MSE over a grid of sequence lengths and sparsity levels for one model.

    python scripts/sparsity_sweep.py --model ode_rnn --lengths 50,100 --fractions 0.1,0.2,0.3,0.4
"""
from __future__ import annotations

from _common import config, out_dir, parser
from seqlink import experiment as ex


def main() -> None:
    p = parser(__doc__.splitlines()[0])
    p.add_argument("--model", default="ode_rnn")
    p.add_argument("--lengths", default="100")
    p.add_argument("--fractions", default="0.1,0.2,0.3,0.4")
    args = p.parse_args()
    cfg = config(args, model=args.model)
    lengths = [int(v) for v in args.lengths.split(",")]
    fractions = [float(v) for v in args.fractions.split(",")]
    out = out_dir(args, cfg, "sweep")
    grid = ex.run_sparsity_sweep(cfg, lengths, fractions, args.model, out, args.workers)
    print(ex.summarize(grid))
    print(f"outputs in {out}")


if __name__ == "__main__":
    main()
