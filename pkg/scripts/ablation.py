#!/usr/bin/env python3
"""Pyramid ablation: full SeqLink, a single unified level, apex only and bottom level only.

All four variants share one trajectory bank and one attention stage per seed.
"""
from __future__ import annotations

from _common import config, out_dir, parser
from seqlink import experiment as ex


def main() -> None:
    args = parser(__doc__.splitlines()[0]).parse_args()
    cfg = config(args, **{"data.sparsity": 0.4})
    out = out_dir(args, cfg, "ablation")
    for rep in ex.run_ablation(cfg, out, args.workers).values():
        print(ex.summarize(rep))
    print(f"outputs in {out}")


if __name__ == "__main__":
    main()
