#!/usr/bin/env python3
"""SeqLink test MSE as the number of pyramid levels L varies."""
from __future__ import annotations

import copy
import json

from _common import config, out_dir, parser
from seqlink import experiment as ex


def main() -> None:
    p = parser(__doc__.splitlines()[0])
    p.add_argument("--levels", default="1,2,3,5,8")
    args = p.parse_args()
    base = config(args, model="seqlink", **{"data.sparsity": 0.4})
    out = out_dir(args, base, "levels")
    rows = []
    for L in (int(v) for v in args.levels.split(",")):
        cfg = copy.deepcopy(base)
        cfg.hyper.levels = L
        rep = ex.run_training(cfg, out / f"L{L}", args.workers)
        rows.append({"levels": L, "mean": rep["mean"], "std": rep["std"]})
        print(f"L={L}: {ex.summarize(rep)}")
    (out / "levels.json").write_text(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
