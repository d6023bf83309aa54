#!/usr/bin/env python3
"""ODE-RNN against SeqLink on paired data and seeds, with a rank-sum test on per-seed MSE.

    python scripts/compare_models.py --set data.sparsity=0.4
"""
from __future__ import annotations

import json

from _common import config, out_dir, parser
from seqlink import experiment as ex
from seqlink.metrics import rank_sum_test


def main() -> None:
    p = parser(__doc__.splitlines()[0])
    p.add_argument("--models", default="rnn,ode_rnn,seqlink")
    args = p.parse_args()
    cfg = config(args, **{"data.sparsity": 0.4})
    kinds = args.models.split(",")
    out = out_dir(args, cfg, "compare")
    reports = ex.run_models(cfg, kinds, out, args.workers)
    for rep in reports.values():
        print(ex.summarize(rep))
    summary = {k: {"mean": r["mean"], "std": r["std"],
                   "per_seed": [s["metrics"][r["metric"]] for s in r["per_seed"]]} for k, r in reports.items()}
    if "ode_rnn" in summary and "seqlink" in summary:
        p_value = rank_sum_test(summary["seqlink"]["per_seed"], summary["ode_rnn"]["per_seed"])
        summary["rank_sum_p_seqlink_vs_ode_rnn"] = p_value
        print(f"rank-sum p (seqlink vs ode_rnn): {p_value:.4g}")
    (out / "comparison.json").write_text(json.dumps(summary, indent=2))
    print(f"outputs in {out}")


if __name__ == "__main__":
    main()
