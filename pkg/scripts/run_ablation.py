"""Component ablation on the synthetic set.

Each row switches off one group of loss terms relative to the full model:

    baseline   id + wrt only, appearance branch only
    no_tvcr    lambda1 = 0
    no_dcc     dcc terms removed
    no_shape   shape branch removed
    full       everything on

    python scripts/run_ablation.py --seeds 0 1 2 --set train.stage2_epochs=300
"""
import argparse
import json
from pathlib import Path
from statistics import mean

import torch

from bsata import evaluation, trainer
from bsata.data_io import SynthSpec, split_holdout, synth_generate
from bsata.recipes import synthetic_config

ROWS = {
    "baseline": {"loss.lambda3": "0", "loss.lambda4": "0", "train.use_shape": "false"},
    "no_tvcr": {"loss.lambda1": "0"},
    "no_dcc": {"train.use_dcc": "false"},
    "no_shape": {"train.use_shape": "false"},
    "full": {},
}


def run_row(overrides, seed, train, test, n_ids):
    cfg = synthetic_config(seed, overrides)
    seeds = trainer.SeedPlan.from_master(seed)
    model = trainer.build_model(cfg, n_ids, seeds)
    bank = trainer.run_stage1(model, train, cfg, seeds).bank
    trainer.run_stage2(model, bank, train, cfg, seeds)
    use_shape = cfg.train.use_shape
    out = {}
    for protocol in ("regdb_i2v", "sysu_all"):
        rep = evaluation.evaluate(model, test, protocol, seed=seed, use_shape=use_shape)
        out[rep.label] = (rep.rank(1), rep.map)
    out["dcc_end"] = trainer.measure_dcc(model, bank, train, cfg.loss.temperature, use_shape)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--rows", nargs="+", default=list(ROWS), choices=list(ROWS))
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--out", default="runs/ablation.json")
    args = ap.parse_args()
    torch.set_num_threads(1)

    shared = dict(kv.split("=", 1) for kv in args.set)
    spec = SynthSpec(seed=0)
    train, test = split_holdout(synth_generate(spec), spec)

    results = {}
    print("| row | I2V R@1 | I2V mAP | AS–SS R@1 | AS–SS mAP | dcc |")
    print("|---|---|---|---|---|---|")
    for row in args.rows:
        runs = [run_row({**shared, **ROWS[row]}, s, train, test, spec.num_identities) for s in args.seeds]
        agg = {
            "i2v_r1": mean(r["I2V"][0] for r in runs), "i2v_map": mean(r["I2V"][1] for r in runs),
            "as_r1": mean(r["AS–SS"][0] for r in runs), "as_map": mean(r["AS–SS"][1] for r in runs),
            "dcc_end": mean(r["dcc_end"] for r in runs),
        }
        results[row] = agg
        print(f"| {row} | {100 * agg['i2v_r1']:.2f} | {100 * agg['i2v_map']:.2f} | "
              f"{100 * agg['as_r1']:.2f} | {100 * agg['as_map']:.2f} | {agg['dcc_end']:.4f} |", flush=True)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps({"seeds": args.seeds, "overrides": shared, "rows": results},
                                         indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
