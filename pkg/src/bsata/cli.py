"""Command-line entry points.

    bsata synth-data   --spec spec.json --out DIR
    bsata train-stage1 --data DIR --out RUN [--config cfg.txt] [--lambda1 0.0 ...]
    bsata train-stage2 --data DIR --out RUN [--stage1 RUN/stage1.ckpt]
    bsata train-stage1 --replay RUN/run_manifest.json --out RUN2
    bsata eval         --checkpoint RUN/stage2.ckpt --data DIR --protocol sysu_all --shot single
    bsata inspect      PATH

Exit codes: 0 ok, 1 other package error, 2 invalid input or spec,
3 missing stage-1 checkpoint, 4 non-finite loss, 5 protocol/dataset mismatch.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import torch

from . import __version__
from . import checkpoint as ckpt
from . import config as config_mod
from . import evaluation, trainer
from .data_io import SynthSpec, export_synthetic, load_manifest, load_records
from .errors import BSaTaError, ManifestMismatch, NonFiniteLoss

log = logging.getLogger("bsata")

EXIT_OK, EXIT_ERROR, EXIT_INVALID, EXIT_NO_STAGE1, EXIT_NONFINITE, EXIT_PROTOCOL = 0, 1, 2, 3, 4, 5

PROTOCOL_KINDS = {
    "sysu_all": ("sysu", "synthetic"),
    "sysu_indoor": ("sysu", "synthetic"),
    "regdb_v2i": ("regdb", "synthetic"),
    "regdb_i2v": ("regdb", "synthetic"),
}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# -- override flags -----------------------------------------------------------

def _override_flags() -> dict:
    """Map flag name -> flat config key; leaf names get a short alias when unique."""
    keys = config_mod.known_keys()
    leaves = {}
    for k in keys:
        leaves.setdefault(k.rsplit(".", 1)[-1], []).append(k)
    flags = {f"--{k}": k for k in keys}
    for leaf, ks in leaves.items():
        if len(ks) == 1 and f"--{leaf}" not in flags:
            flags[f"--{leaf}"] = ks[0]
    return flags


def _add_override_args(p: argparse.ArgumentParser):
    g = p.add_argument_group("config overrides (highest precedence)")
    for flag, key in sorted(_override_flags().items()):
        g.add_argument(flag, dest=f"ovr:{key}:{flag}", metavar="VALUE", default=None)
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="generic override, repeatable")


def _collect_overrides(ns: argparse.Namespace) -> dict:
    out = {}
    for item in ns.set:
        if "=" not in item:
            raise CliError(EXIT_INVALID, f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for dest, value in vars(ns).items():
        if dest.startswith("ovr:") and value is not None:
            out[dest.split(":")[1]] = value
    return out


# -- run manifest -------------------------------------------------------------

def _write_run_manifest(path: Path, doc: dict):
    if path.exists():
        raise CliError(EXIT_INVALID, f"{path} exists; run manifests are never overwritten")
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _run_manifest(cfg, seeds, stage: int, fingerprint: str, out: Path, extra: dict) -> dict:
    return {
        "stage": stage,
        "code_version": __version__,
        "config": cfg.to_flat(),
        "config_text": cfg.to_text(),
        "seeds": seeds.as_dict(),
        "dataset_fingerprint": fingerprint,
        "outputs": {
            "checkpoint": str(out / f"stage{stage}.ckpt"),
            "metrics": str(out / f"metrics_stage{stage}.jsonl"),
        },
        **extra,
    }


# -- commands -----------------------------------------------------------------

def cmd_synth(ns) -> int:
    try:
        spec = SynthSpec.from_dict(json.loads(Path(ns.spec).read_text())) if ns.spec else SynthSpec()
    except (OSError, ValueError, TypeError) as exc:
        raise CliError(EXIT_INVALID, f"invalid synth spec: {exc}")
    try:
        export_synthetic(spec, ns.out)
    except OSError as exc:
        raise CliError(EXIT_INVALID, f"cannot write dataset: {exc}")
    print(f"wrote {spec.num_identities * spec.records_per_modality * 2} images to {ns.out}")
    return EXIT_OK


def _resolve_config(ns):
    """Config, stage-1 path and output dir, from flags or from a replayed manifest."""
    if ns.replay:
        doc = json.loads(Path(ns.replay).read_text())
        if doc.get("stage") != ns.stage:
            raise CliError(EXIT_INVALID, f"manifest is for stage {doc.get('stage')}, not {ns.stage}")
        cfg = config_mod.build_config(doc["config"])
        return cfg, doc.get("stage1_checkpoint"), doc.get("dataset_fingerprint")
    try:
        overrides = _collect_overrides(ns)
        if ns.data:
            overrides["data.root"] = ns.data
        cfg = config_mod.load_config(ns.config, overrides)
    except (KeyError, ValueError, OSError) as exc:
        raise CliError(EXIT_INVALID, f"invalid configuration: {exc}")
    return cfg, ns.stage1, None


def cmd_train(ns) -> int:
    cfg, stage1_path, expected_fp = _resolve_config(ns)
    if not cfg.data.root:
        raise CliError(EXIT_INVALID, "no dataset given (--data or data.root)")
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = trainer.SeedPlan.from_master(cfg.seed)

    if ns.stage == 2:
        stage1_path = Path(stage1_path or out / "stage1.ckpt")
        if not stage1_path.is_file():
            raise CliError(EXIT_NO_STAGE1, f"stage-1 checkpoint not found: {stage1_path}")

    manifest = load_manifest(cfg.data.root, cfg.data.kind, cfg.data.trial)
    fp = manifest.fingerprint()
    if expected_fp is not None and fp != expected_fp:
        raise CliError(EXIT_INVALID, "dataset fingerprint differs from the replayed manifest")
    records = load_records(manifest, "train", size=cfg.model.input_size)

    extra = {"data_counts": manifest.counts()}
    if ns.stage == 2:
        extra["stage1_checkpoint"] = str(stage1_path)
        extra["stage1_checkpoint_sha256"] = _sha256(stage1_path)
    _write_run_manifest(out / "run_manifest.json",
                        _run_manifest(cfg, seeds, ns.stage, fp, out, extra))

    metrics_path = out / f"metrics_stage{ns.stage}.jsonl"
    metrics_path.write_text("")
    with open(metrics_path, "a") as mf:
        def on_step(rec):
            mf.write(json.dumps(rec, sort_keys=True) + "\n")

        torch.set_num_threads(1)
        meta = {"experiment": cfg.to_flat(), "seeds": seeds.as_dict(), "stage": ns.stage}
        if ns.stage == 1:
            model = trainer.build_model(cfg, manifest.num_identities("train"), seeds)
            res = trainer.run_stage1(model, records, cfg, seeds, on_step)
            trainer.save_checkpoint(out / "stage1.ckpt", model, res.bank, res.optimizer, meta)
        else:
            model, bank, _, _ = trainer.load_checkpoint(stage1_path)
            if bank is None:
                raise CliError(EXIT_NO_STAGE1, f"{stage1_path} holds no prototype bank")
            want = replace(cfg.model, num_identities=model.cfg.num_identities,
                           init_seed=model.cfg.init_seed)
            if want.structure() != model.cfg.structure():
                raise CliError(EXIT_INVALID, "model config differs from the stage-1 checkpoint")
            res = trainer.run_stage2(model, bank, records, cfg, seeds, on_step)
            trainer.save_checkpoint(out / "stage2.ckpt", model, bank, res.optimizer, meta)
    last = res.history[-1] if res.history else {}
    print(f"stage {ns.stage}: {len(res.history)} steps, final total {last.get('total', float('nan')):.6f}")
    return EXIT_OK


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cmd_eval(ns) -> int:
    model, _, _, ck = trainer.load_checkpoint(ns.checkpoint)
    manifest = load_manifest(ns.data, ns.kind, ns.trial)
    if manifest.kind not in PROTOCOL_KINDS[ns.protocol]:
        raise CliError(EXIT_PROTOCOL, f"protocol {ns.protocol} does not apply to a {manifest.kind} dataset")
    records = load_records(manifest, ("query", "gallery"), size=model.cfg.input_size)
    train_flags = ck["meta"].get("experiment", {})
    use_shape = bool(train_flags.get("train.use_shape", True))
    report = evaluation.evaluate(model, records, ns.protocol, ns.shot, seed=ns.seed,
                                 use_shape=use_shape, trials=ns.trials)
    doc = report.document()
    sys.stdout.write(doc + "\n" + report.table())
    if ns.report:
        Path(ns.report).write_text(doc)
    if ns.dump_features:
        q, g = evaluation.split_query_gallery(records, ns.protocol)
        for name, recs in (("query", q), ("gallery", g)):
            feats = evaluation.extract_inference_features(recs, model.backbone, use_shape)
            evaluation.save_features(f"{ns.dump_features}.{name}.bin", feats,
                                     [r.identity for r in recs], [r.camera for r in recs],
                                     recs[0].modality.value if recs else "", ns.protocol)
    return EXIT_OK


def cmd_inspect(ns) -> int:
    p = Path(ns.path)
    if p.is_dir():
        m = load_manifest(p, ns.kind, ns.trial)
        print(json.dumps({"kind": m.kind, "root": str(m.root), "counts": m.counts()},
                         indent=2, sort_keys=True))
        return EXIT_OK
    try:
        manifest, _, _ = ckpt.read_manifest(p)
    except ManifestMismatch:
        doc = json.loads(p.read_text())
        print(json.dumps(doc, indent=2, sort_keys=True))
        return EXIT_OK
    summary = {k: manifest[k] for k in ("format_version", "config", "config_hash", "meta")}
    summary["components"] = [[c["name"], c["shape"]] for c in manifest["components"]]
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bsata", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write the synthetic paired-modality dataset")
    p.add_argument("--spec", help="JSON synth spec; defaults when omitted")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    for stage in (1, 2):
        p = sub.add_parser(f"train-stage{stage}", help=f"run training stage {stage}")
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--data", help="dataset root (sets data.root)")
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--replay", help="run_manifest.json to reproduce")
        if stage == 2:
            p.add_argument("--stage1", help="stage-1 checkpoint (default OUT/stage1.ckpt)")
        _add_override_args(p)
        p.set_defaults(func=cmd_train, stage=stage, stage1=None)

    p = sub.add_parser("eval", help="retrieval metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--kind", default="auto")
    p.add_argument("--trial", type=int, default=1)
    p.add_argument("--protocol", required=True, choices=evaluation.PROTOCOLS)
    p.add_argument("--shot", default="single", choices=evaluation.SHOTS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--report", help="also write the key = value report here")
    p.add_argument("--dump-features", help="path prefix for query/gallery feature dumps")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="summarise a checkpoint, run manifest or dataset")
    p.add_argument("path")
    p.add_argument("--kind", default="auto")
    p.add_argument("--trial", type=int, default=1)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return ns.func(ns)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except BSaTaError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
