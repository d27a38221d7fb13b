"""Command line entry point: ``python -m meterlab <command>``.

Commands: gen, train, eval, ablate, verify, report. Exit status is 0 on
success, 1 on usage or input errors and 2 when a verification or metric gate
fails.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checks, dialgen, georead, metrics, mrlm, trainer

log = logging.getLogger("meterlab")

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers

def _run_dir(out: str | None, command: str, force: bool) -> Path:
    path = Path(out) if out else Path("runs") / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"{path} already exists and is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_corpus(data_dir: str):
    data_dir = Path(data_dir)
    mpath = data_dir / "manifest.jsonl"
    if not mpath.exists():
        raise UsageError(f"no manifest.jsonl under {data_dir}")
    manifest = dialgen.read_manifest(mpath)
    if "config" not in manifest.meta:
        raise UsageError(f"{data_dir}: manifest.meta.json is missing the generator config")
    return dialgen.GenConfig.from_dict(manifest.meta["config"]), manifest, _sha256(mpath)


def read_split(data_dir: str, split: str) -> trainer.ReadingData:
    """Images and records of one split, loaded from PNG files on disk."""
    config, manifest, _ = _load_corpus(data_dir)
    recs = manifest.split(split)
    if not recs:
        raise UsageError(f"split {split!r} is empty in {data_dir}")
    imgs = np.stack([dialgen.load_image(Path(data_dir) / r.image_path) for r in recs])
    return trainer.ReadingData(imgs, recs, config.spec_by_id())


def _gen_config(args) -> dialgen.GenConfig:
    if args.config:
        cfg = dialgen.load_gen_config(args.config)
    else:
        total = None if args.profile == "paper" else args.total
        cfg = dialgen.paper_profile(total, image_size=args.image_size, corrupted=args.corrupted)
    if args.seed is not None:
        cfg.master_seed = args.seed
    return cfg


def _train_config(args) -> trainer.TrainConfig:
    if args.train_config == "paper":
        cfg = trainer.PAPER_TRAIN
    else:
        d = json.loads(Path(args.train_config).read_text()) if args.train_config else {}
        cfg = trainer.TrainConfig.from_dict(d)
    over = {}
    for key in ("stage1_iters", "stage2_iters", "batch_size", "lr_initial", "lr_final"):
        v = getattr(args, key, None)
        if v is not None:
            over[key] = v
    if args.seed is not None:
        over["seed"] = args.seed
    return replace(cfg, **over)


def _model_config(args) -> mrlm.ModelConfig:
    if args.model_config == "paper":
        return mrlm.PAPER_SCALE
    if args.model_config:
        return mrlm.ModelConfig.from_dict(json.loads(Path(args.model_config).read_text()))
    return mrlm.ModelConfig()


def _print_table(header, rows):
    widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) for i, h in enumerate(header)]
    print("  ".join(str(h).ljust(w) for h, w in zip(header, widths)))
    for r in rows:
        print("  ".join(str(v).ljust(w) for v, w in zip(r, widths)))


# ---------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    cfg = _gen_config(args)
    out = _run_dir(args.out, "gen", args.force)
    manifest = dialgen.write_dataset(cfg, out, workers=args.workers)
    dialgen.save_config(cfg, out / "gen_config.json")
    rows = []
    for entry in cfg.archetypes:
        a = entry.spec.archetype_id
        recs = [r for r in manifest.records if r.archetype_id == a]
        rows.append([a, f"{entry.spec.range_min:g}-{entry.spec.range_max:g}", f"{entry.spec.index_value:g}",
                     len(recs), sum(r.split == "train" for r in recs), sum(r.split == "test" for r in recs)])
    _print_table(["archetype", "range", "index", "total", "train", "test"], rows)
    _write_json(out / "summary.json", {
        "command": "gen", "total": len(manifest.records),
        "train": len(manifest.split("train")), "test": len(manifest.split("test")),
        "per_archetype": {str(r[0]): {"total": r[3], "train": r[4], "test": r[5]} for r in rows},
        "manifest_sha256": _sha256(out / "manifest.jsonl"),
    })
    print(f"wrote {len(manifest.records)} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    tcfg = _train_config(args)
    tcfg = replace(tcfg, use_kfm=not args.no_kfm and tcfg.use_kfm, use_moe=not args.no_moe and tcfg.use_moe)
    mcfg = _model_config(args)
    _, _, corpus_sha = _load_corpus(args.data)
    train_data = read_split(args.data, "train")
    if train_data.images.shape[1] != mcfg.img_size:
        raise UsageError(f"corpus images are {train_data.images.shape[1]} px but the model expects {mcfg.img_size}")
    eval_data = read_split(args.data, "test") if args.eval else None
    out = _run_dir(args.out, "train", args.force)
    _write_json(out / "train_config.json", tcfg.to_dict())
    _write_json(out / "model_config.json", mcfg.to_dict())
    state = mrlm.init_state(mcfg, seed=tcfg.seed)
    state, history = trainer.train(state, train_data, tcfg, eval_data=eval_data, checkpoint_dir=out)
    state.save(out / "model.ckpt")
    trainer.write_history(history, out / "history.csv")
    summary = {"command": "train", "final_loss": history[-1]["loss"], "steps": tcfg.total_iters,
               "n_params": state.n_params(), "manifest_sha256": corpus_sha, "data": str(Path(args.data))}
    if eval_data is not None:
        summary.update(acc_eps=history[-1]["acc_eps"], acc_theta=history[-1]["acc_theta"])
    _write_json(out / "summary.json", summary)
    print(f"final loss {history[-1]['loss']:.4f}; checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def _eval_predictions(args, data: trainer.ReadingData):
    if args.model == "georead":
        return [georead.read(img, data.specs[r.archetype_id]) for img, r in zip(data.images, data.records)], {}
    if not args.checkpoint:
        raise UsageError("--model mrlm needs --checkpoint")
    ckpt = Path(args.checkpoint)
    if not ckpt.exists() or not ckpt.with_suffix(".config.json").exists():
        raise UsageError(f"missing checkpoint {ckpt} (or its .config.json)")
    run_summary = ckpt.parent / "summary.json"
    if run_summary.exists() and not args.allow_corpus_mismatch:
        trained_on = json.loads(run_summary.read_text()).get("manifest_sha256")
        _, _, sha = _load_corpus(args.data)
        if trained_on and trained_on != sha:
            raise UsageError("corpus hash differs from the one the checkpoint was trained on "
                             "(pass --allow-corpus-mismatch to evaluate anyway)")
    state = mrlm.ModelState.load(ckpt)
    bank = mrlm.build_template_bank(state, list(data.specs.values())) if state.config.use_kfm else None
    outs = mrlm.predict_batch(data.images, state, bank)
    return [v for _, v in outs], {"raw": [t for t, _ in outs]}


def cmd_eval(args) -> int:
    data = read_split(args.data, args.split)
    preds, extra = _eval_predictions(args, data)
    pairs = trainer.predictions_to_pairs(preds, data)
    out = _run_dir(args.out, "eval", args.force)
    modes = metrics.GROUP_MODES if args.group_by == "all" else (args.group_by,)
    summary = {"command": "eval", "model": args.model, "split": args.split, "n": len(pairs)}
    for mode in modes:
        rep = metrics.build_report(pairs, mode)
        (out / f"report_{mode}.csv").write_text(rep.to_csv())
        (out / f"report_{mode}.md").write_text(rep.to_markdown())
        print(f"\n[{mode}]\n" + rep.to_markdown())
        summary[mode] = {r.key: {"count": r.count, "acc_eps": r.acc_eps, "acc_theta": r.acc_theta,
                                 "ref": r.mean_ref, "rel": r.mean_rel}
                         for r in [*rep.rows, rep.average, rep.weighted]}
    with open(out / "predictions.jsonl", "w") as fh:
        for i, (p, r) in enumerate(zip(preds, data.records)):
            row = {"id": r.id, "label": r.label, "prediction": p}
            if "raw" in extra:
                row["raw"] = extra["raw"][i]
            fh.write(json.dumps(row) + "\n")
    _write_json(out / "summary.json", summary)
    weighted = metrics.summarize(pairs)
    failed = []
    if args.min_acc_eps is not None and weighted.acc_eps < args.min_acc_eps:
        failed.append(f"acc_eps {weighted.acc_eps:.1f} < {args.min_acc_eps}")
    if args.min_acc_theta is not None and (weighted.acc_theta or 0.0) < args.min_acc_theta:
        failed.append(f"acc_theta {weighted.acc_theta:.1f} < {args.min_acc_theta}")
    for f in failed:
        print(f"FAIL {f}", file=sys.stderr)
    return EXIT_FAIL if failed else EXIT_OK


def cmd_ablate(args) -> int:
    tcfg = _train_config(args)
    mcfg = _model_config(args)
    train_data = read_split(args.data, "train")
    test_data = read_split(args.data, "test")
    out = _run_dir(args.out, "ablate", args.force)
    _write_json(out / "train_config.json", tcfg.to_dict())
    _write_json(out / "model_config.json", mcfg.to_dict())
    seeds = args.seeds or [tcfg.seed]
    all_results = []
    for seed in seeds:
        res = trainer.run_ablation_suite(train_data, test_data, mcfg, replace(tcfg, seed=seed),
                                         out_dir=out / f"seed{seed}")
        all_results.extend(res)
        print(f"\nseed {seed}\n" + trainer.ablation_table(res))
    (out / "ablation.md").write_text("\n".join(
        f"seed {s}\n\n" + trainer.ablation_table([r for r in all_results if r.seed == s]) for s in seeds))
    (out / "ablation.csv").write_text(trainer.ablation_csv(all_results))
    wins = {}
    for s in seeds:
        acc = {r.variant: r.report.weighted.acc_eps for r in all_results if r.seed == s}
        wins[str(s)] = all(acc["MRLM"] >= acc[v] for v in ("w/o KFM (MoE only)", "w/o MoE (KFM only)"))
    _write_json(out / "summary.json", {
        "command": "ablate", "seeds": seeds, "full_beats_single_module": wins,
        "results": [{"variant": r.variant, "seed": r.seed, "acc_eps": r.report.weighted.acc_eps,
                     "acc_theta": r.report.weighted.acc_theta, "ref": r.report.weighted.mean_ref,
                     "rel": r.report.weighted.mean_rel} for r in all_results],
    })
    return EXIT_OK


def cmd_verify(args) -> int:
    names = args.only or list(checks.CHECKS)
    unknown = [n for n in names if n not in checks.CHECKS]
    if unknown:
        raise UsageError(f"unknown checks {unknown}; available: {list(checks.CHECKS)}")
    results = checks.run_checks(names)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<24} {r.detail}  ({r.seconds:.1f}s)")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "verify.json", {r.name: {"passed": r.passed, "detail": r.detail} for r in results})
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_report(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run = Path(args.run)
    if not run.is_dir():
        raise UsageError(f"no run directory {run}")
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    plt.rcParams["svg.hashsalt"] = "meterlab"
    plt.rcParams["svg.fonttype"] = "none"
    made = []

    hist = run / "history.csv"
    if hist.exists():
        import csv
        rows = list(csv.DictReader(open(hist)))
        steps = [int(r["step"]) for r in rows]
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(steps, [float(r["loss"]) for r in rows], color="k")
        ax.set_xlabel("iteration")
        ax.set_ylabel("cross-entropy")
        ax.set_title("training loss")
        fig.tight_layout()
        fig.savefig(out / "loss.svg", metadata={"Date": None})
        plt.close(fig)
        made.append("loss.svg")

    env = run / "report_environment.csv"
    if env.exists():
        import csv
        rows = [r for r in csv.DictReader(open(env)) if r["group"] in dialgen.CORRUPTION_KINDS]
        fig, ax = plt.subplots(figsize=(8, 4))
        x = np.arange(len(rows))
        ax.bar(x - 0.2, [float(r["acc_eps"] or 0) for r in rows], 0.4, label="Acc_eps")
        ax.bar(x + 0.2, [float(r["acc_theta"] or 0) for r in rows], 0.4, label="Acc_theta")
        ax.set_xticks(x, [r["group"] for r in rows], rotation=30, ha="right")
        ax.set_ylabel("accuracy (%)")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "environment.svg", metadata={"Date": None})
        plt.close(fig)
        made.append("environment.svg")

    if not made:
        raise UsageError(f"{run} has neither history.csv nor report_environment.csv")
    _write_json(out / "report_summary.json", {"command": "report", "plots": made})
    print("wrote " + ", ".join(str(out / m) for m in made))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="meterlab", description="Synthetic pointer-meter reading lab.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out=True):
        if out:
            sp.add_argument("--out", help="run directory (default runs/<command>-<timestamp>)")
            sp.add_argument("--force", action="store_true", help="overwrite an existing run directory")
        sp.add_argument("--seed", type=int)

    def training(sp):
        sp.add_argument("--data", required=True, help="corpus directory written by gen")
        sp.add_argument("--train-config", help="JSON TrainConfig, or 'paper' for the full-length schedule")
        sp.add_argument("--model-config", help="JSON ModelConfig, or 'paper'")
        sp.add_argument("--stage1-iters", dest="stage1_iters", type=int)
        sp.add_argument("--stage2-iters", dest="stage2_iters", type=int)
        sp.add_argument("--batch-size", dest="batch_size", type=int)
        sp.add_argument("--lr-initial", dest="lr_initial", type=float)
        sp.add_argument("--lr-final", dest="lr_final", type=float)

    g = sub.add_parser("gen", help="render a synthetic dial corpus")
    common(g)
    g.add_argument("--config", help="JSON generator config")
    g.add_argument("--profile", choices=("desk", "paper"), default="desk")
    g.add_argument("--total", type=int, default=600, help="sample count for the desk profile")
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--corrupted", action="store_true", help="apply the environment corruption mix")
    g.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the reading model")
    common(t)
    training(t)
    t.add_argument("--no-kfm", action="store_true")
    t.add_argument("--no-moe", action="store_true")
    t.add_argument("--eval", action="store_true", help="score the test split at stage ends")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a model on a corpus split")
    common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--model", choices=("mrlm", "georead"), default="mrlm")
    e.add_argument("--checkpoint")
    e.add_argument("--split", default="test")
    e.add_argument("--group-by", choices=(*metrics.GROUP_MODES, "all"), default="all")
    e.add_argument("--min-acc-eps", type=float, help="exit 2 when weighted Acc_eps falls below this")
    e.add_argument("--min-acc-theta", type=float, help="exit 2 when weighted Acc_theta falls below this")
    e.add_argument("--allow-corpus-mismatch", action="store_true")
    e.add_argument("--workers", type=int, default=os.cpu_count() or 1, help="accepted for symmetry; scoring is vectorised")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and compare the four ablation variants")
    common(a)
    training(a)
    a.add_argument("--seeds", type=int, nargs="+")
    a.set_defaults(func=cmd_ablate)

    v = sub.add_parser("verify", help="run the property suite")
    v.add_argument("--only", nargs="+", metavar="CHECK")
    v.add_argument("--out", help="directory for verify.json")
    v.set_defaults(func=cmd_verify)

    r = sub.add_parser("report", help="plot a run directory to SVG")
    r.add_argument("run")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"meterlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (dialgen.LabelError, dialgen.OutOfRangeError, ValueError, TypeError) as exc:
        print(f"meterlab: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except trainer.TrainingDiverged as exc:
        print(f"meterlab: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
