"""Command-line entry point: ``cellstream generate|train|eval|report|noisy``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from collections import Counter
from pathlib import Path

from . import config as cfgmod
from . import curriculum, kernels
from .config import ConfigError

logger = logging.getLogger("cellstream")


class CommandError(RuntimeError):
    pass


def _out(args, summary: dict, lines: list[str]) -> None:
    if args.json:
        print(json.dumps(summary, sort_keys=True))
    else:
        print("\n".join(lines))


def _manifest_path(args, cfg: dict, section: str) -> Path:
    p = args.manifest or cfg.get(section, {}).get("manifest")
    if not p:
        raise CommandError(f"no manifest given: pass --manifest or set {section}.manifest")
    p = Path(p)
    if p.is_dir():
        p = p / "manifest.json"
    if not p.exists():
        raise CommandError(f"manifest not found: {p}")
    return p


# -- generate -----------------------------------------------------------------

def cmd_generate(args, cfg: dict) -> dict:
    from .synthcells import generate_dataset

    gen = cfgmod.generator_config(cfg)
    workers = int(cfg["generate"].get("workers", 1))
    out = Path(args.out)

    def progress(done, total):
        if done % 50 == 0 or done == total:
            logger.info("generated %d/%d videos", done, total)

    try:
        manifest = generate_dataset(gen, out, workers=workers, progress=progress)
    except OSError as exc:
        raise CommandError(str(exc)) from exc
    n = len(manifest.entries)
    splits = Counter(e.split for e in manifest.entries)
    cats = Counter(e.category for e in manifest.entries)
    summary = {
        "manifest": str(out / "manifest.json"),
        "checksum": manifest.checksum(),
        "n_videos": n,
        "wbc_high_fraction": sum(e.wbc_high for e in manifest.entries) / n,
        "rbc_high_fraction": sum(e.rbc_high for e in manifest.entries) / n,
        "splits": {k: splits.get(k, 0) for k in ("train", "val", "test")},
        "categories": dict(sorted(cats.items())),
        "kernel_backend": kernels.BACKEND,
    }
    lines = [
        f"wrote {n} videos to {out}",
        f"checksum {summary['checksum']}",
        f"WBC high: {summary['wbc_high_fraction']:.3f}  RBC high: {summary['rbc_high_fraction']:.3f}",
        "splits: " + ", ".join(f"{k}={v}" for k, v in summary["splits"].items()),
    ]
    _out(args, summary, lines)
    return summary


# -- train ----------------------------------------------------------------------

def cmd_train(args, cfg: dict) -> dict:
    from . import trainer
    from .synthcells import DatasetManifest, PopulationSpec

    mpath = _manifest_path(args, cfg, "train")
    manifest = DatasetManifest.load(mpath)
    pop = PopulationSpec(**manifest.config.get("population", {}))
    tc = cfgmod.train_config(cfg, population=pop)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sets = trainer.view_sets(tc, manifest)
    if len(sets["train"]) == 0 or len(sets["val"]) == 0:
        raise CommandError("manifest needs non-empty train and val splits")
    if tc.curriculum is not None:
        curriculum.report(tc.curriculum, out / "curriculum.csv", sets["train"].entries, tc.task,
                          epochs=range(tc.epochs))
    runs = []
    for seed in tc.seeds:
        logger.info("training seed %d", seed)
        model, metrics = trainer.train_views(tc, sets["train"], sets["val"], seed)
        run_dir = trainer.write_run(out, model, metrics, tc, manifest)
        runs.append({"seed": seed, "dir": str(run_dir), "best_epoch": metrics.best_epoch,
                     "best_val_loss": metrics.best_val_loss, "n_eligible": metrics.n_eligible})
    summary = {"out": str(out), "manifest": str(mpath), "runs": runs, "task": tc.task, "clip_len": tc.clip_len}
    lines = [f"seed {r['seed']}: best epoch {r['best_epoch']}, val loss {r['best_val_loss']:.4f}" for r in runs]
    _out(args, summary, lines)
    return summary


# -- eval -----------------------------------------------------------------------

def _checkpoints(run_dir: Path) -> list[Path]:
    found = sorted(run_dir.glob("seed_*/model.ckpt"))
    if not found and (run_dir / "model.ckpt").exists():
        found = [run_dir / "model.ckpt"]
    return found


def _check_compatible(side: dict, tc, manifest, ckpt: Path) -> None:
    saved = side.get("config", {})
    for key in ("task", "clip_len"):
        if str(saved.get(key)).upper() != str(getattr(tc, key)).upper():
            raise CommandError(f"{ckpt}: checkpoint {key}={saved.get(key)!r} but config has {getattr(tc, key)!r}")
    if saved.get("crop", {}).get("out_size") != tc.crop.out_size:
        raise CommandError(f"{ckpt}: checkpoint crop size {saved.get('crop', {}).get('out_size')} "
                           f"but config has {tc.crop.out_size}")
    if side["arch"]["in_channels"] != 3 * tc.clip_len:
        raise CommandError(f"{ckpt}: model expects {side['arch']['in_channels']} input channels, "
                           f"clip_len {tc.clip_len} gives {3 * tc.clip_len}")
    want = side.get("manifest_checksum")
    if want is not None and want != manifest.checksum():
        raise CommandError(f"{ckpt}: trained on a different dataset (manifest checksum mismatch)")


def cmd_eval(args, cfg: dict) -> dict:
    from . import trainer
    from .multiview import Method
    from .synthcells import DatasetManifest, PopulationSpec

    run_dir = Path(args.out)
    ckpts = _checkpoints(run_dir)
    if not ckpts:
        raise CommandError(f"no checkpoints under {run_dir}")
    mpath = _manifest_path(args, cfg, "eval")
    manifest = DatasetManifest.load(mpath)
    tc = cfgmod.train_config(cfg, population=PopulationSpec(**manifest.config.get("population", {})))
    ev = cfg["eval"]
    m = int(ev.get("views", 10))
    if m < 1:
        raise ConfigError("[eval] views must be >= 1")
    try:
        methods = [Method.parse(x).value for x in ev.get("methods", ["baseline", "mvm", "mvwcos"])]
    except ValueError as exc:
        raise ConfigError(f"[eval] {exc}") from exc
    test = trainer.view_sets(tc, manifest)["test"]
    runs = []
    for ckpt in ckpts:
        model, side = trainer.load_checkpoint(ckpt)
        _check_compatible(side, tc, manifest, ckpt)
        trace = ckpt.parent / "eval_trace.jsonl" if ev.get("trace") else None
        metrics = trainer.RunMetrics(seed=side.get("metrics", {}).get("seed", -1))
        metrics.test_acc = trainer.evaluate(model, test, methods, m, int(ev.get("seed", 1234)), trace=trace)
        runs.append(metrics)
        logger.info("%s: %s", ckpt, metrics.test_acc)
    summary = trainer.summarize(runs)
    result = {"views": m, "methods": methods, "summary": summary,
              "per_seed": [{"seed": r.seed, **r.test_acc} for r in runs]}
    (run_dir / "results.json").write_text(json.dumps(result, indent=1, sort_keys=True))
    with open(run_dir / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "mean", "std", "n"])
        for meth in methods:
            s = summary[meth]
            w.writerow([meth, repr(s["mean"]), repr(s["std"]), s["n"]])
    lines = [f"{'method':<10} accuracy, % (m={m}, {len(runs)} seeds)"]
    for meth in methods:
        s = summary[meth]
        std = 0.0 if math.isnan(s["std"]) else s["std"]
        lines.append(f"{meth:<10} {s['mean']:.2f} ± {std:.2f}")
    _out(args, result, lines)
    return result


# -- report ---------------------------------------------------------------------

def read_metrics_csv(path: Path) -> dict:
    from .trainer import RunMetrics

    cols = {k: [] for k in RunMetrics.CSV_FIELDS}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header[:4]) != RunMetrics.CSV_FIELDS[:4]:
            raise CommandError(f"{path}:1: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise CommandError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rec = dict(zip(header, row))
                cols["epoch"].append(int(rec["epoch"]))
                for k in ("train_loss", "val_loss", "val_acc"):
                    cols[k].append(float(rec[k]))
                cols["lr"].append(float(rec.get("lr", "nan")))
                cols["n_eligible"].append(int(rec["n_eligible"]) if rec.get("n_eligible") else -1)
            except ValueError as exc:
                raise CommandError(f"{path}:{lineno}: {exc}") from exc
    if not cols["epoch"]:
        raise CommandError(f"{path}: no data rows")
    return cols


def cmd_report(args, cfg: dict) -> dict:
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "cellstream"  # stable element ids across reruns
    import matplotlib.pyplot as plt

    params = cfgmod.report_curriculum(cfg)
    if not args.run_dirs:
        raise CommandError("report needs at least one run directory")
    # read everything before writing anything
    runs = []
    for d in args.run_dirs:
        d = Path(d)
        if not d.is_dir():
            raise CommandError(f"not a directory: {d}")
        files = sorted(d.glob("seed_*/metrics.csv")) or sorted(d.glob("metrics.csv"))
        if not files:
            raise CommandError(f"no metrics.csv under {d}")
        for f in files:
            runs.append((d, f, read_metrics_csv(f)))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for d, f, cols in runs:
        name = f"{d.name}_{f.parent.name}" if f.parent != d else d.name
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot(cols["epoch"], cols["val_loss"], color="tab:blue", label="val loss")
        ax.plot(cols["epoch"], cols["train_loss"], color="tab:blue", ls=":", label="train loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax2 = ax.twinx()
        ax2.plot(cols["epoch"], cols["val_acc"], color="tab:orange", label="val accuracy")
        ax2.set_ylabel("accuracy, %")
        ax.legend(loc="upper left", fontsize=7)
        ax2.legend(loc="upper right", fontsize=7)
        ax.set_title(name, fontsize=9)
        fig.tight_layout()
        p = out / f"curves_{name}.svg"
        fig.savefig(p, metadata={"Date": None})
        plt.close(fig)
        written.append(str(p))

    ts = list(range(0, 2 * params.T + 1, max(1, params.T // 500)))
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3.2))
    a1.plot(ts, [curriculum.competence(t, params) for t in ts], label="competence c(t)")
    for b in (0, 5, 10):
        a1.axhline(curriculum.difficulty(b, 0, params).d, ls="--", lw=0.8, color="gray")
    a1.set_xlabel("epoch t")
    a1.set_ylabel("c(t)")
    a1.legend(fontsize=7)
    bs = list(range(0, 11))
    for ln in (0.0, 0.5, 1.0):
        a2.plot(bs, [curriculum.difficulty(b, ln * params.l_norm_scale, params).d for b in bs],
                label=f"l_norm={ln:g}")
    a2.set_xlabel("blur radius b")
    a2.set_ylabel("difficulty d")
    a2.legend(fontsize=7)
    fig.tight_layout()
    p = out / "curriculum.svg"
    fig.savefig(p, metadata={"Date": None})
    plt.close(fig)
    written.append(str(p))
    curriculum.report(params, out / "competence.csv", epochs=ts)
    written.append(str(out / "competence.csv"))

    summary_path = out / "summary.csv"
    rows = []
    with open(summary_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "metrics", "epochs", "best_epoch", "best_val_loss", "val_acc_at_best", "final_train_loss"])
        for d, f, cols in runs:
            i = min(range(len(cols["val_loss"])), key=cols["val_loss"].__getitem__)
            row = [d.name, str(f), len(cols["epoch"]), cols["epoch"][i], repr(cols["val_loss"][i]),
                   repr(cols["val_acc"][i]), repr(cols["train_loss"][-1])]
            w.writerow(row)
            rows.append(row)
    written.append(str(summary_path))
    summary = {"files": written, "runs": len(runs)}
    _out(args, summary, [f"wrote {x}" for x in written])
    return summary


# -- noisy-label protocol -------------------------------------------------------

def cmd_noisy(args, cfg: dict) -> dict:
    from . import experiments

    nc = cfgmod.noisy_config(cfg)
    out = Path(args.out)
    runs, summary = experiments.noisy_label_protocol(nc, out_dir=out)
    (out / "results.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    lines = [f"data: {summary['_meta']['source']}, flipped labels: {summary['_meta']['flipped']}"]
    for meth in ("baseline", "mvm", "mvwcos"):
        s = summary[meth]
        std = 0.0 if math.isnan(s["std"]) else s["std"]
        lines.append(f"{meth:<10} {s['mean']:.2f} ± {std:.2f}")
    _out(args, summary, lines)
    return summary


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "report": cmd_report,
            "noisy": cmd_noisy}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cellstream", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. train.epochs=5 (repeatable)")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--json", action="store_true", help="print a JSON summary on stdout")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("generate", help="generate the synthetic video dataset")
    common(p)
    p.add_argument("--n", type=int, help="number of videos (generate.n_videos)")
    p.add_argument("--seed", type=int, help="global seed (generate.global_seed)")
    p.add_argument("--workers", type=int, help="parallel worker processes")

    p = sub.add_parser("train", help="train one model per seed")
    common(p)
    p.add_argument("--manifest", help="dataset manifest (file or directory)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--curriculum", choices=["on", "off"])
    p.add_argument("--seeds", help="comma-separated seed list")

    p = sub.add_parser("eval", help="evaluate checkpoints under --out with baseline and multi-view methods")
    common(p)
    p.add_argument("--manifest", help="dataset manifest (file or directory)")
    p.add_argument("--views", type=int, help="number of multi-views m")

    p = sub.add_parser("report", help="plot training curves and the competence schedule")
    common(p)
    p.add_argument("run_dirs", nargs="*", help="training output directories")

    p = sub.add_parser("noisy", help="noisy-label protocol with label smoothing and multi-view inference")
    common(p)
    p.add_argument("--cifar", help="directory with the CIFAR-10 binary batches")
    return parser


def _shortcuts(args) -> list[str]:
    extra = []
    if getattr(args, "n", None) is not None:
        extra.append(f"generate.n_videos={args.n}")
    if getattr(args, "seed", None) is not None:
        extra.append(f"generate.global_seed={args.seed}")
    if getattr(args, "workers", None) is not None:
        extra.append(f"generate.workers={args.workers}")
    if getattr(args, "epochs", None) is not None:
        extra.append(f"train.epochs={args.epochs}")
    if getattr(args, "curriculum", None) is not None:
        extra.append(f"train.curriculum={args.curriculum}")
    if getattr(args, "seeds", None):
        extra.append(f"train.seeds=[{args.seeds}]")
    if getattr(args, "views", None) is not None:
        extra.append(f"eval.views={args.views}")
    if getattr(args, "cifar", None):
        extra.append(f"noisy.cifar_dir={args.cifar}")
    return extra


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.load(args.config, list(args.overrides) + _shortcuts(args))
        # validate every section up front, before any compute
        cfgmod.generator_config(cfg)
        cfgmod.train_config(cfg)
        cfgmod.report_curriculum(cfg)
        if args.command == "noisy":
            cfgmod.noisy_config(cfg)
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"cellstream: invalid config: {exc}", file=sys.stderr)
        return 2
    except (CommandError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"cellstream {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
