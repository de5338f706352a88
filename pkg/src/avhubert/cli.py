"""``avhubert`` command line.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or usage.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import clusterlab as cl
from . import config as C
from . import decode_eval as de
from . import model as M
from . import neuralcore as nc
from . import selftest
from . import synthcorpus as sc
from . import trainer as tr

log = logging.getLogger("avhubert")


class UsageError(Exception):
    pass


def _resolve(args) -> C.ExperimentConfig:
    raw: dict = {}
    if args.variant:
        raw = json.loads(C.preset_file(args.variant).read_text(encoding="utf-8"))
    if args.config:
        try:
            user = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise C.ConfigFieldError([(f"{args.config}:{e.lineno}:{e.colno}", e.msg)]) from None
        except OSError as e:
            raise C.ConfigFieldError([(str(args.config), e.strerror or str(e))]) from None
        raw = C.merge(raw, user)
        if args.variant:  # the flag wins over a variant named in the file
            raw["training"]["variant"] = tr._arrow(args.variant)
    if args.seed is not None:
        raw["seed"] = args.seed
    for key in ("corpus", "pretrain", "finetune", "labeler"):
        val = getattr(args, f"{key}_dir", None)
        if val is not None:
            raw.setdefault("paths", {})[key] = str(val)
    return C.from_dict(raw)


def _out(args) -> Path:
    if args.out is None:
        raise UsageError("-o/--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(cfg: C.ExperimentConfig) -> tr.Dataset:
    if cfg.paths.corpus is None:
        raise UsageError("no corpus: pass --corpus or set paths.corpus")
    return tr.prepare(sc.load_corpus(cfg.paths.corpus))


def _check_frames(cfg: C.ExperimentConfig, data: tr.Dataset) -> None:
    n = sum(data.items[u].T for u in data.split("pretrain"))
    if max(cfg.training.K) > n:
        raise C.ConfigFieldError([("training.K", f"K={max(cfg.training.K)} exceeds the {n} "
                                                 "pretrain frames in the corpus")])


# ---------------------------------------------------------------- subcommands


def cmd_gen_corpus(cfg, args):
    out = _out(args)
    manifest = sc.gen_corpus(cfg.corpus, cfg.seed, out, workers=args.workers)
    C.save_config(out / "config.json", cfg)
    print(f"wrote {len(manifest['records'])} utterances to {out}")


def cmd_pretrain(cfg, args):
    out = _out(args)
    data = _dataset(cfg)
    _check_frames(cfg, data)
    C.save_config(out / "config.json", cfg)
    rec = tr.iterative_pretrain(data, cfg.plan(), cfg.seed, out)
    for m in rec.metrics():
        print(f"iteration {m['iteration']}: K={m['K']} purity={m['purity']:.3f} nmi={m['nmi']:.3f} "
              f"train_loss={m['train_loss']:.3f} val_loss={m['val_loss']:.3f}")


def cmd_cluster_eval(cfg, args):
    """Cluster quality of the hand-crafted features and, given a run, of each iteration's targets."""
    out = _out(args)
    data = _dataset(cfg)
    C.save_config(out / "config.json", cfg)
    pre, K = data.split("pretrain"), cfg.training.K[0]
    labels = data.labels(pre)
    rows = []
    for feature in ("mfcc", "hog"):
        t, _ = tr.initial_targets(data, feature, K, cfg.seed, pre, pre, cfg.plan())
        rows.append([feature, "", K, *cl.target_quality(t, labels)])
    if cfg.paths.pretrain:
        run = Path(cfg.paths.pretrain)
        with open(run / "metrics.csv", newline="") as fh:
            for m in csv.DictReader(fh):
                t = cl.load_targets(run / f"iter{m['iteration']}" / "targets.avt")
                t = cl.ClusterTargets({u: t.targets[u] for u in pre}, t.K)
                rows.append([f"iter{m['iteration']}", m["layer"], t.K, *cl.target_quality(t, labels)])
    with open(out / "cluster_eval.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "layer", "K", "purity", "nmi"])
        w.writerows(rows)
    for r in rows:
        print(f"{r[0]:>6} K={r[2]} purity={r[3]:.3f} nmi={r[4]:.3f}")


def _pretrained(cfg) -> Path | None:
    if cfg.paths.pretrain is None:
        return None
    run = Path(cfg.paths.pretrain)
    it = cfg.finetune.checkpoint_iteration
    if it is None:
        with open(run / "metrics.csv", newline="") as fh:
            it = len(list(csv.DictReader(fh)))
    return run / f"iter{it}" / "best.avp"


def cmd_finetune(cfg, args):
    out = _out(args)
    data = _dataset(cfg)
    C.save_config(out / "config.json", cfg)
    ft, ck = cfg.finetune, _pretrained(cfg)
    model_cfg = None if ck else replace(cfg.model, codebook_size=cfg.training.K[0])
    if ft.self_train:
        if cfg.paths.labeler is None:
            raise UsageError("self-training needs a fine-tuned labelling model: set paths.labeler")
        unlabeled = data.split("pretrain")
        res = tr.self_train(Path(cfg.paths.labeler) / "best.avp", data, unlabeled, data.split("labeled"),
                            ck, cfg.finetune_config(), cfg.seed, ft.mode, ft.label_mode, out_dir=out,
                            model_cfg=model_cfg)
    else:
        res = tr.finetune(ck, data, ft.mode, cfg.finetune_config(), cfg.seed, model_cfg=model_cfg,
                          out_dir=out)
    (out / "finetune.json").write_text(json.dumps(
        {"mode": ft.mode, "checkpoint": str(ck) if ck else None, "best_step": res.best_step,
         "best_val": res.best_val, "train_loss": res.train_loss}, indent=1))
    _decode(tr.best_model(res), data, ft.mode, ft.beam, out)


def _decode(model, data, mode, beam, out: Path):
    test = data.split("test")
    w, rows = tr.evaluate_wer(model, data, test, mode, beam)
    de.write_decode_results(out / "decode.csv", rows)
    print(f"test WER ({mode}, {len(test)} utterances): {w:.4f}")
    return w


def cmd_decode(cfg, args):
    out = _out(args)
    if cfg.paths.finetune is None:
        raise UsageError("no fine-tuned model: pass --finetune or set paths.finetune")
    data = _dataset(cfg)
    C.save_config(out / "config.json", cfg)
    model = M.load_model(Path(cfg.paths.finetune) / "best.avp")
    _decode(model, data, cfg.finetune.mode, cfg.finetune.beam, out)


def cmd_report(cfg, args):
    out = _out(args)
    paths = de.report(args.runs, out)
    for name, p in paths.items():
        print(f"wrote {p}")


def cmd_selftest(cfg, args):
    ok = selftest.run_all(args.suite or None)
    if not ok:
        raise RuntimeError("oracle suites failed")


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "pretrain": cmd_pretrain,
    "cluster-eval": cmd_cluster_eval,
    "finetune": cmd_finetune,
    "decode": cmd_decode,
    "report": cmd_report,
    "selftest": cmd_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="experiment config JSON")
    common.add_argument("-o", "--out", help="output directory")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--variant", help="variant preset, e.g. AV/MFCC->AV")
    common.add_argument("--workers", type=int, default=1, help="parallel workers (1 = bit-reproducible)")
    common.add_argument("--precision", choices=["f32", "f64"], default="f32")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="avhubert", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name in ("pretrain", "cluster-eval", "finetune", "decode"):
            sp.add_argument("--corpus", dest="corpus_dir", help="corpus directory (paths.corpus)")
        if name in ("cluster-eval", "finetune"):
            sp.add_argument("--pretrain", dest="pretrain_dir", help="pretraining run (paths.pretrain)")
        if name == "finetune":
            sp.add_argument("--labeler", dest="labeler_dir", help="fine-tuned labelling run (paths.labeler)")
        if name == "decode":
            sp.add_argument("--finetune", dest="finetune_dir", help="fine-tuning run (paths.finetune)")
        if name == "report":
            sp.add_argument("runs", nargs="+", help="run directories")
        if name == "selftest":
            sp.add_argument("--suite", action="append", choices=list(selftest.SUITES))
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = _resolve(args)
    except C.ConfigFieldError as e:
        for loc, msg in e.problems:
            print(f"config error: {loc}: {msg}", file=sys.stderr)
        return 2
    nc.set_precision(args.precision)
    try:
        COMMANDS[args.command](cfg, args)
    except C.ConfigFieldError as e:
        for loc, msg in e.problems:
            print(f"config error: {loc}: {msg}", file=sys.stderr)
        return 2
    except (UsageError, tr.ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    finally:
        nc.set_precision("f32")
    return 0


def main() -> None:
    sys.exit(run())
