"""Command-line entry point: ``posmlm <command> [options]``.

Commands: gen-data, pretrain, tune, eval, ablate, encode, report.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
The output root defaults to ``experiment.output_dir`` and can be overridden
with the ``POSMLM_OUTPUT`` environment variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import checkpoint, experiments
from . import pipeline as P
from .codec import BBox, DomainError, ParseError, dequantize_box, encode_grounded, parse_grounded, quantize_box
from .config import ExperimentConfig, dump_config, load_config
from .metrics import EvalReport, evaluate_dump, read_dump, write_dump
from .scenes import audit, generate_many, read_dataset, write_dataset
from .train import Optimizer, TrainingError

log = logging.getLogger("posmlm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


# ------------------------------------------------------------------ layout


def paths(cfg: ExperimentConfig) -> dict[str, Path]:
    root = cfg.output_root()
    return {
        "root": root,
        "train": root / "data" / "train",
        "test": root / "data" / "test",
        "pretrain": root / "ckpt" / "pretrain.ckpt",
        "logs": root / "logs",
        "reports": root / "reports",
        "dumps": root / "dumps",
    }


def _tuned_path(cfg: ExperimentConfig, task: str) -> Path:
    return paths(cfg)["root"] / "ckpt" / f"{task}.ckpt"


def _append_jsonl(path: Path, rec: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(rec, sort_keys=True) + "\n")


def _load_split(cfg: ExperimentConfig, split: str):
    p = paths(cfg)[split]
    if not (p / "manifest.json").is_file():
        raise FileNotFoundError(f"dataset not found at {p}; run gen-data first")
    return read_dataset(p)


def _ckpt_meta(cfg: ExperimentConfig, stage: str, epoch: int, opt: Optimizer, **extra) -> dict:
    return {"config_digest": cfg.digest(), "stage": stage, "epoch": epoch, "opt_steps": opt.step_count,
            "model": cfg.model_config().to_dict(), **extra}


def _load_ckpt(cfg: ExperimentConfig, path: Path):
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    params, meta, opt_state = checkpoint.load(path)
    expected = cfg.model_config().to_dict()
    if meta.get("model") != expected:
        raise DomainError(f"{path}: model config in checkpoint does not match the experiment config")
    return params, meta, opt_state


# ------------------------------------------------------------------ commands


def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    p = paths(cfg)
    p["root"].mkdir(parents=True, exist_ok=True)
    (p["root"] / "config.ini").write_text(dump_config(cfg), encoding="utf-8")
    for split, count, start in (("train", cfg.num_train, 0), ("test", cfg.num_test, cfg.test_offset)):
        samples = generate_many(cfg.scene, count, start)
        problems = [(s.index, pr) for s in samples for pr in audit(s)]
        if problems:
            raise RuntimeError(f"generated scenes failed the audit: {problems[:5]}")
        manifest = write_dataset(p[split], samples, cfg.scene)
        print(f"{split}: {count} scenes -> {p[split]} "
              f"(config {manifest['config_digest']}, content {manifest['content_digest'][:16]})")
    return 0


def cmd_pretrain(cfg: ExperimentConfig, args) -> int:
    p = paths(cfg)
    samples = _load_split(cfg, "train")
    mcfg = cfg.model_config()
    tc = cfg.train
    out = Path(args.out) if args.out else p["pretrain"]
    out.parent.mkdir(parents=True, exist_ok=True)
    start = 0
    if args.resume:
        params, meta, opt_state = _load_ckpt(cfg, Path(args.resume))
        start = int(meta["epoch"]) + 1
        opt = Optimizer.restore(tc, params, opt_state, int(meta["opt_steps"]))
    else:
        params = P.fresh_params(mcfg)
        opt = Optimizer(tc, params)
    epochs = (args.epochs if args.epochs is not None else cfg.pretrain_epochs) - start
    log_path = p["logs"] / "pretrain.jsonl"

    def on_epoch(epoch, params, rec):
        rec = {**rec, "config_digest": cfg.digest()}
        _append_jsonl(log_path, rec)
        checkpoint.save(out, params, _ckpt_meta(cfg, "pretrain", epoch, opt), opt.state)
        print(_epoch_line(rec), flush=True)

    P.pretrain(params, mcfg, tc, cfg.vocab, samples, max(epochs, 0), start, opt, on_epoch)
    if epochs <= 0:
        print(f"nothing to do: checkpoint already at epoch {start - 1}")
    print(f"checkpoint: {out}")
    return 0


def cmd_tune(cfg: ExperimentConfig, args) -> int:
    task = args.task
    if task not in P.TUNE_TASKS:
        raise UsageError(f"unknown task {task!r}; choose from {', '.join(P.TUNE_TASKS)}")
    p = paths(cfg)
    src = Path(args.checkpoint) if args.checkpoint else p["pretrain"]
    out = Path(args.out) if args.out else _tuned_path(cfg, task)
    if out.resolve() == src.resolve():
        raise UsageError("tuned checkpoint must differ from the input checkpoint")
    params, _, _ = _load_ckpt(cfg, src)
    samples = _load_split(cfg, "train")
    mcfg = cfg.model_config()
    n_before = sum(v.size for v in params.values())
    opt = Optimizer(cfg.train, params)
    log_path = p["logs"] / f"tune-{task}.jsonl"

    def on_epoch(epoch, params, rec):
        rec = {**rec, "config_digest": cfg.digest()}
        _append_jsonl(log_path, rec)
        print(_epoch_line(rec), flush=True)

    epochs = args.epochs if args.epochs is not None else cfg.tune_epochs
    P.prompt_tune(params, mcfg, cfg.train, cfg.vocab, task, samples, epochs, 0, opt, cfg.use_itm, on_epoch)
    n_after = sum(v.size for v in params.values())
    if n_after != n_before:
        raise RuntimeError(f"parameter count changed during tuning: {n_before} -> {n_after}")
    out.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(out, params, _ckpt_meta(cfg, f"tune-{task}", epochs - 1, opt, source=str(src)), opt.state)
    print(f"parameters: {n_after} (unchanged)\ncheckpoint: {out}")
    return 0


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    p = paths(cfg)
    if args.dump:
        records = read_dump(args.dump)
        report = evaluate_dump(records, cfg.digest())
    else:
        task = args.task
        if task not in P.TUNE_TASKS:
            raise UsageError(f"unknown task {task!r}; choose from {', '.join(P.TUNE_TASKS)}")
        if args.checkpoint:
            ck = Path(args.checkpoint)
        else:
            ck = _tuned_path(cfg, task)
            ck = ck if ck.is_file() else p["pretrain"]
        params, _, _ = _load_ckpt(cfg, ck)
        samples = _load_split(cfg, args.split)
        report, records = P.evaluate(task, params, cfg.model_config(), cfg.vocab, samples, cfg.seed,
                                     cfg.use_itm, cfg.digest())
        dump = p["dumps"] / f"{task}-{args.split}.jsonl"
        dump.parent.mkdir(parents=True, exist_ok=True)
        write_dump(dump, records)
        print(f"dump: {dump}")
    out = Path(args.report) if args.report else p["reports"] / f"{report.task}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_record(), sort_keys=True) + "\n", encoding="utf-8")
    print(report.table())
    return 0


def cmd_ablate(cfg: ExperimentConfig, args) -> int:
    rows = experiments.run_ablation(cfg, progress=lambda r: print(json.dumps(r, sort_keys=True), flush=True))
    table = experiments.ablation_table(rows)
    summary = experiments.summarize(rows, cfg.ablation_epochs)
    out = paths(cfg)["reports"] / "ablation.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"config_digest": cfg.digest(), "runs": rows, "summary": summary},
                              sort_keys=True, indent=1) + "\n", encoding="utf-8")
    print(table)
    print(f"report: {out}")
    return 0


def cmd_encode(cfg: ExperimentConfig, args) -> int:
    vocab = cfg.vocab
    M = vocab.num_bins
    if args.stream:
        try:
            stream = [int(t) for t in args.stream.replace(",", " ").split()]
        except ValueError:
            raise UsageError("--stream takes integer token ids") from None
        text, objects = parse_grounded(stream, vocab)
        print("text:", " ".join(vocab.words[t - vocab.text_start] for t in text))
        for o in objects:
            box = dequantize_box(o.bins, args.width, args.height, M)
            print(f"  after token {o.span_end}: bins {list(o.bins)} -> box {[round(c, 3) for c in box.coords]}")
        return 0
    words = args.text.split()
    if len(args.box) % 4:
        raise UsageError("--box takes four numbers per box")
    boxes = [BBox(*args.box[i:i + 4], args.width, args.height) for i in range(0, len(args.box), 4)]
    ends = args.after or [len(words) - 1] * len(boxes)
    if len(ends) != len(boxes):
        raise UsageError("--after needs one index per box")
    stream = encode_grounded(vocab.encode_words(words), list(zip(ends, boxes)), vocab)
    print("ids:", " ".join(map(str, stream)))
    print("rendered:", vocab.render(stream))
    text, objects = parse_grounded(stream, vocab)
    for b, o in zip(boxes, objects):
        back = dequantize_box(o.bins, args.width, args.height, M)
        err = max(abs(x - y) for x, y in zip(back.coords, b.coords))
        print(f"  {list(b.coords)} -> bins {list(quantize_box(b, M))} -> {[round(c, 3) for c in back.coords]}"
              f" (max error {err:.3f}, bound {max(args.width, args.height) / M:.3f})")
    return 0


def cmd_report(cfg: ExperimentConfig, args) -> int:
    p = paths(cfg)
    files = [Path(f) for f in args.files] or sorted(p["reports"].glob("*.json"))
    if not files:
        raise FileNotFoundError(f"no reports under {p['reports']}")
    for f in files:
        data = json.loads(f.read_text(encoding="utf-8"))
        if "runs" in data:
            print(experiments.ablation_table(data["runs"]))
        elif "metrics" in data:
            print(EvalReport(data["task"], data["metrics"], data["count"], data.get("config_digest", ""),
                             data.get("flags", [])).table())
        else:
            raise DomainError(f"{f}: not a report")
    return 0


def _epoch_line(rec: dict) -> str:
    parts = [f"{rec['stage']} epoch {rec['epoch']}"]
    for k in ("position_loss", "text_loss", "combined", "itm_loss", "pos_acc", "text_acc", "itm_acc"):
        v = rec.get(k)
        if v is not None:
            parts.append(f"{k}={v:.4f}")
    return "  ".join(parts)


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config (all keys optional)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
    common.add_argument("--seed", type=int, help="root seed (overrides experiment.seed)")
    common.add_argument("--output", help="output root (overrides experiment.output_dir)")
    common.add_argument("--threads", type=int, help="BLAS thread cap (default 1 for bitwise reproducibility)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="posmlm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="generate train/test scenes")
    g.add_argument("--count", type=int, help="training scene count (overrides experiment.num_train)")
    g.set_defaults(func=cmd_gen_data)

    pt = sub.add_parser("pretrain", parents=[common], help="GMLM + ITM pre-training")
    pt.add_argument("--epochs", type=int, help="total epochs (overrides experiment.pretrain_epochs)")
    pt.add_argument("--resume", help="continue from this checkpoint")
    pt.add_argument("--out", help="checkpoint path")
    pt.set_defaults(func=cmd_pretrain)

    t = sub.add_parser("tune", parents=[common], help="prompt-tune a pretrained checkpoint on one task")
    t.add_argument("task", help=f"one of {', '.join(P.TUNE_TASKS)}")
    t.add_argument("--checkpoint", help="input checkpoint (default: the pretrained one)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--out", help="output checkpoint path")
    t.set_defaults(func=cmd_tune)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint, or score an existing dump")
    e.add_argument("task", nargs="?", help=f"one of {', '.join(P.TUNE_TASKS)}")
    e.add_argument("--checkpoint")
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--dump", help="score this prediction dump instead of running the model")
    e.add_argument("--report", help="report output path")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", parents=[common], help="objective and masking ablations on REC")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("encode", parents=[common], help="debug the box/token codec round trip")
    c.add_argument("--text", default="the thing")
    c.add_argument("--box", type=float, nargs="+", default=[], help="x_min y_min x_max y_max [...]")
    c.add_argument("--after", type=int, nargs="+", help="word index each box follows")
    c.add_argument("--width", type=float, default=64.0)
    c.add_argument("--height", type=float, default=64.0)
    c.add_argument("--stream", help="decode this id sequence instead")
    c.set_defaults(func=cmd_encode)

    r = sub.add_parser("report", parents=[common], help="print saved reports as tables")
    r.add_argument("files", nargs="*")
    r.set_defaults(func=cmd_report)
    return parser


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set {item!r} must look like section.key=value")
        out[key.strip()] = value.strip()
    if args.seed is not None:
        out["experiment.seed"] = str(args.seed)
    if args.output is not None:
        out["experiment.output_dir"] = args.output
    if args.threads is not None:
        out["experiment.threads"] = str(args.threads)
    if getattr(args, "count", None) is not None:
        out["experiment.num_train"] = str(args.count)
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        if args.command == "eval" and not args.dump and not args.task:
            raise UsageError("eval needs a task or --dump")
        if args.command == "encode" and not args.stream and not args.box:
            raise UsageError("encode needs --box or --stream")
    except (UsageError, DomainError, FileNotFoundError, ValueError) as e:
        print(f"posmlm: error: {e}", file=sys.stderr)
        return 1
    t0 = time.time()
    try:
        with threadpool_limits(cfg.threads):
            code = args.func(cfg, args)
    except UsageError as e:
        print(f"posmlm: error: {e}", file=sys.stderr)
        return 1
    except (DomainError, ParseError, TrainingError, FileNotFoundError, OSError, RuntimeError,
            checkpoint.CheckpointError) as e:
        print(f"posmlm: {args.command} failed: {e}", file=sys.stderr)
        return 2
    log.info("%s finished in %.1fs", args.command, time.time() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
