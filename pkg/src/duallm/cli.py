"""Batch command line: ``duallm {train,eval,dyneval,tune,gradcheck,params,compare}``.

Errors are reported as one tab-separated line on stderr,
``error<TAB>kind<TAB>message``, with a nonzero exit status.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

from . import gradcheck
from .config import RunConfig, dump_run_config, load_run_config
from .data import Corpus, CorpusError, Vocab, VocabError, load_tokens
from .layers import RECURRENCES
from .model import Checkpoint, ConfigError, param_count
from .tensor import NonFiniteError
from .train import (
    ReportRow,
    compare_architectures,
    dynamic_eval,
    evaluate,
    format_report,
    report_csv,
    train_run,
    tune_posthoc,
)

EXIT_FAIL, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 1, 2, 3, 4

log = logging.getLogger("duallm")


class CommandError(Exception):
    def __init__(self, kind: str, message: str, status: int):
        super().__init__(message)
        self.kind = kind
        self.status = status


def _require_paths(cfg: RunConfig, *names: str) -> list[Path]:
    paths = []
    for name in names:
        value = getattr(cfg, name)
        if not value:
            raise ConfigError(name, "required for this command")
        p = Path(value)
        if not p.is_file():
            raise FileNotFoundError(f"{name}: no such file {value}")
        paths.append(p)
    return paths


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_run_config(cfg), encoding="utf-8")
    return out


def _load_checkpoint(cfg: RunConfig) -> tuple[Checkpoint, Vocab]:
    path = cfg.checkpoint_path
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint: no such file {path}")
    ckpt = Checkpoint.load(path)
    itos = ckpt.meta.get("vocab")
    if not itos:
        raise CorpusError(f"{path} carries no vocabulary")
    vocab = Vocab()
    for tok in itos:
        vocab.add(tok)
    vocab.frozen = True
    return ckpt, vocab


def _eval_splits(cfg: RunConfig, vocab: Vocab):
    valid_p, test_p = _require_paths(cfg, "valid_path", "test_path")
    return vocab.encode(load_tokens(valid_p)), vocab.encode(load_tokens(test_p))


def _write_table(out: Path, stem: str, rows: list[list], header: list[str]) -> None:
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    text = "\n".join("  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header] + rows)
    (out / f"{stem}.txt").write_text(text + "\n", encoding="utf-8")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    (out / f"{stem}.csv").write_text(buf.getvalue(), encoding="utf-8")


def cmd_train(cfg: RunConfig) -> int:
    train_p, valid_p, test_p = _require_paths(cfg, "train_path", "valid_path", "test_path")
    corpus = Corpus.from_files(train_p, valid_p, test_p)
    out = _out(cfg)
    settings = cfg.train_settings()
    model_cfg = cfg.model.replace(vocab_size=len(corpus.vocab))

    def on_epoch(r):
        print(f"epoch {r.epoch}\ttrain_loss {r.train_loss:.4f}\tvalid_ppl {r.valid_ppl:.3f}", file=sys.stderr)

    try:
        ckpt, metrics = train_run(model_cfg, corpus, settings, on_epoch=on_epoch)
    except NonFiniteError as exc:
        last = getattr(exc, "checkpoint", None)
        if last is not None:
            last.meta["vocab"] = corpus.vocab.itos
            last.save(cfg.checkpoint_path)
        if getattr(exc, "metrics", None) is not None:
            exc.metrics.write_log(out / "metrics.tsv", cfg.log_seconds)
        raise
    ckpt.meta["vocab"] = corpus.vocab.itos
    metrics.write_log(out / "metrics.tsv", cfg.log_seconds)
    ckpt.save(cfg.checkpoint_path)
    test = evaluate(ckpt, corpus.test, settings.seq_len, 1.0, settings.eval_batch_size)
    print(f"best_epoch\t{metrics.best_epoch}\nvalid_ppl\t{metrics.best_valid_ppl:.4f}\ntest_ppl\t{test.perplexity:.4f}")
    return 0


def cmd_eval(cfg: RunConfig, dynamic: bool) -> int:
    ckpt, vocab = _load_checkpoint(cfg)
    valid, test = _eval_splits(cfg, vocab)
    out = _out(cfg)
    model = ckpt.restore()
    if dynamic:
        d = cfg.dyneval_settings()

        def run(ids, prefix=None):
            return dynamic_eval(
                model, ids, d.lr_eval, d.clipnorm_eval, d.seq_len_eval, d.temperature, d.batch_size, d.beta1, prefix
            )

        v, t = run(valid), run(test, valid)
        stem = "dyneval_report"
    else:
        v = evaluate(model, valid, cfg.seq_len, cfg.temperature, cfg.eval_batch_size)
        t = evaluate(model, test, cfg.seq_len, cfg.temperature, cfg.eval_batch_size)
        stem = "eval_report"
    rows = [
        ["valid", f"{v.perplexity:.6f}", f"{v.nll_sum:.6f}", v.tokens],
        ["test", f"{t.perplexity:.6f}", f"{t.nll_sum:.6f}", t.tokens],
    ]
    _write_table(out, stem, rows, ["split", "perplexity", "nll_sum", "tokens"])
    print(f"valid_ppl\t{v.perplexity:.4f}\ntest_ppl\t{t.perplexity:.4f}")
    return 0


def cmd_tune(cfg: RunConfig) -> int:
    ckpt, vocab = _load_checkpoint(cfg)
    valid, _ = _eval_splits(cfg, vocab)
    out = _out(cfg)
    dynamic = cfg.tune_mode == "dynamic"
    res = tune_posthoc(
        ckpt.restore(),
        valid,
        cfg.tune_mode,
        seq_len=cfg.seq_len_eval if dynamic else cfg.seq_len,
        temperature=cfg.temperature,
        clipnorm=cfg.clipnorm_eval,
        lr_eval=cfg.lr_eval,
        beta1=cfg.beta1,
        batch_size=cfg.eval_batch_size,
    )
    keys = list(res.default_settings)
    rows = [[*(s[k] for k in keys), f"{p:.6f}"] for s, p in res.trials]
    _write_table(out, "tune_trials", rows, keys + ["valid_ppl"])
    lines = [f"mode\t{cfg.tune_mode}"]
    lines += [f"{k}\t{res.settings[k]}" for k in keys]
    lines += [f"valid_ppl\t{res.perplexity:.6f}", f"default_valid_ppl\t{res.default_perplexity:.6f}"]
    (out / "tune_report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    model_cfg = cfg.model.replace(dtype="float64")
    if model_cfg.vocab_size == 0:
        model_cfg = model_cfg.replace(vocab_size=7)
    rows = gradcheck.run_suite(seed=cfg.model.seed, config=model_cfg)
    out = _out(cfg)
    _write_table(
        out,
        "gradcheck",
        [[r.name, f"{r.max_rel_error:.3e}", "pass" if r.passed else "FAIL"] for r in rows],
        ["check", "max_rel_error", "result"],
    )
    print(gradcheck.format_rows(rows))
    return 0 if all(r.passed for r in rows) else EXIT_FAIL


def cmd_params(cfg: RunConfig) -> int:
    model_cfg = cfg.model
    if model_cfg.vocab_size == 0:
        (train_p,) = _require_paths(cfg, "train_path")
        model_cfg = model_cfg.replace(vocab_size=len(Corpus.from_tokens(load_tokens(train_p), [], []).vocab))
    print(param_count(model_cfg))
    return 0


def cmd_compare(cfg: RunConfig) -> int:
    train_p, valid_p, test_p = _require_paths(cfg, "train_path", "valid_path", "test_path")
    corpus = Corpus.from_files(train_p, valid_p, test_p)
    recs = [r.strip() for r in cfg.compare_recurrences.split(",") if r.strip()]
    for r in recs:
        if r not in RECURRENCES:
            raise ConfigError("compare_recurrences", f"unknown recurrence {r!r}")
    out = _out(cfg)

    def on_row(row: ReportRow):
        print(f"{row.model}: val {row.val:.3f} test {row.test:.3f} dyn {row.dyn_val:.3f}/{row.dyn_test:.3f}", file=sys.stderr)

    rows = compare_architectures(cfg.model, corpus, cfg.train_settings(), cfg.dyneval_settings(), recs, on_row)
    text = format_report(rows)
    (out / "report.txt").write_text(text, encoding="utf-8")
    (out / "report.csv").write_text(report_csv(rows), encoding="utf-8")
    print(text, end="")
    return 0


COMMANDS = ("train", "eval", "dyneval", "tune", "gradcheck", "params", "compare")


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="duallm", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", metavar="PATH", help="key = value config file")
    p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], dest="overrides",
                   help="override one config key (repeatable; wins over the file)")
    p.add_argument("--out", metavar="DIR", help="output directory (same as out_dir=DIR)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    overrides = list(args.overrides)
    if args.out:
        overrides.append(f"out_dir={args.out}")
    try:
        cfg, _ = load_run_config(args.config, overrides)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command in ("eval", "dyneval"):
            return cmd_eval(cfg, dynamic=args.command == "dyneval")
        if args.command == "tune":
            return cmd_tune(cfg)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        if args.command == "params":
            return cmd_params(cfg)
        return cmd_compare(cfg)
    except ConfigError as exc:
        raise CommandError("config", str(exc), EXIT_CONFIG) from exc
    except (FileNotFoundError, CorpusError, VocabError, OSError) as exc:
        raise CommandError("io", str(exc).strip("'\""), EXIT_IO) from exc
    except NonFiniteError as exc:
        raise CommandError("diverged", str(exc), EXIT_DIVERGED) from exc


def main(argv=None) -> int:
    try:
        return run(argv)
    except CommandError as exc:
        message = " ".join(str(exc).split())
        print(f"error\t{exc.kind}\t{message}", file=sys.stderr)
        return exc.status


if __name__ == "__main__":
    sys.exit(main())
