"""Training loop, static and dynamic evaluation, post-hoc tuning and reports."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .data import BatchStream, Corpus
from .layers import RECURRENCES
from .model import Checkpoint, Model, ModelConfig, build, param_count
from .optim import NadamState, clip_global_norm, nadam_step
from .tensor import NonFiniteError

log = logging.getLogger(__name__)

SEQ_LEN_GRID = tuple(range(5, 71, 5))
TEMPERATURE_GRID = tuple(round(0.9 + 0.05 * i, 2) for i in range(9))
CLIP_GRID = tuple(round(0.1 * i, 1) for i in range(11))
BETA1_GRID = (0.9, 0.0)


class DivergenceError(NonFiniteError):
    """Training or adaptation produced non-finite values."""

    def __init__(self, message: str, checkpoint: Checkpoint | None = None, metrics: RunMetrics | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.metrics = metrics


@dataclass
class TrainSettings:
    epochs: int = 100
    batch_size: int = 32
    seq_len: int = 25
    lr: float = 1e-3
    beta1: float = 0.9
    clipnorm: float = 0.0
    eval_batch_size: int = 1


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_ppl: float
    seconds: float


@dataclass
class RunMetrics:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_valid_ppl: float = math.inf

    def log_lines(self, include_seconds: bool = True) -> list[str]:
        lines = []
        for r in self.epochs:
            secs = f"{r.seconds:.3f}" if include_seconds else "0"
            lines.append(f"{r.epoch}\t{r.train_loss:.6f}\t{r.valid_ppl:.6f}\t{secs}")
        return lines

    def write_log(self, path, include_seconds: bool = True) -> None:
        Path(path).write_text("".join(line + "\n" for line in self.log_lines(include_seconds)), encoding="utf-8")


@dataclass
class EvalResult:
    nll_sum: float
    tokens: int

    @property
    def perplexity(self) -> float:
        return math.exp(self.nll_sum / self.tokens)

    @property
    def loss(self) -> float:
        return self.nll_sum / self.tokens


def _as_model(source: Checkpoint | Model) -> Model:
    return source.restore() if isinstance(source, Checkpoint) else source


def train_run(
    config: ModelConfig,
    corpus: Corpus,
    settings: TrainSettings,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[Checkpoint, RunMetrics]:
    """Train for ``settings.epochs`` epochs and return the best-validation checkpoint.

    The recurrent state is reset to zero at the start of every epoch.
    """
    if config.vocab_size != len(corpus.vocab):
        config = config.replace(vocab_size=len(corpus.vocab))
    store, model = build(config)
    opt = NadamState(lr=settings.lr, beta1=settings.beta1)
    stream = BatchStream(corpus.train, settings.batch_size)
    metrics = RunMetrics()
    best: Checkpoint | None = None

    for epoch in range(1, settings.epochs + 1):
        start = time.perf_counter()
        state = model.zero_state(settings.batch_size)
        xent_sum, tokens = 0.0, 0
        stream.reset()
        try:
            for x, y in stream.windows(settings.seq_len):
                store.zero_grad()
                res = model.backward_window(x, y, state)
                clip_global_norm(store.grads(), settings.clipnorm)
                nadam_step(store, opt)
                state = res.state
                xent_sum += res.xent * x.size
                tokens += x.size
            valid = evaluate(model, corpus.valid, settings.seq_len, 1.0, settings.eval_batch_size).perplexity
        except NonFiniteError as exc:
            raise DivergenceError(f"diverged in epoch {epoch}: {exc}", best, metrics) from exc
        store.zero_grad()
        record = EpochRecord(epoch, xent_sum / tokens, valid, time.perf_counter() - start)
        metrics.epochs.append(record)
        if valid < metrics.best_valid_ppl:
            metrics.best_valid_ppl = valid
            metrics.best_epoch = epoch
            best = Checkpoint.from_model(model, epoch=epoch, valid_ppl=valid)
        log.info("epoch %d train_loss %.4f valid_ppl %.3f", epoch, record.train_loss, valid)
        if on_epoch is not None:
            on_epoch(record)
    if best is None:
        best = Checkpoint.from_model(model, epoch=settings.epochs)
    return best, metrics


def _score(
    model: Model,
    ids: np.ndarray,
    seq_len: int,
    temperature: float,
    batch_size: int,
    adapt: Callable | None = None,
    keep: bool = True,
) -> EvalResult:
    stream = BatchStream(ids, batch_size)
    state = model.zero_state(batch_size)
    chunks = []
    for x, y in stream.windows(seq_len):
        if adapt is None:
            with tn.no_grad():
                fwd = model.run(x, state)
        else:
            fwd = model.run(x, state)
        if keep:
            chunks.append(tn.token_nll(fwd.logits.data, y.T.reshape(-1), temperature))
        if adapt is not None:
            adapt(fwd, y)
        state = fwd.state.detach()
    if not keep:
        return EvalResult(0.0, 0)
    nll = np.concatenate(chunks)
    # fsum is order independent, so equal per-token losses give equal totals
    return EvalResult(math.fsum(nll.tolist()), int(nll.size))


def evaluate(
    source: Checkpoint | Model,
    ids: np.ndarray,
    seq_len: int = 25,
    temperature: float = 1.0,
    batch_size: int = 1,
) -> EvalResult:
    """Eval-mode pass with state carried across windows."""
    if len(ids) == 0:
        raise ValueError("cannot evaluate on empty data")
    return _score(_as_model(source), ids, seq_len, temperature, batch_size)


def dynamic_eval(
    source: Checkpoint | Model,
    ids: np.ndarray,
    lr_eval: float = 1e-5,
    clip_eval: float = 0.0,
    seq_len_eval: int = 25,
    temperature: float = 1.0,
    batch_size: int = 1,
    beta1: float = 0.9,
    adapt_on: np.ndarray | None = None,
) -> EvalResult:
    """Score each window, then take one clipped Nadam step on it.

    ``adapt_on`` (e.g. validation text) is consumed for adaptation only before
    scoring ``ids``. Parameters are restored to their entry values on return.
    """
    if len(ids) == 0:
        raise ValueError("cannot evaluate on empty data")
    model = _as_model(source)
    saved = model.params.snapshot()
    opt = NadamState(lr=lr_eval, beta1=beta1)
    store = model.params

    def adapt(fwd, y):
        total, _ = model.loss(fwd, y, regularize=False)
        if not math.isfinite(float(total.data)):
            raise DivergenceError(f"adaptation loss is {float(total.data)}")
        store.zero_grad()
        tn.backward(total)
        clip_global_norm(store.grads(), clip_eval)
        nadam_step(store, opt)
        store.zero_grad()

    try:
        if adapt_on is not None and len(adapt_on):
            _score(model, adapt_on, seq_len_eval, temperature, batch_size, adapt, keep=False)
        return _score(model, ids, seq_len_eval, temperature, batch_size, adapt)
    except NonFiniteError as exc:
        raise DivergenceError(f"dynamic evaluation diverged: {exc}") from exc
    finally:
        store.zero_grad()
        store.load(saved)


# ---------------------------------------------------------------------------
# post-hoc tuning


@dataclass
class TuneResult:
    settings: dict
    perplexity: float
    default_settings: dict
    default_perplexity: float
    trials: list[tuple[dict, float]] = field(default_factory=list)


def tune_posthoc(
    source: Checkpoint | Model,
    valid_ids: np.ndarray,
    mode: str = "static",
    seq_len: int = 25,
    temperature: float = 1.0,
    clipnorm: float = 0.0,
    lr_eval: float = 1e-5,
    beta1: float = 0.9,
    batch_size: int = 1,
) -> TuneResult:
    """Coordinate grid search over sequence length, then temperature, then (dynamic) clip norm.

    Dynamic mode repeats the search with ``beta1 = 0`` and keeps the better
    run. Each stage keeps its incumbent, so the result never loses to the
    defaults. Ties prefer shorter sequences, then lower temperature.
    """
    if mode not in ("static", "dynamic"):
        raise ValueError(f"mode must be 'static' or 'dynamic', got {mode!r}")
    model = _as_model(source)
    cache: dict[tuple, float] = {}
    trials: list[tuple[dict, float]] = []

    def ppl(s: dict) -> float:
        key = tuple(sorted(s.items()))
        if key not in cache:
            if mode == "static":
                r = evaluate(model, valid_ids, s["seq_len"], s["temperature"], batch_size)
            else:
                r = dynamic_eval(
                    model, valid_ids, lr_eval, s["clipnorm"], s["seq_len"], s["temperature"], batch_size, s["beta1"]
                )
            cache[key] = r.perplexity
            trials.append((dict(s), cache[key]))
        return cache[key]

    def stage(current: dict, name: str, grid: Sequence) -> dict:
        options = [dict(current, **{name: v}) for v in grid]
        options.append(current)
        return min(options, key=lambda s: (ppl(s), s[name]))

    defaults = {"seq_len": seq_len, "temperature": temperature}
    if mode == "dynamic":
        defaults.update(clipnorm=clipnorm, beta1=beta1)
    default_ppl = ppl(defaults)

    starts = [defaults]
    if mode == "dynamic":
        starts += [dict(defaults, beta1=b) for b in BETA1_GRID if b != beta1]
    best = None
    for start in starts:
        s = stage(start, "seq_len", SEQ_LEN_GRID)
        s = stage(s, "temperature", TEMPERATURE_GRID)
        if mode == "dynamic":
            s = stage(s, "clipnorm", CLIP_GRID)
        if best is None or ppl(s) < ppl(best):
            best = s
    return TuneResult(best, ppl(best), defaults, default_ppl, trials)


# ---------------------------------------------------------------------------
# dual-vs-ERS comparison


@dataclass
class ReportRow:
    model: str
    params: int
    val: float
    test: float
    dyn_val: float
    dyn_test: float


@dataclass
class DynevalSettings:
    lr_eval: float = 1e-5
    clipnorm_eval: float = 0.0
    seq_len_eval: int = 25
    temperature: float = 1.0
    batch_size: int = 1
    beta1: float = 0.9


def model_label(architecture: str, recurrence: str) -> str:
    return recurrence if architecture == "ERS" else f"Dual {recurrence}"


def compare_architectures(
    base: ModelConfig,
    corpus: Corpus,
    settings: TrainSettings,
    dyn: DynevalSettings,
    recurrences: Sequence[str] = RECURRENCES,
    on_row: Callable[[ReportRow], None] | None = None,
) -> list[ReportRow]:
    """Train ERS and Dual variants of each recurrence; score val/test with and without dyneval.

    Test dyneval first adapts on the validation split.
    """
    rows = []
    for rec in recurrences:
        for arch in ("ERS", "Dual"):
            cfg = base.replace(architecture=arch, recurrence=rec, vocab_size=len(corpus.vocab), lstm_layers=0)
            ckpt, _ = train_run(cfg, corpus, settings)
            model = ckpt.restore()

            def stat(ids):
                return evaluate(model, ids, settings.seq_len, dyn.temperature, settings.eval_batch_size).perplexity

            def dyne(ids, prefix=None):
                return dynamic_eval(
                    model, ids, dyn.lr_eval, dyn.clipnorm_eval, dyn.seq_len_eval,
                    dyn.temperature, dyn.batch_size, dyn.beta1, adapt_on=prefix,
                ).perplexity

            row = ReportRow(
                model_label(arch, rec),
                param_count(cfg),
                stat(corpus.valid),
                stat(corpus.test),
                dyne(corpus.valid),
                dyne(corpus.test, corpus.valid),
            )
            if row.dyn_test > row.test or row.dyn_val > row.val:
                log.warning("%s: dynamic evaluation did not improve perplexity", row.model)
            rows.append(row)
            if on_row is not None:
                on_row(row)
    return rows


def _fmt_params(n: int) -> str:
    return f"{n / 1e6:.2f} M" if n >= 10_000 else str(n)


def format_report(rows: Sequence[ReportRow], title: str = "") -> str:
    """Plain-text table: model, params, val/test without and with dyneval."""
    header = ["MODEL", "No. PARAMS", "Val.", "Test", "Val.", "Test"]
    body = [
        [r.model, _fmt_params(r.params)] + [f"{v:.2f}" for v in (r.val, r.test, r.dyn_val, r.dyn_test)]
        for r in rows
    ]
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    groups = f"{'':<{widths[0] + widths[1] + 2}}  {'No Dyneval':^{widths[2] + widths[3] + 2}}  {'Dyneval':^{widths[4] + widths[5] + 2}}"

    def line(cells):
        return "  ".join(c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))

    out = []
    if title:
        out.append(title)
    out += [groups.rstrip(), line(header), "-" * len(line(header))]
    for i, row in enumerate(body):
        out.append(line(row))
        if i % 2 == 1 and i != len(body) - 1:
            out.append("")
    return "\n".join(out) + "\n"


def report_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "params", "val", "test", "dyneval_val", "dyneval_test"])
    for r in rows:
        w.writerow([r.model, r.params, f"{r.val:.6f}", f"{r.test:.6f}", f"{r.dyn_val:.6f}", f"{r.dyn_test:.6f}"])
    return buf.getvalue()
