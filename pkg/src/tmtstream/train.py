"""Two-stage training: masked pretraining, then prediction-consistent fine-tuning."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tt
from .corpus import AlignedExample, VocabLayout
from .masks import mask_for
from .model import ModelConfig, duration_logits, hidden_states, speech_logits
from .sequence import (ComposedSequence, LossTargets, build_finetune_sequence,
                       build_pretrain_sequence)
from .tensor import Tensor

log = logging.getLogger(__name__)

STAGES = ("pretrain", "finetune")


class TrainError(ValueError):
    pass


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    steps: int = 3000
    batch_size: int = 16
    learning_rate: float = 2e-3
    warmup_steps: int = 100
    min_lr_ratio: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0
    q: int = 1
    checkpoint_path: str | None = None
    curve_path: str | None = None
    eval_every: int = 0
    designed_mask: bool = True
    supervise_first_duration: bool = True
    supervise_all_durations: bool = False

    def __post_init__(self):
        if self.stage not in STAGES:
            raise TrainError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.steps < 0:
            raise TrainError("steps must be >= 0")
        if self.q < 0:
            raise TrainError("q must be >= 0")

    def lr_at(self, step: int) -> float:
        """Linear warmup, then cosine decay to ``min_lr_ratio * learning_rate``."""
        if self.warmup_steps and step < self.warmup_steps:
            return self.learning_rate * (step + 1) / self.warmup_steps
        span = max(self.steps - self.warmup_steps, 1)
        progress = min((step - self.warmup_steps) / span, 1.0)
        floor = self.min_lr_ratio
        return self.learning_rate * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * progress)))


@dataclass
class StepReport:
    step: int
    stage: str
    l_mask: float
    l_duration: float
    total: float
    wall_ms: float


@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def update(self, params: dict[str, Tensor], lr: float, cfg: TrainConfig) -> float:
        """Clip by global norm, take one Adam step, clear grads. Returns the pre-clip norm."""
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        clip = cfg.clip_norm / norm if cfg.clip_norm and norm > cfg.clip_norm else 1.0
        self.t += 1
        bc1 = 1 - cfg.beta1 ** self.t
        bc2 = 1 - cfg.beta2 ** self.t
        for k, g in grads.items():
            g = g * clip
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            params[k].data -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        for p in params.values():
            p.zero_grad()
        return norm


# ------------------------------------------------------------------- batching


@dataclass
class Batch:
    ids: np.ndarray            # [B, N]
    allow: np.ndarray          # [B, N, N]
    lengths: np.ndarray        # [B]
    speech_rows: np.ndarray    # row indices into the packed hidden states
    speech_targets: np.ndarray
    duration_rows: np.ndarray
    duration_targets: np.ndarray


def collate(items: Sequence[tuple[ComposedSequence, LossTargets]], vocab: VocabLayout,
            designed: bool = True) -> Batch:
    """Right-pad sequences; padding rows attend only to themselves."""
    width = max(len(s) for s, _ in items)
    B = len(items)
    ids = np.full((B, width), vocab.pad, dtype=np.int64)
    allow = np.broadcast_to(np.eye(width, dtype=bool), (B, width, width)).copy()
    lengths = np.array([len(s) for s, _ in items], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    s_rows, s_tgt, d_rows, d_tgt = [], [], [], []
    for b, (seq, targets) in enumerate(items):
        n = len(seq)
        ids[b, :n] = seq.ids
        allow[b, :n, :n] = mask_for(seq, designed)
        for pos, tok in sorted(targets.speech_targets.items()):
            s_rows.append(offsets[b] + pos)
            s_tgt.append(tok)
        for pos, cls in sorted(targets.duration_targets.items()):
            d_rows.append(offsets[b] + pos)
            d_tgt.append(cls)
    as_int = lambda xs: np.asarray(xs, dtype=np.int64)
    return Batch(ids, allow, lengths, as_int(s_rows), as_int(s_tgt), as_int(d_rows), as_int(d_tgt))


def batch_losses(params, config: ModelConfig, batch: Batch, reduction: str = "mean"):
    """``(mask_loss, duration_loss)`` tensors; ``None`` when nothing is supervised."""
    h = hidden_states(params, config, batch.ids, batch.allow, batch.lengths)
    l_mask = l_dur = None
    if len(batch.speech_rows):
        logits = speech_logits(params, tt.take_rows(h, batch.speech_rows))
        l_mask = tt.cross_entropy_rows(logits, batch.speech_targets, reduction)
    if len(batch.duration_rows):
        logits = duration_logits(params, tt.take_rows(h, batch.duration_rows))
        l_dur = tt.cross_entropy_rows(logits, batch.duration_targets, reduction)
    return l_mask, l_dur


# -------------------------------------------------------------------- trainer


class Trainer:
    """Holds parameters, optimizer state and the sampling RNG for one stage."""

    def __init__(self, params: dict[str, Tensor], model_config: ModelConfig, config: TrainConfig,
                 vocab: VocabLayout = VocabLayout(), opt_state: AdamState | None = None):
        self.params = params
        self.model_config = model_config
        self.config = config
        self.vocab = vocab
        self.opt = opt_state or AdamState()
        self.rng = np.random.default_rng(config.seed)
        self.step_index = 0

    def _build_pretrain(self, ex):
        seq, targets, _ = build_pretrain_sequence(ex, self.rng, self.vocab)
        return seq, targets

    def _build_finetune(self, ex):
        n = int(self.rng.integers(1, len(ex.text) + 1))
        return build_finetune_sequence(ex, n, self.config.q, self.vocab,
                                       supervise_first_duration=self.config.supervise_first_duration,
                                       supervise_all_durations=self.config.supervise_all_durations)

    def _step(self, items, stage: str) -> StepReport:
        t0 = time.perf_counter()
        items = [it for it in items if not it[1].is_empty()]
        l_mask = l_dur = 0.0
        if items:
            batch = collate(items, self.vocab, self.config.designed_mask)
            with tt.Tape() as tape:
                lm, ld = batch_losses(self.params, self.model_config, batch)
                terms = [x for x in (lm, ld) if x is not None]
                loss = terms[0] if len(terms) == 1 else tt.add(terms[0], terms[1])
            tape.backward(loss)
            self.opt.update(self.params, self.config.lr_at(self.step_index), self.config)
            l_mask = lm.item() if lm is not None else 0.0
            l_dur = ld.item() if ld is not None else 0.0
        report = StepReport(self.step_index, stage, l_mask, l_dur, l_mask + l_dur,
                            (time.perf_counter() - t0) * 1000.0)
        self.step_index += 1
        return report

    def pretrain_step(self, batch: Sequence[AlignedExample]) -> StepReport:
        if not batch:
            raise TrainError("empty batch")
        return self._step([self._build_pretrain(ex) for ex in batch], "pretrain")

    def finetune_step(self, batch: Sequence[AlignedExample]) -> StepReport:
        if not batch:
            raise TrainError("empty batch")
        return self._step([self._build_finetune(ex) for ex in batch], "finetune")

    def sample_batch(self, corpus: Sequence[AlignedExample]) -> list[AlignedExample]:
        picks = self.rng.integers(0, len(corpus), size=self.config.batch_size)
        return [corpus[i] for i in picks]


CURVE_HEADER = ["step", "stage", "l_mask", "l_duration", "total", "wall_ms"]


def write_curve(path, reports: Sequence[StepReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for r in reports:
            w.writerow([r.step, r.stage, f"{r.l_mask:.6f}", f"{r.l_duration:.6f}",
                        f"{r.total:.6f}", f"{r.wall_ms:.3f}"])


@dataclass
class TrainingResult:
    params: dict[str, Tensor]
    reports: list[StepReport]
    evals: list[tuple[int, dict]]
    opt_state: AdamState


def run_training(
    config: TrainConfig,
    corpus: Sequence[AlignedExample],
    params: dict[str, Tensor],
    model_config: ModelConfig,
    vocab: VocabLayout = VocabLayout(),
    eval_corpus: Sequence[AlignedExample] | None = None,
    start_step: int = 0,
) -> TrainingResult:
    """Run one stage; optionally write the checkpoint and the loss curve."""
    from .checkpoint import Checkpoint, save_checkpoint

    if not corpus:
        raise TrainError("corpus is empty")
    trainer = Trainer(params, model_config, config, vocab)
    step_fn = trainer.pretrain_step if config.stage == "pretrain" else trainer.finetune_step
    reports, evals = [], []
    for s in range(config.steps):
        r = step_fn(trainer.sample_batch(corpus))
        reports.append(r)
        if s % 100 == 0 or s == config.steps - 1:
            log.info("%s step %d: l_mask=%.4f l_dur=%.4f", config.stage, s, r.l_mask, r.l_duration)
        if config.eval_every and eval_corpus and (s + 1) % config.eval_every == 0:
            metrics = evaluate(params, model_config, eval_corpus, config.q, vocab, config.designed_mask)
            evals.append((s + 1, metrics))
            log.info("eval at %d: %s", s + 1, metrics)
    if config.curve_path:
        write_curve(config.curve_path, reports)
    if config.checkpoint_path:
        save_checkpoint(config.checkpoint_path, Checkpoint.from_params(
            params, model_config, vocab, step=start_step + config.steps, stage=config.stage,
            optimizer=trainer.opt))
    return TrainingResult(params, reports, evals, trainer.opt)


# ----------------------------------------------------------------- evaluation


def evaluate(params, model_config: ModelConfig, corpus: Sequence[AlignedExample], q: int,
             vocab: VocabLayout = VocabLayout(), designed_mask: bool = True,
             batch_size: int = 64) -> dict[str, float]:
    """Teacher-forced argmax accuracy over every (example, n) pair.

    Duration accuracy covers every supervised placeholder, including the one
    before span 1 that the bootstrap pass queries.
    """
    if not corpus:
        raise TrainError("corpus is empty")
    items = [build_finetune_sequence(ex, n, q, vocab)
             for ex in corpus for n in range(1, len(ex.text) + 1)]
    tok_hits = tok_total = dur_hits = dur_total = span_hits = 0
    for lo in range(0, len(items), batch_size):
        chunk = items[lo:lo + batch_size]
        batch = collate(chunk, vocab, designed_mask)
        h = hidden_states(params, model_config, batch.ids, batch.allow, batch.lengths)
        s_pred = speech_logits(params, tt.take_rows(h, batch.speech_rows)).data.argmax(axis=1)
        d_pred = duration_logits(params, tt.take_rows(h, batch.duration_rows)).data.argmax(axis=1)
        s_ok = s_pred == batch.speech_targets
        tok_hits += int(s_ok.sum())
        tok_total += len(s_ok)
        dur_hits += int((d_pred == batch.duration_targets).sum())
        dur_total += len(d_pred)
        # speech rows are grouped per item in collate order
        cursor = 0
        for _, targets in chunk:
            k = len(targets.speech_targets)
            span_hits += bool(s_ok[cursor:cursor + k].all())
            cursor += k
    return {
        "speech_token_accuracy": tok_hits / tok_total,
        "duration_exact_match": dur_hits / dur_total,
        "span_exact_match": span_hits / len(items),
    }
