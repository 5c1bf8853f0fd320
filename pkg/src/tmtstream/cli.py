"""Command-line entry point: ``tmtstream <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time

import numpy as np

from . import latency as lat
from .checkpoint import CheckpointError, load_checkpoint
from .config import CONFIG_ENV, SETTINGS, ConfigError, RunConfig
from .corpus import (AlignedExample, CorpusError, VocabLayout, example_from_text, generate_corpus,
                     load_corpus, rule_span, save_corpus)
from .masks import mask_for, write_mask
from .model import ModelConfig, init_params
from .sequence import build_finetune_sequence
from .stream import SessionConfig, open_session, synthesize, write_audio
from .train import TrainConfig, evaluate, run_training

log = logging.getLogger("tmtstream")

_VOCAB = ["text_vocab", "speech_vocab", "max_duration"]
_TRAIN = ["corpus", "out", "init_ckpt", "curve", "eval_corpus", "eval_every", "seed", "steps",
          "batch_size", "lr", "warmup", "min_lr_ratio", "clip_norm", "q", "designed_mask",
          "layers", "heads", "dim", "ffn", "learned_positions", *_VOCAB]
_SESSION = ["q", "chunk", "duration_topk", "modulation", "speech_sampling", "speech_topk",
            "samples_per_token", "seed", "designed_mask"]

COMMANDS: dict[str, tuple[str, list[str]]] = {
    "corpus-gen": ("generate a synthetic aligned corpus",
                   ["out", "n", "seed", "min_len", "max_len", *_VOCAB]),
    "pretrain": ("masked-span pretraining stage", _TRAIN),
    "finetune": ("streaming fine-tuning stage", _TRAIN + ["supervise_first_duration", "supervise_all_durations"]),
    "eval": ("teacher-forced accuracy on a corpus", ["ckpt", "corpus", "q", "designed_mask"]),
    "synth": ("streaming synthesis from text tokens",
              ["ckpt", "text", "text_file", "dllm_ms", "trace_out", "audio_out", *_SESSION]),
    "simulate": ("first-packet latency and RTF",
                 ["model", "dllm_ms", "dtts_ms", "frame_ms", "chunk", "L", "T", "b", "c", "q",
                  "spans", "count_bootstrap", "arrival_gated", "ckpt", "events_out", "results_out"]),
    "masks-dump": ("write an attention mask golden file and a sequence dump",
                   ["text", "durations", "step", "q", "designed_mask", "out", "dump_out", *_VOCAB]),
}


class CliError(RuntimeError):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tmtstream", description="Streaming masked-span TTS toy lab.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    for name, (help_text, keys) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", default=None,
                       help=f"key = value config file (default: ${CONFIG_ENV} if set)")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress (default: off)")
        for key in dict.fromkeys(keys):
            s = SETTINGS[key]
            text = f"{s.help} (default: {s.default})"
            if s.is_bool:
                p.add_argument(s.flag, dest=key, action=argparse.BooleanOptionalAction,
                               default=argparse.SUPPRESS, help=text)
            else:
                p.add_argument(s.flag, dest=key, type=s.parse, default=argparse.SUPPRESS,
                               metavar=key.upper(), help=text)
    return parser


# ------------------------------------------------------------------ helpers


def _vocab(cfg: RunConfig) -> VocabLayout:
    return VocabLayout(cfg.text_vocab, cfg.speech_vocab, cfg.max_duration)


def _require(cfg: RunConfig, *keys: str) -> None:
    for k in keys:
        if getattr(cfg, k) is None:
            raise CliError(f"missing required setting {SETTINGS[k].flag}")


def _int_list(text: str, what: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise CliError(f"{what}: expected integers, got {text!r}") from None


def _read_text(cfg: RunConfig) -> list[int]:
    if cfg.text is not None:
        return _int_list(cfg.text, "--text")
    if cfg.text_file in (None, "-"):
        return _int_list(sys.stdin.read(), "stdin")
    with open(cfg.text_file) as fh:
        return _int_list(fh.read(), cfg.text_file)


def _load_model(path: str):
    ckpt = load_checkpoint(path)
    return ckpt.params(), ckpt.config, ckpt.vocab, ckpt


def _session_config(cfg: RunConfig) -> SessionConfig:
    return SessionConfig(q=cfg.q, chunk_size=cfg.chunk, duration_topk=cfg.duration_topk,
                         duration_modulation=cfg.modulation, speech_sampling=cfg.speech_sampling,
                         speech_topk=cfg.speech_topk, seed=cfg.seed, use_designed_mask=cfg.designed_mask,
                         samples_per_token=cfg.samples_per_token)


# ------------------------------------------------------------------ commands


def cmd_corpus_gen(cfg: RunConfig) -> None:
    _require(cfg, "out")
    corpus = generate_corpus(cfg.n, cfg.seed, _vocab(cfg), (cfg.min_len, cfg.max_len))
    save_corpus(cfg.out, corpus)
    print(f"wrote {len(corpus)} sentences to {cfg.out}")


def _train(cfg: RunConfig, stage: str) -> None:
    _require(cfg, "corpus", "out")
    if cfg.init_ckpt:
        params, mc, vocab, ckpt = _load_model(cfg.init_ckpt)
        start = ckpt.step
    else:
        vocab = _vocab(cfg)
        mc = ModelConfig.for_vocab(vocab, num_layers=cfg.layers, num_heads=cfg.heads,
                                   model_dim=cfg.dim, ffn_dim=cfg.ffn,
                                   learned_positions=cfg.learned_positions)
        params, start = init_params(mc, cfg.seed), 0
    corpus = load_corpus(cfg.corpus, vocab)
    held = load_corpus(cfg.eval_corpus, vocab) if cfg.eval_corpus else None
    steps = cfg.steps if cfg.steps is not None else (3000 if stage == "pretrain" else 1000)
    tc = TrainConfig(stage=stage, steps=steps, batch_size=cfg.batch_size, learning_rate=cfg.lr,
                     warmup_steps=cfg.warmup, min_lr_ratio=cfg.min_lr_ratio, clip_norm=cfg.clip_norm,
                     seed=cfg.seed, q=cfg.q, checkpoint_path=cfg.out, curve_path=cfg.curve,
                     eval_every=cfg.eval_every, designed_mask=cfg.designed_mask,
                     supervise_first_duration=stage == "finetune" and cfg.supervise_first_duration,
                     supervise_all_durations=stage == "finetune" and cfg.supervise_all_durations)
    t0 = time.perf_counter()
    result = run_training(tc, corpus, params, mc, vocab, held, start_step=start)
    last = result.reports[-1] if result.reports else None
    summary = f"{stage}: {steps} steps in {time.perf_counter() - t0:.1f}s"
    if last is not None:
        summary += f", final l_mask={last.l_mask:.4f} l_duration={last.l_duration:.4f}"
    print(summary)
    for step, metrics in result.evals:
        print(f"eval@{step}: {json.dumps(metrics)}")
    print(f"checkpoint: {cfg.out}")


def cmd_eval(cfg: RunConfig) -> None:
    _require(cfg, "ckpt", "corpus")
    params, mc, vocab, _ = _load_model(cfg.ckpt)
    metrics = evaluate(params, mc, load_corpus(cfg.corpus, vocab), cfg.q, vocab, cfg.designed_mask)
    print(json.dumps(metrics, indent=2))


def cmd_synth(cfg: RunConfig) -> None:
    _require(cfg, "ckpt")
    params, mc, vocab, _ = _load_model(cfg.ckpt)
    text = _read_text(cfg)
    if not text:
        raise CliError("no text tokens given")
    session = open_session(params, mc, _session_config(cfg), vocab)
    chunks = synthesize(session, text, cfg.dllm_ms / 1000.0)
    spans = session.spans()
    print(f"text tokens: {len(text)}  forwards: {session.forward_count}  chunks: {len(chunks)}")
    print("span lengths: " + " ".join(str(len(s)) for s in spans))
    print("speech: " + " ".join(str(t) for s in spans for t in s))
    if session.forward_times:
        print(f"median forward: {lat.measured_d_tts(session.forward_times) * 1000:.2f} ms")
    if cfg.trace_out:
        session.write_trace(cfg.trace_out)
        print(f"trace: {cfg.trace_out}")
    if cfg.audio_out:
        n = write_audio(cfg.audio_out, chunks)
        print(f"audio: {cfg.audio_out} ({n} float64 samples)")


def _measure_dtts(cfg: RunConfig) -> float:
    params, mc, vocab, _ = _load_model(cfg.ckpt)
    rng = np.random.default_rng(cfg.seed)
    text = rng.integers(0, vocab.text_vocab_size, size=12).tolist()
    session = open_session(params, mc, SessionConfig(q=cfg.q, duration_topk=1, seed=cfg.seed), vocab)
    synthesize(session, text)
    return lat.measured_d_tts(session.forward_times)


def cmd_simulate(cfg: RunConfig) -> None:
    dtts_s = cfg.dtts_ms / 1000.0 if cfg.dtts_ms is not None else None
    if dtts_s is None:
        _require(cfg, "ckpt")
        dtts_s = _measure_dtts(cfg)
        print(f"measured d_TTS: {dtts_s * 1000:.3f} ms")
    model = lat.ModelClass(cfg.model)
    spans = _int_list(cfg.spans, "--spans") if cfg.spans else None
    L, T, c = cfg.L, cfg.T, cfg.c
    if spans:
        L, T, c = len(spans), sum(spans), lat.first_chunk_spans(spans, cfg.chunk)
    p = lat.LatencyParams(d_llm=cfg.dllm_ms / 1000.0, d_tts=dtts_s, chunk=cfg.chunk,
                          F=cfg.frame_ms / 1000.0, L=L, T=T, b=cfg.b, c=c, q=cfg.q)
    fpl_a = lat.analytic_fpl(model, p, "A")
    fpl_l = lat.analytic_fpl(model, p, "L")
    rtf = lat.analytic_rtf(p, model) if T is not None and (model.family != "tmt" or L) else None
    print(f"model: {model.value}")
    print(f"FPL-A: {fpl_a * 1000:.3f} ms")
    print(f"FPL-L: {fpl_l * 1000:.3f} ms")
    print(f"RTF: {'n/a (needs T)' if rtf is None else f'{rtf:.6f}'}")
    rows = lat.result_rows(model, p, fpl_a, fpl_l, rtf)
    can_sim = spans is not None if model is lat.ModelClass.TMT else (L is not None and T is not None)
    if can_sim:
        sim = lat.simulate_pipeline(model, p, spans, count_bootstrap=cfg.count_bootstrap,
                                    arrival_gated=cfg.arrival_gated)
        print(f"simulated FPL-A: {sim.fpl_a * 1000:.3f} ms  FPL-L: {sim.fpl_l * 1000:.3f} ms  "
              f"RTF: {sim.rtf:.6f}")
        if cfg.events_out:
            lat.write_events(cfg.events_out, sim.events)
    elif cfg.events_out:
        raise CliError("the simulator needs --L and --T (or --spans for tmt)")
    if cfg.results_out:
        lat.write_results(cfg.results_out, rows)


def cmd_masks_dump(cfg: RunConfig) -> None:
    _require(cfg, "text", "out")
    vocab = _vocab(cfg)
    text = _int_list(cfg.text, "--text")
    if cfg.durations is None:
        ex = example_from_text(text, vocab)
    else:
        durs = _int_list(cfg.durations, "--durations")
        if len(durs) != len(text):
            raise CliError(f"--durations has {len(durs)} values for {len(text)} text tokens")
        speech = [s for t, l in zip(text, durs) for s in rule_span(t, l, vocab.speech_vocab_size)]
        ex = AlignedExample.from_durations(text, durs, speech)
        ex.validate(vocab)
    seq, _ = build_finetune_sequence(ex, cfg.step, cfg.q, vocab)
    allow = mask_for(seq, cfg.designed_mask)
    write_mask(cfg.out, allow)
    dump = seq.dump()
    if cfg.dump_out:
        with open(cfg.dump_out, "w", newline="\n") as fh:
            fh.write(dump)
    else:
        sys.stdout.write(dump)
    print(f"mask: {cfg.out} ({len(seq)}x{len(seq)})", file=sys.stderr)


HANDLERS = {
    "corpus-gen": cmd_corpus_gen,
    "pretrain": lambda cfg: _train(cfg, "pretrain"),
    "finetune": lambda cfg: _train(cfg, "finetune"),
    "eval": cmd_eval,
    "synth": cmd_synth,
    "simulate": cmd_simulate,
    "masks-dump": cmd_masks_dump,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k in SETTINGS}
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        cfg = RunConfig.resolve(flags, args.config)
        HANDLERS[args.command](cfg)
    except (CliError, ConfigError, CorpusError, CheckpointError, lat.LatencyError, ValueError, OSError) as err:
        print(f"tmtstream {args.command}: error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
