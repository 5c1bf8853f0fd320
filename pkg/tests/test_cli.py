import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from tmtstream import cli
from tmtstream.config import CONFIG_ENV, SETTINGS, ConfigError, RunConfig, read_config_file
from tmtstream.corpus import load_corpus
from tmtstream.masks import read_mask


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_config_precedence(tmp_path, monkeypatch):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nq = 2\nchunk = 10\nlr = 0.01\n")
    cfg = RunConfig.resolve({"chunk": 20}, str(path))
    assert (cfg.q, cfg.chunk, cfg.lr, cfg.seed) == (2, 20, 0.01, SETTINGS["seed"].default)
    monkeypatch.setenv(CONFIG_ENV, str(path))
    assert RunConfig.resolve({}).q == 2
    monkeypatch.delenv(CONFIG_ENV)
    assert RunConfig.resolve({}).q == SETTINGS["q"].default


def test_config_rejects_unknown_and_malformed(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("q = 1\nwidth = 3\n")
    with pytest.raises(ConfigError, match="bad.cfg:2: unknown config key 'width'"):
        read_config_file(bad)
    bad.write_text("q 1\n")
    with pytest.raises(ConfigError, match="key = value"):
        read_config_file(bad)
    bad.write_text("designed_mask = maybe\n")
    with pytest.raises(ConfigError, match="designed_mask"):
        read_config_file(bad)
    with pytest.raises(ConfigError):
        RunConfig({"nope": 1})


def test_help_lists_every_flag_with_default(capsys):
    for name, (_, keys) in cli.COMMANDS.items():
        with pytest.raises(SystemExit) as exit_info:
            cli.main([name, "--help"])
        assert exit_info.value.code == 0
        text = " ".join(capsys.readouterr().out.split())
        for key in keys:
            assert SETTINGS[key].flag in text
        assert text.count("(default:") >= len(set(keys))


def test_unknown_subcommand_and_flag(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["frobnicate"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        cli.main(["simulate", "--bogus", "1"])
    assert e.value.code == 2


def test_simulate_prints_reference_latency(capsys):
    code, out, _ = run(["simulate", "--model", "cosyvoice2", "--dllm-ms", "25", "--dtts-ms", "5"], capsys)
    assert code == 0
    assert "FPL-L: 200.000 ms" in out


def test_simulate_writes_csvs(tmp_path, capsys):
    ev, res = tmp_path / "ev.csv", tmp_path / "res.csv"
    code, out, _ = run(["simulate", "--model", "tmt", "--spans", "7,5,8,3", "--events-out", str(ev),
                        "--results-out", str(res)], capsys)
    assert code == 0
    assert "FPL-L: 65.000 ms" in out and "simulated FPL-A: 15.000 ms" in out
    assert ev.read_text().startswith("t_ns,actor,event\n")
    assert res.read_text().splitlines()[0] == "model,mode,d_llm_ms,d_tts_ms,L,T,b,c,q,fpl_ms,rtf"


def test_simulate_reports_missing_symbol(capsys):
    code, _, err = run(["simulate", "--model", "maskgct", "--L", "5"], capsys)
    assert code == 1 and "missing parameter b" in err


def test_corpus_gen_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    assert run(["corpus-gen", "--out", str(a), "--n", "30", "--seed", "4"], capsys)[0] == 0
    assert run(["corpus-gen", "--out", str(b), "--n", "30", "--seed", "4"], capsys)[0] == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(load_corpus(a)) == 30


def test_masks_dump(tmp_path, capsys):
    out, dump = tmp_path / "m.txt", tmp_path / "d.txt"
    code, _, _ = run(["masks-dump", "--text", "3 9 14", "--durations", "7 5 4", "--step", "2",
                      "--out", str(out), "--dump-out", str(dump)], capsys)
    assert code == 0
    golden = read_mask(Path(__file__).parent / "golden" / "fig_layout_mask.txt")
    np.testing.assert_array_equal(read_mask(out), golden)
    assert dump.read_text().splitlines()[3] == "3\tD\t33\t1"


def test_missing_required_setting(capsys):
    code, _, err = run(["eval"], capsys)
    assert code == 1 and "--ckpt" in err


def test_tiny_pipeline_end_to_end(tmp_path, capsys):
    corpus = tmp_path / "c.txt"
    ckpt1, ckpt2 = tmp_path / "p.bin", tmp_path / "f.bin"
    tiny = ["--layers", "1", "--heads", "2", "--dim", "16", "--ffn", "32", "--batch-size", "2"]
    assert run(["corpus-gen", "--out", str(corpus), "--n", "10"], capsys)[0] == 0
    assert run(["pretrain", "--corpus", str(corpus), "--out", str(ckpt1), "--steps", "2", *tiny], capsys)[0] == 0
    code, out, _ = run(["finetune", "--corpus", str(corpus), "--init-ckpt", str(ckpt1), "--out", str(ckpt2),
                        "--steps", "2", "--batch-size", "2", "--curve", str(tmp_path / "curve.csv")], capsys)
    assert code == 0 and "finetune: 2 steps" in out
    code, out, _ = run(["eval", "--ckpt", str(ckpt2), "--corpus", str(corpus)], capsys)
    assert code == 0 and "speech_token_accuracy" in out
    trace, audio = tmp_path / "t.csv", tmp_path / "a.f64"
    code, out, _ = run(["synth", "--ckpt", str(ckpt2), "--text", "5 11 3", "--dllm-ms", "0",
                        "--trace-out", str(trace), "--audio-out", str(audio)], capsys)
    assert code == 0 and "forwards: 4" in out
    assert trace.read_text().startswith("step,event,tokens_in,span_len,cum_speech_tokens,wall_ms\n")
    assert audio.stat().st_size % 8 == 0 and audio.stat().st_size > 0
    code, out, _ = run(["simulate", "--model", "tmt", "--c", "2", "--dtts-ms", "none", "--ckpt", str(ckpt2)], capsys)
    assert code == 0 and "measured d_TTS" in out


def test_synth_reads_stdin(tmp_path):
    corpus, ckpt = tmp_path / "c.txt", tmp_path / "m.bin"
    tiny = ["--layers", "1", "--heads", "2", "--dim", "16", "--ffn", "32"]
    base = [sys.executable, "-m", "tmtstream"]
    subprocess.run(base + ["corpus-gen", "--out", str(corpus), "--n", "5"], check=True)
    subprocess.run(base + ["pretrain", "--corpus", str(corpus), "--out", str(ckpt), "--steps", "0", *tiny],
                   check=True, capture_output=True)
    done = subprocess.run(base + ["synth", "--ckpt", str(ckpt), "--dllm-ms", "0"], input="1 2\n",
                          capture_output=True, text=True, check=True)
    assert "text tokens: 2" in done.stdout
