"""Streaming text-to-speech-token generation with a span-masked transformer.

A toy, CPU-scale lab: numpy autodiff, a synthetic aligned corpus, two-stage
training, a dual-stream inference session and a latency model.
"""

from .corpus import AlignedExample, VocabLayout, generate_corpus, load_corpus, save_corpus
from .latency import LatencyParams, ModelClass, analytic_fpl, analytic_rtf, simulate_pipeline
from .masks import build_causal_mask, build_designed_mask, oracle_mask
from .model import ModelConfig, forward, init_params
from .stream import END_OF_TEXT, SessionConfig, StreamSession, offline_decode, open_session
from .train import TrainConfig, Trainer, evaluate, run_training

__version__ = "0.1.0"
