"""Generative slate reranking: an autoregressive pointer teacher distilled into a one-pass student."""

from .estimator import DualRerank
from .models import Candidate, CandidateList, Context, ModelConfig, RerankModel, Slate
from .serving import ServeRequest, ServeResult, serve
from .streamsim import EnvConfig, InteractionRecord, StreamEnv
from .trainloop import TrainConfig, run, train_step

__version__ = "0.1.0"

__all__ = [
    "Candidate", "CandidateList", "Context", "DualRerank", "EnvConfig", "InteractionRecord",
    "ModelConfig", "RerankModel", "ServeRequest", "ServeResult", "Slate", "StreamEnv",
    "TrainConfig", "run", "serve", "train_step",
]
