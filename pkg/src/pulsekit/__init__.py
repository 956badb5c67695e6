"""pulsekit: self-supervised beat tracking from pulse-mined contrastive pairs.

Pipeline: log-mel front-end, predominant-local-pulse (PLP) peak picking,
contrastive triplet mining, a Transformer encoder trained with NT-Xent,
supervised fine-tuning with a beat probe, and Viterbi decoding over a
(tempo, phase) state space.
"""

from .augment import StretchSpec, TimeMap, stretch
from .dbn import DbnConfig, decode
from .encoder import EncoderConfig, init_encoder, parameter_count
from .evaluation import EvalResult, evaluate, f_measure
from .frontend import AudioClip, FrontEndConfig, load_audio, log_mel
from .loss import LossConfig, nt_xent
from .mining import MiningConfig, mine_segment
from .plp import pick_peaks, plp_from_clip
from .training import Checkpoint, FinetuneConfig, PretrainConfig, finetune, predict_track, pretrain

__version__ = "0.1.0"

__all__ = [
    "AudioClip", "Checkpoint", "DbnConfig", "EncoderConfig", "EvalResult", "FinetuneConfig",
    "FrontEndConfig", "LossConfig", "MiningConfig", "PretrainConfig", "StretchSpec", "TimeMap",
    "decode", "evaluate", "f_measure", "finetune", "init_encoder", "load_audio", "log_mel",
    "mine_segment", "nt_xent", "parameter_count", "pick_peaks", "plp_from_clip", "predict_track",
    "pretrain", "stretch",
]
