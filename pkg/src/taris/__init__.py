"""Online speech recognition with a word-count gate and segment-restricted attention,
for audio and audio-visual inputs."""
from .config import TarisConfig, load_config
from .model import TarisModel, greedy_decode_offline
from .streaming import StreamState, stream_utterance

__all__ = ["TarisConfig", "TarisModel", "StreamState", "greedy_decode_offline", "load_config",
           "stream_utterance"]
__version__ = "0.1.0"
