"""slotgen: joint slot extraction and response generation for multimodal
shopping dialogues, on a self-contained reverse-mode autodiff kernel."""

from .config import RunConfig
from .corpus import DialogueRecord, KBStore, Turn
from .decoder import GenerationConfig
from .metrics import EvalReport, evaluate
from .model import DialogueModel
from .text import Vocabulary, build_vocab

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "DialogueRecord",
    "KBStore",
    "Turn",
    "GenerationConfig",
    "EvalReport",
    "evaluate",
    "DialogueModel",
    "Vocabulary",
    "build_vocab",
    "__version__",
]
