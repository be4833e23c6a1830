"""Training-free and test-time adaptation of CLIP for zero-shot anomaly localization."""

from .pipeline import Localization, localize, localize_array
from .prompts import PromptBank, TextTokenPair, build_token_pair, expand_prompts, load_bank
from .scoring import AnomalyMap, build_map, score_image, score_patches
from .tta import NoiseSpec, TtaConfig, run_tta
from .vision import EncodeMode, encode_image
from .weights_io import ModelConfig, WeightStore, load_archive, make_synthetic_model, save_archive

__version__ = "0.1.0"
