"""Prompt banks for the "A [domain] photo of a [state] [class]" template.

Each bank expands to N (normal, abnormal) prompt pairs. Their text
embeddings are stacked into a (2N, C) token matrix and averaged into one
normal and one abnormal direction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .tensor_core import NORM_EPS, DegenerateInputError
from .text import TokenizerSpec, encode_texts
from .weights_io import ConfigError, ModelConfig, WeightStore

SLOTS = ("{domain}", "{state}", "{class}")


@dataclass(frozen=True)
class PromptBank:
    base_templates: tuple[str, ...]
    state_pairs: tuple[tuple[str, str], ...]
    domain_words: tuple[str, ...]
    class_name: str = "object"
    per_class_states: dict[str, tuple[tuple[str, str], ...]] = field(default_factory=dict)

    def __post_init__(self):
        for skeleton in self.base_templates:
            for slot in SLOTS:
                if skeleton.count(slot) != 1:
                    raise ConfigError(
                        f"template {skeleton!r} must contain {slot} exactly once"
                    )
        if not self.base_templates:
            raise ConfigError("prompt bank has no base templates")
        if not self.state_pairs:
            raise ConfigError("prompt bank has no state pairs")
        if not self.domain_words:
            raise ConfigError("prompt bank has no domain words (use [\"\"] for none)")

    @property
    def states(self) -> tuple[tuple[str, str], ...]:
        return self.state_pairs + tuple(self.per_class_states.get(self.class_name, ()))

    @property
    def num_pairs(self) -> int:
        return len(self.base_templates) * len(self.states) * len(self.domain_words)

    def for_class(self, class_name: str) -> "PromptBank":
        return replace(self, class_name=class_name)

    @classmethod
    def from_dict(cls, d: dict, class_name: str = "object") -> "PromptBank":
        return cls(
            base_templates=tuple(d["base_templates"]),
            state_pairs=tuple(tuple(p) for p in d["state_pairs"]),
            domain_words=tuple(d["domain_words"]),
            class_name=class_name,
            per_class_states={
                k: tuple(tuple(p) for p in v) for k, v in d.get("per_class_states", {}).items()
            },
        )

    def to_dict(self) -> dict:
        return {
            "base_templates": list(self.base_templates),
            "state_pairs": [list(p) for p in self.state_pairs],
            "domain_words": list(self.domain_words),
            "per_class_states": {k: [list(p) for p in v] for k, v in self.per_class_states.items()},
        }


def load_bank(path=None, class_name: str = "object") -> PromptBank:
    """Read a prompt-bank JSON file; ``None`` loads the shipped default."""
    if path is None:
        text = resources.files("zsal.data").joinpath("prompts_default.json").read_text("utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"prompt file is not valid JSON: {exc}") from None
    for key in ("base_templates", "state_pairs", "domain_words"):
        if key not in data:
            raise ConfigError(f"prompt file lacks {key!r}")
    return PromptBank.from_dict(data, class_name)


def ablation_tiers(bank: PromptBank) -> dict[str, PromptBank]:
    """Banks for the prompt ablation: plain normal/abnormal words, then
    contrastive states, then contrastive states plus domain words."""
    return {
        "base": replace(bank, state_pairs=(("normal", "abnormal"),), domain_words=("",), per_class_states={}),
        "+CS": replace(bank, domain_words=("",)),
        "+DA": bank,
    }


def _fill(skeleton: str, domain: str, state: str, class_name: str) -> str:
    out = skeleton
    for slot, value in zip(SLOTS, (domain, state, class_name)):
        if value == "":
            # drop the slot together with one neighbouring space
            if slot + " " in out:
                out = out.replace(slot + " ", "", 1)
            else:
                out = out.replace(" " + slot, "", 1).replace(slot, "", 1)
        else:
            out = out.replace(slot, value, 1)
    return out


def expand_prompts(bank: PromptBank) -> list[tuple[str, str]]:
    """All (normal, abnormal) sentences: base-major, then state, then domain."""
    return [
        (_fill(skeleton, domain, normal, bank.class_name), _fill(skeleton, domain, abnormal, bank.class_name))
        for skeleton in bank.base_templates
        for normal, abnormal in bank.states
        for domain in bank.domain_words
    ]


@dataclass(frozen=True)
class TextTokenPair:
    t_plus: np.ndarray
    t_minus: np.ndarray
    tokens: np.ndarray  # (2N, C): normal rows first, then abnormal rows

    @property
    def n_pairs(self) -> int:
        return self.tokens.shape[0] // 2

    def swapped(self) -> "TextTokenPair":
        n = self.n_pairs
        return TextTokenPair(self.t_minus, self.t_plus, np.concatenate([self.tokens[n:], self.tokens[:n]]))

    def to_store(self, metadata: dict | None = None) -> WeightStore:
        meta = {"kind": "text_tokens", "n_pairs": str(self.n_pairs)}
        meta.update(metadata or {})
        return WeightStore({"t_plus": self.t_plus, "t_minus": self.t_minus, "T": self.tokens}, meta)

    @classmethod
    def from_store(cls, store: WeightStore) -> "TextTokenPair":
        return cls(store["t_plus"], store["t_minus"], store["T"])


def _renormalized_mean(rows: np.ndarray, which: str) -> np.ndarray:
    mean = rows.astype(np.float64).sum(axis=0) / rows.shape[0]
    norm = float(np.sqrt(mean @ mean))
    if norm < NORM_EPS:
        raise DegenerateInputError(f"mean of the {which} prompt embeddings has zero norm")
    return (mean / norm).astype(np.float32)


def average_tokens(embeddings: np.ndarray) -> TextTokenPair:
    embeddings = np.asarray(embeddings, dtype=np.float32)
    if embeddings.ndim != 2 or embeddings.shape[0] < 2 or embeddings.shape[0] % 2:
        raise ValueError(f"expected a (2N, C) embedding matrix with N >= 1, got {embeddings.shape}")
    n = embeddings.shape[0] // 2
    return TextTokenPair(
        _renormalized_mean(embeddings[:n], "normal"),
        _renormalized_mean(embeddings[n:], "abnormal"),
        embeddings,
    )


def build_token_pair(
    bank: PromptBank, store: WeightStore, config: ModelConfig, tokenizer: TokenizerSpec
) -> TextTokenPair:
    pairs = expand_prompts(bank)
    texts = [normal for normal, _ in pairs] + [abnormal for _, abnormal in pairs]
    return average_tokens(encode_texts(texts, tokenizer, store, config))
