"""Byte-level BPE tokenizer (CLIP flavour) and the text transformer."""

from __future__ import annotations

import gzip
import html
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import regex

from .blocks import BlockWeights, qkv_block
from .tensor_core import l2_normalize_rows, layer_norm
from .weights_io import ModelConfig, WeightStore

START_TOKENS = ("<start_of_text>", "<|startoftext|>")
END_TOKENS = ("<end_of_text>", "<|endoftext|>")
WORD_END = "</w>"
PAD_ID = 0


class TextInputError(ValueError):
    pass


@lru_cache()
def bytes_to_unicode() -> dict[int, str]:
    """Reversible byte -> printable character table used by CLIP's BPE."""
    bs = (
        list(range(ord("!"), ord("~") + 1))
        + list(range(ord("¡"), ord("¬") + 1))
        + list(range(ord("®"), ord("ÿ") + 1))
    )
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, map(chr, cs)))


def _read_lines(path) -> list[str]:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rt", encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f if line.strip()]


@dataclass(frozen=True)
class TokenizedPrompt:
    ids: tuple[int, ...]
    eot_index: int


class TokenizerSpec:
    """Vocabulary + ordered merge rules.

    Vocabulary lines are ``token id``; merge lines are ``sym1 sym2`` in
    priority order. Special tokens are looked up under either the
    ``<start_of_text>`` or ``<|startoftext|>`` spelling unless given.
    """

    def __init__(
        self,
        vocab: dict[str, int],
        merges: list[tuple[str, str]],
        context_length: int = 77,
        sot_id: int | None = None,
        eot_id: int | None = None,
    ):
        self.vocab = vocab
        self.ranks = {pair: i for i, pair in enumerate(merges)}
        self.context_length = context_length
        self.sot_id = sot_id if sot_id is not None else self._special(START_TOKENS)
        self.eot_id = eot_id if eot_id is not None else self._special(END_TOKENS)
        if sorted(vocab.values()) != list(range(len(vocab))):
            raise TextInputError("vocabulary ids must be dense in [0, vocab_size)")
        for a, b in merges:
            if a + b not in vocab:
                raise TextInputError(f"merge ({a!r}, {b!r}) produces a symbol outside the vocabulary")
        self.byte_encoder = bytes_to_unicode()
        specials = "|".join(regex.escape(t) for t in START_TOKENS + END_TOKENS)
        self.pattern = regex.compile(
            specials + r"""|'s|'t|'re|'ve|'m|'ll|'d|[\p{L}]+|[\p{N}]|[^\s\p{L}\p{N}]+""",
            regex.IGNORECASE,
        )
        self._cache: dict[str, list[str]] = {}

    def _special(self, names) -> int:
        for name in names:
            if name in self.vocab:
                return self.vocab[name]
        raise TextInputError(f"vocabulary lacks special token {names[0]!r}")

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @classmethod
    def from_files(cls, vocab_path, merges_path, context_length: int = 77) -> "TokenizerSpec":
        vocab = {}
        for line in _read_lines(vocab_path):
            token, idx = line.rsplit(" ", 1)
            vocab[token] = int(idx)
        merges = [tuple(line.split(" ")) for line in _read_lines(merges_path)]
        return cls(vocab, merges, context_length)

    def bpe(self, word: str) -> list[str]:
        if word in self._cache:
            return self._cache[word]
        symbols = list(word[:-1]) + [word[-1] + WORD_END]
        while len(symbols) > 1:
            pairs = {(a, b) for a, b in zip(symbols, symbols[1:])}
            best = min(pairs, key=lambda p: self.ranks.get(p, float("inf")))
            if best not in self.ranks:
                break
            merged = []
            i = 0
            while i < len(symbols):
                if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == best:
                    merged.append(symbols[i] + symbols[i + 1])
                    i += 2
                else:
                    merged.append(symbols[i])
                    i += 1
            symbols = merged
        self._cache[word] = symbols
        return symbols

    def encode(self, text: str) -> list[int]:
        text = html.unescape(html.unescape(text))
        text = " ".join(text.split()).lower()
        ids = []
        for piece in self.pattern.findall(text):
            if piece in START_TOKENS + END_TOKENS and piece in self.vocab:
                ids.append(self.vocab[piece])
                continue
            word = "".join(self.byte_encoder[b] for b in piece.encode("utf-8"))
            ids.extend(self.vocab[s] for s in self.bpe(word))
        return ids


def tokenize(text: str, spec: TokenizerSpec) -> TokenizedPrompt:
    body = spec.encode(text)[: spec.context_length - 2]
    ids = [spec.sot_id, *body, spec.eot_id]
    eot_index = len(ids) - 1
    ids += [PAD_ID] * (spec.context_length - len(ids))
    return TokenizedPrompt(tuple(ids), eot_index)


def causal_mask(n: int, dtype=np.float32) -> np.ndarray:
    mask = np.zeros((n, n), dtype=dtype)
    mask[np.triu_indices(n, k=1)] = -np.inf
    return mask


def encode_text(prompt: TokenizedPrompt, store: WeightStore, config: ModelConfig) -> np.ndarray:
    """Unit-norm text embedding in R^C read out at the end-of-text position.

    Only tokens up to and including end-of-text are run: under the causal
    mask the padding after it cannot reach the readout row.
    """
    ids = np.asarray(prompt.ids, dtype=np.int64)
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise TextInputError(f"token id outside [0, {config.vocab_size})")
    n = prompt.eot_index + 1
    x = store["text.token_embedding"][ids[:n]] + store["text.positional_embedding"][:n]
    mask = causal_mask(n)
    for i in range(config.text_layers):
        w = BlockWeights.from_store(store, f"text.layer{i}")
        x = qkv_block(x, w, config.text_heads, mask, config.gelu_variant, config.ln_eps)
    x = layer_norm(x, store["text.ln_final.weight"], store["text.ln_final.bias"], config.ln_eps)
    out = x[prompt.eot_index : prompt.eot_index + 1] @ store["text.projection"]
    return l2_normalize_rows(out)[0]


def encode_texts(texts, spec: TokenizerSpec, store: WeightStore, config: ModelConfig) -> np.ndarray:
    return np.stack([encode_text(tokenize(t, spec), store, config) for t in texts])


def train_bpe(texts, num_merges: int) -> tuple[dict[str, int], list[tuple[str, str]]]:
    """Learn a small CLIP-layout vocabulary from ``texts``.

    Ids: 256 byte symbols, the same 256 with ``</w>``, one id per merge, then
    the two special tokens. Count ties go to the lexicographically smallest
    pair so the result is deterministic.
    """
    byte_encoder = bytes_to_unicode()
    pattern = regex.compile(r"""'s|'t|'re|'ve|'m|'ll|'d|[\p{L}]+|[\p{N}]|[^\s\p{L}\p{N}]+""")
    counts: dict[tuple[str, ...], int] = {}
    for text in texts:
        for piece in pattern.findall(" ".join(text.split()).lower()):
            word = "".join(byte_encoder[b] for b in piece.encode("utf-8"))
            key = tuple(word[:-1]) + (word[-1] + WORD_END,)
            counts[key] = counts.get(key, 0) + 1
    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        pair_counts: dict[tuple[str, str], int] = {}
        for word, c in counts.items():
            for pair in zip(word, word[1:]):
                pair_counts[pair] = pair_counts.get(pair, 0) + c
        if not pair_counts:
            break
        best = min(pair_counts, key=lambda p: (-pair_counts[p], p))
        merges.append(best)
        merged_counts = {}
        for word, c in counts.items():
            out, i = [], 0
            while i < len(word):
                if i + 1 < len(word) and (word[i], word[i + 1]) == best:
                    out.append(word[i] + word[i + 1])
                    i += 2
                else:
                    out.append(word[i])
                    i += 1
            merged_counts[tuple(out)] = merged_counts.get(tuple(out), 0) + c
        counts = merged_counts
    symbols = list(byte_encoder.values())
    symbols += [s + WORD_END for s in symbols]
    symbols += ["".join(m) for m in merges]
    symbols += [START_TOKENS[0], END_TOKENS[0]]
    vocab: dict[str, int] = {}
    for s in symbols:
        vocab.setdefault(s, len(vocab))
    return vocab, merges


def write_tokenizer_files(vocab: dict[str, int], merges, vocab_path, merges_path) -> None:
    with open(vocab_path, "w", encoding="utf-8") as f:
        for token, idx in sorted(vocab.items(), key=lambda kv: kv[1]):
            f.write(f"{token} {idx}\n")
    with open(merges_path, "w", encoding="utf-8") as f:
        for a, b in merges:
            f.write(f"{a} {b}\n")
