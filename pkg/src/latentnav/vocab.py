"""Unified token vocabulary and per-mode response grammars.

Id space is contiguous and exhaustive: system tokens, gating tokens, action
tokens, word tokens (closed instruction/trace grammar plus stop-count
markers), then latent tokens. Token <-> string round-trips are lossless.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .gridworld import ACTION_NAMES, Action, COLOR_TABLE, OBJECT_TYPES
from .serialization import canonical_json, sha256_bytes

VOCAB_FORMAT_VERSION = 1

SYSTEM_TOKENS = (
    "<|pad|>",
    "<|bos|>",
    "<|eos|>",
    "<|NAV|>",
    "<think>",
    "</think>",
    "<obs>",
    "</obs>",
    "<hist>",
    "</hist>",
)

GATING_TOKENS = (
    "<textual_think>",
    "<no_textual_think>",
    "<visual_think>",
    "<no_visual_think>",
)

ACTION_TOKENS = ("<|forward|>", "<|left|>", "<|right|>", "<|stop|>")

MAX_STOP_COUNT = 4

_GRAMMAR_WORDS = ("go", "to", "the", "then")
_TRACE_WORDS = (
    "plan",
    "visit",
    "done",
    "stops",
    "target",
    "distance",
    "near",
    "mid",
    "far",
    "next",
    "approach",
    "continue",
    "toward",
    "stop",
    "forward",
    "left",
    "right",
    "expect",
    "visible",
    "path",
    "clear",
)
_DIGIT_WORDS = tuple(str(i) for i in range(10))
_STOP_COUNT_WORDS = tuple(f"stop-count-{i}" for i in range(MAX_STOP_COUNT + 1))


def word_list() -> tuple[str, ...]:
    words = (
        tuple(COLOR_TABLE)
        + OBJECT_TYPES
        + _GRAMMAR_WORDS
        + _TRACE_WORDS
        + _DIGIT_WORDS
        + _STOP_COUNT_WORDS
    )
    assert len(words) == len(set(words)), "duplicate word token"
    assert len(words) <= 160
    return words


class Vocabulary:
    def __init__(self, latent_count: int):
        self.latent_count = latent_count
        tokens: list[str] = list(SYSTEM_TOKENS)
        self.system_range = range(0, len(tokens))
        start = len(tokens)
        tokens += GATING_TOKENS
        self.gating_range = range(start, len(tokens))
        start = len(tokens)
        tokens += ACTION_TOKENS
        self.action_range = range(start, len(tokens))
        start = len(tokens)
        self.words = word_list()
        tokens += self.words
        self.word_range = range(start, len(tokens))
        start = len(tokens)
        tokens += tuple(f"<|{i}|>" for i in range(1, latent_count + 1))
        self.latent_range = range(start, len(tokens))

        self.id_to_token: tuple[str, ...] = tuple(tokens)
        self.token_to_id = {t: i for i, t in enumerate(tokens)}
        assert len(self.token_to_id) == len(tokens)

        self.pad = self.token_to_id["<|pad|>"]
        self.bos = self.token_to_id["<|bos|>"]
        self.eos = self.token_to_id["<|eos|>"]
        self.nav = self.token_to_id["<|NAV|>"]
        self.think_open = self.token_to_id["<think>"]
        self.think_close = self.token_to_id["</think>"]
        self.obs_open = self.token_to_id["<obs>"]
        self.obs_close = self.token_to_id["</obs>"]
        self.hist_open = self.token_to_id["<hist>"]
        self.hist_close = self.token_to_id["</hist>"]

    def __len__(self) -> int:
        return len(self.id_to_token)

    # -- encoding helpers ---------------------------------------------------

    def encode_words(self, words) -> list[int]:
        return [self.token_to_id[w] for w in words]

    def decode(self, ids) -> list[str]:
        return [self.id_to_token[int(i)] for i in ids]

    def action_token(self, action: Action) -> int:
        return self.action_range.start + int(action)

    def action_from_token(self, token_id: int) -> Action:
        if token_id not in self.action_range:
            raise ValueError(f"token {token_id} is not an action token")
        return Action(token_id - self.action_range.start)

    def latent_token(self, code: int) -> int:
        if not 0 <= code < self.latent_count:
            raise ValueError(f"latent code {code} out of range")
        return self.latent_range.start + code

    def latent_code(self, token_id: int) -> int:
        if token_id not in self.latent_range:
            raise ValueError(f"token {token_id} is not a latent token")
        return token_id - self.latent_range.start

    def gating_tokens(self, g_t: int, g_v: int) -> tuple[int, int]:
        t = "<textual_think>" if g_t else "<no_textual_think>"
        v = "<visual_think>" if g_v else "<no_visual_think>"
        return (self.token_to_id[t], self.token_to_id[v])

    def stop_count_token(self, n: int) -> int:
        n = max(0, min(MAX_STOP_COUNT, n))
        return self.token_to_id[f"stop-count-{n}"]

    def is_action(self, token_id: int) -> bool:
        return token_id in self.action_range

    def is_word(self, token_id: int) -> bool:
        return token_id in self.word_range

    def is_latent(self, token_id: int) -> bool:
        return token_id in self.latent_range

    # -- manifest -----------------------------------------------------------

    def manifest(self) -> dict:
        return {
            "version": VOCAB_FORMAT_VERSION,
            "latent_count": self.latent_count,
            "ranges": {
                "system": [self.system_range.start, self.system_range.stop],
                "gating": [self.gating_range.start, self.gating_range.stop],
                "action": [self.action_range.start, self.action_range.stop],
                "word": [self.word_range.start, self.word_range.stop],
                "latent": [self.latent_range.start, self.latent_range.stop],
            },
            "tokens": list(self.id_to_token),
        }

    def manifest_json(self) -> str:
        return json.dumps(self.manifest(), indent=2)

    def manifest_hash(self) -> str:
        return sha256_bytes(canonical_json(self.manifest()).encode("utf-8"))


ACTION_WORD_FOR: dict[Action, str] = {a: ACTION_NAMES[a] for a in Action}


# ---------------------------------------------------------------------------
# Response grammar


@dataclass
class GrammarState:
    phase: str
    emitted: int = 0  # tokens emitted in the current phase


class ResponseGrammar:
    """State machine over response tokens for one gating mode.

    Phases by mode: think block first when the textual gate is on, then
    exactly `latent_tokens` latent ids when the visual gate is on, then
    1..k action tokens, then EOS. `latent_tokens` is the visual-trace
    length (the scale-schedule prefix token count, 30 by default), not the
    codebook size.
    """

    def __init__(
        self,
        vocab: Vocabulary,
        mode: tuple[int, int],
        k: int,
        trace_budget: int = 48,
        latent_tokens: int = 30,
    ):
        self.vocab = vocab
        self.mode = mode
        self.k = k
        self.latent_tokens = latent_tokens
        self.trace_budget = trace_budget

    def initial(self) -> GrammarState:
        g_t, g_v = self.mode
        if g_t:
            return GrammarState("think_open")
        if g_v:
            return GrammarState("latent")
        return GrammarState("action")

    def allowed(self, state: GrammarState) -> list[int]:
        v = self.vocab
        if state.phase == "think_open":
            return [v.think_open]
        if state.phase == "words":
            out = list(v.word_range) if state.emitted < self.trace_budget else []
            if state.emitted >= 1:
                out.append(v.think_close)
            if not out:
                out = [v.think_close]
            return out
        if state.phase == "latent":
            return list(v.latent_range)
        if state.phase == "action":
            out = list(v.action_range) if state.emitted < self.k else []
            if state.emitted >= 1:
                out.append(v.eos)
            return out
        return []  # done

    def advance(self, state: GrammarState, token: int) -> GrammarState:
        v = self.vocab
        g_t, g_v = self.mode
        if state.phase == "think_open":
            return GrammarState("words")
        if state.phase == "words":
            if token == v.think_close:
                return GrammarState("latent" if g_v else "action")
            return GrammarState("words", state.emitted + 1)
        if state.phase == "latent":
            emitted = state.emitted + 1
            if emitted == self.latent_tokens:
                return GrammarState("action")
            return GrammarState("latent", emitted)
        if state.phase == "action":
            if token == v.eos:
                return GrammarState("done")
            return GrammarState("action", state.emitted + 1)
        return state

    def validate(self, response) -> bool:
        state = self.initial()
        for token in response:
            if int(token) not in self.allowed(state):
                return False
            state = self.advance(state, int(token))
        return state.phase == "done"

    def split(self, response) -> tuple[list[int], list[int], bool]:
        """Partition a response into (trace tokens, action tokens, saw_eos).

        Tolerant of malformed responses: collects what matches, used by the
        evaluator to extract actions from unconstrained decodes.
        """
        v = self.vocab
        trace: list[int] = []
        actions: list[int] = []
        saw_eos = False
        for token in response:
            token = int(token)
            if token == v.eos:
                saw_eos = True
                break
            if v.is_action(token):
                actions.append(token)
            else:
                trace.append(token)
        return trace, actions, saw_eos
