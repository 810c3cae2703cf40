"""Backoff n-gram language model (orders 1-3) with Witten-Bell smoothing.

All internal log arithmetic is natural log; the ARPA reader/writer converts
to and from log10 at the boundary. The public ``score_*`` helpers return
log10 values, matching the interchange format.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"
LOG10 = math.log(10.0)


class ArpaFormatError(ValueError):
    """Raised when an ARPA file deviates from the expected layout."""


@dataclass(frozen=True)
class BackoffLm:
    """Backoff model: stored n-gram log-probs plus per-context backoff weights.

    ``logp`` maps n-gram tuples to natural-log probabilities; ``bow`` maps
    context tuples (length 1..order-1) to natural-log backoff weights. The
    vocabulary is the set of predictable tokens: words, EOS, UNK. BOS only
    ever appears on the context side.
    """

    order: int
    vocab: tuple[str, ...]
    logp: dict
    bow: dict

    def map_token(self, token: str) -> str:
        if token == BOS:
            return BOS
        return token if (token,) in self.logp else UNK

    def logprob(self, history, word: str) -> float:
        """Natural-log p(word | history) through the backoff recursion."""
        w = self.map_token(word)
        if w == BOS:
            w = UNK
        if self.order > 1:
            h = tuple(self.map_token(t) for t in history)[-(self.order - 1) :]
        else:
            h = ()
        return self._recurse(h, w)

    def _recurse(self, h, w):
        ng = h + (w,)
        if ng in self.logp:
            return self.logp[ng]
        if not h:
            # Every mapped token has a unigram entry (UNK at minimum).
            return self.logp[(UNK,)]
        return self.bow.get(h, 0.0) + self._recurse(h[1:], w)


def _count_ngrams(corpus, order):
    counts = [dict() for _ in range(order + 1)]  # counts[m] for m-grams, m >= 1
    n_sentences = 0
    for sentence in corpus:
        words = list(sentence)
        for w in words:
            if w in (BOS, EOS, UNK):
                raise ValueError(f"reserved token {w!r} in training text")
        n_sentences += 1
        padded = [BOS] + words + [EOS]
        for i in range(1, len(padded)):
            for m in range(1, order + 1):
                if i - m + 1 < 0:
                    continue
                ng = tuple(padded[i - m + 1 : i + 1])
                table = counts[m]
                table[ng] = table.get(ng, 0) + 1
    if n_sentences == 0:
        raise ValueError("empty corpus")
    return counts


def train_lm(corpus, order: int = 3) -> BackoffLm:
    """Train a Witten-Bell smoothed backoff model from tokenized sentences.

    Interpolated Witten-Bell stored in backoff form: for a context h with
    token count c(h) and T(h) distinct continuations,
    p(w|h) = lam*c(h,w)/c(h) + (1-lam)*p(w|h'), lam = c(h)/(c(h)+T(h)),
    and the backoff weight is 1-lam. At the unigram level the held-out
    mass T/(N+T) goes to the unknown token.
    """
    if order not in (1, 2, 3):
        raise ValueError(f"order must be 1..3, got {order}")
    counts = _count_ngrams(corpus, order)

    logp: dict = {}
    bow: dict = {}

    unigrams = counts[1]
    total = sum(unigrams.values())
    n_types = len(unigrams)
    denom = total + n_types
    for (w,), c in sorted(unigrams.items()):
        logp[(w,)] = math.log(c / denom)
    logp[(UNK,)] = math.log(n_types / denom)

    def lower_logprob(h, word):
        # Recursion over the tables built so far (all orders below m).
        ng = tuple(h) + (word,)
        if ng in logp:
            return logp[ng]
        if not h:
            return logp[(UNK,)]
        return bow.get(tuple(h), 0.0) + lower_logprob(tuple(h)[1:], word)

    for m in range(2, order + 1):
        by_context: dict = {}
        for ng, c in counts[m].items():
            by_context.setdefault(ng[:-1], []).append((ng[-1], c))
        for h in sorted(by_context):
            pairs = by_context[h]
            c_h = sum(c for _, c in pairs)
            t_h = len(pairs)
            lam = c_h / (c_h + t_h)
            for w, c in pairs:
                p = lam * (c / c_h) + (1.0 - lam) * math.exp(lower_logprob(h[1:], w))
                logp[h + (w,)] = math.log(p)
            bow[h] = math.log(t_h / (c_h + t_h))

    vocab = tuple(sorted({ng[0] for ng in counts[1]} | {EOS, UNK}))
    return BackoffLm(order=order, vocab=vocab, logp=logp, bow=bow)


def score_word(lm: BackoffLm, history, word: str) -> float:
    """log10 p(word | history)."""
    return lm.logprob(history, word) / LOG10


def score_sentence(lm: BackoffLm, words) -> float:
    """log10 probability of a sentence, including the end-of-sentence event."""
    history = (BOS,)
    total = 0.0
    for w in words:
        total += lm.logprob(history, w)
        mapped = lm.map_token(w)
        history = (history + (mapped,))[-(lm.order - 1) :] if lm.order > 1 else ()
    total += lm.logprob(history, EOS)
    return total / LOG10


def perplexity(lm: BackoffLm, corpus) -> float:
    """Per-token perplexity over a corpus of sentences (EOS counts as a token)."""
    total = 0.0
    events = 0
    n = 0
    for sentence in corpus:
        words = list(sentence)
        total += score_sentence(lm, words)
        events += len(words) + 1
        n += 1
    if n == 0:
        raise ValueError("empty corpus")
    return 10.0 ** (-total / events)


def write_arpa(lm: BackoffLm, path) -> None:
    """Write the model in ARPA text format (log10, 6 decimals)."""
    by_order: dict = {m: [] for m in range(1, lm.order + 1)}
    for ng in lm.logp:
        by_order[len(ng)].append(ng)
    # BOS appears only as a context; ARPA convention lists it with a
    # placeholder probability so its backoff weight has somewhere to live.
    has_bos = (BOS,) in lm.bow or any(ng[0] == BOS for m in range(2, lm.order + 1) for ng in by_order[m])
    if has_bos:
        by_order[1].append((BOS,))
    counts = {m: len(by_order[m]) for m in by_order}

    with open(path, "w", encoding="utf-8") as f:
        f.write("\\data\\\n")
        for m in range(1, lm.order + 1):
            f.write(f"ngram {m}={counts[m]}\n")
        f.write("\n")
        for m in range(1, lm.order + 1):
            f.write(f"\\{m}-grams:\n")
            for ng in sorted(by_order[m]):
                if ng == (BOS,):
                    lp10 = -99.0
                else:
                    lp10 = lm.logp[ng] / LOG10
                line = f"{lp10:.6f}\t{' '.join(ng)}"
                if m < lm.order and ng in lm.bow:
                    line += f"\t{lm.bow[ng] / LOG10:.6f}"
                f.write(line + "\n")
            f.write("\n")
        f.write("\\end\\\n")


def read_arpa(path) -> BackoffLm:
    """Read an ARPA file written by write_arpa (or compatible)."""
    declared: dict = {}
    logp: dict = {}
    bow: dict = {}
    section = None
    saw_data = False
    saw_end = False
    with open(path, encoding="utf-8") as f:
        for raw in f:
            line = raw.strip()
            if not line:
                continue
            if line == "\\data\\":
                saw_data = True
                section = "data"
                continue
            if line == "\\end\\":
                saw_end = True
                break
            if line.startswith("\\") and line.endswith("-grams:"):
                section = int(line[1:].split("-")[0])
                continue
            if section == "data":
                if line.startswith("ngram "):
                    lhs, rhs = line[len("ngram ") :].split("=")
                    declared[int(lhs)] = int(rhs)
                continue
            if isinstance(section, int):
                parts = line.split()
                if len(parts) < section + 1:
                    raise ArpaFormatError(f"short {section}-gram line: {line!r}")
                lp10 = float(parts[0])
                ng = tuple(parts[1 : 1 + section])
                if ng != (BOS,):
                    logp[ng] = lp10 * LOG10
                if len(parts) > section + 1:
                    bow[ng] = float(parts[section + 1]) * LOG10
    if not saw_data:
        raise ArpaFormatError(f"{path}: missing \\data\\ header")
    if not saw_end:
        raise ArpaFormatError(f"{path}: missing \\end\\ marker")
    order = max(declared) if declared else 1
    vocab = tuple(sorted({ng[0] for ng in logp if len(ng) == 1} | {EOS, UNK}))
    return BackoffLm(order=order, vocab=vocab, logp=logp, bow=bow)


class CharLmScorer:
    """Shallow-fusion scorer backed by a character-level backoff model.

    States are history tuples; ``extend`` maps a CTC label id to its
    character via the inventory (label id i -> inventory[i-1], blank is 0)
    and returns the natural-log increment.
    """

    def __init__(self, lm: BackoffLm, inventory):
        self.lm = lm
        self.inventory = tuple(inventory)

    def start(self):
        return (BOS,)

    def extend(self, state, label_id: int):
        char = self.inventory[label_id - 1]
        inc = self.lm.logprob(state, char)
        mapped = self.lm.map_token(char)
        new_state = (state + (mapped,))[-(self.lm.order - 1) :] if self.lm.order > 1 else ()
        return new_state, inc

    def finish(self, state) -> float:
        return self.lm.logprob(state, EOS)


def char_lm_scorer(lm: BackoffLm, inventory) -> CharLmScorer:
    return CharLmScorer(lm, inventory)
