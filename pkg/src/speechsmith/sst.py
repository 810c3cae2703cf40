"""Self-training on pseudotranscripts: transcribe the untranscribed pool,
optionally filter by score, pool with the supervised data, retrain.

Character hypotheses from greedy/fusion decoding are bridged to words by
deterministic longest-match segmentation against the lexicon; the
graph-based mode emits words directly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import am, ctc, wfst
from .corpus import Lexicon, Manifest, ManifestEntry, load_utterance
from .score import corpus_wer

log = logging.getLogger(__name__)

MODES = ("greedy", "fusion", "ctc-wfst")


@dataclass(frozen=True)
class PseudoTranscript:
    id: str
    words: tuple[str, ...]
    score: float  # log-prob-like: higher is better
    mode: str


@dataclass
class DecodeParams:
    """Everything a decode mode may need; unused fields are ignored."""

    lexicon: Lexicon
    graph: wfst.Wfst | None = None
    scorer: object | None = None
    alpha: float = 0.3
    beta: float = 0.0
    beam_size: int = 8
    beam: float = 16.0
    acoustic_scale: float = 1.0
    max_active: int = 2000


def segment_words(chars, lexicon: Lexicon, lenient: bool = False):
    """Greedy longest-match segmentation of a character stream into words.

    Returns None when the stream cannot be fully segmented, unless
    ``lenient`` is set, in which case unmatched characters are skipped.
    """
    by_first: dict = {}
    for word in lexicon.words:
        by_first.setdefault(lexicon.spellings[word][0], []).append(word)
    for lst in by_first.values():
        lst.sort(key=lambda w: -len(lexicon.spellings[w]))

    chars = tuple(chars)
    words = []
    i = 0
    while i < len(chars):
        match = None
        for word in by_first.get(chars[i], ()):
            spelling = lexicon.spellings[word]
            if chars[i : i + len(spelling)] == spelling:
                match = word
                break
        if match is None:
            if lenient:
                i += 1
                continue
            return None
        words.append(match)
        i += len(lexicon.spellings[match])
    return tuple(words)


def decode_utterance(model, features, mode: str, params: DecodeParams, lenient: bool = False):
    """Decode one utterance to (words, score) or None when it fails."""
    grid = model.posteriors(features)
    if mode == "greedy":
        labels = ctc.greedy_decode(grid)
        score = float(np.max(grid.logp, axis=1).sum())
        chars = [grid.tokens[i] for i in labels]
        words = segment_words(chars, params.lexicon, lenient=lenient)
        if words is None:
            return None
        return words, score
    if mode == "fusion":
        if params.scorer is None:
            raise ValueError("fusion mode needs a scorer")
        hyps = ctc.prefix_beam_search(
            grid, beam_size=params.beam_size, scorer=params.scorer,
            alpha=params.alpha, beta=params.beta,
        )
        best = hyps[0]
        chars = [grid.tokens[i] for i in best.labels]
        words = segment_words(chars, params.lexicon, lenient=lenient)
        if words is None:
            return None
        return words, float(best.score)
    if mode == "ctc-wfst":
        if params.graph is None:
            raise ValueError("ctc-wfst mode needs a graph")
        try:
            res = wfst.decode_frames(
                grid, params.graph, beam=params.beam,
                acoustic_scale=params.acoustic_scale, max_active=params.max_active,
            )
        except wfst.SearchFailed:
            return None
        return res.words, -res.total_cost
    raise ValueError(f"unknown decode mode {mode!r}; expected one of {MODES}")


@dataclass
class TranscribeResult:
    transcripts: list  # PseudoTranscript
    failed: list  # (utterance id, reason)


def transcribe(model, manifest: Manifest, mode: str, params: DecodeParams) -> TranscribeResult:
    """Pseudo-transcribe every utterance; failures are recorded, not fatal."""
    out = TranscribeResult([], [])
    for entry in manifest:
        utt = load_utterance(manifest, entry)
        decoded = decode_utterance(model, utt.features, mode, params)
        if decoded is None:
            out.failed.append((entry.id, "decode failed or unsegmentable"))
            continue
        words, score = decoded
        out.transcripts.append(PseudoTranscript(entry.id, tuple(words), score, mode))
    return out


def select(pseudo, tau: float | None = None) -> list:
    """Keep-all when tau is None; otherwise keep score >= tau."""
    pseudo = list(pseudo)
    if tau is None:
        return pseudo
    kept = [p for p in pseudo if p.score >= tau]
    if not kept:
        log.warning("selection threshold %.3f removed all %d pseudotranscripts", tau, len(pseudo))
    return kept


def pool(supervised: Manifest, untranscribed: Manifest, pseudo) -> Manifest:
    """Union manifest: supervised entries plus pseudo-labeled untranscribed
    entries, with nothing that training could use to tell them apart."""
    by_id = {e.id: e for e in untranscribed}
    entries = []
    for e in supervised:
        feats = str(supervised.feature_path(e))
        entries.append(ManifestEntry(e.id, feats, e.transcript, e.domain))
    for p in pseudo:
        src = by_id[p.id]
        feats = str(untranscribed.feature_path(src))
        entries.append(ManifestEntry(src.id, feats, tuple(p.words), src.domain))
    return Manifest(entries, base_dir=None)


def save_pseudo(pseudo, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in pseudo:
            f.write(json.dumps(
                {"id": p.id, "words": " ".join(p.words), "score": p.score, "mode": p.mode}
            ) + "\n")


def load_pseudo(path) -> list:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                out.append(PseudoTranscript(
                    rec["id"], tuple(rec["words"].split()), rec["score"], rec["mode"]
                ))
    return out


def ctc_dataset(manifest: Manifest, lexicon: Lexicon):
    """(features, label ids) pairs for CTC training; words spelled out and
    mapped to grid label ids (inventory index + 1)."""
    label_of = {c: i + 1 for i, c in enumerate(lexicon.inventory)}
    dataset = []
    for entry in manifest:
        if entry.transcript is None:
            raise ValueError(f"utterance {entry.id!r} has no transcript")
        utt = load_utterance(manifest, entry)
        ids = [label_of[c] for c in lexicon.spell(entry.transcript)]
        dataset.append((utt.features, tuple(ids)))
    return dataset


def evaluate_wer(model, manifests: dict, mode: str, params: DecodeParams):
    """Decode test manifests (domain tag -> Manifest) and score word error.

    Evaluation uses lenient segmentation so every utterance yields a word
    sequence; failed graph decodes count as empty hypotheses.
    """
    pairs = []
    domains = []
    for dom in sorted(manifests):
        manifest = manifests[dom]
        for entry in manifest:
            if entry.transcript is None:
                raise ValueError(f"test utterance {entry.id!r} has no transcript")
            utt = load_utterance(manifest, entry)
            decoded = decode_utterance(model, utt.features, mode, params, lenient=True)
            hyp = decoded[0] if decoded is not None else ()
            pairs.append((entry.transcript, hyp))
            domains.append(entry.domain)
    return corpus_wer(pairs, domains)


@dataclass
class SstConfig:
    mode: str = "greedy"
    iterations: int = 1
    tau: float | None = None
    train: am.TrainConfig = field(default_factory=am.TrainConfig)
    head_seed: int = 100
    eval_mode: str = "greedy"

    def validate(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"unknown transcription mode {self.mode!r}")


@dataclass
class SstRun:
    models: list  # trained model per iteration
    pseudo: list  # surviving pseudotranscripts per iteration
    report: dict  # {"iterations": [{"wer": {...}, "counts": {...}}, ...]}


def run_sst(
    initial: am.RefModel,
    supervised: Manifest,
    untranscribed: Manifest,
    config: SstConfig,
    params: DecodeParams,
    tests: dict | None = None,
) -> SstRun:
    """Iterated self-training.

    Each iteration transcribes with the latest model, pools survivors with
    the supervised data, and retrains from the initial model's hidden
    weights under a fresh head. Aborts when a non-empty untranscribed pool
    yields zero surviving pseudotranscripts.
    """
    config.validate()
    overlap = set(supervised.ids()) & set(untranscribed.ids())
    if overlap:
        raise ValueError(f"supervised/untranscribed manifests overlap: {sorted(overlap)[:3]}")
    if tests:
        test_ids = set().union(*(set(m.ids()) for m in tests.values()))
        train_ids = set(supervised.ids()) | set(untranscribed.ids())
        if test_ids & train_ids:
            raise ValueError("test utterances leak into training manifests")

    lexicon = params.lexicon
    tokens = ctc.grid_tokens(lexicon.inventory)
    current = initial
    models = []
    pseudo_per_iter = []
    report: dict = {"iterations": []}
    for it in range(1, config.iterations + 1):
        tr = transcribe(current, untranscribed, config.mode, params)
        kept = select(tr.transcripts, config.tau)
        if len(untranscribed) > 0 and not kept:
            report["aborted"] = f"iteration {it}: zero surviving pseudotranscripts"
            log.warning(report["aborted"])
            break
        pooled = pool(supervised, untranscribed, kept)
        model = am.swap_head(initial, len(tokens), config.head_seed + it, tokens)
        train_cfg = replace(config.train, seed=config.train.seed + it)
        result = am.train_ctc(model, ctc_dataset(pooled, lexicon), train_cfg)
        entry = {
            "iteration": it,
            "pseudo_kept": len(kept),
            "pseudo_failed": len(tr.failed),
            "train_skipped": result.skipped,
        }
        if tests:
            wer = evaluate_wer(model, tests, config.eval_mode, params)
            entry["wer"] = dict(wer.per_domain)
        report["iterations"].append(entry)
        models.append(model)
        pseudo_per_iter.append(kept)
        current = model
    return SstRun(models=models, pseudo=pseudo_per_iter, report=report)
