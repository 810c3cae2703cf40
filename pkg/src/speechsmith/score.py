"""Word/character error rate with Levenshtein alignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AlignmentReport:
    hits: int
    substitutions: int
    deletions: int
    insertions: int
    wer: float
    pairs: tuple  # (ref word | None, hyp word | None) per aligned position

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions


def align(reference, hypothesis) -> AlignmentReport:
    """Minimal-edit alignment with unit costs.

    Backtrace tie-break prefers substitution/hit over insertion over
    deletion, so alignments are deterministic.
    """
    ref = list(reference)
    hyp = list(hypothesis)
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            ins = d[i, j - 1] + 1
            dele = d[i - 1, j] + 1
            d[i, j] = min(sub, ins, dele)

    pairs = []
    hits = subs = dels = ins_count = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            pairs.append((ref[i - 1], hyp[j - 1]))
            if ref[i - 1] == hyp[j - 1]:
                hits += 1
            else:
                subs += 1
            i -= 1
            j -= 1
        elif j > 0 and d[i, j] == d[i, j - 1] + 1:
            pairs.append((None, hyp[j - 1]))
            ins_count += 1
            j -= 1
        else:
            pairs.append((ref[i - 1], None))
            dels += 1
            i -= 1
    pairs.reverse()
    errors = subs + dels + ins_count
    return AlignmentReport(
        hits=hits,
        substitutions=subs,
        deletions=dels,
        insertions=ins_count,
        wer=errors / max(1, n),
        pairs=tuple(pairs),
    )


@dataclass(frozen=True)
class CorpusWer:
    pooled: float
    per_domain: dict
    average: float
    errors: int
    ref_words: int


def corpus_wer(pairs, domains=None) -> CorpusWer:
    """Pooled WER over (reference, hypothesis) pairs plus per-domain scores.

    ``domains`` is an optional parallel list of domain tags; the average is
    the unweighted mean of the per-domain WERs.
    """
    pairs = list(pairs)
    if domains is None:
        domains = ["all"] * len(pairs)
    domains = list(domains)
    if len(domains) != len(pairs):
        raise ValueError("domains must parallel pairs")

    total_err = 0
    total_ref = 0
    dom_err: dict = {}
    dom_ref: dict = {}
    for (ref, hyp), dom in zip(pairs, domains):
        rep = align(ref, hyp)
        total_err += rep.errors
        total_ref += len(list(ref))
        dom_err[dom] = dom_err.get(dom, 0) + rep.errors
        dom_ref[dom] = dom_ref.get(dom, 0) + len(list(ref))
    per_domain = {dom: dom_err[dom] / max(1, dom_ref[dom]) for dom in sorted(dom_err)}
    avg = sum(per_domain.values()) / max(1, len(per_domain))
    return CorpusWer(
        pooled=total_err / max(1, total_ref),
        per_domain=per_domain,
        average=avg,
        errors=total_err,
        ref_words=total_ref,
    )


def cer(reference: str, hypothesis: str) -> float:
    """Character error rate between two strings."""
    return align(list(reference), list(hypothesis)).wer
