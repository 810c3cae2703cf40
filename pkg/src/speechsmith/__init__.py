"""speechsmith: a small-scale speech recognition lab.

Synthetic two-domain corpora, a reference frame-classifier acoustic model,
CTC training and decoding, token/lexicon/grammar WFST decoding with a
trigram grammar, pseudo-label pretraining, self-training on
pseudotranscripts, and an experiment harness that compares the recipes.
"""

from . import am, cli, corpus, ctc, ngram, pipeline, score, sst, unsup, wfst

__all__ = [
    "am",
    "cli",
    "corpus",
    "ctc",
    "ngram",
    "pipeline",
    "score",
    "sst",
    "unsup",
    "wfst",
]

__version__ = "0.1.0"
