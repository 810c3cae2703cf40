"""CTC primitives: collapse, forward loss, forward-backward gradient,
greedy decoding, and prefix beam search with optional shallow fusion.

All probability bookkeeping is in the natural-log domain. The blank label
id is 0 everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

BLANK_ID = 0
BLANK = "<blank>"

NEG_INF = -math.inf


class InfeasibleTarget(ValueError):
    """Target cannot be aligned: 2|y|+1 (adjusted for repeats) exceeds T."""


@dataclass(frozen=True)
class PosteriorGrid:
    """T x V grid of natural-log probabilities over CTC tokens.

    ``tokens[0]`` is the blank; the rest are output characters. Rows must be
    normalized (logsumexp == 0 within 1e-6).
    """

    logp: np.ndarray
    tokens: tuple[str, ...]

    def __post_init__(self):
        arr = np.asarray(self.logp, dtype=np.float64)
        object.__setattr__(self, "logp", arr)
        if arr.ndim != 2:
            raise ValueError(f"grid must be 2-D, got shape {arr.shape}")
        if arr.shape[1] != len(self.tokens):
            raise ValueError("token inventory does not match grid width")
        if self.tokens and self.tokens[0] != BLANK:
            raise ValueError(f"tokens[0] must be {BLANK!r}")
        if arr.size:
            if np.any(np.isnan(arr)):
                raise ValueError("grid contains NaN")
            norms = _logsumexp_rows(arr)
            if np.max(np.abs(norms)) > 1e-6:
                raise ValueError("grid rows are not normalized")

    @property
    def frames(self) -> int:
        return self.logp.shape[0]

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)


def grid_tokens(inventory) -> tuple[str, ...]:
    """Token tuple for a character inventory: blank first, then characters."""
    return (BLANK,) + tuple(inventory)


def _logsumexp_rows(arr):
    m = np.max(arr, axis=1, keepdims=True)
    return (m + np.log(np.sum(np.exp(arr - m), axis=1, keepdims=True))).ravel()


def _as_logp(posteriors) -> np.ndarray:
    if isinstance(posteriors, PosteriorGrid):
        return posteriors.logp
    return np.asarray(posteriors, dtype=np.float64)


def _normalize(logits: np.ndarray) -> np.ndarray:
    # Loss and gradient treat the grid entries as logits; a normalized grid
    # passes through unchanged, and finite differences stay consistent.
    m = np.max(logits, axis=1, keepdims=True)
    return logits - (m + np.log(np.sum(np.exp(logits - m), axis=1, keepdims=True)))


def collapse(path) -> tuple[int, ...]:
    """Merge adjacent repeats, then delete blanks."""
    out = []
    prev = None
    for tok in path:
        if tok != prev:
            out.append(tok)
        prev = tok
    return tuple(t for t in out if t != BLANK_ID)


def min_frames(target) -> int:
    """Fewest frames that can realize a target (repeats need a blank gap)."""
    target = tuple(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _extended(target):
    z = [BLANK_ID]
    for t in target:
        z.append(t)
        z.append(BLANK_ID)
    return z


def _skip_mask(z):
    # Position s may also come from s-2: only for non-blank labels that
    # differ from the label two back.
    z = np.asarray(z)
    mask = np.zeros(len(z), dtype=bool)
    if len(z) > 2:
        mask[2:] = (z[2:] != BLANK_ID) & (z[2:] != z[:-2])
    return mask


def _forward(logp, target):
    """Alpha recursion over the blank-interleaved target; returns alphas, total."""
    t_frames = logp.shape[0]
    z = np.asarray(_extended(target))
    s_len = len(z)
    skip = _skip_mask(z)
    alpha = np.full((t_frames, s_len), NEG_INF)
    alpha[0, 0] = logp[0, z[0]]
    if s_len > 1:
        alpha[0, 1] = logp[0, z[1]]
    for t in range(1, t_frames):
        prev = alpha[t - 1]
        cur = prev.copy()
        cur[1:] = np.logaddexp(cur[1:], prev[:-1])
        if s_len > 2:
            cur[2:] = np.where(skip[2:], np.logaddexp(cur[2:], prev[:-2]), cur[2:])
        alpha[t] = cur + logp[t, z]
    total = alpha[t_frames - 1, s_len - 1]
    if s_len > 1:
        total = np.logaddexp(total, alpha[t_frames - 1, s_len - 2])
    return alpha, total


def ctc_loss(posteriors, target) -> float:
    """Negative log-likelihood of the target under the grid.

    Returns +inf when the target is infeasible for the number of frames.
    """
    logp = _normalize(_as_logp(posteriors))
    target = tuple(int(t) for t in target)
    if any(t == BLANK_ID for t in target):
        raise ValueError("target must not contain the blank id")
    if logp.shape[0] < 1:
        raise ValueError("empty grid")
    if any(t < 0 or t >= logp.shape[1] for t in target):
        raise ValueError("target id out of range")
    if min_frames(target) > logp.shape[0]:
        return math.inf
    _, total = _forward(logp, target)
    return float(-total)


def ctc_grad(posteriors, target) -> np.ndarray:
    """T x V gradient of ctc_loss w.r.t. the (logit) grid entries.

    Equals softmax(grid) - occupancy, where occupancy[t, k] is the posterior
    probability of emitting token k at frame t given the target. Raises
    InfeasibleTarget when no alignment exists.
    """
    logits = _as_logp(posteriors)
    logp = _normalize(logits)
    target = tuple(int(t) for t in target)
    if any(t == BLANK_ID for t in target):
        raise ValueError("target must not contain the blank id")
    if logp.shape[0] < 1:
        raise ValueError("empty grid")
    if min_frames(target) > logp.shape[0]:
        raise InfeasibleTarget(
            f"target of length {len(target)} needs {min_frames(target)} frames, grid has {logp.shape[0]}"
        )
    t_frames, n_tok = logp.shape
    z = np.asarray(_extended(target))
    s_len = len(z)
    skip = _skip_mask(z)

    alpha, total = _forward(logp, target)
    beta = np.full((t_frames, s_len), NEG_INF)
    beta[t_frames - 1, s_len - 1] = logp[t_frames - 1, z[s_len - 1]]
    if s_len > 1:
        beta[t_frames - 1, s_len - 2] = logp[t_frames - 1, z[s_len - 2]]
    for t in range(t_frames - 2, -1, -1):
        nxt = beta[t + 1]
        cur = nxt.copy()
        cur[:-1] = np.logaddexp(cur[:-1], nxt[1:])
        if s_len > 2:
            # The skip out of position s mirrors the skip into s+2.
            cur[:-2] = np.where(skip[2:], np.logaddexp(cur[:-2], nxt[2:]), cur[:-2])
        beta[t] = cur + logp[t, z]

    # occupancy[t, k] = sum_{s: z_s == k} alpha*beta / (p(z_s at t) * total)
    occ = np.full((t_frames, n_tok), NEG_INF)
    for s in range(s_len):
        k = z[s]
        contrib = alpha[:, s] + beta[:, s] - logp[:, k]
        occ[:, k] = np.logaddexp(occ[:, k], contrib)
    gamma = np.exp(occ - total)
    return np.exp(logp) - gamma


def greedy_decode(posteriors) -> tuple[int, ...]:
    """collapse(argmax per frame); ties go to the lowest token id."""
    logp = _as_logp(posteriors)
    if logp.shape[0] == 0:
        return ()
    return collapse(np.argmax(logp, axis=1).tolist())


@dataclass
class Hypothesis:
    """A prefix hypothesis from beam search."""

    labels: tuple[int, ...]
    log_p_blank: float = NEG_INF
    log_p_nonblank: float = NEG_INF
    lm_state: object = None
    lm_logp: float = 0.0
    score: float = 0.0

    @property
    def log_p_total(self) -> float:
        return float(np.logaddexp(self.log_p_blank, self.log_p_nonblank))


def prefix_beam_search(
    posteriors,
    beam_size: int = 8,
    scorer=None,
    alpha: float = 0.3,
    beta: float = 0.0,
) -> list[Hypothesis]:
    """Prefix beam search over a posterior grid, optionally with fusion.

    Each prefix keeps separate blank/non-blank ending probabilities and
    merges duplicates with log-add, so a saturated beam recovers the exact
    argmax of total CTC probability. The ranking score is
    log P_ctc + alpha * log P_lm + beta * |labels|; the scorer's terminal
    probability is added when the final ranking is produced.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    logp = _as_logp(posteriors)
    t_frames, n_tok = logp.shape if logp.size else (0, 0)

    start_state = scorer.start() if scorer is not None else None
    beams = {(): [0.0, NEG_INF, start_state, 0.0]}  # labels -> [pb, pnb, state, lm]

    def rank_key(labels, entry):
        total = np.logaddexp(entry[0], entry[1])
        sc = total + beta * len(labels)
        if scorer is not None:
            sc += alpha * entry[3]
        return sc

    for t in range(t_frames):
        frame = logp[t]
        ranked = sorted(beams.items(), key=lambda kv: (-rank_key(kv[0], kv[1]), kv[0]))
        nxt: dict = {}

        def slot(labels, state, lm):
            ent = nxt.get(labels)
            if ent is None:
                ent = [NEG_INF, NEG_INF, state, lm]
                nxt[labels] = ent
            return ent

        for labels, (pb, pnb, state, lm) in ranked[:beam_size]:
            total = np.logaddexp(pb, pnb)
            ent = slot(labels, state, lm)
            ent[0] = np.logaddexp(ent[0], total + frame[BLANK_ID])
            for c in range(1, n_tok):
                lp = frame[c]
                if labels and labels[-1] == c:
                    # Same char continues the run (no new label) ...
                    ent[1] = np.logaddexp(ent[1], pnb + lp)
                    # ... or starts a new label after a blank gap.
                    ext = labels + (c,)
                    if ext in nxt:
                        ent2 = nxt[ext]
                    else:
                        if scorer is not None:
                            st2, inc = scorer.extend(state, c)
                            ent2 = slot(ext, st2, lm + inc)
                        else:
                            ent2 = slot(ext, None, 0.0)
                    ent2[1] = np.logaddexp(ent2[1], pb + lp)
                else:
                    ext = labels + (c,)
                    if ext in nxt:
                        ent2 = nxt[ext]
                    else:
                        if scorer is not None:
                            st2, inc = scorer.extend(state, c)
                            ent2 = slot(ext, st2, lm + inc)
                        else:
                            ent2 = slot(ext, None, 0.0)
                    ent2[1] = np.logaddexp(ent2[1], total + lp)
        beams = nxt

    results = []
    for labels, (pb, pnb, state, lm) in beams.items():
        total = float(np.logaddexp(pb, pnb))
        sc = total + beta * len(labels)
        lm_total = lm
        if scorer is not None:
            lm_total = lm + scorer.finish(state)
            sc += alpha * lm_total
        results.append(
            Hypothesis(
                labels=labels,
                log_p_blank=float(pb),
                log_p_nonblank=float(pnb),
                lm_state=state,
                lm_logp=float(lm_total),
                score=float(sc),
            )
        )
    results.sort(key=lambda h: (-h.score, h.labels))
    return results[: max(beam_size, 1)]
