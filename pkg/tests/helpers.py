"""Independent oracles used across the test suite.

Everything here is deliberately brute force: path enumeration, exhaustive
alignment sums, direct recursions. Nothing imports the implementation
details it is checking.
"""

import itertools
import math

import numpy as np


def collapse_oracle(path, blank=0):
    out = []
    prev = None
    for t in path:
        if t != prev:
            out.append(t)
        prev = t
    return tuple(t for t in out if t != blank)


def brute_ctc_logprob(logp, target, blank=0):
    """log sum over all |V|^T paths that collapse to target."""
    t_frames, n_tok = logp.shape
    total = -math.inf
    for path in itertools.product(range(n_tok), repeat=t_frames):
        if collapse_oracle(path, blank) == tuple(target):
            total = np.logaddexp(total, sum(logp[t, k] for t, k in enumerate(path)))
    return total


def brute_ctc_best_labels(logp, blank=0):
    """(labels, log total prob) of the most probable label sequence."""
    t_frames, n_tok = logp.shape
    scores = {}
    for path in itertools.product(range(n_tok), repeat=t_frames):
        lab = collapse_oracle(path, blank)
        lp = sum(logp[t, k] for t, k in enumerate(path))
        scores[lab] = np.logaddexp(scores.get(lab, -math.inf), lp)
    best = max(scores.items(), key=lambda kv: (kv[1], kv[0]))
    return best[0], best[1]


def best_alignment_cost(logp, label_ids, scale=1.0, blank=0):
    """Min-cost single alignment whose collapse equals label_ids."""
    t_frames, n_tok = logp.shape
    best = math.inf
    for path in itertools.product(range(n_tok), repeat=t_frames):
        if collapse_oracle(path, blank) == tuple(label_ids):
            best = min(best, sum(scale * -logp[t, k] for t, k in enumerate(path)))
    return best


def enumerate_paths(fst, max_arcs):
    """{(input tuple, output tuple): min weight} over paths of <= max_arcs arcs."""
    out = {}
    stack = [(fst.start, (), (), 0.0, 0)]
    while stack:
        s, x, z, w, n = stack.pop()
        if s in fst.finals:
            key = (x, z)
            tw = w + fst.finals[s]
            if key not in out or tw < out[key]:
                out[key] = tw
        if n == max_arcs:
            continue
        for arc in fst.arcs[s]:
            nx = x + ((arc.ilabel,) if arc.ilabel else ())
            nz = z + ((arc.olabel,) if arc.olabel else ())
            stack.append((arc.nextstate, nx, nz, w + arc.weight, n + 1))
    return out


def transduce_all(fst, input_syms):
    """{output tuple: min weight} of accepting paths for an input sequence."""
    results = {}
    stack = [(fst.start, 0, (), 0.0)]
    seen = set()
    while stack:
        s, pos, out, w = stack.pop()
        key = (s, pos, out)
        if key in seen:
            continue
        seen.add(key)
        if pos == len(input_syms) and s in fst.finals:
            tw = w + fst.finals[s]
            if out not in results or tw < results[out]:
                results[out] = tw
        for arc in fst.arcs[s]:
            nout = out + ((arc.olabel,) if arc.olabel != 0 else ())
            if arc.ilabel == 0:
                stack.append((arc.nextstate, pos, nout, w + arc.weight))
            elif pos < len(input_syms) and arc.ilabel == input_syms[pos]:
                stack.append((arc.nextstate, pos + 1, nout, w + arc.weight))
    return results


def best_transduction(fst, input_syms):
    """(min weight, output tuple) over accepting paths for an input sequence,
    computed by dynamic programming so cycles are fine."""
    import heapq

    INF = math.inf
    start = (fst.start, 0)
    dist = {start: (0.0, ())}
    heap = [(0.0, fst.start, 0, ())]
    best = (INF, None)
    while heap:
        w, s, pos, out = heapq.heappop(heap)
        cur = dist.get((s, pos))
        if cur is None or w > cur[0]:
            continue
        if pos == len(input_syms) and s in fst.finals:
            tw = w + fst.finals[s]
            if tw < best[0]:
                best = (tw, out)
        for arc in fst.arcs[s]:
            if arc.ilabel == 0:
                npos = pos
            elif pos < len(input_syms) and arc.ilabel == input_syms[pos]:
                npos = pos + 1
            else:
                continue
            nw = w + arc.weight
            nout = out + ((arc.olabel,) if arc.olabel != 0 else ())
            key = (arc.nextstate, npos)
            prev = dist.get(key)
            if prev is None or nw < prev[0]:
                dist[key] = (nw, nout)
                heapq.heappush(heap, (nw, arc.nextstate, npos, nout))
    return best


def edit_distance_oracle(a, b):
    """Plain Wagner-Fischer distance, no backtrace."""
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j - 1] + (x != y), cur[-1] + 1, prev[j] + 1))
        prev = cur
    return prev[-1]


def witten_bell_oracle(corpus, order):
    """Direct interpolated Witten-Bell recursion from raw counts.

    Returns p(word | history) as a function; independent of the package's
    backoff-form storage.
    """
    counts = {}
    for sentence in corpus:
        padded = ["<s>"] + list(sentence) + ["</s>"]
        for i in range(1, len(padded)):
            for m in range(1, order + 1):
                if i - m + 1 < 0:
                    continue
                ng = tuple(padded[i - m + 1 : i + 1])
                counts[ng] = counts.get(ng, 0) + 1

    unigrams = {ng: c for ng, c in counts.items() if len(ng) == 1}
    total = sum(unigrams.values())
    n_types = len(unigrams)

    def p(history, word):
        history = tuple(history)[-(order - 1):] if order > 1 else ()
        if not history:
            if (word,) in unigrams:
                return unigrams[(word,)] / (total + n_types)
            return n_types / (total + n_types)  # unknown mass
        ctx_total = sum(c for ng, c in counts.items()
                        if len(ng) == len(history) + 1 and ng[:-1] == history)
        if ctx_total == 0:
            return p(history[1:], word)
        ctx_types = sum(1 for ng in counts
                        if len(ng) == len(history) + 1 and ng[:-1] == history)
        lam = ctx_total / (ctx_total + ctx_types)
        ml = counts.get(history + (word,), 0) / ctx_total
        return lam * ml + (1 - lam) * p(history[1:], word)

    return p
