"""Tropical-semiring WFSTs: composition, the CTC token / lexicon / grammar
graph builders, and frame-synchronous Viterbi beam decoding.

Weights are costs (negative natural-log probabilities); paths add, search
takes the min. Symbol id 0 is reserved for epsilon in every table.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ngram import BOS, EOS, UNK, BackoffLm

EPS = 0
EPS_NAME = "<eps>"


class SearchFailed(RuntimeError):
    """Beam search pruned away every hypothesis or reached no final state."""


class SymbolTable:
    """Bidirectional symbol <-> id map with id 0 fixed to epsilon."""

    def __init__(self, symbols=(EPS_NAME,)):
        names = list(symbols)
        if not names or names[0] != EPS_NAME:
            raise ValueError(f"symbol 0 must be {EPS_NAME!r}")
        if len(set(names)) != len(names):
            raise ValueError("duplicate symbols")
        self._names = names
        self._ids = {s: i for i, s in enumerate(names)}

    def add(self, name: str) -> int:
        if name in self._ids:
            return self._ids[name]
        self._names.append(name)
        self._ids[name] = len(self._names) - 1
        return self._ids[name]

    def find(self, name: str):
        return self._ids.get(name)

    def name(self, sym_id: int) -> str:
        return self._names[sym_id]

    def names(self) -> tuple[str, ...]:
        return tuple(self._names)

    def __len__(self) -> int:
        return len(self._names)

    def __eq__(self, other) -> bool:
        return isinstance(other, SymbolTable) and self._names == other._names

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for i, name in enumerate(self._names):
                f.write(f"{name} {i}\n")

    @classmethod
    def read(cls, path) -> "SymbolTable":
        pairs = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                name, sym_id = line.rsplit(None, 1)
                pairs.append((int(sym_id), name))
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise ValueError(f"non-contiguous symbol ids in {path}")
        return cls([name for _, name in pairs])


@dataclass(frozen=True)
class Arc:
    ilabel: int
    olabel: int
    weight: float
    nextstate: int


class Wfst:
    """Mutable during construction, treated as immutable afterwards."""

    def __init__(self, isyms: SymbolTable | None = None, osyms: SymbolTable | None = None):
        self.isyms = isyms if isyms is not None else SymbolTable()
        self.osyms = osyms if osyms is not None else SymbolTable()
        self.arcs: list[list[Arc]] = []
        self.finals: dict[int, float] = {}
        self.start: int = 0

    def add_state(self) -> int:
        self.arcs.append([])
        return len(self.arcs) - 1

    def add_arc(self, src: int, ilabel: int, olabel: int, weight: float, dst: int) -> None:
        self.arcs[src].append(Arc(int(ilabel), int(olabel), float(weight), int(dst)))

    def set_final(self, state: int, weight: float = 0.0) -> None:
        self.finals[state] = float(weight)

    def set_start(self, state: int) -> None:
        self.start = state

    @property
    def num_states(self) -> int:
        return len(self.arcs)

    @property
    def num_arcs(self) -> int:
        return sum(len(a) for a in self.arcs)

    def validate(self) -> None:
        if not self.arcs:
            raise ValueError("transducer has no states")
        if not 0 <= self.start < self.num_states:
            raise ValueError("start state missing")
        for s, arcs in enumerate(self.arcs):
            for arc in arcs:
                if not 0 <= arc.nextstate < self.num_states:
                    raise ValueError(f"arc from {s} targets missing state {arc.nextstate}")
                if not np.isfinite(arc.weight):
                    raise ValueError(f"non-finite weight on arc from state {s}")


def compose(a: Wfst, b: Wfst) -> Wfst:
    """Tropical composition with an epsilon-sequencing filter.

    Between two genuine matches, the filter admits exactly one canonical
    interleaving of side-moves (all a-side epsilon-output moves first, then
    all b-side epsilon-input moves), so no (input, output) pair is lost and
    min path weights are preserved without epsilon-path blowup.
    """
    if a.osyms != b.isyms:
        raise ValueError("symbol-table mismatch: a.osyms != b.isyms")
    out = Wfst(a.isyms, b.osyms)
    state_map: dict = {}
    queue: deque = deque()

    def state_for(key):
        sid = state_map.get(key)
        if sid is None:
            sid = out.add_state()
            state_map[key] = sid
            queue.append(key)
        return sid

    out.set_start(state_for((a.start, b.start, 0)))
    while queue:
        key = queue.popleft()
        qa, qb, filt = key
        sid = state_map[key]
        if qa in a.finals and qb in b.finals:
            out.set_final(sid, a.finals[qa] + b.finals[qb])
        for arc_a in a.arcs[qa]:
            if arc_a.olabel != EPS:
                for arc_b in b.arcs[qb]:
                    if arc_b.ilabel == arc_a.olabel:
                        dst = state_for((arc_a.nextstate, arc_b.nextstate, 0))
                        out.add_arc(
                            sid, arc_a.ilabel, arc_b.olabel, arc_a.weight + arc_b.weight, dst
                        )
            elif filt != 1:
                # a-side move; blocked once a b-side epsilon run has begun
                dst = state_for((arc_a.nextstate, qb, 2))
                out.add_arc(sid, arc_a.ilabel, EPS, arc_a.weight, dst)
        for arc_b in b.arcs[qb]:
            if arc_b.ilabel == EPS:
                dst = state_for((qa, arc_b.nextstate, 1))
                out.add_arc(sid, EPS, arc_b.olabel, arc_b.weight, dst)
    return out


def build_token_fst(inventory) -> Wfst:
    """Transducer mapping frame-label paths to collapsed label sequences.

    Input symbols: blank (id 1) then the characters; output symbols: the
    characters. Every path over inventory+blank is accepted with weight 0
    and transduced to exactly its collapsed form.
    """
    inventory = list(inventory)
    if not inventory:
        raise ValueError("empty character inventory")
    from .ctc import BLANK

    if BLANK in inventory:
        raise ValueError("blank must not be part of the character inventory")
    isyms = SymbolTable([EPS_NAME, BLANK] + inventory)
    osyms = SymbolTable([EPS_NAME] + inventory)
    fst = Wfst(isyms, osyms)
    home = fst.add_state()
    fst.set_final(home, 0.0)
    blank_in = isyms.find(BLANK)
    state_of = {}
    for c in inventory:
        s = fst.add_state()
        fst.set_final(s, 0.0)
        state_of[c] = s
    fst.add_arc(home, blank_in, EPS, 0.0, home)
    for c in inventory:
        fst.add_arc(home, isyms.find(c), osyms.find(c), 0.0, state_of[c])
    for c in inventory:
        s = state_of[c]
        fst.add_arc(s, isyms.find(c), EPS, 0.0, s)  # repeats collapse
        fst.add_arc(s, blank_in, EPS, 0.0, home)
        for c2 in inventory:
            if c2 != c:
                fst.add_arc(s, isyms.find(c2), osyms.find(c2), 0.0, state_of[c2])
    return fst


def build_lexicon_fst(lexicon) -> Wfst:
    """Transducer mapping character sequences to word sequences (weight 0).

    One linear path per word, the word label on the first character arc,
    and an epsilon back-arc to the shared start/end state at each word
    boundary so multi-word sequences loop. Word ids follow lexicon order,
    so on cost ties the decoder's lowest-id rule prefers earlier entries.
    """
    if not lexicon.words:
        raise ValueError("empty lexicon")
    isyms = SymbolTable([EPS_NAME] + list(lexicon.inventory))
    osyms = SymbolTable([EPS_NAME] + list(lexicon.words))
    fst = Wfst(isyms, osyms)
    home = fst.add_state()
    fst.set_final(home, 0.0)
    for word in lexicon.words:
        chars = lexicon.spellings[word]
        wid = osyms.find(word)
        src = home
        for i, ch in enumerate(chars):
            ci = isyms.find(ch)
            if ci is None:
                raise ValueError(f"character {ch!r} missing from inventory")
            dst = fst.add_state()
            fst.add_arc(src, ci, wid if i == 0 else EPS, 0.0, dst)
            src = dst
        fst.add_arc(src, EPS, EPS, 0.0, home)
    return fst


def build_grammar_fst(lm: BackoffLm, words=None) -> Wfst:
    """Acceptor over word ids encoding the backoff n-gram graph.

    One state per stored context; word arcs carry -log p(w|h); backoff is
    an epsilon arc weighted -log(bow); the end-of-sentence probability
    becomes a final weight where it is explicit. Decoding words outside the
    model's vocabulary get arcs priced at the unknown-token probability.
    """
    if words is None:
        words = [w for w in lm.vocab if w not in (EOS, UNK)]
    words = list(words)
    syms = SymbolTable([EPS_NAME] + words)
    fst = Wfst(syms, syms)

    contexts = [()] + sorted(lm.bow.keys(), key=lambda h: (len(h), h))
    state_of = {h: fst.add_state() for h in contexts}

    def next_context(h, w):
        cand = h + (w,)
        cand = cand[-(lm.order - 1):] if lm.order > 1 else ()
        while cand and cand not in state_of:
            cand = cand[1:]
        return cand

    oov_words = [w for w in words if (w,) not in lm.logp]
    for ng in sorted(lm.logp.keys(), key=lambda g: (len(g), g)):
        h, w = ng[:-1], ng[-1]
        if h not in state_of:
            continue
        src = state_of[h]
        weight = -lm.logp[ng]
        if w == EOS:
            fst.set_final(src, weight)
        elif w == UNK:
            dst = state_of[next_context(h, UNK)]
            for v in oov_words:
                vid = syms.find(v)
                fst.add_arc(src, vid, vid, weight, dst)
        elif w == BOS:
            continue
        else:
            wid = syms.find(w)
            if wid is None:
                continue  # model word outside the decoding vocabulary
            fst.add_arc(src, wid, wid, weight, state_of[next_context(h, w)])
    for h in sorted(lm.bow.keys(), key=lambda c: (len(c), c)):
        dst = h[1:]
        while dst and dst not in state_of:
            dst = dst[1:]
        fst.add_arc(state_of[h], EPS, EPS, -lm.bow[h], state_of[dst])

    fst.set_start(state_of.get((BOS,), state_of[()]))
    return fst


def build_tlg(tokens: Wfst, lexicon: Wfst, grammar: Wfst) -> Wfst:
    """compose(compose(T, L), G): CTC tokens in, words out."""
    tl = compose(tokens, lexicon)
    return compose(tl, grammar)


@dataclass(frozen=True)
class DecodeResult:
    word_ids: tuple[int, ...]
    words: tuple[str, ...]
    total_cost: float
    trace: tuple  # (frame | None, src, dst, ilabel, olabel, graph_w, acoustic)


def _eps_expand(graph: Wfst, active: dict, tb: list) -> dict:
    """Relax epsilon arcs to a fixpoint.

    Lazy Dijkstra with strict-improvement relaxation: correct for the
    non-negative epsilon weights our graphs produce, and still terminating
    (as label-correcting search) if a loaded model carries backoff weights
    above one. Heap order (cost, state id) makes ties deterministic.
    """
    heap = [(cost, s) for s, (cost, idx) in active.items()]
    heapq.heapify(heap)
    pops = 0
    cap = 100 * graph.num_states + 1000
    while heap:
        cost, s = heapq.heappop(heap)
        if cost > active[s][0]:
            continue  # stale entry
        pops += 1
        if pops > cap:
            raise SearchFailed("search failed: epsilon relaxation did not converge")
        parent_idx = active[s][1]
        for arc in graph.arcs[s]:
            if arc.ilabel != EPS:
                continue
            nc = cost + arc.weight
            cur = active.get(arc.nextstate)
            if cur is None or nc < cur[0]:
                tb.append((parent_idx, None, s, arc.ilabel, arc.olabel, arc.weight, 0.0))
                active[arc.nextstate] = (nc, len(tb) - 1)
                heapq.heappush(heap, (nc, arc.nextstate))
    return active


def _prune(active: dict, beam: float, max_active: int) -> dict:
    if not active:
        return active
    best = min(cost for cost, _ in active.values())
    if np.isfinite(beam):
        active = {s: v for s, v in active.items() if v[0] <= best + beam}
    if max_active and len(active) > max_active:
        keep = sorted(active.items(), key=lambda kv: (kv[1][0], kv[0]))[:max_active]
        active = dict(keep)
    return active


def decode_frames(
    posteriors,
    graph: Wfst,
    beam: float = 16.0,
    acoustic_scale: float = 1.0,
    max_active: int = 2000,
) -> DecodeResult:
    """Frame-synchronous Viterbi beam search over a decoding graph.

    Arc cost is graph weight plus acoustic_scale * -log posterior of the
    arc's input token at the current frame; epsilon arcs consume no frame.
    With beam and max_active effectively unlimited this returns the exact
    min-cost path. Raises SearchFailed when pruning empties the beam or no
    final state is reachable.
    """
    if beam <= 0:
        raise ValueError("beam must be > 0")
    logp = posteriors.logp
    frames = logp.shape[0]
    if frames < 1:
        raise ValueError("empty grid")
    grid_names = set(posteriors.tokens)
    graph_names = set(graph.isyms.names()[1:])
    if grid_names != graph_names:
        raise ValueError(
            f"token mismatch: grid has {sorted(grid_names)}, graph inputs are {sorted(graph_names)}"
        )
    col = {graph.isyms.find(tok): j for j, tok in enumerate(posteriors.tokens)}

    tb: list = [(-1, None, -1, EPS, EPS, 0.0, 0.0)]
    active = {graph.start: (0.0, 0)}
    for t in range(frames):
        active = _eps_expand(graph, active, tb)
        active = _prune(active, beam, max_active)
        new: dict = {}
        for s in sorted(active):
            cost, idx = active[s]
            for arc in graph.arcs[s]:
                if arc.ilabel == EPS:
                    continue
                ac = acoustic_scale * -logp[t, col[arc.ilabel]]
                nc = cost + arc.weight + ac
                cur = new.get(arc.nextstate)
                if cur is None or nc < cur[0]:
                    tb.append((idx, t, s, arc.ilabel, arc.olabel, arc.weight, ac))
                    new[arc.nextstate] = (nc, len(tb) - 1)
        if not new:
            raise SearchFailed(f"search failed: no active state after frame {t}; widen the beam")
        active = new
    active = _eps_expand(graph, active, tb)

    best = None
    for s in sorted(active):
        if s not in graph.finals:
            continue
        total = active[s][0] + graph.finals[s]
        if best is None or total < best[0]:
            best = (total, s, active[s][1])
    if best is None:
        raise SearchFailed("search failed: no final state reachable; widen the beam")

    total_cost, _, idx = best
    steps = []
    while idx > 0:
        node = tb[idx]
        steps.append(node)
        idx = node[0]
    steps.reverse()
    word_ids = tuple(n[4] for n in steps if n[4] != EPS)
    words = tuple(graph.osyms.name(i) for i in word_ids)
    trace = tuple((n[1], n[2], n[3], n[4], n[5], n[6]) for n in steps)
    return DecodeResult(word_ids=word_ids, words=words, total_cost=float(total_cost), trace=trace)


def save_fst(fst: Wfst, base) -> None:
    """AT&T text serialization: ``{base}.fst.txt`` plus the two symbol tables.

    Arc lines are ``src dst ilabel olabel weight``; final lines are
    ``state weight``. The start state's arcs come first, per convention.
    """
    base = str(base)
    order = [fst.start] + [s for s in range(fst.num_states) if s != fst.start]
    with open(base + ".fst.txt", "w", encoding="utf-8") as f:
        for s in order:
            for arc in fst.arcs[s]:
                f.write(f"{s} {arc.nextstate} {arc.ilabel} {arc.olabel} {arc.weight!r}\n")
        for s in order:
            if s in fst.finals:
                f.write(f"{s} {fst.finals[s]!r}\n")
    fst.isyms.write(base + ".isyms.txt")
    fst.osyms.write(base + ".osyms.txt")


def load_fst(base) -> Wfst:
    base = str(base)
    isyms = SymbolTable.read(base + ".isyms.txt")
    osyms = SymbolTable.read(base + ".osyms.txt")
    arcs = []
    finals = []
    start = None
    max_state = -1
    with open(base + ".fst.txt", encoding="utf-8") as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if len(parts) == 5:
                src, dst = int(parts[0]), int(parts[1])
                arcs.append((src, int(parts[2]), int(parts[3]), float(parts[4]), dst))
                max_state = max(max_state, src, dst)
                if start is None:
                    start = src
            elif len(parts) == 2:
                s = int(parts[0])
                finals.append((s, float(parts[1])))
                max_state = max(max_state, s)
                if start is None:
                    start = s
            else:
                raise ValueError(f"malformed FST line: {line!r}")
    fst = Wfst(isyms, osyms)
    for _ in range(max_state + 1):
        fst.add_state()
    for src, il, ol, w, dst in arcs:
        fst.add_arc(src, il, ol, w, dst)
    for s, w in finals:
        fst.set_final(s, w)
    fst.set_start(start if start is not None else 0)
    return fst
