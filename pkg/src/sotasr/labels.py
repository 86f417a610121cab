"""Serialized label construction, vocabulary management, and multi-stream
error-rate scoring.

Token sequences are lists; elements may be token strings or ids, and the
separator symbol is passed explicitly so the same helpers serve both
spaces. For logs and dataset files a sequence renders as a
whitespace-joined string with the literal ``<sc>`` spelling.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

BLANK_SYMBOL = "<blank>"
SC_SYMBOL = "<sc>"
SOS_SYMBOL = "<sos>"
EOS_SYMBOL = "<eos>"
RESERVED_SYMBOLS = (BLANK_SYMBOL, SC_SYMBOL, SOS_SYMBOL, EOS_SYMBOL)


class VocabularyError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    """Bijective token <-> id mapping with fixed reserved symbols.

    Ids are contiguous: 0 is blank, then the sorted content tokens, then
    ``<sc>``, ``<sos>``, ``<eos>``.
    """

    tokens: tuple

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise VocabularyError("duplicate tokens in vocabulary")
        object.__setattr__(self, "_to_id",
                           {tok: i for i, tok in enumerate(self.tokens)})

    @property
    def size(self):
        return len(self.tokens)

    @property
    def blank_id(self):
        return 0

    @property
    def sc_id(self):
        return self._to_id[SC_SYMBOL]

    @property
    def sos_id(self):
        return self._to_id[SOS_SYMBOL]

    @property
    def eos_id(self):
        return self._to_id[EOS_SYMBOL]

    @property
    def content_tokens(self):
        return self.tokens[1:self.size - 3]

    def encode(self, tokens):
        try:
            return [self._to_id[t] for t in tokens]
        except KeyError as exc:
            raise VocabularyError(f"unknown token {exc.args[0]!r}") from None

    def decode(self, ids):
        return [self.tokens[i] for i in ids]


def build_vocab(corpus_tokens):
    """Deterministic vocabulary from a set of content tokens.

    Reserved symbols must not appear in the corpus.
    """
    toks = sorted(set(corpus_tokens))
    for t in toks:
        if t in RESERVED_SYMBOLS:
            raise VocabularyError(f"corpus token {t!r} collides with a reserved symbol")
    return Vocabulary(tuple([BLANK_SYMBOL] + toks + [SC_SYMBOL, SOS_SYMBOL, EOS_SYMBOL]))


@dataclass
class SerializedLabel:
    """One token sequence holding several speakers' transcripts joined by
    the speaker-change separator, ordered by speaking start time."""

    tokens: list
    speaker_count: int
    sc: object = field(default=SC_SYMBOL)

    def __post_init__(self):
        toks = self.tokens
        if toks and (toks[0] == self.sc or toks[-1] == self.sc):
            raise ValueError("serialized label starts or ends with a separator")
        if any(a == self.sc and b == self.sc for a, b in zip(toks, toks[1:])):
            raise ValueError("serialized label contains adjacent separators")
        separators = sum(1 for t in toks if t == self.sc)
        if separators + 1 != self.speaker_count:
            raise ValueError(
                f"{separators} separators inconsistent with "
                f"{self.speaker_count} speakers")


def serialize(speakers, sc=SC_SYMBOL):
    """Join speaker transcripts in ascending start-offset order.

    ``speakers`` is a list of (start_offset, token sequence) pairs. Offset
    ties keep the input order, so datasets stay deterministic.
    """
    if not speakers:
        raise ValueError("serialize: need at least one speaker")
    for _, toks in speakers:
        if len(toks) == 0:
            raise ValueError("serialize: empty transcript")
    order = sorted(range(len(speakers)), key=lambda i: (speakers[i][0], i))
    out = []
    for rank, i in enumerate(order):
        if rank:
            out.append(sc)
        out.extend(speakers[i][1])
    return SerializedLabel(tokens=out, speaker_count=len(speakers), sc=sc)


def split_on_sc(tokens, sc=SC_SYMBOL):
    """Split a (possibly malformed) serialized sequence into streams,
    dropping empty segments from stray adjacent separators."""
    if isinstance(tokens, SerializedLabel):
        tokens = tokens.tokens
    streams = []
    current = []
    for t in tokens:
        if t == sc:
            if current:
                streams.append(current)
            current = []
        else:
            current.append(t)
    if current:
        streams.append(current)
    return streams


def to_text(tokens):
    """Whitespace-joined rendering used in logs and dataset files."""
    if isinstance(tokens, SerializedLabel):
        tokens = tokens.tokens
    return " ".join(str(t) for t in tokens)


def from_text(line):
    return line.split()


@dataclass(frozen=True)
class EditCounts:
    distance: int
    substitutions: int
    insertions: int
    deletions: int


def edit_distance(a, b):
    """Levenshtein distance from a (hypothesis) to b (reference) with unit
    costs, decomposed into counts via backtrace.

    Insertions are tokens present in a but not b; deletions the reverse.
    """
    a = list(a)
    b = list(b)
    n, m = len(a), len(b)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dist[i - 1, j - 1] + (a[i - 1] != b[j - 1])
            dist[i, j] = min(sub, dist[i - 1, j] + 1, dist[i, j - 1] + 1)
    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and a[i - 1] == b[j - 1] and dist[i, j] == dist[i - 1, j - 1]:
            i -= 1
            j -= 1
        elif i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + 1:
            subs += 1
            i -= 1
            j -= 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            ins += 1
            i -= 1
        else:
            dels += 1
            j -= 1
    return EditCounts(int(dist[n, m]), subs, ins, dels)


def _assignment(hyp, ref):
    """Min-total-distance pairing after padding to equal counts.

    Exhaustive over permutations up to 4 streams (ties resolved to the
    lexicographically smallest permutation); Hungarian assignment beyond.
    Returns (pairs, counts matrix) with pairs[i] = (hyp stream, ref stream).
    """
    n = max(len(hyp), len(ref))
    hyp = list(hyp) + [[]] * (n - len(hyp))
    ref = list(ref) + [[]] * (n - len(ref))
    cost = np.zeros((n, n), dtype=np.int64)
    counts = {}
    for i in range(n):
        for j in range(n):
            c = edit_distance(hyp[i], ref[j])
            counts[i, j] = c
            cost[i, j] = c.distance
    if n <= 4:
        best_perm = None
        best_total = None
        for perm in itertools.permutations(range(n)):
            total = sum(cost[i, perm[i]] for i in range(n))
            if best_total is None or total < best_total:
                best_total = total
                best_perm = perm
        pairing = list(enumerate(best_perm))
    else:
        rows, cols = linear_sum_assignment(cost)
        pairing = sorted(zip(rows.tolist(), cols.tolist()))
    return [(i, j, counts[i, j]) for i, j in pairing]


def multispeaker_counts(hyp_streams, ref_streams, assignment="permutation"):
    """Score a multi-stream hypothesis against multi-stream references.

    ``assignment`` is "permutation" (minimize total distance over stream
    pairings; the default) or "serialized" (score streams in the given
    order). The shorter side is padded with empty streams, so a missing
    stream counts as deletions. Returns (rate, total EditCounts, pairs)
    where pairs lists (hyp index, ref index, EditCounts).
    """
    if not ref_streams:
        raise ValueError("multispeaker_counts: reference streams required")
    ref_tokens = sum(len(r) for r in ref_streams)
    if ref_tokens == 0:
        raise ValueError("multispeaker_counts: zero reference tokens")
    if assignment == "permutation":
        pairs = _assignment(hyp_streams, ref_streams)
    elif assignment == "serialized":
        n = max(len(hyp_streams), len(ref_streams))
        hyp = list(hyp_streams) + [[]] * (n - len(hyp_streams))
        ref = list(ref_streams) + [[]] * (n - len(ref_streams))
        pairs = [(i, i, edit_distance(hyp[i], ref[i])) for i in range(n)]
    else:
        raise ValueError(f"unknown assignment mode {assignment!r}")
    total = EditCounts(
        distance=sum(c.distance for _, _, c in pairs),
        substitutions=sum(c.substitutions for _, _, c in pairs),
        insertions=sum(c.insertions for _, _, c in pairs),
        deletions=sum(c.deletions for _, _, c in pairs),
    )
    return total.distance / ref_tokens, total, pairs


def multispeaker_wer(hyp_streams, ref_streams, assignment="permutation"):
    """Minimum total edit distance over stream pairings divided by the
    reference token count (see multispeaker_counts)."""
    rate, _, _ = multispeaker_counts(hyp_streams, ref_streams, assignment)
    return rate
