"""Training objectives.

CTC is computed entirely in log space with the extended-label alpha/beta
recursions; -inf is represented by a large negative sentinel (-1e30) so the
recursion needs no special cases. The gradient with respect to the input
log-probabilities is the state-occupancy posterior, derived in closed form
and attached as a single tape node. A path-enumeration oracle
(:func:`ctc_brute_force`) stays independent of the recursion for
verification on small instances.

Per-speaker CTC losses are summed, not averaged; cross entropy is the
token mean, so the hybrid weight is length-independent.
"""

import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NEG = -1e30  # log-domain "impossible" sentinel


class CtcInfeasibleError(ValueError):
    """Target cannot be aligned to the given number of frames."""


@dataclass
class CtcInput:
    """Log-probability rows [T,V], a blank-free target, and the blank id."""
    log_probs: Tensor
    target: tuple
    blank_id: int = 0

    def __post_init__(self):
        self.target = tuple(int(t) for t in self.target)
        if self.log_probs.data.ndim != 2:
            raise ad.ShapeError(
                f"ctc: log_probs must be [T,V], got {self.log_probs.shape}")
        T, V = self.log_probs.shape
        if not (0 <= self.blank_id < V):
            raise ValueError(f"ctc: blank id {self.blank_id} outside vocabulary {V}")
        if any(t == self.blank_id for t in self.target):
            raise ValueError("ctc: target must not contain the blank id")
        if any(not (0 <= t < V) for t in self.target):
            raise ValueError(f"ctc: target token outside vocabulary of size {V}")


@dataclass
class PermutationResult:
    """Argmin stream->label assignment and its differentiable total loss."""
    permutation: tuple
    total_loss: Tensor
    pair_losses: np.ndarray  # [S,S] float matrix of per-assignment losses


def _min_frames(target):
    """Shortest alignment: one frame per token plus a separating blank
    between each adjacent-equal pair."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _check_feasible(T, target):
    need = _min_frames(target)
    if T < need:
        raise CtcInfeasibleError(
            f"target of length {len(target)} needs at least {need} frames, got {T}")


def _logsumexp2(a, b):
    return np.logaddexp(a, b)


def ctc_forward_backward(log_probs, target, blank_id=0):
    """Differentiable -log P(target | log_probs) via the alpha recursion.

    log_probs rows must already be log-softmax outputs. Raises
    CtcInfeasibleError when no alignment exists.
    """
    inp = CtcInput(log_probs, target, blank_id)
    lp = inp.log_probs.data
    T, V = lp.shape
    target = inp.target
    blank = inp.blank_id
    _check_feasible(T, target)

    ext = [blank]
    for tok in target:
        ext.extend((tok, blank))
    S = len(ext)
    ext = np.asarray(ext, dtype=np.int64)
    # skip transition s-2 -> s allowed where the extended label is a
    # non-blank differing from its predecessor non-blank
    can_skip = np.zeros(S, dtype=bool)
    for s in range(2, S):
        can_skip[s] = ext[s] != blank and ext[s] != ext[s - 2]

    alpha = np.full((T, S), NEG)
    alpha[0, 0] = lp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, T):
        prev = alpha[t - 1]
        stay = prev
        step = np.full(S, NEG)
        step[1:] = prev[:-1]
        acc = _logsumexp2(stay, step)
        skip = np.full(S, NEG)
        skip[2:] = prev[:-2]
        acc = np.where(can_skip, _logsumexp2(acc, skip), acc)
        alpha[t] = acc + lp[t, ext]

    if S > 1:
        log_p = _logsumexp2(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    else:
        log_p = alpha[T - 1, S - 1]

    def vjp(grad_out):
        beta = np.full((T, S), NEG)
        beta[T - 1, S - 1] = 0.0
        if S > 1:
            beta[T - 1, S - 2] = 0.0
        for t in range(T - 2, -1, -1):
            nxt = beta[t + 1] + lp[t + 1, ext]
            stay = nxt
            step = np.full(S, NEG)
            step[:-1] = nxt[1:]
            acc = _logsumexp2(stay, step)
            skip = np.full(S, NEG)
            skip[:-2] = nxt[2:]
            can_skip_fwd = np.zeros(S, dtype=bool)
            can_skip_fwd[:-2] = can_skip[2:]
            acc = np.where(can_skip_fwd, _logsumexp2(acc, skip), acc)
            beta[t] = acc
        # occupancy posterior; d(-logP)/dlogp[t,k] = -sum_{s: ext[s]=k} gamma[t,s]
        gamma = np.exp(alpha + beta - log_p)
        dlp = np.zeros((T, V))
        for s in range(S):
            dlp[:, ext[s]] -= gamma[:, s]
        return (dlp * grad_out,)

    return ad.record(np.asarray(-log_p), (inp.log_probs,), vjp)


def _collapse(path, blank):
    """CTC path collapse: merge adjacent repeats, then drop blanks."""
    out = []
    prev = None
    for p in path:
        if p != prev:
            out.append(p)
        prev = p
    return tuple(tok for tok in out if tok != blank)


def ctc_brute_force(log_probs, target, blank_id=0):
    """Oracle: enumerate every frame path and sum those collapsing to target.

    Only tractable for V**T <= 1e6; raises for larger instances and for
    infeasible targets (zero total probability).
    """
    inp = CtcInput(log_probs, target, blank_id)
    lp = inp.log_probs.data
    T, V = lp.shape
    target = inp.target
    if V ** T > 1_000_000:
        raise ValueError(f"ctc_brute_force: {V}**{T} paths is too large")
    _check_feasible(T, target)

    total = 0.0
    found = False
    for path in itertools.product(range(V), repeat=T):
        if _collapse(path, inp.blank_id) == target:
            total += float(np.exp(sum(lp[t, path[t]] for t in range(T))))
            found = True
    if not found or total <= 0.0:
        raise CtcInfeasibleError("no frame path collapses to the target")
    return -float(np.log(total))


def ce_serialized(decoder_log_probs, label):
    """Mean negative log-likelihood of a serialized label under teacher
    forcing; every position counts, including separators and the end token."""
    if decoder_log_probs.data.ndim != 2:
        raise ad.ShapeError(
            f"ce: log_probs must be [N,V], got {decoder_log_probs.shape}")
    label = [int(t) for t in label]
    N, V = decoder_log_probs.shape
    if len(label) != N:
        raise ad.ShapeError(
            f"ce: {N} prediction rows but {len(label)} label tokens")
    if any(not (0 <= t < V) for t in label):
        raise ValueError(f"ce: label token outside vocabulary of size {V}")
    onehot = np.zeros((N, V))
    onehot[np.arange(N), label] = 1.0
    picked = ad.sum_all(ad.mul(decoder_log_probs, Tensor(onehot)))
    return ad.scale(picked, -1.0 / N)


def best_permutation(pair_losses):
    """Argmin assignment over an [S,S] loss matrix (stream s -> label
    perm[s]). Ties break to the lexicographically smallest permutation."""
    m = np.asarray(pair_losses, dtype=np.float64)
    S = m.shape[0]
    best = None
    best_total = None
    for perm in itertools.permutations(range(S)):
        total = sum(m[s, perm[s]] for s in range(S))
        if best_total is None or total < best_total:
            best_total = total
            best = perm
    return best, float(best_total)


def upit_ctc(streams, labels, blank_id=0):
    """Permutation-invariant CTC: minimum over all stream->label
    assignments; the gradient flows only through the chosen assignment."""
    if len(streams) != len(labels):
        raise ValueError(f"upit: {len(streams)} streams vs {len(labels)} labels")
    S = len(streams)
    if S == 0:
        raise ValueError("upit: need at least one stream")
    pair = np.empty((S, S))
    pair_tensors = {}
    for s in range(S):
        for k in range(S):
            loss = ctc_forward_backward(streams[s], labels[k], blank_id)
            pair_tensors[s, k] = loss
            pair[s, k] = loss.item()
    perm, _ = best_permutation(pair)
    total = pair_tensors[0, perm[0]]
    for s in range(1, S):
        total = ad.add(total, pair_tensors[s, perm[s]])
    return PermutationResult(permutation=perm, total_loss=total, pair_losses=pair)


def encsep_ctc(streams, labels, blank_id=0):
    """Sum of per-stream CTC losses with the assignment fixed by serialized
    speaker order; no permutation search."""
    if len(streams) != len(labels):
        raise ValueError(
            f"encsep_ctc: {len(streams)} streams vs {len(labels)} labels")
    if not streams:
        raise ValueError("encsep_ctc: need at least one stream")
    total = ctc_forward_backward(streams[0], labels[0], blank_id)
    for s in range(1, len(streams)):
        total = ad.add(total, ctc_forward_backward(streams[s], labels[s], blank_id))
    return total


def hybrid(loss_ctc, loss_ce, weight):
    """weight * ctc + (1 - weight) * ce, with weight in [0, 1]."""
    w = float(weight)
    if not (0.0 <= w <= 1.0):
        raise ValueError(f"hybrid: weight {w} outside [0, 1]")
    if w == 0.0:
        return loss_ce
    if w == 1.0:
        return loss_ctc
    return ad.add(ad.scale(loss_ctc, w), ad.scale(loss_ce, 1.0 - w))
