"""
Connectionist temporal classification: exact log-space forward algorithm,
greedy best-path decoding and prefix beam search
"""

import logging
from collections import defaultdict
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import torch

from .errors import InfeasibleTargetError

logger = logging.getLogger(__name__)

BLANK = 0
# finite stand-in for log(0); keeps gradients free of NaN
NEG = -1e30

ArrayLike = Union[np.ndarray, torch.Tensor]


def collapse_path(path: Sequence[int], blank: int = BLANK) -> List[int]:
    """B(pi): merge repeats, then drop blanks"""
    out: List[int] = []
    previous = None
    for token in path:
        token = int(token)
        if token != previous and token != blank:
            out.append(token)
        previous = token
    return out


def min_alignment_length(target: Sequence[int]) -> int:
    """Shortest path that collapses to `target`: one frame per label plus a blank between repeats"""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def ctc_loss(log_probs: torch.Tensor, input_lengths: Sequence[int], targets: Sequence[Sequence[int]],
             blank: int = BLANK, reduction: str = "mean") -> torch.Tensor:
    """
    -ln p(g | V) for a padded batch.

    log_probs (B, T, V) are per-frame log-probabilities over vocabulary+blank.
    The recursion runs over the blank-extended target for all samples at
    once; each sample's state freezes after its last valid frame.
    """
    batch, frames, _ = log_probs.shape
    if len(targets) != batch or len(input_lengths) != batch:
        raise ValueError(f"{batch} inputs, {len(input_lengths)} lengths, {len(targets)} targets")
    lengths = torch.as_tensor(list(input_lengths), dtype=torch.long, device=log_probs.device)
    if int(lengths.max()) > frames or int(lengths.min()) < 1:
        raise ValueError(f"input lengths must lie in [1, {frames}]")

    for b, target in enumerate(targets):
        needed = min_alignment_length(target)
        if needed > int(lengths[b]):
            raise InfeasibleTargetError(
                f"target of {len(target)} labels needs {needed} frames, sample {b} has {int(lengths[b])}")
        if any(t == blank for t in target):
            raise ValueError(f"target for sample {b} contains the blank label")

    label_counts = torch.tensor([len(t) for t in targets], dtype=torch.long, device=log_probs.device)
    states = 2 * int(label_counts.max()) + 1
    ext = torch.full((batch, states), blank, dtype=torch.long, device=log_probs.device)
    for b, target in enumerate(targets):
        if len(target):
            ext[b, 1:2 * len(target):2] = torch.as_tensor(list(target), dtype=torch.long)

    skip = torch.zeros(batch, states, dtype=torch.bool, device=log_probs.device)
    if states > 2:
        skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])

    emit = log_probs.gather(2, ext.unsqueeze(1).expand(batch, frames, states))
    neg = torch.full((batch, states), NEG, dtype=log_probs.dtype, device=log_probs.device)

    alpha = torch.cat([emit[:, 0, :min(2, states)], neg[:, 2:]], dim=1)
    for t in range(1, frames):
        stay = alpha
        step = torch.cat([neg[:, :1], alpha[:, :-1]], dim=1)
        jump = torch.where(skip, torch.cat([neg[:, :2], alpha[:, :-2]], dim=1), neg)
        updated = torch.logsumexp(torch.stack([stay, step, jump]), dim=0) + emit[:, t]
        alpha = torch.where((t < lengths).unsqueeze(1), updated, alpha)

    last = alpha.gather(1, (2 * label_counts).unsqueeze(1)).squeeze(1)
    before = alpha.gather(1, (2 * label_counts - 1).clamp_min(0).unsqueeze(1)).squeeze(1)
    before = torch.where(label_counts > 0, before, neg[:, 0])
    losses = -torch.logaddexp(last, before)

    if reduction == "none":
        return losses
    if reduction == "sum":
        return losses.sum()
    if reduction == "mean":
        return losses.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def ctc_log_likelihood(log_probs: ArrayLike, target: Sequence[int], blank: int = BLANK) -> torch.Tensor:
    """-ln p(target | V) for one sequence of frame log-probs (T, V)"""
    log_probs = torch.as_tensor(log_probs)
    return ctc_loss(log_probs.unsqueeze(0), [log_probs.shape[0]], [list(target)], blank, reduction="sum")


def _as_numpy(log_probs: ArrayLike) -> np.ndarray:
    if isinstance(log_probs, torch.Tensor):
        log_probs = log_probs.detach().cpu().double().numpy()
    log_probs = np.asarray(log_probs, dtype=np.float64)
    if log_probs.ndim != 2:
        raise ValueError(f"expected (T, V) log-probabilities, got shape {log_probs.shape}")
    return log_probs


def ctc_greedy_decode(log_probs: ArrayLike, blank: int = BLANK) -> List[int]:
    """Collapse the per-frame argmax path"""
    return collapse_path(np.argmax(_as_numpy(log_probs), axis=-1), blank)


def ctc_prefix_beam_search(log_probs: ArrayLike, beam_width: int,
                           blank: int = BLANK) -> List[Tuple[List[int], float]]:
    """
    Prefix beam search over collapsed label sequences.

    Each prefix carries the probability of ending in blank and in non-blank.
    Survivors are rescored with the exact forward algorithm, and the greedy
    decode is always among the candidates. Returns (labels, log p) pairs,
    best first.
    """
    if beam_width < 1:
        raise ValueError(f"beam width must be at least 1, got {beam_width}")
    lp = _as_numpy(log_probs)
    frames, vocab = lp.shape

    beams: Dict[Tuple[int, ...], Tuple[float, float]] = {(): (0.0, -np.inf)}
    for t in range(frames):
        grown: Dict[Tuple[int, ...], List[float]] = defaultdict(lambda: [-np.inf, -np.inf])
        for prefix, (p_blank, p_label) in beams.items():
            total = np.logaddexp(p_blank, p_label)
            entry = grown[prefix]
            entry[0] = np.logaddexp(entry[0], total + lp[t, blank])
            for c in range(vocab):
                if c == blank:
                    continue
                if prefix and prefix[-1] == c:
                    # a repeat only extends the prefix after a blank
                    entry[1] = np.logaddexp(entry[1], p_label + lp[t, c])
                    extended = grown[prefix + (c,)]
                    extended[1] = np.logaddexp(extended[1], p_blank + lp[t, c])
                else:
                    extended = grown[prefix + (c,)]
                    extended[1] = np.logaddexp(extended[1], total + lp[t, c])
        ranked = sorted(grown.items(), key=lambda kv: (-np.logaddexp(*kv[1]), kv[0]))
        beams = {prefix: (p[0], p[1]) for prefix, p in ranked[:beam_width]}

    candidates = {prefix for prefix in beams}
    candidates.add(tuple(ctc_greedy_decode(lp, blank)))
    tensor = torch.as_tensor(lp)
    scored = [(list(prefix), -float(ctc_log_likelihood(tensor, prefix, blank))) for prefix in candidates]
    scored.sort(key=lambda item: (-item[1], item[0]))
    return scored


def ctc_beam_decode(log_probs: ArrayLike, beam_width: int = 10, blank: int = BLANK) -> List[int]:
    """
    Most probable collapsed sequence found by prefix beam search.

    Width 1 is greedy best-path decoding.
    """
    if beam_width == 1:
        return ctc_greedy_decode(log_probs, blank)
    return ctc_prefix_beam_search(log_probs, beam_width, blank)[0][0]
