"""Connectionist temporal classification: loss, oracle, greedy and beam decoding.

Class 0 is always the blank. Targets are sequences of class ids in 1..V.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import engine as ops
from .engine import DiffArray
from .errors import ConfigError, ContractError, DataError

BLANK = 0
BLANK_SYMBOL = "<blank>"
MAX_BEAM = 10
MAX_ALPHA = 2.0


class GlossVocabulary:
    """Ordered gloss inventory with the blank reserved at index 0.

    File format: one symbol per line, line 0 is ``<blank>``.
    """

    def __init__(self, glosses: Sequence[str]):
        glosses = list(glosses)
        if BLANK_SYMBOL in glosses:
            raise DataError("the blank symbol cannot be a gloss")
        if len(set(glosses)) != len(glosses):
            raise DataError("gloss symbols must be unique")
        self.symbols = [BLANK_SYMBOL] + glosses
        self._index = {s: i for i, s in enumerate(self.symbols)}

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def num_glosses(self) -> int:
        return len(self.symbols) - 1

    def encode(self, tokens: Sequence[str]) -> tuple[int, ...]:
        try:
            ids = tuple(self._index[t] for t in tokens)
        except KeyError as exc:
            raise DataError(f"unknown gloss {exc.args[0]!r}") from None
        if BLANK in ids:
            raise DataError("targets may not contain the blank")
        return ids

    def decode(self, ids: Sequence[int]) -> tuple[str, ...]:
        return tuple(self.symbols[i] for i in ids)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.symbols) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "GlossVocabulary":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"vocabulary file not found: {path}")
        lines = [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]
        if not lines or lines[0] != BLANK_SYMBOL:
            raise DataError(f"{path}: line 0 must be {BLANK_SYMBOL}")
        return cls(lines[1:])


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 1
    length_penalty_alpha: float = 0.0
    mode: str = "beam"

    def __post_init__(self):
        if self.mode not in ("greedy", "beam"):
            raise ConfigError(f"decode mode must be 'greedy' or 'beam', got {self.mode!r}")
        if not (isinstance(self.beam_size, (int, np.integer)) and 0 <= self.beam_size <= MAX_BEAM):
            raise ConfigError(f"beam_size must be an integer in [0, {MAX_BEAM}], got {self.beam_size}")
        if not 0.0 <= self.length_penalty_alpha <= MAX_ALPHA:
            raise ConfigError(f"length penalty alpha must be in [0, {MAX_ALPHA}], got {self.length_penalty_alpha}")


@dataclass(frozen=True)
class InfeasibleAlignment:
    """Returned instead of a loss when the target cannot fit in the available frames."""

    frames: int
    required: int
    value: float = float("inf")

    def item(self) -> float:
        return self.value


def required_frames(target: Sequence[int]) -> int:
    """Minimum T for a CTC alignment: L plus one blank between each adjacent repeat."""
    target = list(target)
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def _extended(target: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    ext = np.zeros(2 * len(target) + 1, dtype=int)
    ext[1::2] = target
    skip = np.zeros(len(ext), dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    return ext, skip


def _shift(a: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(a, -np.inf)
    if k < len(a):
        out[k:] = a[:len(a) - k]
    return out


def _shift_left(a: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(a, -np.inf)
    if k < len(a):
        out[:len(a) - k] = a[k:]
    return out


def _forward_backward(logp: np.ndarray, target: Sequence[int]):
    """Log-space alpha (emission at t included) and beta (emission at t excluded)."""
    T = logp.shape[0]
    ext, skip = _extended(target)
    S = len(ext)
    emit = logp[:, ext]  # T x S
    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    with np.errstate(invalid="ignore"):
        for t in range(1, T):
            prev = alpha[t - 1]
            acc = np.logaddexp(prev, _shift(prev, 1))
            acc = np.where(skip, np.logaddexp(acc, _shift(prev, 2)), acc)
            alpha[t] = acc + emit[t]
        beta = np.full((T, S), -np.inf)
        beta[T - 1, S - 1] = 0.0
        if S > 1:
            beta[T - 1, S - 2] = 0.0
        skip_next = np.zeros(S, dtype=bool)
        skip_next[:-2] = skip[2:]
        for t in range(T - 2, -1, -1):
            nxt = beta[t + 1] + emit[t + 1]
            acc = np.logaddexp(nxt, _shift_left(nxt, 1))
            two = _shift_left(nxt, 2)
            beta[t] = np.where(skip_next, np.logaddexp(acc, two), acc)
    log_total = alpha[T - 1, S - 1] if S == 1 else np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    return alpha, beta, float(log_total), ext


def ctc_log_likelihood(log_probs: np.ndarray, target: Sequence[int]) -> float:
    """log P(target | per-frame log-probabilities); -inf if infeasible."""
    if required_frames(target) > log_probs.shape[0]:
        return -np.inf
    return _forward_backward(log_probs, target)[2]


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def ctc_loss(logits: DiffArray, target: Sequence[int]) -> DiffArray | InfeasibleAlignment:
    """Negative log-likelihood of ``target`` summed over all blank-augmented alignments."""
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ContractError(f"logits must be T x (V+1) with T >= 1, got {logits.shape}")
    target = [int(t) for t in target]
    if any(t <= BLANK or t >= logits.shape[1] for t in target):
        raise DataError(f"target ids must be in 1..{logits.shape[1] - 1}")
    need = required_frames(target)
    T = logits.shape[0]
    if need > T:
        return InfeasibleAlignment(frames=T, required=need)
    logp = ops.log_softmax_lastdim(logits)
    alpha, beta, log_total, ext = _forward_backward(logp.data, target)
    if not np.isfinite(log_total):
        return InfeasibleAlignment(frames=T, required=need)
    occ = np.exp(alpha + beta - log_total)  # T x S, state occupancy
    gamma = np.zeros(logp.shape)
    np.add.at(gamma, (slice(None), ext), occ)

    # gradient is taken w.r.t. the log-probabilities; log_softmax handles the rest
    return ops.apply(np.array(-log_total), (logp,), lambda g: (-g * gamma,))


ENUMERATION_LIMITS = (8, 4)


def collapse(path: Sequence[int]) -> tuple[int, ...]:
    """Merge adjacent repeats, then drop blanks."""
    out = []
    prev = None
    for k in path:
        if k != prev and k != BLANK:
            out.append(int(k))
        prev = k
    return tuple(out)


def ctc_brute_force(logits, target: Sequence[int]) -> float:
    """-log of the summed probability of every frame path that collapses to ``target``."""
    x = logits.data if isinstance(logits, DiffArray) else np.asarray(logits, dtype=np.float64)
    T, C = x.shape
    if T > ENUMERATION_LIMITS[0] or C - 1 > ENUMERATION_LIMITS[1]:
        raise ContractError(f"enumeration refused for T={T}, V={C - 1} (limits T<=8, V<=4)")
    p = np.exp(_log_softmax(x))
    target = tuple(int(t) for t in target)
    total = 0.0
    for path in itertools.product(range(C), repeat=T):
        if collapse(path) == target:
            total += float(np.prod(p[np.arange(T), path]))
    return -np.log(total) if total > 0 else float("inf")


def _as_array(logits) -> np.ndarray:
    return logits.data if isinstance(logits, DiffArray) else np.asarray(logits, dtype=np.float64)


def _symbols(ids: tuple[int, ...], vocab: GlossVocabulary | None):
    return vocab.decode(ids) if vocab is not None else ids


def greedy_decode(logits, vocab: GlossVocabulary | None = None):
    """Best path: per-frame argmax (ties go to the lowest class), collapse, drop blanks.

    Returns class ids, or gloss symbols when ``vocab`` is given.
    """
    return _symbols(collapse(np.argmax(_as_array(logits), axis=-1)), vocab)


def length_penalty(length: int, alpha: float) -> float:
    return ((5.0 + length) / 6.0) ** alpha


def sequence_score(log_probs: np.ndarray, labels: Sequence[int], alpha: float) -> float:
    """Length-normalised CTC log-likelihood used to rank hypotheses."""
    return ctc_log_likelihood(log_probs, labels) / length_penalty(len(labels), alpha)


def _rank_key(item):
    labels, score = item
    return (-score, len(labels), labels)


def prefix_beam_search(log_probs: np.ndarray, beam_size: int) -> list[tuple[int, ...]]:
    """Surviving prefixes of a CTC prefix beam search, pruned by total probability."""
    T, C = log_probs.shape
    beams: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, -np.inf)}  # (ends blank, ends label)
    for t in range(T):
        lp = log_probs[t]
        nxt: dict[tuple[int, ...], list[float]] = {}

        def bump(prefix, idx, value):
            cur = nxt.setdefault(prefix, [-np.inf, -np.inf])
            cur[idx] = np.logaddexp(cur[idx], value)

        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            bump(prefix, 0, total + lp[BLANK])
            last = prefix[-1] if prefix else None
            for c in range(1, C):
                if c == last:
                    bump(prefix, 1, pnb + lp[c])
                    bump(prefix + (c,), 1, pb + lp[c])
                else:
                    bump(prefix + (c,), 1, total + lp[c])
        scored = sorted(((p, float(np.logaddexp(*v))) for p, v in nxt.items()), key=_rank_key)
        beams = {p: tuple(nxt[p]) for p, _ in scored[:beam_size]}
    return list(beams)


def beam_decode(logits, vocab: GlossVocabulary | None = None, cfg: DecodeConfig = DecodeConfig()):
    """Prefix beam search with GNMT-style length penalty ((5 + |Y|) / 6) ** alpha.

    ``beam_size`` 0 or 1 (or ``mode='greedy'``) is best-path greedy decoding.
    Final candidates are the surviving prefixes plus the greedy hypothesis, each
    rescored with its exact CTC log-likelihood divided by the length penalty.
    """
    if not isinstance(cfg, DecodeConfig):
        raise ConfigError("cfg must be a DecodeConfig")
    x = _as_array(logits)
    greedy = collapse(np.argmax(x, axis=-1))
    if cfg.mode == "greedy" or cfg.beam_size <= 1:
        return _symbols(greedy, vocab)
    logp = _log_softmax(x)
    candidates = set(prefix_beam_search(logp, cfg.beam_size)) | {greedy}
    scored = [(c, sequence_score(logp, c, cfg.length_penalty_alpha)) for c in candidates]
    best = min(scored, key=_rank_key)[0]
    return _symbols(best, vocab)


def decode(logits, cfg: DecodeConfig, vocab: GlossVocabulary | None = None):
    if cfg.mode == "greedy":
        return greedy_decode(logits, vocab)
    return beam_decode(logits, vocab, cfg)


def write_decodes(path: str | Path, rows: Sequence[tuple[str, Sequence[str]]]) -> None:
    """Line-delimited ``sequence_id<TAB>gloss tokens``."""
    Path(path).write_text("".join(f"{sid}\t{' '.join(toks)}\n" for sid, toks in rows))


def read_decodes(path: str | Path) -> dict[str, tuple[str, ...]]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        sid, _, toks = line.partition("\t")
        out[sid] = tuple(toks.split())
    return out
