"""Word error rate with substitution/deletion/insertion attribution, and run reports."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Hashable, Iterable, Sequence

from .ctc import DecodeConfig, decode
from .errors import ConfigError, DataError

DENOMINATORS = ("reference", "hypothesis")


@dataclass(frozen=True)
class ErrorBreakdown:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    reference_length: int = 0
    hypothesis_length: int = 0
    denominator: str = "reference"

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def _den(self) -> int:
        return self.reference_length if self.denominator == "reference" else self.hypothesis_length

    def rate(self, count: int) -> float:
        """``100 * count / denominator``; an empty denominator gives 0 for 0 and inf otherwise."""
        if self._den == 0:
            return 0.0 if count == 0 else math.inf
        return 100.0 * count / self._den

    @property
    def wer(self) -> float:
        return self.rate(self.errors)

    def __add__(self, other: "ErrorBreakdown") -> "ErrorBreakdown":
        if self.denominator != other.denominator:
            raise ConfigError("cannot pool breakdowns with different denominators")
        return ErrorBreakdown(self.substitutions + other.substitutions, self.deletions + other.deletions,
                              self.insertions + other.insertions, self.reference_length + other.reference_length,
                              self.hypothesis_length + other.hypothesis_length, self.denominator)

    def as_record(self) -> dict:
        return {"wer": round(self.wer, 2), "sub": round(self.rate(self.substitutions), 2),
                "del": round(self.rate(self.deletions), 2), "ins": round(self.rate(self.insertions), 2),
                "S": self.substitutions, "D": self.deletions, "I": self.insertions,
                "ref_len": self.reference_length, "hyp_len": self.hypothesis_length}


def align_sequences(ref: Sequence[Hashable], hyp: Sequence[Hashable], denominator: str = "reference") -> ErrorBreakdown:
    """Unit-cost Levenshtein alignment.

    Among minimum-edit alignments the one with most substitutions wins, which
    fixes (S, D, I) uniquely since D - I = len(ref) - len(hyp).
    """
    if denominator not in DENOMINATORS:
        raise ConfigError(f"denominator must be one of {DENOMINATORS}, got {denominator!r}")
    n, m = len(ref), len(hyp)
    # cell = (edits, -substitutions, deletions, insertions)
    prev = [(j, 0, 0, j) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, i, 0)]
        for j in range(1, m + 1):
            d = prev[j - 1]
            if ref[i - 1] == hyp[j - 1]:
                diag = d
            else:
                diag = (d[0] + 1, d[1] - 1, d[2], d[3])
            up = prev[j]
            left = cur[j - 1]
            cur.append(min(diag, (up[0] + 1, up[1], up[2] + 1, up[3]), (left[0] + 1, left[1], left[2], left[3] + 1)))
        prev = cur
    _, neg_s, dels, ins = prev[m]
    return ErrorBreakdown(-neg_s, dels, ins, n, m, denominator)


def corpus_wer(pairs: Iterable[tuple[Sequence, Sequence]], denominator: str = "reference") -> ErrorBreakdown:
    """Pool edit counts over the corpus, then divide once."""
    total = None
    for ref, hyp in pairs:
        b = align_sequences(ref, hyp, denominator)
        total = b if total is None else total + b
    if total is None:
        raise DataError("corpus_wer needs at least one (ref, hyp) pair")
    return total


def format_table(rows: Sequence[tuple[str, ErrorBreakdown]], title: str = "") -> str:
    """Plain-text table, percentages to 2 decimals."""
    head = f"{'split':<10}{'WER':>8}{'sub':>8}{'del':>8}{'ins':>8}{'ref':>7}"
    lines = ([title] if title else []) + [head, "-" * len(head)]
    for name, b in rows:
        lines.append(f"{name:<10}{b.wer:>8.2f}{b.rate(b.substitutions):>8.2f}{b.rate(b.deletions):>8.2f}"
                     f"{b.rate(b.insertions):>8.2f}{b.reference_length:>7d}")
    return "\n".join(lines) + "\n"


def json_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


# --- run evaluation with decode-parameter search ----------------------------------------

ALPHA_GRID = (0.0, 0.5, 1.0, 1.5, 2.0)
BEAM_GRID = tuple(range(11))


@dataclass(frozen=True)
class EvalItem:
    id: str
    reference: tuple
    log_probs: "object"        # T x (V+1) array of per-frame log-probabilities


@dataclass
class SplitResult:
    name: str
    breakdown: ErrorBreakdown
    hypotheses: dict


@dataclass
class RunReport:
    alpha: float
    beam: int
    splits: list[SplitResult]
    grid: list[dict]

    def split(self, name: str) -> SplitResult:
        return next(s for s in self.splits if s.name == name)

    def table(self) -> str:
        title = f"decode: beam={self.beam} alpha={self.alpha:.1f} (selected on dev)"
        return format_table([(s.name, s.breakdown) for s in self.splits], title)

    def records(self) -> list[dict]:
        out = [{"kind": "grid", **g} for g in self.grid]
        for s in self.splits:
            out.append({"kind": "split", "split": s.name, "alpha": self.alpha, "beam": self.beam,
                        **s.breakdown.as_record()})
        return out


def _decode_split(items, cfg, vocab_decode, denominator):
    hyps = {it.id: tuple(decode(it.log_probs, cfg)) for it in items}
    b = corpus_wer([(it.reference, hyps[it.id]) for it in items], denominator)
    if vocab_decode is not None:
        hyps = {k: vocab_decode(v) for k, v in hyps.items()}
    return b, hyps


def evaluate_run(dev: Sequence[EvalItem], test: Sequence[EvalItem] = (), alphas: Sequence[float] = ALPHA_GRID,
                 beams: Sequence[int] = BEAM_GRID, denominator: str = "reference", vocab_decode=None) -> RunReport:
    """Pick (alpha, beam) with the lowest dev WER, then report dev and test with that setting.

    Ties go to the smaller beam, then the smaller alpha. Beams 0 and 1 are greedy,
    for which alpha is irrelevant, so they are decoded once.
    """
    if not dev:
        raise DataError("evaluate_run needs a non-empty dev split")
    grid, best, cache = [], None, {}
    for beam in sorted(set(beams)):
        for alpha in sorted(set(alphas)):
            key = ("greedy",) if beam <= 1 else (beam, alpha)
            if key not in cache:
                cache[key] = _decode_split(dev, DecodeConfig(beam, alpha), None, denominator)[0]
            wer = cache[key].wer
            grid.append({"alpha": alpha, "beam": beam, "dev_wer": round(wer, 2)})
            if best is None or wer < best[0]:
                best = (wer, alpha, beam)
    _, alpha, beam = best
    cfg = DecodeConfig(beam, alpha)
    splits = []
    for name, items in (("dev", dev), ("test", test)):
        if items:
            b, hyps = _decode_split(items, cfg, vocab_decode, denominator)
            splits.append(SplitResult(name, b, hyps))
    return RunReport(alpha, beam, splits, grid)
