"""Channel discriminability, signed-rank tests and accuracy-table aggregates."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .classifier import train_rlda, predict_many
from .epoching import LabeledDataset
from .layout import ChannelLayout, default_layout
from .study import StudyConfig, StudyReport, chance_threshold, run_study, significance_stars

BLOCK_COLUMNS = ("s1b2", "s1b3", "s2b1", "s2b2", "s2b3", "s2b4")
TRIALS_PER_BLOCK = 24
SUBSET = ("P1", "P2", "P3", "P4", "P6", "P8", "P9", "P10", "P12")
EXACT_MAX_N = 25
MIN_NONZERO = 5


# --- Fisher criterion per feature -------------------------------------------------


@dataclass(frozen=True)
class FisherComputation:
    between: np.ndarray  # S_b per feature
    within: np.ndarray  # S_w per feature
    ratio: np.ndarray  # S_b / S_w, inf where S_w = 0 < S_b, 0 where both vanish


def fisher_computation(data: LabeledDataset) -> FisherComputation:
    if data.N <= data.K:
        raise ValueError(f"Fisher criterion needs N > K (N={data.N}, K={data.K})")
    mu = data.X.mean(axis=0)
    between = np.zeros(data.d)
    within = np.zeros(data.d)
    for lab in data.classes:
        Xk = data.X[data.indices(lab)]
        mk = Xk.mean(axis=0)
        between += len(Xk) * (mk - mu) ** 2
        within += ((Xk - mk) ** 2).sum(axis=0)
    ratio = np.zeros(data.d)
    pos = within > 0
    ratio[pos] = between[pos] / within[pos]
    ratio[~pos & (between > 0)] = np.inf
    return FisherComputation(between, within, ratio)


def scatter_matrices(data: LabeledDataset) -> tuple[np.ndarray, np.ndarray]:
    """Full (S_w, S_b) for diagnostics; S_w equals (N - K) times the pooled covariance."""
    mu = data.X.mean(axis=0)
    sw = np.zeros((data.d, data.d))
    sb = np.zeros((data.d, data.d))
    for lab in data.classes:
        Xk = data.X[data.indices(lab)]
        mk = Xk.mean(axis=0)
        dev = Xk - mk
        sw += dev.T @ dev
        sb += len(Xk) * np.outer(mk - mu, mk - mu)
    return sw, sb


def rank_scores(scores: Sequence[float]) -> np.ndarray:
    """1-based ranks, highest score first (inf before finite), ties by channel order."""
    scores = np.asarray(scores, dtype=float)
    order = sorted(range(len(scores)), key=lambda j: (-scores[j], j))
    ranks = np.empty(len(scores), dtype=int)
    ranks[order] = np.arange(1, len(scores) + 1)
    return ranks


@dataclass(frozen=True)
class ChannelScoreMap:
    scores: np.ndarray
    ranks: np.ndarray
    layout: ChannelLayout
    spread: np.ndarray | None = None  # std across participants when averaged

    def top(self, n: int = 3) -> list[int]:
        return [int(j) + 1 for j in np.argsort(self.ranks)[:n]]

    COLUMNS = ("channel", "grid", "row", "col", "ten20_label", "fisher_score", "rank", "fisher_std")

    def rows(self) -> list[list]:
        out = []
        for j, ch in enumerate(self.layout.channels):
            spread = "" if self.spread is None else float(self.spread[j])
            out.append([ch.id, ch.grid, ch.row, ch.col, ch.ten20_label, float(self.scores[j]),
                        int(self.ranks[j]), spread])
        return out


def fisher_scores(data: LabeledDataset, layout: ChannelLayout | None = None) -> ChannelScoreMap:
    layout = layout or default_layout()
    if data.d != len(layout):
        raise ValueError(f"{data.d} features but layout has {len(layout)} channels")
    ratio = fisher_computation(data).ratio
    return ChannelScoreMap(ratio, rank_scores(ratio), layout)


def fisher_map_across(datasets: Sequence[LabeledDataset], layout: ChannelLayout | None = None) -> ChannelScoreMap:
    """Average per-channel Fisher score over participants, with the sample std."""
    layout = layout or default_layout()
    per = np.array([fisher_scores(d, layout).scores for d in datasets])
    mean = per.mean(axis=0)
    spread = per.std(axis=0, ddof=1) if len(per) > 1 else None
    return ChannelScoreMap(mean, rank_scores(mean), layout, spread)


# --- Wilcoxon signed-rank ----------------------------------------------------------


@dataclass(frozen=True)
class WilcoxonResult:
    n: int  # nonzero differences used
    statistic: float  # sum of ranks of positive differences
    p_value: float  # two-sided
    method: str  # "exact" or "normal"
    n_zero: int = 0

    def to_dict(self) -> dict:
        return {"n": self.n, "statistic": self.statistic, "p_value": self.p_value,
                "method": self.method, "n_zero": self.n_zero}


def _signed_ranks(diffs: Sequence[float], decimals: int):
    d = np.round(np.asarray(diffs, dtype=float), decimals)
    nonzero = d[d != 0]
    ranks = stats.rankdata(np.abs(nonzero))  # midranks for ties
    return nonzero, ranks, int(np.sum(d == 0))


def signed_rank_null_counts(doubled_ranks: Sequence[int]) -> np.ndarray:
    """counts[s] = number of sign assignments whose doubled positive-rank sum is s.

    Equivalent to enumerating all 2^n assignments; built incrementally over
    ranks so n up to 25 stays cheap.
    """
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled_ranks:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(pairs: Iterable[tuple[float, float]], decimals: int = 9,
                         exact_max_n: int = EXACT_MAX_N) -> WilcoxonResult:
    """Two-sided signed-rank test on differences a - b.

    Zero differences are dropped and tied magnitudes get midranks; differences
    are rounded to ``decimals`` places first so values that differ only by
    floating-point noise tie. Exact null distribution for n <= ``exact_max_n``,
    otherwise normal approximation with tie-corrected variance and continuity
    correction.
    """
    pairs = list(pairs)
    diffs = [float(a) - float(b) for a, b in pairs]
    d, ranks, n_zero = _signed_ranks(diffs, decimals)
    n = len(d)
    if n < MIN_NONZERO:
        raise ValueError(f"need at least {MIN_NONZERO} nonzero differences, got {n}")
    w_plus = float(ranks[d > 0].sum())
    if n <= exact_max_n:
        doubled = np.rint(2 * ranks).astype(int)
        counts = signed_rank_null_counts(doubled)
        total2 = int(doubled.sum())
        w2 = int(doubled[d > 0].sum())
        dev = abs(2 * w2 - total2)  # 2 * |W - mean| in doubled units
        s = np.arange(total2 + 1)
        extreme = int(counts[np.abs(2 * s - total2) >= dev].sum())
        p = extreme / 2**n
        return WilcoxonResult(n, w_plus, min(1.0, p), "exact", n_zero)
    mean = n * (n + 1) / 4
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24 - float(np.sum(tie_counts**3 - tie_counts)) / 48
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    return WilcoxonResult(n, w_plus, min(1.0, 2 * float(stats.norm.sf(z))), "normal", n_zero)


# --- Table 1 -----------------------------------------------------------------------


@dataclass(frozen=True)
class AccuracyTable:
    participants: tuple[str, ...]
    values: np.ndarray  # percent, participants x blocks
    printed_stars: tuple[tuple[str, ...], ...] = ()
    printed_last3: np.ndarray | None = None
    printed_last3_stars: tuple[str, ...] = ()

    def subset(self, names: Sequence[str]) -> "AccuracyTable":
        idx = [self.participants.index(n) for n in names]
        return AccuracyTable(
            tuple(names),
            self.values[idx],
            tuple(self.printed_stars[i] for i in idx) if self.printed_stars else (),
            None if self.printed_last3 is None else self.printed_last3[idx],
            tuple(self.printed_last3_stars[i] for i in idx) if self.printed_last3_stars else (),
        )


def _split_cell(cell: str) -> tuple[float, str]:
    stripped = cell.rstrip("*")
    return float(stripped), cell[len(stripped):]


def load_table1() -> AccuracyTable:
    text = resources.files("nirs_speech.data").joinpath("table1.csv").read_text("utf-8")
    rows = list(csv.DictReader(io.StringIO(text)))
    parsed = [[_split_cell(r[c]) for c in BLOCK_COLUMNS] for r in rows]
    last3 = [_split_cell(r["last3"]) for r in rows]
    return AccuracyTable(
        participants=tuple(r["participant"] for r in rows),
        values=np.array([[v for v, _ in row] for row in parsed]),
        printed_stars=tuple(tuple(s for _, s in row) for row in parsed),
        printed_last3=np.array([v for v, _ in last3]),
        printed_last3_stars=tuple(s for _, s in last3),
    )


def load_table1_summary() -> dict[tuple[str, str], tuple[float, float]]:
    text = resources.files("nirs_speech.data").joinpath("table1_summary.csv").read_text("utf-8")
    return {(r["group"], r["column"]): (float(r["mean"]), float(r["std"])) for r in csv.DictReader(io.StringIO(text))}


@dataclass(frozen=True)
class AggregateTable:
    block_means: np.ndarray
    block_stds: np.ndarray | None  # None for a single row
    last3: np.ndarray  # per participant
    last3_mean: float
    last3_std: float | None  # sample std over every participant x block value of the last three blocks
    block_stars: tuple[tuple[str, ...], ...]
    last3_stars: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "block_means": self.block_means.tolist(),
            "block_stds": None if self.block_stds is None else self.block_stds.tolist(),
            "last3": self.last3.tolist(),
            "last3_mean": self.last3_mean,
            "last3_std": self.last3_std,
            "block_stars": [list(r) for r in self.block_stars],
            "last3_stars": list(self.last3_stars),
        }


def aggregate_table(values, trials_per_block: int = TRIALS_PER_BLOCK, method: str = "normal") -> AggregateTable:
    """Column means +- sample std, last-three-block averages and significance stars.

    ``values`` holds accuracies in percent, one row per participant. The
    last-three summary std pools all participant x block values of those
    blocks, which is how the published column was computed.
    """
    rows = [list(r) for r in values]
    if not rows or any(len(r) != len(rows[0]) for r in rows):
        raise ValueError("accuracy table must be rectangular and non-empty")
    v = np.array(rows, dtype=float)
    if v.shape[1] < 3:
        raise ValueError("need at least three blocks per participant")
    tail = v[:, -3:]
    last3 = tail.mean(axis=1)
    single = v.shape[0] == 1
    pooled = tail.reshape(-1)
    return AggregateTable(
        block_means=v.mean(axis=0),
        block_stds=None if single else v.std(axis=0, ddof=1),
        last3=last3,
        last3_mean=float(pooled.mean()),
        last3_std=float(pooled.std(ddof=1)) if pooled.size > 1 else None,
        block_stars=tuple(tuple(significance_stars(x / 100, trials_per_block, method) for x in r) for r in v),
        last3_stars=tuple(significance_stars(x / 100, 3 * trials_per_block, method) for x in last3),
    )


@dataclass(frozen=True)
class Check:
    name: str
    printed: object
    computed: object
    passed: bool
    asserted: bool = True


def check_table1(tolerance: float = 0.1) -> list[Check]:
    """Recompute every aggregate of the bundled table and compare with the printed numbers."""
    table = load_table1()
    summary = load_table1_summary()
    checks: list[Check] = []
    full = aggregate_table(table.values)
    for i, p in enumerate(table.participants):
        printed = float(table.printed_last3[i])
        got = float(full.last3[i])
        checks.append(Check(f"{p} last3", printed, round(got, 2), abs(got - printed) <= tolerance))
    for group, tbl in (("all", table), ("subset", table.subset(SUBSET))):
        agg = aggregate_table(tbl.values)
        cols = list(zip(BLOCK_COLUMNS, agg.block_means, agg.block_stds)) + [("last3", agg.last3_mean, agg.last3_std)]
        for col, mean, std in cols:
            pm, ps = summary[(group, col)]
            checks.append(Check(f"{group} {col} mean", pm, round(float(mean), 2), abs(mean - pm) <= tolerance))
            checks.append(Check(f"{group} {col} std", ps, round(float(std), 2), abs(std - ps) <= tolerance))
    for i, p in enumerate(table.participants):
        got = full.last3_stars[i]
        checks.append(Check(f"{p} last3 stars", table.printed_last3_stars[i], got, got == table.printed_last3_stars[i]))
    for i, p in enumerate(table.participants):
        for j, col in enumerate(BLOCK_COLUMNS):
            got = full.block_stars[i][j]
            want = table.printed_stars[i][j]
            checks.append(Check(f"{p} {col} stars", want, got, got == want, asserted=False))
    w = wilcoxon_signed_rank(zip(table.values[:, -1], table.values[:, 0]))
    checks.append(Check("wilcoxon S1-B2 vs S2-B4 p", 0.022, round(w.p_value, 6), 0.015 <= w.p_value <= 0.035))
    return checks


# --- Regularization retrospective -------------------------------------------------


@dataclass(frozen=True)
class RegularizationComparison:
    blocks: tuple[str, ...]  # online block tags
    tuned: np.ndarray  # participants x online blocks, fraction correct
    unregularized: np.ndarray
    gammas: np.ndarray
    pooled: WilcoxonResult | None
    per_block: tuple[WilcoxonResult | None, ...]
    notes: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "blocks": list(self.blocks),
            "tuned": self.tuned.tolist(),
            "unregularized": self.unregularized.tolist(),
            "gammas": self.gammas.tolist(),
            "tuned_mean": self.tuned.mean(axis=0).tolist(),
            "unregularized_mean": self.unregularized.mean(axis=0).tolist(),
            "pooled_wilcoxon": None if self.pooled is None else self.pooled.to_dict(),
            "per_block_wilcoxon": [None if w is None else w.to_dict() for w in self.per_block],
            "notes": list(self.notes),
        }


def _replay(report: StudyReport) -> tuple[list[str], list[float], list[float], list[float]]:
    tags, tuned, plain, gammas = [], [], [], []
    cumulative = None
    for result, data in zip(report.blocks, report.block_data):
        if result.mode == "online":
            model = train_rlda(cumulative, result.gamma_used, report.config["loading"])
            zero = train_rlda(cumulative, 0.0, report.config["loading"])
            truth = np.array(data.y)
            tags.append(result.tag)
            tuned.append(float(np.mean(np.array(predict_many(model, data.X)) == truth)))
            plain.append(float(np.mean(np.array(predict_many(zero, data.X)) == truth)))
            gammas.append(result.gamma_used)
        cumulative = data if cumulative is None else cumulative.concat(data)
    return tags, tuned, plain, gammas


def _try_wilcoxon(a, b, label: str, notes: list[str]) -> WilcoxonResult | None:
    try:
        return wilcoxon_signed_rank(zip(a, b))
    except ValueError as exc:
        notes.append(f"{label}: {exc}")
        return None


def regularization_comparison(studies: Sequence[StudyReport | StudyConfig]) -> RegularizationComparison:
    """Replay each online block with the tuned gamma and with gamma = 0 on identical training data."""
    reports = [s if isinstance(s, StudyReport) else run_study(s) for s in studies]
    if not reports:
        raise ValueError("no studies to compare")
    replays = [_replay(r) for r in reports]
    tags = replays[0][0]
    if any(rp[0] != tags for rp in replays):
        raise ValueError("studies do not share the same online block structure")
    tuned = np.array([rp[1] for rp in replays])
    plain = np.array([rp[2] for rp in replays])
    gammas = np.array([rp[3] for rp in replays])
    notes: list[str] = []
    pooled = _try_wilcoxon(tuned.reshape(-1), plain.reshape(-1), "pooled", notes)
    per_block = tuple(_try_wilcoxon(tuned[:, j], plain[:, j], tags[j], notes) for j in range(len(tags)))
    return RegularizationComparison(tuple(tags), tuned, plain, gammas, pooled, per_block, tuple(notes))


def study_accuracy_table(reports: Sequence[StudyReport]) -> np.ndarray:
    """Participants x online blocks accuracy matrix in percent."""
    return np.array([[100 * b.accuracy for b in r.online] for r in reports])


def threshold_discrepancies(checks: Sequence[Check]) -> list[Check]:
    return [c for c in checks if not c.asserted and not c.passed]


__all__ = [
    "AccuracyTable",
    "AggregateTable",
    "ChannelScoreMap",
    "Check",
    "FisherComputation",
    "RegularizationComparison",
    "WilcoxonResult",
    "aggregate_table",
    "chance_threshold",
    "check_table1",
    "fisher_computation",
    "fisher_map_across",
    "fisher_scores",
    "load_table1",
    "rank_scores",
    "regularization_comparison",
    "signed_rank_null_counts",
    "study_accuracy_table",
    "wilcoxon_signed_rank",
]
