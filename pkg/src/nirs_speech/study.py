"""Two-session, seven-block online protocol with cumulative retraining."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from . import _io
from .classifier import DEFAULT_LOADING, RldaModel, decision_scores, train_rlda
from .epoching import LABELS, Event, LabeledDataset, ProtocolTiming, epochs_to_dataset, read_events, segment_trials
from .layout import ChannelLayout, load_layout
from .optics import (
    ExtinctionTable,
    FilterRealization,
    FilterSpec,
    OpticalRecording,
    apply_filter,
    design_lowpass,
    filter_report,
    load_extinction,
    mbll_invert,
    optical_density,
)
from .synth import generate_block, load_scenario
from .tuner import GammaConstraints, TuneOutcome, select_gamma

ALPHAS = (0.05, 0.01, 0.001)
THRESHOLD_METHODS = ("normal", "exact")
CHANCE = 1.0 / 3.0
_KEY_SCHEDULE = 0


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class BlockPlan:
    session: int
    block: int
    mode: str  # "offline" | "online"
    trials_per_class: int
    labels: tuple[str, ...]

    @property
    def n_trials(self) -> int:
        return len(self.labels)

    @property
    def tag(self) -> str:
        return f"S{self.session}-B{self.block}"


# (session, block, mode, trials per class)
PROTOCOL = (
    (1, 1, "offline", 12),
    (1, 2, "online", 8),
    (1, 3, "online", 8),
    (2, 1, "online", 8),
    (2, 2, "online", 8),
    (2, 3, "online", 8),
    (2, 4, "online", 8),
)


def make_schedule(seed: int) -> list[BlockPlan]:
    """Seeded pseudorandom trial order for every block of the protocol."""
    plans = []
    for session, block, mode, per_class in PROTOCOL:
        rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(_KEY_SCHEDULE, session, block)))
        labels = np.repeat(np.array(LABELS), per_class)
        plans.append(BlockPlan(session, block, mode, per_class, tuple(str(v) for v in rng.permutation(labels))))
    return plans


def chance_threshold(n_trials: int, alpha: float, method: str = "normal") -> float:
    """Accuracy that must be exceeded to beat 3-class chance at level ``alpha``.

    ``normal``: one-sided normal approximation 1/3 + z(1 - alpha) sqrt(2/9 / n).
    ``exact``: q / n with q the (1 - alpha) quantile of Binomial(n, 1/3), so
    P(correct > q) <= alpha.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if method == "normal":
        return CHANCE + float(stats.norm.ppf(1.0 - alpha)) * math.sqrt(CHANCE * (1 - CHANCE) / n_trials)
    if method == "exact":
        q = next(k for k in range(n_trials + 1) if stats.binom.sf(k, n_trials, CHANCE) <= alpha)
        return q / n_trials
    raise ValueError(f"unknown threshold method {method!r}")


def significance_stars(accuracy: float, n_trials: int, method: str = "normal") -> str:
    return "*" * sum(accuracy > chance_threshold(n_trials, a, method) for a in ALPHAS)


def threshold_table(n_trials: int) -> dict[str, dict[str, float]]:
    return {m: {str(a): chance_threshold(n_trials, a, m) for a in ALPHAS} for m in THRESHOLD_METHODS}


def preprocess_block(
    recording: OpticalRecording,
    events: Sequence[Event],
    table: ExtinctionTable,
    filt: FilterRealization,
    timing: ProtocolTiming = ProtocolTiming(),
    n_channels: int = 44,
) -> LabeledDataset:
    """Intensities -> [HbO] -> causal low-pass -> epochs -> baseline-corrected mean features."""
    hemo = mbll_invert(optical_density(recording), table, recording.sample_rate_hz)
    filtered = apply_filter(filt, hemo, n_channels)
    epochs = segment_trials(filtered, events, timing)
    return epochs_to_dataset(epochs, timing.baseline_tail_samples)


@dataclass
class StudyConfig:
    scenario: str = "realistic"
    seed: int = 0
    loading: float = DEFAULT_LOADING
    threshold_method: str = "normal"
    extinction_table: str | None = None
    layout: str | None = None
    input_dir: str | None = None

    def validate(self) -> None:
        if self.threshold_method not in THRESHOLD_METHODS:
            raise ValueError(f"threshold_method must be one of {THRESHOLD_METHODS}")
        if self.loading < 0:
            raise ValueError("loading must be non-negative")
        for name in ("extinction_table", "layout", "input_dir"):
            value = getattr(self, name)
            if value is not None and not Path(value).exists():
                raise FileNotFoundError(f"{name} path does not exist: {value}")

    @classmethod
    def from_file(cls, path: str | Path) -> "StudyConfig":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        unknown = set(payload) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**payload)


class SyntheticSource:
    """Feature data generated block by block from a scenario."""

    def __init__(self, scenario, seed: int, table: ExtinctionTable, filt: FilterRealization,
                 timing: ProtocolTiming = ProtocolTiming()):
        self.scenario = load_scenario(scenario) if isinstance(scenario, (str, Path)) else scenario
        self.seed = int(seed)
        self.table = table
        self.filt = filt
        self.timing = timing
        self.schedule = make_schedule(self.seed)

    def describe(self) -> dict:
        return {"kind": "synthetic", "scenario": self.scenario.to_dict(), "seed": self.seed}

    def block_data(self, plan: BlockPlan) -> LabeledDataset:
        blk = generate_block(plan, self.scenario, self.seed, self.timing, self.table)
        return preprocess_block(blk.recording, blk.events, self.table, self.filt, self.timing)


def recording_filename(session: int, block: int) -> str:
    return f"recording_s{session}b{block}.csv"


class RecordedSource:
    """Recordings on disk: ``events.csv`` plus one ``recording_s{S}b{B}.csv`` per block."""

    def __init__(self, directory: str | Path, table: ExtinctionTable, filt: FilterRealization,
                 timing: ProtocolTiming = ProtocolTiming()):
        self.directory = Path(directory)
        self.table = table
        self.filt = filt
        self.timing = timing
        self.events = read_events(self.directory / "events.csv")
        groups: dict[tuple[int, int], list[Event]] = {}
        for ev in self.events:
            groups.setdefault((ev.session, ev.block), []).append(ev)
        self._groups = groups
        self.schedule = []
        for i, ((session, block), evs) in enumerate(groups.items()):
            labels = tuple(ev.label for ev in evs)
            per_class = max(labels.count(lab) for lab in LABELS)
            self.schedule.append(BlockPlan(session, block, "offline" if i == 0 else "online", per_class, labels))

    def describe(self) -> dict:
        return {"kind": "recorded", "directory": self.directory.name}

    def block_data(self, plan: BlockPlan) -> LabeledDataset:
        rec = OpticalRecording.read_csv(self.directory / recording_filename(plan.session, plan.block),
                                        self.timing.sample_rate_hz)
        return preprocess_block(rec, self._groups[(plan.session, plan.block)], self.table, self.filt, self.timing)


@dataclass(frozen=True)
class TrialOutcome:
    trial: int
    true_label: str
    predicted: str
    scores: dict[str, float]

    @property
    def correct(self) -> bool:
        return self.true_label == self.predicted


@dataclass(frozen=True)
class BlockResult:
    session: int
    block: int
    mode: str
    n_trials: int
    gamma_used: float | None
    gamma_selected: float
    tune: TuneOutcome
    trials: tuple[TrialOutcome, ...] = ()
    accuracy: float | None = None
    stars: str = ""
    stars_exact: str = ""

    @property
    def tag(self) -> str:
        return f"S{self.session}-B{self.block}"

    def to_dict(self) -> dict:
        return {
            "session": self.session,
            "block": self.block,
            "tag": self.tag,
            "mode": self.mode,
            "n_trials": self.n_trials,
            "accuracy": self.accuracy,
            "accuracy_pct_display": None if self.accuracy is None else round(100 * self.accuracy, 1),
            "gamma": self.gamma_used,
            "gamma_selected": self.gamma_selected,
            "stars": self.stars,
            "stars_exact": self.stars_exact,
            "thresholds": threshold_table(self.n_trials) if self.mode == "online" else None,
            "tune": self.tune.to_dict(),
            "trials": [
                {"trial": t.trial, "true": t.true_label, "predicted": t.predicted, "scores": t.scores}
                for t in self.trials
            ],
        }


@dataclass(frozen=True)
class StudyState:
    dataset: LabeledDataset | None = None
    model: RldaModel | None = None
    # (session the model serves, gamma) for every training so far
    gamma_history: tuple[tuple[int, float], ...] = ()
    results: tuple[BlockResult, ...] = ()


def constraints_for(state: StudyState, target_session: int) -> GammaConstraints:
    """Gamma bounds for a training whose model will serve ``target_session``."""
    same = [g for s, g in state.gamma_history if s == target_session]
    if same:
        return GammaConstraints(target_session, False, same[-1])
    if target_session == 2:
        return GammaConstraints(target_session, True, None)
    return GammaConstraints(target_session, False, None)


def run_block(
    state: StudyState,
    plan: BlockPlan,
    data: LabeledDataset,
    *,
    next_session: int | None = None,
    loading: float = DEFAULT_LOADING,
) -> tuple[StudyState, BlockResult]:
    """Predict an online block with the pre-block model, then append, tune and retrain."""
    if data.y != plan.labels:
        raise ProtocolError(f"{plan.tag}: epoch labels do not match the block plan")
    trials: list[TrialOutcome] = []
    accuracy = None
    stars = stars_exact = ""
    gamma_used = None
    if plan.mode == "online":
        if state.model is None:
            raise ProtocolError(f"{plan.tag}: online block needs a trained model")
        scores = decision_scores(state.model, data.X)
        for i, (row, true) in enumerate(zip(scores, data.y)):
            pred = state.model.classes[int(np.argmax(row))]
            trials.append(TrialOutcome(i + 1, true, pred, {c: float(s) for c, s in zip(state.model.classes, row)}))
        accuracy = sum(t.correct for t in trials) / len(trials)
        stars = significance_stars(accuracy, len(trials), "normal")
        stars_exact = significance_stars(accuracy, len(trials), "exact")
        gamma_used = state.model.gamma
    elif plan.mode != "offline":
        raise ProtocolError(f"{plan.tag}: unknown block mode {plan.mode!r}")

    dataset = data if state.dataset is None else state.dataset.concat(data)
    target = plan.session if next_session is None else next_session
    constraints = constraints_for(state, target)
    try:
        outcome = select_gamma(dataset, constraints, loading)
        model = train_rlda(dataset, outcome.gamma, loading)
    except ValueError as exc:
        raise ProtocolError(f"{plan.tag}: retraining failed: {exc}") from exc
    result = BlockResult(plan.session, plan.block, plan.mode, plan.n_trials, gamma_used, outcome.gamma, outcome,
                         tuple(trials), accuracy, stars, stars_exact)
    new_state = StudyState(dataset, model, state.gamma_history + ((target, outcome.gamma),),
                           state.results + (result,))
    return new_state, result


@dataclass(frozen=True)
class StudyReport:
    config: dict
    source: dict
    extinction_table: dict
    filter: dict
    blocks: tuple[BlockResult, ...]
    block_data: tuple[LabeledDataset, ...] = field(default=(), repr=False, compare=False)
    final_state: StudyState | None = field(default=None, repr=False, compare=False)

    @property
    def online(self) -> list[BlockResult]:
        return [b for b in self.blocks if b.mode == "online"]

    def gamma_trace(self) -> list[dict]:
        return [{"after": b.tag, "gamma": b.gamma_selected, "bounds": list(b.tune.grid.bounds)} for b in self.blocks]

    def aggregate(self, threshold_method: str = "normal") -> dict:
        online = self.online
        if not online:
            return {}
        correct = sum(t.correct for b in online for t in b.trials)
        total = sum(len(b.trials) for b in online)
        last3 = online[-3:]
        n3 = sum(len(b.trials) for b in last3)
        acc3 = sum(t.correct for b in last3 for t in b.trials) / n3
        return {
            "online_trials": total,
            "online_accuracy": correct / total,
            "first_online_accuracy": online[0].accuracy,
            "last_block_accuracy": online[-1].accuracy,
            "last3_accuracy": acc3,
            "last3_trials": n3,
            "last3_stars": significance_stars(acc3, n3, threshold_method),
            "last3_stars_normal": significance_stars(acc3, n3, "normal"),
            "last3_stars_exact": significance_stars(acc3, n3, "exact"),
            "last3_thresholds": threshold_table(n3),
        }

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "source": self.source,
            "extinction_table": self.extinction_table,
            "filter": self.filter,
            "blocks": [b.to_dict() for b in self.blocks],
            "gamma_trace": self.gamma_trace(),
            "aggregate": self.aggregate(self.config.get("threshold_method", "normal")),
        }

    def trial_rows(self) -> list[list]:
        rows = []
        for b in self.online:
            for t in b.trials:
                rows.append([b.session, b.block, t.trial, t.true_label, t.predicted, int(t.correct), b.gamma_used]
                            + [t.scores.get(lab, float("nan")) for lab in LABELS])
        return rows

    TRIAL_COLUMNS = ("session", "block", "trial", "true", "predicted", "correct", "gamma",
                     "score_yes", "score_no", "score_rest")

    def write(self, out_dir: str | Path, stem: str = "report") -> list[Path]:
        out_dir = Path(out_dir)
        return [
            _io.write_json(out_dir / f"{stem}.json", self.to_dict()),
            _io.write_csv(out_dir / f"{stem}_trials.csv", self.TRIAL_COLUMNS, self.trial_rows()),
        ]


def build_source(config: StudyConfig, table: ExtinctionTable, filt: FilterRealization,
                 timing: ProtocolTiming = ProtocolTiming()):
    if config.input_dir:
        return RecordedSource(config.input_dir, table, filt, timing)
    return SyntheticSource(config.scenario, config.seed, table, filt, timing)


def run_study(config: StudyConfig, source=None, timing: ProtocolTiming = ProtocolTiming(),
              on_block: Callable[[BlockResult], None] | None = None) -> StudyReport:
    """Execute every block of the source's schedule in order."""
    config.validate()
    table = load_extinction(config.extinction_table)
    layout: ChannelLayout = load_layout(config.layout)
    filt = design_lowpass(FilterSpec(sample_rate_hz=timing.sample_rate_hz))
    if source is None:
        source = build_source(config, table, filt, timing)
    schedule = list(source.schedule)
    if not schedule or schedule[0].mode != "offline":
        raise ProtocolError("a study must start with an offline block")

    state = StudyState()
    datas = []
    for i, plan in enumerate(schedule):
        try:
            data = source.block_data(plan)
        except ValueError as exc:
            raise ProtocolError(f"{plan.tag}: could not build block features: {exc}") from exc
        if data.d != len(layout):
            raise ProtocolError(f"{plan.tag}: {data.d} features but layout has {len(layout)} channels")
        next_session = schedule[i + 1].session if i + 1 < len(schedule) else None
        state, result = run_block(state, plan, data, next_session=next_session, loading=config.loading)
        datas.append(data)
        if on_block:
            on_block(result)

    _, fsummary = filter_report(filt)
    return StudyReport(
        config=asdict(config),
        source=source.describe(),
        extinction_table=table.to_dict(),
        filter={k: v for k, v in fsummary.items()},
        blocks=state.results,
        block_data=tuple(datas),
        final_state=state,
    )
