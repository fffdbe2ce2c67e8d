"""Reliability, generality and locality of an edited system, and the perplexity suite."""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

from src.scenlab.editing.editor import EditedSystem
from src.scenlab.editing.records import EditSample

logger = logging.getLogger(__name__)

GENERALITY_REWRITES = 3


def normalize(text: str) -> str:
    """Collapse whitespace; answers are compared after this."""
    return " ".join(text.split())


@dataclass
class MetricResult:

    """
    One metric over one query set.

    :param value: percentage in ``[0, 100]``; 100 on an empty set.
    :param vacuous: the set was empty.
    :param excluded: samples left out (no rewrites).
    """

    value: float
    count: int
    hits: int
    vacuous: bool = False
    excluded: int = 0
    details: List[dict] = field(default_factory=list)


def _percent(hits: int, count: int) -> float:
    return 100.0 * hits / count if count else 100.0


def _detail(system: EditedSystem, kind: str, sample_id: str, prompt: str, expected: str, theta: Optional[float]) -> dict:
    generation = system.generate(prompt, theta)
    decision = generation.decision
    return {
        "set": kind,
        "id": sample_id,
        "prompt": prompt,
        "expected": normalize(expected),
        "answer": generation.answer,
        "correct": generation.answer == normalize(expected),
        "expert": -1 if decision.expert is None else decision.expert,
        "max_activation": float("nan") if decision.max_value is None else decision.max_value,
    }


def eval_reliability(system: EditedSystem, edits: Sequence[EditSample], theta: Optional[float] = None) -> MetricResult:
    """Share of edited prompts answered with their new target."""
    details = [_detail(system, "reliability", s.id, s.prompt, s.target, theta) for s in edits]
    hits = sum(d["correct"] for d in details)
    return MetricResult(value=_percent(hits, len(details)), count=len(details), hits=hits, vacuous=not details, details=details)


def eval_generality(system: EditedSystem, edits: Sequence[EditSample], theta: Optional[float] = None, n_rewrites: int = GENERALITY_REWRITES) -> MetricResult:
    """Share of rewrites (the first ``n_rewrites`` per edit) answered with the edit's target; edits without rewrites are excluded."""
    details = []
    excluded = 0
    for sample in edits:
        if not sample.rewrites:
            excluded += 1
            continue
        details.extend(_detail(system, "generality", sample.id, rewrite, sample.target, theta) for rewrite in sample.rewrites[:n_rewrites])
    hits = sum(d["correct"] for d in details)
    return MetricResult(value=_percent(hits, len(details)), count=len(details), hits=hits, vacuous=not details, excluded=excluded, details=details)


@dataclass
class LocalityResult(MetricResult):

    """Locality plus the share of locality queries no expert engaged on."""

    unrouted: float = 100.0


def eval_locality(system: EditedSystem, loc: Sequence[EditSample], theta: Optional[float] = None) -> LocalityResult:
    """
    Share of locality queries whose edited answer equals the base model's answer.

    Unrouted queries run the unchanged model and are preserved by construction.
    """
    details = []
    unrouted = 0
    for sample in loc:
        row = _detail(system, "locality", sample.id, sample.prompt, system.base_answer(sample.prompt), theta)
        unrouted += row["expert"] == -1
        details.append(row)
    hits = sum(d["correct"] for d in details)
    return LocalityResult(
        value=_percent(hits, len(details)),
        count=len(details),
        hits=hits,
        vacuous=not details,
        details=details,
        unrouted=_percent(unrouted, len(details)),
    )


@dataclass
class PplReport:

    """Mean perplexities of the passage sets, edited system and base model side by side."""

    edited: float
    edited_base: float
    accurate: float
    accurate_base: float
    unrelated: float
    unrelated_base: float
    skipped: int = 0

    @property
    def edited_reduction(self) -> float:
        """Relative perplexity drop on the edited set."""
        return 1.0 - self.edited / self.edited_base

    @property
    def unrelated_change(self) -> float:
        """Relative perplexity change on the unrelated set."""
        return abs(self.unrelated / self.unrelated_base - 1.0)


def _mean_ppl(system: EditedSystem, pairs: Sequence[Tuple[str, str]], theta: Optional[float], routed: bool) -> Tuple[float, int]:
    values = []
    skipped = 0
    for prompt, continuation in pairs:
        if not continuation.split():
            skipped += 1
            continue
        values.append(system.perplexity(prompt, continuation, theta=theta, routed=routed))
    return (sum(values) / len(values) if values else math.nan), skipped


def eval_ppl_suite(
    system: EditedSystem,
    edited: Sequence[Tuple[str, str]],
    accurate: Sequence[Tuple[str, str]],
    unrelated: Sequence[Tuple[str, str]],
    theta: Optional[float] = None,
) -> PplReport:
    """
    Perplexity of each set's continuations given their prompts.

    :param edited: (prompt, corrected continuation) pairs the edits installed.
    :param accurate: (prompt, continuation) pairs the base model already knew.
    :param unrelated: (prompt, continuation) pairs unrelated to any edit.
    """
    results = {}
    skipped = 0
    for name, pairs in (("edited", edited), ("accurate", accurate), ("unrelated", unrelated)):
        results[name], missing = _mean_ppl(system, pairs, theta, routed=True)
        results[f"{name}_base"], _ = _mean_ppl(system, pairs, theta, routed=False)
        skipped += missing
    if skipped:
        logger.warning("perplexity suite skipped %d empty continuations", skipped)
    return PplReport(skipped=skipped, **results)


@dataclass
class MetricsReport:

    """The three editing metrics, the optional perplexity suite and per-query detail."""

    reliability: MetricResult
    generality: MetricResult
    locality: LocalityResult
    theta: float
    ppl: Optional[PplReport] = None
    config: Dict = field(default_factory=dict)

    def summary(self) -> dict:
        """Aggregates without per-query detail."""
        out = {"theta": self.theta, "config": self.config}
        for name in ("reliability", "generality", "locality"):
            result = getattr(self, name)
            out[name] = result.value
            out[f"{name}_count"] = result.count
            out[f"{name}_vacuous"] = result.vacuous
        out["generality_excluded"] = self.generality.excluded
        out["unrouted"] = self.locality.unrouted
        if self.ppl is not None:
            out["ppl"] = asdict(self.ppl)
        return out

    def details_frame(self) -> pd.DataFrame:
        """Per-query rows of all three metrics."""
        rows = self.reliability.details + self.generality.details + self.locality.details
        columns = ["set", "id", "prompt", "expected", "answer", "correct", "expert", "max_activation"]
        return pd.DataFrame(rows, columns=columns)


def evaluate(
    system: EditedSystem,
    edits: Sequence[EditSample],
    loc: Sequence[EditSample],
    theta: Optional[float] = None,
    passages: Optional[Dict[str, Sequence[Tuple[str, str]]]] = None,
    config: Optional[dict] = None,
) -> MetricsReport:
    """
    Run every metric at one threshold.

    :param passages: ``edited``, ``accurate`` and ``unrelated`` pair lists for the perplexity suite.
    """
    threshold = system.bank.theta if theta is None else theta
    report = MetricsReport(
        reliability=eval_reliability(system, edits, threshold),
        generality=eval_generality(system, edits, threshold),
        locality=eval_locality(system, loc, threshold),
        theta=threshold,
        config=dict(config or {}),
    )
    if passages is not None:
        report.ppl = eval_ppl_suite(system, passages["edited"], passages["accurate"], passages["unrelated"], threshold)
    logger.info(
        "theta=%.2f reliability=%.1f generality=%.1f locality=%.1f (unrouted %.1f)",
        threshold,
        report.reliability.value,
        report.generality.value,
        report.locality.value,
        report.locality.unrouted,
    )
    return report
