"""Metric reliability audit.

Workflow: collect human ratings (items x raters on the 1-5 half-point
scale), aggregate per-item MOS, balance the pool so every integer MOS
band contributes equally, then measure how well each automatic metric
tracks human judgment at two granularities: system-level (mean score
per system) and sentence-level (per item), both via Spearman's rho.
Machine judges that rate the same item several times additionally get a
stability column (mean per-item population SD).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .metrics import judge_stability, spearman

MOS_MIN = 1.0
MOS_MAX = 5.0
MOS_STEP = 0.5


def _on_grid(value: float) -> bool:
    if not MOS_MIN <= value <= MOS_MAX:
        return False
    steps = (value - MOS_MIN) / MOS_STEP
    return abs(steps - round(steps)) < 1e-9


@dataclass
class RaterTable:
    """Ratings matrix: one row per item, one column per rater."""

    item_ids: list[str]
    ratings: np.ndarray

    def __post_init__(self) -> None:
        self.ratings = np.asarray(self.ratings, dtype=np.float64)
        if self.ratings.ndim != 2:
            raise ValueError("ratings must be a 2-D items x raters matrix")
        if len(self.item_ids) != self.ratings.shape[0]:
            raise ValueError("item_ids and ratings row count differ")
        for value in self.ratings.flat:
            if not _on_grid(float(value)):
                raise ValueError(f"rating {value} is not on the {MOS_STEP} grid in [{MOS_MIN}, {MOS_MAX}]")

    def mos(self) -> np.ndarray:
        """Per-item mean opinion score."""
        return self.ratings.mean(axis=1)


def mos_band(score: float) -> int:
    """Integer level of a MOS value: nearest level, halves rounding up.

    Level k covers [k - 0.5, k + 0.5) with the ends clamped, so band 1 is
    [1, 1.5) and band 5 is [4.5, 5].
    """
    if not MOS_MIN <= score <= MOS_MAX:
        raise ValueError(f"MOS {score} outside [{MOS_MIN}, {MOS_MAX}]")
    return min(5, int(math.floor(score + 0.5)))


def balanced_select(item_ids: Sequence[str], mos_scores: Sequence[float], bucket_size: int) -> list[str]:
    """Pick ``bucket_size`` items per MOS band, deterministically by id.

    Raises naming the first underfilled band.
    """
    if bucket_size < 1:
        raise ValueError("bucket_size must be >= 1")
    bands: dict[int, list[tuple[str, float]]] = {b: [] for b in range(1, 6)}
    for item_id, score in zip(item_ids, mos_scores):
        bands[mos_band(float(score))].append((item_id, float(score)))
    selected: list[str] = []
    for band in range(1, 6):
        members = sorted(bands[band], key=lambda pair: pair[0])
        if len(members) < bucket_size:
            raise ValueError(
                f"band {band} has only {len(members)} items, need {bucket_size}"
            )
        selected.extend(item_id for item_id, _ in members[:bucket_size])
    return selected


def mos_and_balanced_select(table: RaterTable, bucket_size: int) -> tuple[dict[str, float], list[str]]:
    """Per-item MOS plus an evenly banded subset of item ids."""
    scores = table.mos()
    per_item = dict(zip(table.item_ids, (float(s) for s in scores)))
    return per_item, balanced_select(table.item_ids, scores, bucket_size)


@dataclass
class AuditItem:
    """One audited utterance: human MOS plus automatic scores."""

    item_id: str
    system: str
    human_mos: float
    metric_scores: dict[str, float] = field(default_factory=dict)
    judge_ratings: dict[str, list[float]] = field(default_factory=dict)


@dataclass
class AuditRow:
    name: str
    system_rho: float
    sentence_rho: float
    sd: Optional[float]


@dataclass
class AuditReport:
    rows: list[AuditRow]
    n_items: int
    n_systems: int
    seed: Optional[int] = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "rows": [
                    {
                        "name": r.name,
                        "system_rho": r.system_rho,
                        "sentence_rho": r.sentence_rho,
                        "sd": r.sd,
                    }
                    for r in self.rows
                ],
                "n_items": self.n_items,
                "n_systems": self.n_systems,
                "seed": self.seed,
            }
        )

    def render(self) -> str:
        header = ["Metric", "System-rho", "Sentence-rho", "SD"]
        body = [
            [
                r.name,
                f"{r.system_rho:.4f}",
                f"{r.sentence_rho:.4f}",
                "/" if r.sd is None else f"{r.sd:.4f}",
            ]
            for r in self.rows
        ]
        widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
        lines = ["  ".join(c.ljust(widths[i]) for i, c in enumerate(row)).rstrip() for row in [header] + body]
        lines.insert(1, "-" * len(lines[0]))
        return "\n".join(lines)


def _score_series(items: Sequence[AuditItem], name: str, from_judge: bool) -> list[float]:
    out = []
    for item in items:
        if from_judge:
            out.append(float(np.mean(item.judge_ratings[name])))
        else:
            out.append(item.metric_scores[name])
    return out


def audit_metrics(items: Sequence[AuditItem], seed: Optional[int] = None) -> AuditReport:
    """Correlate every metric and judge against human MOS.

    Sentence-level rho compares per-item scores with per-item MOS;
    system-level rho compares per-system means. Judges additionally get
    the mean per-item SD of their repeated ratings.
    """
    if len(items) < 2:
        raise ValueError("need at least two items to audit")
    metric_names = sorted({name for item in items for name in item.metric_scores})
    judge_names = sorted({name for item in items for name in item.judge_ratings})
    systems = sorted({item.system for item in items})
    human = [item.human_mos for item in items]

    def system_means(values: Sequence[float]) -> tuple[list[float], list[float]]:
        per_system_score = []
        per_system_human = []
        for system in systems:
            idx = [i for i, item in enumerate(items) if item.system == system]
            per_system_score.append(float(np.mean([values[i] for i in idx])))
            per_system_human.append(float(np.mean([human[i] for i in idx])))
        return per_system_score, per_system_human

    rows = []
    for name in metric_names + judge_names:
        is_judge = name in judge_names
        series = _score_series(items, name, from_judge=is_judge)
        sys_scores, sys_human = system_means(series)
        sd = None
        if is_judge:
            _, sd = judge_stability([item.judge_ratings[name] for item in items])
        rows.append(
            AuditRow(
                name=name,
                system_rho=spearman(sys_scores, sys_human),
                sentence_rho=spearman(series, human),
                sd=sd,
            )
        )
    return AuditReport(rows=rows, n_items=len(items), n_systems=len(systems), seed=seed)


def _to_grid(value: float) -> float:
    clipped = min(MOS_MAX, max(MOS_MIN, value))
    return MOS_MIN + MOS_STEP * round((clipped - MOS_MIN) / MOS_STEP)


def synthetic_audit_items(
    seed: int,
    n_systems: int = 6,
    items_per_system: int = 60,
    n_raters: int = 8,
    judge_repeats: int = 3,
) -> tuple[list[AuditItem], RaterTable]:
    """Generate a synthetic judged pool with a known quality ordering.

    System s has base quality spread across [1.2, 4.8]; item qualities
    jitter around the base. Human raters and machine judges observe the
    quality with independent noise; one synthetic similarity metric is a
    noisy monotone transform of quality.
    """
    rng = np.random.default_rng(seed)
    items: list[AuditItem] = []
    all_ids: list[str] = []
    all_ratings: list[list[float]] = []
    for s in range(n_systems):
        base = 1.2 + 3.6 * s / max(1, n_systems - 1)
        for i in range(items_per_system):
            quality = float(np.clip(base + rng.normal(0, 0.7), MOS_MIN, MOS_MAX))
            ratings = [_to_grid(quality + rng.normal(0, 0.4)) for _ in range(n_raters)]
            human_mos = float(np.mean(ratings))
            sim_metric = float(1 / (1 + np.exp(-(quality - 3.0))) + rng.normal(0, 0.05))
            judge = [
                _to_grid(quality + rng.normal(0, 0.5)) for _ in range(judge_repeats)
            ]
            item_id = f"sys{s}-item{i:03d}"
            items.append(
                AuditItem(
                    item_id=item_id,
                    system=f"sys{s}",
                    human_mos=human_mos,
                    metric_scores={"emo_sim": sim_metric},
                    judge_ratings={"judge_rating": judge},
                )
            )
            all_ids.append(item_id)
            all_ratings.append(ratings)
    return items, RaterTable(item_ids=all_ids, ratings=np.array(all_ratings))
