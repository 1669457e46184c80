"""Batch-mode active learning: uncertainty scores, batch selection and the refinement loop."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import Metrics, SampleSet, compute_metrics
from .network import FinetuneConfig, refine

RANDOM = "random"
MARGIN = "margin"
MCLU = "mclu"
KINDS = (RANDOM, MARGIN, MCLU)

HISTORY_FIELDS = ["iteration", "labeled_count", "oa", "aa", "kappa"]


class OracleError(RuntimeError):
    def __init__(self, pixel: int, reason: str = "no label"):
        super().__init__(f"labeling oracle failed for pixel {pixel}: {reason}")
        self.pixel = pixel


@dataclass
class QueryStrategy:
    kind: str = MCLU
    batch_size: int = 50

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown query strategy {self.kind!r}; expected one of {KINDS}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class QueryBatch:
    indices: np.ndarray  # positions in the candidate set
    scores: np.ndarray


@dataclass
class AlState:
    training: SampleSet
    candidate: SampleSet
    model: object
    iteration: int = 0
    history: list[dict] = field(default_factory=list)


def top_two_gap(values) -> np.ndarray:
    """Largest minus second-largest entry along the last axis."""
    v = np.asarray(values, dtype=np.float64)
    if v.shape[-1] < 2:
        raise ValueError("need at least two classes")
    part = np.partition(v, -2, axis=-1)
    return part[..., -1] - part[..., -2]


def c_diff(probs) -> float | np.ndarray:
    """Gap between the two largest class probabilities (small = uncertain)."""
    gap = top_two_gap(probs)
    return float(gap) if np.ndim(gap) == 0 else gap


def uncertainty_scores(kind: str, model, features) -> np.ndarray:
    """MCLU uses the probability gap, MS the raw logit gap; both rank small-first."""
    if kind == MCLU:
        return top_two_gap(model.predict_proba(features))
    if kind == MARGIN:
        return top_two_gap(model.logits(features))
    raise ValueError(f"strategy {kind!r} has no uncertainty score")


def rank_smallest(scores, pixels, k: int) -> np.ndarray:
    """Positions of the ``k`` smallest scores, ties broken by ascending pixel id."""
    order = np.lexsort((np.asarray(pixels), np.asarray(scores)))
    return order[:k]


def select_batch(strategy: QueryStrategy, model, candidate: SampleSet, rng: np.random.Generator) -> QueryBatch:
    if len(candidate) == 0:
        raise ValueError("candidate set is empty")
    k = min(strategy.batch_size, len(candidate))
    if strategy.kind == RANDOM:
        idx = np.sort(rng.choice(len(candidate), size=k, replace=False))
        return QueryBatch(idx, np.zeros(k))
    scores = uncertainty_scores(strategy.kind, model, candidate.features)
    idx = rank_smallest(scores, candidate.pixels, k)
    return QueryBatch(idx, scores[idx])


def groundtruth_oracle(label_map) -> Callable[[int], int]:
    """Labeler backed by a reference map (file ids, 0 = unknown); returns 0-based classes."""
    flat = np.asarray(label_map).reshape(-1)

    def label(pixel: int) -> int:
        if not 0 <= pixel < flat.size or flat[pixel] <= 0:
            raise OracleError(int(pixel))
        return int(flat[pixel]) - 1

    return label


def label_batch(samples: SampleSet, oracle) -> SampleSet:
    out = samples.subset(np.arange(len(samples)))
    for i, p in enumerate(out.pixels.tolist()):
        try:
            out.labels[i] = oracle(p)
        except OracleError:
            raise
        except Exception as exc:
            raise OracleError(p, str(exc)) from exc
    return out


def evaluate(model, samples: SampleSet, class_count: int | None = None) -> Metrics:
    return compute_metrics(model.predict(samples.features), samples.labels, class_count)


def _record(state: AlState, test: SampleSet, class_count: int, queried: int) -> None:
    m = evaluate(state.model, test, class_count)
    state.history.append(
        {"iteration": state.iteration, "labeled_count": len(state.training), "queried": queried,
         "oa": m.oa, "aa": m.aa, "kappa": m.kappa}
    )


def al_pretrain_loop(state: AlState, strategy: QueryStrategy, oracle, max_iters: int, test: SampleSet,
                     ft: FinetuneConfig, rng: np.random.Generator) -> AlState:
    """Query, label, move and refine until ``max_iters`` rounds or an empty pool.

    The held-out metrics of the incoming model are recorded first, then once
    per round. Each round fine-tunes every layer (or only the head when
    ``ft.update_encoders`` is off) for ``ft.refine_epochs`` epochs.
    """
    c = state.model.class_count
    queried = 0
    if not state.history:
        _record(state, test, c, queried)
    for _ in range(max_iters):
        if len(state.candidate) == 0:
            break
        batch = select_batch(strategy, state.model, state.candidate, rng)
        picked = label_batch(state.candidate.subset(batch.indices), oracle)
        state.training = state.training.concat(picked)
        state.candidate = state.candidate.drop(batch.indices)
        queried += len(picked)
        state.model = refine(state.model, state.training.features, state.training.labels, ft, rng).model
        state.iteration += 1
        _record(state, test, c, queried)
    return state


def history_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_FIELDS)
    for row in history:
        w.writerow([row["iteration"], row["labeled_count"], f"{row['oa']:.6f}", f"{row['aa']:.6f}", f"{row['kappa']:.6f}"])
    return buf.getvalue()
