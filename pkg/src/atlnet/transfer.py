"""Active transfer learning from a source-trained joint model to a target scene.

Each round queries the ``t_plus`` most uncertain target candidates, drops the
``s_minus`` source training samples whose true-class probability fell the
most since transfer time, fine-tunes every parameter on the updated set and
stops once the fine-tuning objective drops below ``epsilon``.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .active import QueryStrategy, evaluate, label_batch, select_batch
from .data import SOURCE, SampleSet
from .network import Encoder, FinetuneConfig, JointModel, SsaeNetwork, refine, supervised_loss

log = logging.getLogger(__name__)

REPORT_FIELDS = ["iteration", "loss", "source_count", "target_count", "oa", "aa", "kappa"]


@dataclass
class TransferConfig:
    t_plus: int = 80
    s_minus: int = 50
    epsilon: float = 5e-6
    max_iters: int = 10
    reinit_head: bool = False

    def __post_init__(self):
        if self.t_plus < 1:
            raise ValueError("t_plus must be >= 1")
        if self.s_minus < 0:
            raise ValueError("s_minus must be >= 0")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")


@dataclass
class TransferState:
    training: SampleSet
    candidate: SampleSet
    model: object
    source_initial_probs: dict[int, np.ndarray]  # source pixel id -> probabilities at transfer time
    loss_history: list[float] = field(default_factory=list)
    iteration: int = 0


@dataclass
class TransferReport:
    rows: list[dict] = field(default_factory=list)
    iterations: int = 0
    stopped_by: str = ""
    warnings: list[str] = field(default_factory=list)
    removed: list[list[int]] = field(default_factory=list)

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for r in self.rows:
            loss = "" if r["loss"] is None else f"{r['loss']:.10g}"
            w.writerow([r["iteration"], loss, r["source_count"], r["target_count"],
                        f"{r['oa']:.6f}", f"{r['aa']:.6f}", f"{r['kappa']:.6f}"])
        return buf.getvalue()


def c_rem(p0, pi, true_class: int) -> float:
    """Drop of the true-class probability between transfer time and round ``i``."""
    p0 = np.asarray(p0, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    if p0.shape != pi.shape:
        raise ValueError("probability vectors differ in length")
    if not 0 <= true_class < p0.shape[-1]:
        raise ValueError(f"class {true_class} out of range [0, {p0.shape[-1]})")
    return float(p0[true_class] - pi[true_class])


def removal_scores(state: TransferState) -> tuple[np.ndarray, np.ndarray]:
    """Positions of source samples in the training set and their removal scores."""
    pos = np.flatnonzero(state.training.domain == SOURCE)
    if pos.size == 0:
        return pos, np.zeros(0)
    probs = state.model.predict_proba(state.training.features[pos])
    labels = state.training.labels[pos]
    p0 = np.stack([state.source_initial_probs[int(p)] for p in state.training.pixels[pos]])
    rows = np.arange(pos.size)
    return pos, p0[rows, labels] - probs[rows, labels]


def remove_source_batch(state: TransferState, s_minus: int) -> list[int]:
    """Remove the ``s_minus`` source samples with the largest removal score.

    Ties go to the lower sample (pixel) id. Target samples are never
    removed. Returns the removed pixel ids.
    """
    if s_minus <= 0:
        return []
    pos, scores = removal_scores(state)
    k = min(s_minus, pos.size)
    if k == 0:
        return []
    order = np.lexsort((state.training.pixels[pos], -scores))[:k]
    chosen = pos[order]
    removed = state.training.pixels[chosen].tolist()
    state.training = state.training.drop(chosen)
    return removed


def adapt_band_count(model: JointModel, bands: int) -> JointModel:
    """Drop spectral-branch input weights beyond the first ``bands`` bands."""
    if bands >= model.spectral.input_dim:
        return model
    m = model.copy()
    first = m.spectral.encoders[0]
    encoders = [Encoder(first.w[:, :bands].copy(), first.b.copy())] + m.spectral.encoders[1:]
    m.spectral = SsaeNetwork(bands, encoders)
    return m


def reset_head(model: JointModel, class_count: int) -> JointModel:
    m = model.copy()
    d = m.fusion.output_dim
    m.fusion = m.fusion.with_head(np.zeros((class_count, d)), np.zeros(class_count))
    return m


def init_transfer(source_model, source_training: SampleSet, candidate: SampleSet) -> TransferState:
    probs = source_model.predict_proba(source_training.features)
    cache = {int(p): row.copy() for p, row in zip(source_training.pixels, probs)}
    for row in cache.values():
        row.setflags(write=False)
    return TransferState(source_training.subset(np.arange(len(source_training))),
                         candidate.subset(np.arange(len(candidate))), source_model.copy(), cache)


def active_transfer(source_model, source_training: SampleSet, candidate: SampleSet, test: SampleSet, oracle,
                    cfg: TransferConfig, strategy: QueryStrategy, ft: FinetuneConfig,
                    rng: np.random.Generator) -> tuple[object, TransferReport, TransferState]:
    """Run the transfer loop.

    ``candidate`` is the target pool (its labels are ignored; the oracle
    supplies them) and ``test`` the labeled target evaluation set. The
    report starts with an iteration-0 row for the untransferred model.
    """
    strategy = QueryStrategy(strategy.kind, cfg.t_plus)
    model = source_model
    if cfg.reinit_head:
        model = reset_head(model, int(max(test.labels.max(), source_training.labels.max())) + 1)
    state = init_transfer(model, source_training, candidate)
    report = TransferReport()
    c = state.model.class_count

    def row(loss):
        m = evaluate(state.model, test, c)
        report.rows.append({"iteration": state.iteration, "loss": loss,
                            "source_count": state.training.count(SOURCE),
                            "target_count": len(state.training) - state.training.count(SOURCE),
                            "oa": m.oa, "aa": m.aa, "kappa": m.kappa})

    row(supervised_loss(state.model, state.training.features, state.training.labels, ft.lam)
        if len(state.training) else None)
    report.stopped_by = "max_iters"
    while state.iteration < cfg.max_iters:
        if len(state.candidate) == 0:
            msg = f"target candidate pool exhausted after {state.iteration} iterations"
            log.warning(msg)
            report.warnings.append(msg)
            report.stopped_by = "exhausted"
            break
        batch = select_batch(strategy, state.model, state.candidate, rng)
        s_plus = label_batch(state.candidate.subset(batch.indices), oracle)
        state.candidate = state.candidate.drop(batch.indices)
        report.removed.append(remove_source_batch(state, cfg.s_minus))
        state.training = state.training.concat(s_plus)
        res = refine(state.model, state.training.features, state.training.labels, ft, rng)
        state.model = res.model
        state.iteration += 1
        loss = res.final_loss
        state.loss_history.append(loss)
        row(loss)
        if loss < cfg.epsilon:
            report.stopped_by = "epsilon"
            break
    report.iterations = state.iteration
    return state.model, report, state
