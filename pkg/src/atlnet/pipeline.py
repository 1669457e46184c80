"""End-to-end runs shared by the CLI and the experiment scripts.

All randomness derives from ``cfg.seed`` through named sub-seeds:
``synth`` (synthetic scenes), ``split/source`` and ``split/target``
(partitions), ``model`` (joint training, which fans out further into
``pretrain/*`` and ``finetune``), ``active`` (query loop) and ``transfer``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .active import AlState, al_pretrain_loop, groundtruth_oracle, history_csv
from .config import ConfigError, RunConfig, SceneConfig, parse_config
from .data import (SOURCE, TARGET, DataFormatError, HyperCube, SampleSet, compute_metrics, load_cube,
                   load_features, load_labels, save_features, split, synth_benchmark)
from .emap import build_emap
from .network import JointModel, fit_joint_model
from .numcore import child_rng, sub_seed
from .transfer import TransferReport, active_transfer, adapt_band_count, reset_head

log = logging.getLogger(__name__)

MODEL_FILE = "model.ssae"
HISTORY_FILE = "al_history.csv"
TRAINING_FILE = "source_training.fmat"
TRANSFERRED_FILE = "transferred.ssae"
REPORT_FILE = "transfer_report.csv"


def load_preset(name: str = "synthetic") -> RunConfig:
    path = resources.files("atlnet") / "presets" / f"{name}.yaml"
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r}")
    return parse_config(path.read_text())


@dataclass
class Scene:
    cube: HyperCube
    labels: np.ndarray  # H x W, 0 = unlabeled


def synthetic_scenes(cfg: RunConfig) -> tuple[Scene, Scene]:
    src, tgt = synth_benchmark(cfg.synth, child_rng(cfg.seed, "synth"))
    return Scene(src.cube, src.labels), Scene(tgt.cube, tgt.labels)


def load_scene(scene: SceneConfig, cfg: RunConfig, role: str) -> Scene:
    """Scene from cube/label files, or the synthetic scene for ``role`` when no cube is given."""
    if scene.cube is None:
        src, tgt = synthetic_scenes(cfg)
        return src if role == "source" else tgt
    if scene.labels is None:
        raise ConfigError(f"{role}.labels is required when {role}.cube is set")
    cube = load_cube(scene.cube)
    labels = load_labels(scene.labels)
    if labels.shape != (cube.height, cube.width):
        raise DataFormatError(f"label map {scene.labels} is {labels.shape[0]}x{labels.shape[1]} "
                              f"but cube {scene.cube} is {cube.height}x{cube.width}")
    return Scene(cube, labels)


def scene_features(cube: HyperCube, cfg: RunConfig) -> np.ndarray:
    """Per-pixel rows: scaled spectrum followed by the EMAP block."""
    if cfg.emap.pc_count > cube.bands:
        raise ConfigError(f"emap.pc_count {cfg.emap.pc_count} exceeds the cube's {cube.bands} bands")
    return np.concatenate([cube.pixels(), build_emap(cube, cfg.emap)], axis=1)


def class_count(labels) -> int:
    return int(np.max(labels))


# -- source pretraining ----------------------------------------------------


@dataclass
class PretrainOutput:
    model: JointModel
    history: list[dict]
    training: SampleSet
    candidate: SampleSet
    test: SampleSet


def run_pretrain(cfg: RunConfig, scene: Scene | None = None) -> PretrainOutput:
    """Split the source scene, train the joint model, then run the query loop."""
    scene = scene or load_scene(cfg.source, cfg, "source")
    x = scene_features(scene.cube, cfg)
    train, cand, test = split(x, scene.labels, cfg.split, child_rng(cfg.seed, "split/source"), SOURCE)
    c = class_count(scene.labels)
    log.info("pretraining on %d samples, %d classes, %d features", len(train), c, x.shape[1])
    model = fit_joint_model(train.features, train.labels, c, scene.cube.bands, cfg.network.branch_config(),
                            cfg.finetune, sub_seed(cfg.seed, "model")).model
    state = AlState(train, cand, model)
    state = al_pretrain_loop(state, cfg.active.query(), groundtruth_oracle(scene.labels), cfg.active.iterations,
                             test, cfg.finetune, child_rng(cfg.seed, "active"))
    return PretrainOutput(state.model, state.history, state.training, state.candidate, test)


# -- training-set files ----------------------------------------------------
# Stored as a FeatureMatrix whose first three columns are pixel id, 0-based
# label and domain tag, followed by the feature row.


def training_to_matrix(samples: SampleSet) -> np.ndarray:
    head = np.stack([samples.pixels, samples.labels, samples.domain.astype(np.int64)], axis=1).astype(np.float64)
    return np.concatenate([head, samples.features], axis=1)


def training_from_matrix(m: np.ndarray) -> SampleSet:
    if m.ndim != 2 or m.shape[1] < 4:
        raise DataFormatError("training-set matrix needs pixel, label, domain and at least one feature column")
    return SampleSet(m[:, 3:], m[:, 1].astype(np.int64), m[:, 0].astype(np.int64), m[:, 2].astype(np.int8))


def save_training(path, samples: SampleSet) -> None:
    save_features(path, training_to_matrix(samples))


def load_training(path) -> SampleSet:
    return training_from_matrix(load_features(path))


# -- transfer --------------------------------------------------------------


@dataclass
class TransferOutput:
    model: JointModel
    report: TransferReport


def prepare_source(model: JointModel, training: SampleSet, target_bands: int, target_classes: int,
                   reinit_head: bool) -> tuple[JointModel, SampleSet]:
    """Match the source model and training rows to the target band and class counts.

    Bands beyond the common minimum are dropped on the source side here;
    :func:`run_transfer` truncates the target cube for the opposite case.
    """
    spe = model.spectral_dim
    if target_bands < spe:
        model = adapt_band_count(model, target_bands)
        training = SampleSet(np.concatenate([training.features[:, :target_bands], training.features[:, spe:]], axis=1),
                             training.labels, training.pixels, training.domain)
    if reinit_head:
        model = reset_head(model, max(target_classes, model.class_count))
    elif target_classes > model.class_count:
        raise ConfigError(f"target has {target_classes} classes but the model head has {model.class_count}; "
                          "set transfer.reinit_head")
    return model, training


def run_transfer(cfg: RunConfig, model: JointModel, source_training: SampleSet,
                 scene: Scene | None = None) -> TransferOutput:
    scene = scene or load_scene(cfg.target, cfg, "target")
    cube = scene.cube
    if cube.bands > model.spectral_dim:
        log.info("truncating target cube from %d to %d bands", cube.bands, model.spectral_dim)
        cube = cube.truncate_bands(model.spectral_dim)
    x = scene_features(cube, cfg)
    c = class_count(scene.labels)
    model, source_training = prepare_source(model, source_training, cube.bands, c, cfg.transfer.reinit_head)
    if x.shape[1] != model.input_dim:
        raise DataFormatError(f"target features have {x.shape[1]} columns, model expects {model.input_dim}")
    _, cand, test = split(x, scene.labels, cfg.split, child_rng(cfg.seed, "split/target"), TARGET)
    log.info("transferring with %d source samples, %d target candidates", len(source_training), len(cand))
    new_model, report, _ = active_transfer(model, source_training, cand, test, groundtruth_oracle(scene.labels),
                                           cfg.transfer.transfer_config(), cfg.active.query(), cfg.finetune,
                                           child_rng(cfg.seed, "transfer"))
    return TransferOutput(new_model, report)


# -- classification --------------------------------------------------------


def classify_cube(model: JointModel, cube: HyperCube, cfg: RunConfig) -> np.ndarray:
    """Predicted label map (1-based class ids) with the cube's height and width."""
    x = scene_features(cube, cfg)
    if x.shape[1] != model.input_dim:
        raise DataFormatError(f"cube yields {x.shape[1]} features, model expects {model.input_dim}")
    return (model.predict(x) + 1).reshape(cube.height, cube.width)


def label_map_metrics(pred, truth):
    """Metrics over the pixels labeled in ``truth``."""
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if pred.shape != truth.shape:
        raise DataFormatError(f"prediction has {pred.size} pixels, truth has {truth.size}")
    mask = truth > 0
    if not mask.any():
        raise DataFormatError("truth map has no labeled pixels")
    if np.any(pred[mask] <= 0):
        raise DataFormatError("prediction leaves labeled truth pixels unclassified")
    c = int(max(truth.max(), pred.max()))
    return compute_metrics(pred[mask] - 1, truth[mask] - 1, c)


def metrics_csv(m) -> str:
    return f"oa,aa,kappa\n{m.oa:.6f},{m.aa:.6f},{m.kappa:.6f}\n"


def write_text(path: Path, text: str) -> None:
    path.write_bytes(text.encode("utf-8"))


def write_history(path: Path, history: list[dict]) -> None:
    write_text(path, history_csv(history))
