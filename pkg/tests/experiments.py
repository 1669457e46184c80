"""Multi-seed experiment drivers on the synthetic benchmark, shared by the acceptance tests."""

import dataclasses
import functools

import numpy as np

from atlnet.active import QueryStrategy, evaluate
from atlnet.data import SplitSpec, split
from atlnet.network import JointModel, finetune, fit_joint_model, fit_network, greedy_pretrain, train_softmax_head
from atlnet.numcore import child_rng, sub_seed
from atlnet.pipeline import load_preset, run_pretrain, run_transfer, scene_features, synthetic_scenes

SEEDS = range(10)


def preset(seed, **sections):
    """Synthetic preset with the root seed set and whole sections replaced or patched."""
    cfg = dataclasses.replace(load_preset("synthetic"), seed=seed)
    for name, changes in sections.items():
        cfg = dataclasses.replace(cfg, **{name: dataclasses.replace(getattr(cfg, name), **changes)})
    return cfg


def al_curves(seed):
    """Held-out OA after each query round for MCLU and random sampling, same initial model."""
    out = {}
    for kind in ("mclu", "random"):
        cfg = preset(seed, active={"strategy": kind})
        res = run_pretrain(cfg)
        out[kind] = [(h["queried"], h["oa"]) for h in res.history]
    return out


def labels_to_reach(curve, target):
    """Fewest queried labels at which ``curve`` attains ``target`` OA, or None."""
    return next((q for q, oa in curve if oa >= target), None)


@functools.lru_cache(maxsize=None)
def al_efficacy(seed):
    curves = al_curves(seed)
    budget, random_final = curves["random"][-1]
    reach = labels_to_reach(curves["mclu"], random_final)
    return {"budget": budget, "random_final": random_final, "mclu_final": curves["mclu"][-1][1],
            "reach": reach, "ok": reach is not None and reach <= 0.7 * budget}


@functools.lru_cache(maxsize=None)
def transfer_gain(seed):
    """Target OA of the untransferred source model and after active transfer."""
    cfg = preset(seed)
    src, tgt = synthetic_scenes(cfg)
    pre = run_pretrain(cfg, src)
    res = run_transfer(cfg, pre.model, pre.training, tgt)
    rows = res.report.rows
    return rows[0]["oa"], rows[-1]["oa"], res.report


@functools.lru_cache(maxsize=None)
def ablation(seed, train_count=50):
    """Held-out OA of the joint model, a spectral-only and an EMAP-only network."""
    cfg = preset(seed, split={"train_count": train_count})
    src, _ = synthetic_scenes(cfg)
    x = scene_features(src.cube, cfg)
    bands = src.cube.bands
    train, _, test = split(x, src.labels, cfg.split, child_rng(seed, "split/source"))
    ft, sae = cfg.finetune, cfg.network.sae
    joint = fit_joint_model(train.features, train.labels, 5, bands, cfg.network.branch_config(), ft,
                            sub_seed(seed, "model")).model
    spe = fit_network(train.features[:, :bands], train.labels, 5, cfg.network.spectral_hidden, sae, ft,
                      child_rng(seed, "ablation/spectral")).model
    spa = fit_network(train.features[:, bands:], train.labels, 5, cfg.network.spatial_hidden, sae, ft,
                      child_rng(seed, "ablation/emap")).model
    oa = lambda model, cols: float(np.mean(model.predict(test.features[:, cols]) == test.labels))
    return evaluate(joint, test, 5).oa, oa(spe, slice(0, bands)), oa(spa, slice(bands, None))


def finetune_gain(seed, sae=None, ft=None, train_count=10):
    """Held-out OA of the pretrained joint model (head trained on frozen codes) and after fine-tuning."""
    cfg = preset(seed, split={"train_count": train_count})
    sae = sae or cfg.network.sae
    ft = ft or cfg.finetune
    src, _ = synthetic_scenes(cfg)
    x = scene_features(src.cube, cfg)
    b = src.cube.bands
    train, _, test = split(x, src.labels, cfg.split, child_rng(seed, "split/source"))
    s = sub_seed(seed, "model")
    spectral = greedy_pretrain(train.features[:, :b], cfg.network.spectral_hidden, sae, child_rng(s, "pretrain/spectral"))
    spatial = greedy_pretrain(train.features[:, b:], cfg.network.spatial_hidden, sae, child_rng(s, "pretrain/spatial"))
    codes = np.concatenate([spectral.forward(train.features[:, :b]), spatial.forward(train.features[:, b:])], axis=1)
    fusion = greedy_pretrain(codes, cfg.network.fusion_hidden, sae, child_rng(s, "pretrain/fusion"))
    model = JointModel(spectral, spatial, fusion)
    rng = child_rng(s, "finetune")
    w, bias = train_softmax_head(model.forward(train.features), train.labels, 5, ft.softmax_epochs, ft.lr, rng,
                                 lam=ft.lam, batch_size=ft.batch_size)
    model.fusion = model.fusion.with_head(w, bias)
    before = evaluate(model, test, 5).oa
    tuned = finetune(model, train.features, train.labels, ft.epochs, ft.lr, rng, lam=ft.lam,
                     batch_size=ft.batch_size).model
    return before, evaluate(tuned, test, 5).oa
