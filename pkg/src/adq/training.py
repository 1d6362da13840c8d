"""Training harness: full-precision pretraining, QAT preparation, the
quantized train step (STE weights + learnable-threshold activations +
commitment loss + post-step EMA codebook updates), and evaluation.

The same loop drives both phases: a TrainState with quant=None is a plain
full-precision trainer, so the quantization path is cleanly detachable.
"""
import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .tensor import (SGD, Tensor, ValidationError, cosine_lr,
                     softmax_cross_entropy)
from .codebook import (ChannelScale, Codebook, CommitConfig, assign_nearest,
                       commitment_loss, compute_channel_scale, ema_update,
                       init_codebook_quantile, random_normal_codebook,
                       ste_reconstruct, uniform_symmetric_codebook)
from .actquant import ActQuantizer, grad_scale, init_thresholds, project_thresholds
from .allocation import BitAssignment, allocate, score_sensitivity
from .models import build_model

CODEBOOK_INITS = ("quantile", "random-normal", "uniform")


@dataclass
class LayerQuant:
    scale: ChannelScale
    codebook: Codebook
    actq: ActQuantizer


class QuantState:
    """Per-layer quantizer state plus the bit assignment and loss config."""

    def __init__(self, layers, assignment, commit, codebook_learning):
        self.layers = layers
        self.assignment = assignment
        self.commit = commit
        self.codebook_learning = codebook_learning

    def act_map(self):
        return {name: lq.actq for name, lq in self.layers.items()
                if lq.actq is not None}


class TrainState:
    def __init__(self, model, cfg):
        self.model = model
        self.cfg = cfg
        self.lr0 = cfg.lr0
        self.batch_size = cfg.batch_size
        self.step = 0
        self.epoch = 0
        self.total_steps = 0
        self.opt = SGD(model.parameters(), cfg.lr0, cfg.momentum, cfg.weight_decay)
        self.opt_act = None
        self.quant = None
        self.rng = np.random.default_rng(cfg.seed)


def check_quant_invariant(state):
    """Every quantized layer has exactly one codebook at its assigned width."""
    if state.quant is None:
        return
    names = [l.name for l in state.model.quantized_layers()]
    if list(state.quant.layers) != names:
        raise ValidationError(f"quantizer keys {list(state.quant.layers)} != "
                              f"quantized layers {names}")
    for name, b in zip(names, state.quant.assignment.bits):
        lq = state.quant.layers[name]
        if lq.codebook.bit_width != b:
            raise ValidationError(f"{name}: codebook width {lq.codebook.bit_width} "
                                  f"!= assigned {b}")
        if lq.actq is not None and lq.actq.bit_width != b:
            raise ValidationError(f"{name}: activation width {lq.actq.bit_width} "
                                  f"!= assigned {b}")


def _scale_array(layer, lq):
    return lq.scale.broadcast(layer.weight.data.ndim, axis=layer.channel_axis)


def _make_codebook(init, w_norm_flat, b, alpha, epsilon, rng):
    if init == "quantile":
        return init_codebook_quantile(w_norm_flat, b, alpha, epsilon)
    if init == "random-normal":
        return random_normal_codebook(b, rng, alpha, epsilon)
    if init == "uniform":
        return uniform_symmetric_codebook(w_norm_flat, b, alpha, epsilon)
    raise ValidationError(f"codebook_init must be one of {CODEBOOK_INITS}, "
                          f"got {init!r}")


def prepare_rngs(seed):
    """Independent streams for sensitivity scoring, threshold calibration,
    and codebook init, so skipping one phase cannot shift another."""
    s = np.random.SeedSequence(seed).spawn(3)
    return tuple(np.random.default_rng(x) for x in s)


def qat_prepare(state, cfg, train, assignment=None):
    """Score sensitivity, assign bits, and initialize per-layer scales,
    codebooks, and activation thresholds from the pretrained model.

    An assignment computed by an earlier pipeline stage can be passed in;
    otherwise mixed precision scores and allocates here."""
    model = state.model
    score_rng, calib_rng, init_rng = prepare_rngs(cfg.seed)
    layers = model.quantized_layers()
    if assignment is not None:
        if len(assignment.bits) != len(layers):
            raise ValidationError(f"assignment covers {len(assignment.bits)} "
                                  f"layers, model has {len(layers)}")
    elif cfg.precision == "mixed":
        profile = score_sensitivity(model,
                                    train.batches(cfg.batch_size, score_rng),
                                    cfg.n_sens_batches)
        assignment = allocate(profile, tuple(cfg.b_set), cfg.b_avg)
    else:
        b = int(cfg.fixed_bits)
        assignment = BitAssignment(bits=[b] * len(layers), b_set=(b,),
                                   b_avg=float(b),
                                   continuous=[float(b)] * len(layers),
                                   shortfall=0, excess=0)
    capture = {}
    used = 0
    for x, _ in train.batches(cfg.batch_size, calib_rng):
        if used >= cfg.n_sens_batches:
            break
        model.forward(Tensor(x), capture=capture)
        used += 1
    lq = {}
    for layer, b in zip(layers, assignment.bits):
        scale = compute_channel_scale(layer.weight.data, axis=layer.channel_axis)
        s_b = scale.broadcast(layer.weight.data.ndim, axis=layer.channel_axis)
        w_norm = (layer.weight.data / s_b).reshape(-1)
        cb = _make_codebook(cfg.codebook_init, w_norm, b,
                            cfg.ema_alpha, cfg.ema_epsilon, init_rng)
        calib = np.concatenate([a.reshape(-1) for a in capture[layer.name]])
        lq[layer.name] = LayerQuant(scale, cb, init_thresholds(calib, b))
    state.quant = QuantState(lq, assignment, CommitConfig(cfg.beta),
                             cfg.codebook_learning)
    act_params = [p for l in lq.values() for p in l.actq.params()]
    state.opt = SGD(model.parameters(), cfg.lr0, cfg.momentum, cfg.weight_decay)
    state.opt_act = SGD(act_params, cfg.lr0, cfg.momentum, 0.0)
    state.lr0 = cfg.lr0
    state.batch_size = cfg.batch_size
    state.step = 0
    state.epoch = 0
    state.rng = np.random.default_rng(cfg.seed)
    state.cfg = cfg
    check_quant_invariant(state)
    return state


def qat_train_step(state, batch):
    """One optimization step; returns {task_loss, commit_loss, lr, ...}.

    Quantized forward, task loss + summed commitment losses, backward through
    the STE/surrogate rules, SGD with cosine LR, threshold re-projection,
    then EMA codebook updates on the post-step weights.
    """
    x, y = batch
    model = state.model
    lr = cosine_lr(state.step, state.total_steps, state.lr0)
    for p in model.parameters():
        p.grad = None
    weight_map = None
    act_map = None
    commits = []
    if state.quant is not None:
        weight_map = {}
        act_map = state.quant.act_map()
        for q in act_map.values():
            for p in q.params():
                p.grad = None
        for layer in model.quantized_layers():
            lq = state.quant.layers[layer.name]
            s_b = _scale_array(layer, lq)
            w_norm = layer.weight / Tensor(s_b)
            _, w_hat = assign_nearest(w_norm.data, lq.codebook)
            weight_map[layer.name] = ste_reconstruct(w_norm, w_hat, s_b)
            commits.append(commitment_loss(w_norm, w_hat, state.quant.commit))
    logits = model.forward(Tensor(x), weight_map=weight_map, act_map=act_map)
    task = softmax_cross_entropy(logits, np.asarray(y))
    total = task
    for c in commits:
        total = total + c
    total.backward()
    state.opt.step(lr)
    if state.opt_act is not None:
        for q in act_map.values():
            sc = q.thresholds.data.dtype.type(grad_scale(q))
            if q.thresholds.grad is not None:
                q.thresholds.grad *= sc
            if q.out_scale.grad is not None:
                q.out_scale.grad *= sc
        state.opt_act.step(lr)
        for q in act_map.values():
            project_thresholds(q)
    if state.quant is not None and state.quant.codebook_learning:
        for layer in model.quantized_layers():
            lq = state.quant.layers[layer.name]
            w_norm = (layer.weight.data / _scale_array(layer, lq)).reshape(-1)
            idx, _ = assign_nearest(w_norm, lq.codebook)
            ema_update(lq.codebook, w_norm, idx, rng=state.rng)
    state.step += 1
    items = tuple(float(c.item()) for c in commits)
    commit_val = np.float32(0.0)
    for v in items:
        commit_val = np.float32(commit_val + np.float32(v))
    return {"task_loss": float(task.item()), "commit_loss": float(commit_val),
            "total_loss": float(total.item()), "lr": lr, "commit_items": items}


def _inference_maps(state):
    if state.quant is None:
        return None, None
    weight_map = {}
    for layer in state.model.quantized_layers():
        lq = state.quant.layers[layer.name]
        s_b = _scale_array(layer, lq)
        _, w_hat = assign_nearest(layer.weight.data / s_b, lq.codebook)
        weight_map[layer.name] = Tensor(s_b * w_hat)
    return weight_map, state.quant.act_map()


def evaluate(state, data, batch_size=256):
    """Deterministic inference pass: no EMA updates, no commitment loss,
    no state mutation. Returns {top1_accuracy, mean_loss}."""
    weight_map, act_map = _inference_maps(state)
    correct = 0
    loss_sum = 0.0
    for x, y in data.batches(batch_size):
        logits = state.model.forward(Tensor(x), weight_map=weight_map,
                                     act_map=act_map).data
        z = logits.astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        loss_sum += float(np.sum(lse - z[np.arange(len(y)), y]))
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
    n = len(data)
    return {"top1_accuracy": correct / n, "mean_loss": loss_sum / n}


def run_training(state, train, val, epochs, log=None):
    """Epoch loop shared by pretraining and QAT; returns per-epoch metric rows
    (epoch, step, lr, task_loss, commit_loss, train_acc, val_acc)."""
    n_batches = max(1, math.ceil(len(train) / state.batch_size))
    state.total_steps = epochs * n_batches
    state.step = 0
    rows = []
    for _ in range(epochs):
        task_sum = 0.0
        commit_sum = 0.0
        n_steps = 0
        last_lr = 0.0
        for batch in train.batches(state.batch_size, state.rng):
            m = qat_train_step(state, batch)
            task_sum += m["task_loss"]
            commit_sum += m["commit_loss"]
            last_lr = m["lr"]
            n_steps += 1
        state.epoch += 1
        row = {"epoch": state.epoch, "step": state.step, "lr": last_lr,
               "task_loss": task_sum / n_steps, "commit_loss": commit_sum / n_steps,
               "train_acc": evaluate(state, train)["top1_accuracy"],
               "val_acc": evaluate(state, val)["top1_accuracy"]}
        rows.append(row)
        if log:
            log(row)
    return rows


def pretrain(cfg, train, val, log=None):
    """Full-precision SGD + cosine training from scratch; returns
    (TrainState, metric rows)."""
    model = build_model(cfg.arch, train.input_shape, train.n_classes, cfg.seed)
    state = TrainState(model, cfg)
    rows = run_training(state, train, val, cfg.epochs, log)
    return state, rows


def state_hash(state):
    """SHA-256 over all weights and quantizer state, for purity checks."""
    h = hashlib.sha256()
    for name, p in state.model.named_params():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    if state.quant is not None:
        for name, lq in state.quant.layers.items():
            h.update(name.encode())
            h.update(lq.scale.s.tobytes())
            arrs = [lq.codebook.levels, lq.codebook.ema_counts, lq.codebook.ema_sums]
            if lq.actq is not None:
                arrs += [lq.actq.thresholds.data, lq.actq.out_scale.data]
            for arr in arrs:
                h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
