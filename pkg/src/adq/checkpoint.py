"""Checkpoint serialization: a human-auditable JSON manifest plus a raw
little-endian float32 blob holding the weights in manifest order.

save -> load -> save is byte-identical; a blob whose length disagrees with
the manifest is rejected before any tensor is constructed. Writes are atomic
(temp file + rename).
"""
import json
import os

import numpy as np

from .fsio import atomic_write
from .tensor import SGD
from .codebook import ChannelScale, Codebook, CommitConfig
from .actquant import ActQuantizer
from .allocation import BitAssignment
from .config import ExperimentConfig
from .models import ModelSpec, build_model
from .training import LayerQuant, QuantState, TrainState, check_quant_invariant

FORMAT_VERSION = 1


class ArtifactError(RuntimeError):
    pass


def manifest_path(prefix):
    return prefix + ".json"


def blob_path(prefix):
    return prefix + ".bin"


def save_checkpoint(state, prefix, metrics_summary=None):
    """Write prefix.json (manifest) and prefix.bin (weight blob)."""
    model = state.model
    if metrics_summary is None:
        metrics_summary = getattr(state, "metrics_summary", None)
    tensors = [{"name": name, "shape": list(p.data.shape), "dtype": "float32"}
               for name, p in model.named_params()]
    quant = None
    if state.quant is not None:
        quant = {
            "layers": {name: {"scale": lq.scale.s.tolist(),
                              "codebook": lq.codebook.to_dict(),
                              "act": lq.actq.to_dict()}
                       for name, lq in state.quant.layers.items()},
            "assignment": state.quant.assignment.to_dict(),
            "beta": state.quant.commit.beta,
            "codebook_learning": state.quant.codebook_learning,
        }
    manifest = {
        "format_version": FORMAT_VERSION,
        "model": model.spec.to_dict(),
        "tensors": tensors,
        "quant": quant,
        "config": state.cfg.to_dict(),
        "counters": {"step": state.step, "epoch": state.epoch},
        "metrics": metrics_summary or {},
    }
    blob = b"".join(np.ascontiguousarray(p.data, dtype="<f4").tobytes()
                    for _, p in model.named_params())
    atomic_write(manifest_path(prefix), json.dumps(manifest, indent=2) + "\n")
    atomic_write(blob_path(prefix), blob, binary=True)


def load_checkpoint(prefix):
    """Rebuild a TrainState (model + optional quantizer state) from disk."""
    mpath, bpath = manifest_path(prefix), blob_path(prefix)
    if not os.path.exists(mpath):
        raise FileNotFoundError(mpath)
    if not os.path.exists(bpath):
        raise FileNotFoundError(bpath)
    with open(mpath) as f:
        manifest = json.load(f)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ArtifactError(f"{mpath}: unsupported format_version "
                            f"{manifest.get('format_version')!r}")
    with open(bpath, "rb") as f:
        blob = f.read()
    tensors = manifest["tensors"]
    expected = sum(int(np.prod(t["shape"])) * 4 for t in tensors)
    if len(blob) != expected:
        raise ArtifactError(f"{bpath}: blob is {len(blob)} bytes, manifest "
                            f"expects {expected}")
    spec = ModelSpec.from_dict(manifest["model"])
    cfg = ExperimentConfig.from_dict(manifest["config"])
    model = build_model(spec.arch, spec.input_shape, spec.n_classes, cfg.seed)
    named = model.named_params()
    want = [n for n, _ in named]
    got = [t["name"] for t in tensors]
    if want != got:
        odd = next((f"{g!r} where {w!r} expected"
                    for w, g in zip(want, got) if w != g),
                   f"{len(got)} tensors where {len(want)} expected")
        raise ArtifactError(f"{mpath}: tensor names do not match arch "
                            f"{spec.arch!r}: {odd}")
    off = 0
    for (name, p), t in zip(named, tensors):
        shape = tuple(t["shape"])
        if p.data.shape != shape:
            raise ArtifactError(f"{mpath}: {name} has shape {list(p.data.shape)} "
                                f"in arch, {t['shape']} in manifest")
        n = int(np.prod(shape)) * 4
        p.data = np.frombuffer(blob, dtype="<f4", count=n // 4,
                               offset=off).reshape(shape).copy()
        off += n
    state = TrainState(model, cfg)
    state.step = int(manifest["counters"]["step"])
    state.epoch = int(manifest["counters"]["epoch"])
    state.metrics_summary = manifest["metrics"]
    q = manifest.get("quant")
    if q is not None:
        layers = {}
        for name, d in q["layers"].items():
            layers[name] = LayerQuant(
                ChannelScale(np.array(d["scale"], dtype=np.float32)),
                Codebook.from_dict(d["codebook"]),
                ActQuantizer.from_dict(d["act"]))
        state.quant = QuantState(layers, BitAssignment.from_dict(q["assignment"]),
                                 CommitConfig(q["beta"]), q["codebook_learning"])
        act_params = [p for l in layers.values() for p in l.actq.params()]
        state.opt_act = SGD(act_params, cfg.lr0, cfg.momentum, 0.0)
        check_quant_invariant(state)
    return state


def export_histogram(state, layer_name, what):
    """CSV histogram (64 equal-width bins) of a layer's stored weights or of
    its quantized reconstruction, plus the codebook levels as a second
    section when the layer has one."""
    try:
        layer = state.model.layer(layer_name)
    except KeyError:
        raise ArtifactError(f"unknown layer {layer_name!r}; have "
                            f"{[l.name for l in state.model.layers]}") from None
    lq = None
    if state.quant is not None:
        lq = state.quant.layers.get(layer_name)
    if what == "weights":
        values = layer.weight.data
    elif what == "codebook":
        if lq is None:
            raise ArtifactError(f"layer {layer_name!r} has no codebook")
        from .codebook import assign_nearest
        s_b = lq.scale.broadcast(layer.weight.data.ndim, axis=layer.channel_axis)
        _, w_hat = assign_nearest(layer.weight.data / s_b, lq.codebook)
        values = s_b * w_hat
    else:
        raise ArtifactError(f"what must be 'weights' or 'codebook', got {what!r}")
    counts, edges = np.histogram(values.reshape(-1).astype(np.float64), bins=64)
    lines = ["bin_left,bin_right,count"]
    for i, c in enumerate(counts):
        lines.append(f"{float(edges[i])!r},{float(edges[i + 1])!r},{int(c)}")
    if lq is not None:
        lines.append("")
        lines.append("codebook_level")
        for lv in lq.codebook.levels:
            lines.append(repr(float(lv)))
    return "\n".join(lines) + "\n"
