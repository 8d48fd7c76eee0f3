"""Named-tensor archive: a zip holding ``manifest.json`` and one ``.npy`` per tensor.

Tensors are stored as little-endian float32 (``<f4``); the manifest records
the network kind, architecture string, skeleton/generator config and seed,
plus each tensor's original dtype so integer buffers round-trip.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict

import numpy as np
import torch

from .archspace import parse_arch
from .netbuilder import InitSpec, SkeletonConfig, build_network, build_residual_baseline
from .triggergen import GeneratorConfig, build_generator

FORMAT = "nasbackdoor-archive/1"


def _write(zf: zipfile.ZipFile, name: str, data) -> None:
    # fixed timestamp so identical tensors give identical archives
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, data)


def save_tensors(path, tensors: dict[str, torch.Tensor], manifest: dict) -> None:
    meta = dict(manifest, format=FORMAT, tensors={})
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name, t in tensors.items():
            arr = t.detach().cpu().numpy().astype("<f4")
            buf = io.BytesIO()
            np.save(buf, arr, allow_pickle=False)
            _write(zf, f"tensors/{name}.npy", buf.getvalue())
            meta["tensors"][name] = {"shape": list(arr.shape), "dtype": str(t.dtype).removeprefix("torch.")}
        _write(zf, "manifest.json", json.dumps(meta, indent=2, sort_keys=True))


def load_tensors(path) -> tuple[dict[str, torch.Tensor], dict]:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("manifest.json"))
        if meta.get("format") != FORMAT:
            raise ValueError(f"{path}: not a {FORMAT} archive")
        out = {}
        for name, info in meta["tensors"].items():
            arr = np.load(io.BytesIO(zf.read(f"tensors/{name}.npy")), allow_pickle=False)
            if list(arr.shape) != info["shape"]:
                raise ValueError(f"{path}: tensor {name} has shape {arr.shape}, manifest says {info['shape']}")
            out[name] = torch.from_numpy(arr.astype(np.float32)).to(getattr(torch, info["dtype"]))
    return out, meta


def save_network(net, path) -> None:
    manifest = {
        "kind": "network",
        "arch": net.arch_string,
        "skeleton": {**asdict(net.skel), "input_shape": list(net.skel.input_shape)},
        "seed": net.init.seed,
    }
    save_tensors(path, net.state_dict(), manifest)


def load_network(path):
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "network":
        raise ValueError(f"{path}: archive holds a {meta.get('kind')}, not a network")
    skel = SkeletonConfig(**meta["skeleton"])
    init = InitSpec(seed=meta["seed"])
    if meta["arch"] == "resnet":
        net = build_residual_baseline(skel, init)
    else:
        net = build_network(parse_arch(meta["arch"]), skel, init)
    net.load_state_dict(tensors)
    return net


def save_generator(gen, path) -> None:
    manifest = {
        "kind": "generator",
        "generator": {
            **asdict(gen.cfg),
            "input_shape": list(gen.cfg.input_shape),
            "encoder_widths": list(gen.cfg.encoder_widths),
        },
        "seed": gen.init.seed,
        "frozen_mask": gen.frozen_mask,
        # which sub-network each tensor belongs to
        "networks": {"mask": "mask_net.", "mark": "mark_net."},
    }
    save_tensors(path, gen.state_dict(), manifest)


def load_generator(path):
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "generator":
        raise ValueError(f"{path}: archive holds a {meta.get('kind')}, not a generator")
    gen = build_generator(GeneratorConfig(**meta["generator"]), InitSpec(seed=meta["seed"]))
    gen.load_state_dict(tensors)
    if meta.get("frozen_mask"):
        gen.freeze_mask()
    return gen
