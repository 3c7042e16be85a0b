"""Toy architectures: a VGG-style plain stack and a LightCNN-style MFM/group stack."""

from __future__ import annotations

import numpy as np

from . import netir
from .netir import NetworkIR

VGG_WIDTHS = (8, 8, "M", 16, 16, "M", 32, 32)
VGG16_WIDTHS = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512)


def vgg_layers(in_channels=1, widths=VGG_WIDTHS, n_out=None, kernel=3):
    """conv-ReLU blocks with 'M' for 2×2 max-pooling, then GAP (+ Linear head)."""
    layers, c, i, p = [], in_channels, 0, 0
    for w in widths:
        if w == "M":
            p += 1
            layers.append(netir.maxpool(f"pool{p}", 2))
            continue
        i += 1
        layers.append(netir.conv(f"conv{i}", c, w, kernel))
        layers.append(netir.relu(f"relu{i}"))
        c = w
    layers.append(netir.gap("gap"))
    if n_out:
        layers.append(netir.linear("fc", c, n_out))
    return layers


def lightcnn_layers(in_channels=1, stem=16, groups=(24, 32), n_out=None, kernel=3):
    """MFM stem, then one group layer per entry of ``groups`` (1×1 MFM then k×k MFM)."""
    layers = [netir.conv("conv1", in_channels, 2 * stem, 5), netir.mfm("mfm1", stem),
              netir.maxpool("pool1", 2)]
    c = stem
    for g, out in enumerate(groups, start=1):
        tag = f"group{g}"
        layers += [
            netir.conv(f"{tag}_conv_a", c, 2 * c, 1, group=tag),
            netir.mfm(f"{tag}_mfm_a", c, group=tag),
            netir.conv(f"{tag}_conv_b", c, 2 * out, kernel, group=tag),
            netir.mfm(f"{tag}_mfm_b", out, group=tag),
        ]
        if g < len(groups):
            layers.append(netir.maxpool(f"pool{g + 1}", 2))
        c = out
    layers.append(netir.gap("gap"))
    if n_out:
        layers.append(netir.linear("fc", c, n_out))
    return layers


def build_net(arch: str, input_shape=(1, 32, 32), n_out=None, seed=0, **kw) -> NetworkIR:
    rng = np.random.default_rng(seed)
    if arch == "vgg":
        layers = vgg_layers(input_shape[0], n_out=n_out, **kw)
    elif arch == "lightcnn":
        layers = lightcnn_layers(input_shape[0], n_out=n_out, **kw)
    else:
        raise ValueError(f"unknown architecture {arch!r}")
    return netir.build(layers, input_shape, rng, {"name": arch, "arch": arch})


def tap_layers(net: NetworkIR) -> list[str]:
    """Layers whose outputs can feed a probe: every Conv2D not followed by MFM, and every MFM."""
    out = []
    for i, spec in enumerate(net.layers):
        nxt = net.layers[i + 1] if i + 1 < len(net.layers) else None
        if spec.kind == "MFM" or (spec.kind == "Conv2D" and (nxt is None or nxt.kind != "MFM")):
            out.append(spec.id)
    return out
