"""Random valid networks for fuzz and property tests."""

from prunekit import netir


def random_network(rng, max_blocks=4, allow_mfm=True, head=True, bias_scale=0.1):
    c = int(rng.integers(1, 4))
    hw = int(rng.integers(5, 10))
    shape = (c, hw, hw)
    layers, h, n = [], hw, 0
    for _ in range(int(rng.integers(1, max_blocks + 1))):
        n += 1
        kind = rng.choice(["conv", "mfm", "pool"] if allow_mfm else ["conv", "pool"])
        if kind == "pool" and h >= 4:
            win = int(rng.integers(2, 4))
            stride = int(rng.integers(1, win + 1))
            layers.append(netir.maxpool(f"pool{n}", win, stride))
            h = (h - win) // stride + 1
            continue
        k = int(rng.choice([1, 3])) if h >= 3 else 1
        pad = int(rng.integers(0, k // 2 + 1))
        stride = int(rng.integers(1, 3)) if h >= 6 else 1
        o = int(rng.integers(1, 6))
        bias = bool(rng.integers(0, 2))
        if kind == "mfm":
            layers.append(netir.conv(f"conv{n}", c, 2 * o, k, stride, pad, bias))
            layers.append(netir.mfm(f"mfm{n}", o))
        else:
            layers.append(netir.conv(f"conv{n}", c, o, k, stride, pad, bias))
            if rng.integers(0, 2):
                layers.append(netir.relu(f"relu{n}"))
        h = (h + 2 * pad - k) // stride + 1
        c = o
    if head:
        layers.append(netir.gap("gap"))
        layers.append(netir.linear("fc", c, int(rng.integers(1, 4)), bool(rng.integers(0, 2))))
    net = netir.build(layers, shape, rng, {"name": "fuzz", "seed": int(rng.integers(1 << 30))})
    params = {k: (v if k.endswith(".weight") else rng.normal(0, bias_scale, v.shape))
              for k, v in net.params.items()}
    return net.evolve(params=params)


def random_group_network(rng, max_groups=3, head=True, bias_scale=0.1):
    """MFM stem followed by 1-3 group layers (1×1 MFM then k×k MFM), pools in between."""
    c_in, hw = int(rng.integers(1, 3)), int(rng.integers(6, 10))
    c = int(rng.integers(2, 5))
    layers = [netir.conv("conv1", c_in, 2 * c, 3), netir.mfm("mfm1", c)]
    h = hw
    for g in range(1, int(rng.integers(1, max_groups + 1)) + 1):
        tag, out = f"group{g}", int(rng.integers(2, 6))
        k = int(rng.choice([1, 3]))
        layers += [netir.conv(f"{tag}_conv_a", c, 2 * c, 1, group=tag), netir.mfm(f"{tag}_mfm_a", c, group=tag),
                   netir.conv(f"{tag}_conv_b", c, 2 * out, k, group=tag), netir.mfm(f"{tag}_mfm_b", out, group=tag)]
        if h >= 4 and rng.integers(0, 2):
            layers.append(netir.maxpool(f"pool{g}", 2))
            h //= 2
        c = out
    if head:
        layers += [netir.gap("gap"), netir.linear("fc", c, int(rng.integers(1, 3)))]
    net = netir.build(layers, (c_in, hw, hw), rng, {"name": "groupfuzz"})
    params = {k: (v if k.endswith(".weight") else rng.normal(0, bias_scale, v.shape))
              for k, v in net.params.items()}
    return net.evolve(params=params)
