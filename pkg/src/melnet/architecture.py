"""Declarative two-scale detector architecture: spec, builder, forward pass.

A network is a flat list of layer lines. ``conv`` lines carry batch norm and
leaky ReLU; ``detect`` lines are plain 1x1 convolutions with bias (linear,
no norm) whose output is recorded as a head while the running tensor passes
through unchanged, so the upsampling route can continue from the feature map
that fed the head. ``res n`` expands to n pairs of (1x1 half-channels,
3x3 full-channels) convolutions with a skip addition.

Text form, one layer per line: ``conv 64 3 2``, ``res 8``, ``up``,
``cat 8``, ``detect 1``.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np

from .autograd import (
    Tensor,
    batch_norm,
    check_finite,
    concat_channels,
    conv2d,
    leaky_relu,
    no_grad,
    residual_add,
    upsample_nearest_x2,
)

LEAKY_SLOPE = 0.1
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | res | up | cat | detect
    out_ch: int = 0
    ksize: int = 0
    stride: int = 1
    repeats: int = 0
    source: int = -1
    scale: int = 0


def conv(out_ch: int, ksize: int, stride: int = 1) -> LayerSpec:
    return LayerSpec("conv", out_ch=out_ch, ksize=ksize, stride=stride)


def res(repeats: int) -> LayerSpec:
    return LayerSpec("res", repeats=repeats)


def up() -> LayerSpec:
    return LayerSpec("up")


def cat(source: int) -> LayerSpec:
    return LayerSpec("cat", source=source)


def detect(scale: int) -> LayerSpec:
    return LayerSpec("detect", scale=scale)


@dataclass(frozen=True)
class ArchSpec:
    layers: tuple[LayerSpec, ...]
    input_size: int = 640
    num_classes: int = 9
    anchors_per_scale: int = 3
    width_mult: float = 1.0

    @property
    def head_channels(self) -> int:
        return self.anchors_per_scale * (5 + self.num_classes)

    def scaled(self, ch: int) -> int:
        return max(1, int(round(ch * self.width_mult)))


class ArchError(ValueError):
    pass


def validate_spec(spec: ArchSpec) -> None:
    if spec.input_size % 32 != 0:
        raise ArchError(f"input_size {spec.input_size} is not divisible by 32")
    if spec.num_classes < 1:
        raise ArchError("num_classes must be at least 1")
    detect_scales = []
    for i, layer in enumerate(spec.layers):
        if layer.kind == "conv":
            if layer.ksize not in (1, 3):
                raise ArchError(f"layer {i}: kernel size must be 1 or 3, got {layer.ksize}")
            if layer.stride not in (1, 2):
                raise ArchError(f"layer {i}: stride must be 1 or 2, got {layer.stride}")
        elif layer.kind == "res":
            if layer.repeats < 1:
                raise ArchError(f"layer {i}: residual repeat count must be positive")
        elif layer.kind == "cat":
            if not 0 <= layer.source < i:
                raise ArchError(f"layer {i}: concat source {layer.source} is not an earlier layer")
        elif layer.kind == "detect":
            detect_scales.append(layer.scale)
        elif layer.kind != "up":
            raise ArchError(f"layer {i}: unknown kind {layer.kind!r}")
    if sorted(detect_scales) != [1, 2]:
        raise ArchError(f"spec must contain exactly detect 1 and detect 2, got {detect_scales}")
    strides = head_strides(spec)
    if strides != {1: 32, 2: 16}:
        raise ArchError(f"head strides must be 32 (scale 1) and 16 (scale 2), got {strides}")


def head_strides(spec: ArchSpec) -> dict[int, int]:
    """Simulate the cumulative stride at each detect line."""
    stride = 1
    stride_at: dict[int, int] = {}
    out: dict[int, int] = {}
    for i, layer in enumerate(spec.layers):
        if layer.kind == "conv":
            stride *= layer.stride
        elif layer.kind == "up":
            stride //= 2
        elif layer.kind == "cat":
            if stride_at[layer.source] != stride:
                raise ArchError(
                    f"layer {i}: concat source at stride {stride_at[layer.source]} "
                    f"does not match current stride {stride}"
                )
        elif layer.kind == "detect":
            out[layer.scale] = stride
        stride_at[i] = stride
    return out


def count_conv_layers(spec: ArchSpec) -> int:
    """Convolution count after residual expansion, detect convs included."""
    total = 0
    for layer in spec.layers:
        if layer.kind == "conv":
            total += 1
        elif layer.kind == "res":
            total += 2 * layer.repeats
        elif layer.kind == "detect":
            total += 1
    return total


def count_all_layers(spec: ArchSpec) -> int:
    """Convolutions plus upsample and concat layers."""
    extra = sum(1 for layer in spec.layers if layer.kind in ("up", "cat"))
    return count_conv_layers(spec) + extra


def _detector_layers(res_repeats: tuple[int, int, int, int, int]) -> tuple[LayerSpec, ...]:
    r1, r2, r3, r4, r5 = res_repeats
    return (
        # backbone, stride 1 -> 32
        conv(32, 3, 1),     # 0
        conv(64, 3, 2),     # 1
        res(r1),            # 2
        conv(128, 3, 2),    # 3
        res(r2),            # 4
        conv(256, 3, 2),    # 5
        res(r3),            # 6
        conv(512, 3, 2),    # 7
        res(r4),            # 8   <- stride-16 tap for the second head
        conv(1024, 3, 2),   # 9
        res(r5),            # 10
        # neck
        conv(512, 1, 1),    # 11
        conv(1024, 3, 1),   # 12
        conv(512, 1, 1),    # 13
        # first head (stride 32)
        conv(512, 1, 1),    # 14
        conv(1024, 3, 1),   # 15
        conv(512, 1, 1),    # 16
        conv(1024, 3, 1),   # 17
        conv(512, 1, 1),    # 18
        conv(1024, 3, 1),   # 19
        detect(1),          # 20
        # route to the doubled scale
        conv(256, 1, 1),    # 21
        up(),               # 22
        cat(8),             # 23
        # second head (stride 16)
        conv(256, 1, 1),    # 24
        conv(512, 3, 1),    # 25
        conv(256, 1, 1),    # 26
        conv(512, 3, 1),    # 27
        conv(256, 1, 1),    # 28
        conv(512, 3, 1),    # 29
        detect(2),          # 30
    )


def reference_spec(num_classes: int = 9, anchors_per_scale: int = 3) -> ArchSpec:
    """The full-size layout: 70 convolutions, heads at strides 32 and 16."""
    if num_classes < 1:
        raise ArchError("num_classes must be at least 1")
    spec = ArchSpec(
        layers=_detector_layers((1, 2, 8, 8, 4)),
        input_size=640,
        num_classes=num_classes,
        anchors_per_scale=anchors_per_scale,
        width_mult=1.0,
    )
    validate_spec(spec)
    return spec


def tiny_spec(num_classes: int = 9, anchors_per_scale: int = 3) -> ArchSpec:
    """Same topology at 1/32 width with single-repeat residual blocks.

    Small enough (~40k parameters) for finite-difference checks and
    overfit tests at a 64x64 input.
    """
    spec = ArchSpec(
        layers=_detector_layers((1, 1, 1, 1, 1)),
        input_size=64,
        num_classes=num_classes,
        anchors_per_scale=anchors_per_scale,
        width_mult=1.0 / 32.0,
    )
    validate_spec(spec)
    return spec


# -- text serialization ------------------------------------------------------


def spec_to_text(spec: ArchSpec) -> str:
    buf = io.StringIO()
    buf.write(
        f"# arch input_size={spec.input_size} num_classes={spec.num_classes} "
        f"anchors_per_scale={spec.anchors_per_scale} width_mult={spec.width_mult!r}\n"
    )
    for layer in spec.layers:
        if layer.kind == "conv":
            buf.write(f"conv {layer.out_ch} {layer.ksize} {layer.stride}\n")
        elif layer.kind == "res":
            buf.write(f"res {layer.repeats}\n")
        elif layer.kind == "up":
            buf.write("up\n")
        elif layer.kind == "cat":
            buf.write(f"cat {layer.source}\n")
        else:
            buf.write(f"detect {layer.scale}\n")
    return buf.getvalue()


def spec_from_text(text: str) -> ArchSpec:
    meta = {"input_size": 640, "num_classes": 9, "anchors_per_scale": 3, "width_mult": 1.0}
    layers: list[LayerSpec] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            for token in line.lstrip("# ").split():
                if "=" in token:
                    key, _, value = token.partition("=")
                    if key in meta:
                        meta[key] = float(value) if key == "width_mult" else int(value)
            continue
        parts = line.split()
        try:
            if parts[0] == "conv":
                layers.append(conv(int(parts[1]), int(parts[2]), int(parts[3])))
            elif parts[0] == "res":
                layers.append(res(int(parts[1])))
            elif parts[0] == "up":
                layers.append(up())
            elif parts[0] == "cat":
                layers.append(cat(int(parts[1])))
            elif parts[0] == "detect":
                layers.append(detect(int(parts[1])))
            else:
                raise ArchError(f"line {lineno}: unknown layer kind {parts[0]!r}")
        except (IndexError, ValueError) as exc:
            raise ArchError(f"line {lineno}: cannot parse {line!r}") from exc
    spec = ArchSpec(layers=tuple(layers), **meta)
    validate_spec(spec)
    return spec


# -- instantiated network ------------------------------------------------------


@dataclass
class ConvBlock:
    """One convolution with either batch norm + leaky ReLU or linear + bias."""

    name: str
    weight: Tensor
    stride: int
    padding: int
    bias: Tensor | None = None
    gamma: Tensor | None = None
    beta: Tensor | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if self.gamma is not None:
            y = conv2d(x, self.weight, None, self.stride, self.padding)
            y = batch_norm(
                y, self.gamma, self.beta, self.running_mean, self.running_var,
                momentum=BN_MOMENTUM, eps=BN_EPS, training=training,
            )
            return leaky_relu(y, LEAKY_SLOPE)
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


@dataclass
class _Node:
    kind: str
    conv: ConvBlock | None = None
    pairs: list[tuple[ConvBlock, ConvBlock]] = field(default_factory=list)
    source: int = -1
    scale: int = 0


class Network:
    """An instantiated, weighted architecture."""

    def __init__(self, spec: ArchSpec, nodes: list[_Node], dtype):
        self.spec = spec
        self.nodes = nodes
        self.dtype = dtype
        # line outputs that a later cat still needs
        self._cat_sources = {n.source for n in nodes if n.kind == "cat"}

    # parameters in deterministic order
    def parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for node in self.nodes:
            for block in self._blocks_of(node):
                out.append((f"{block.name}.weight", block.weight))
                if block.bias is not None:
                    out.append((f"{block.name}.bias", block.bias))
                if block.gamma is not None:
                    out.append((f"{block.name}.bn.gamma", block.gamma))
                    out.append((f"{block.name}.bn.beta", block.beta))
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Everything needed to restore the network: weights plus running stats."""
        state = {name: t.data for name, t in self.parameters()}
        for node in self.nodes:
            for block in self._blocks_of(node):
                if block.running_mean is not None:
                    state[f"{block.name}.bn.running_mean"] = block.running_mean
                    state[f"{block.name}.bn.running_var"] = block.running_var
        return state

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        own = self.state_arrays()
        missing = sorted(set(own) - set(arrays))
        if missing:
            raise ValueError(f"weights file is missing tensors: {missing[:4]}...")
        extra = sorted(set(arrays) - set(own))
        if extra:
            raise ValueError(f"weights file has unexpected tensors: {extra[:4]}...")
        for name, target in own.items():
            src = arrays[name]
            if src.shape != target.shape:
                raise ValueError(
                    f"shape mismatch for {name}: file has {src.shape}, network expects {target.shape}"
                )
            target[...] = src.astype(target.dtype)

    @staticmethod
    def _blocks_of(node: _Node) -> list[ConvBlock]:
        if node.conv is not None:
            return [node.conv]
        if node.pairs:
            return [b for pair in node.pairs for b in pair]
        return []

    def num_parameters(self) -> int:
        return sum(t.size for _, t in self.parameters())

    def forward(self, images, training: bool = False) -> tuple[Tensor, Tensor]:
        """Run the network; returns the raw stride-32 and stride-16 head tensors."""
        x = images if isinstance(images, Tensor) else Tensor(images, dtype=self.dtype)
        if x.data.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected images of shape (n, 3, s, s), got {x.shape}")
        if x.shape[2] % 32 != 0 or x.shape[3] % 32 != 0:
            raise ValueError(f"input size {x.shape[2]}x{x.shape[3]} is not divisible by 32")

        saved: dict[int, Tensor] = {}
        heads: dict[int, Tensor] = {}
        cur = x
        for i, node in enumerate(self.nodes):
            if node.kind == "conv":
                cur = node.conv(cur, training)
            elif node.kind == "res":
                for narrow, wide in node.pairs:
                    skip = cur
                    cur = wide(narrow(cur, training), training)
                    cur = residual_add(cur, skip)
            elif node.kind == "up":
                cur = upsample_nearest_x2(cur)
            elif node.kind == "cat":
                cur = concat_channels(cur, saved[node.source])
            else:  # detect: record the head, pass the input through
                heads[node.scale] = node.conv(cur, training)
            if i in self._cat_sources:
                saved[i] = cur
        return heads[1], heads[2]

    def __call__(self, images, training: bool = False) -> tuple[Tensor, Tensor]:
        return self.forward(images, training)


def build(spec: ArchSpec, seed: int = 0, dtype=np.float32) -> Network:
    """Instantiate parameter tensors for ``spec``, deterministically from ``seed``.

    Convolution weights use He scaling (normal with variance 2/fan_in); batch
    norm starts at gamma=1, beta=0 with zeroed running statistics; detect
    convolutions carry a zero bias instead of a norm.
    """
    validate_spec(spec)
    rng = np.random.default_rng(seed)

    def he_weight(out_ch: int, in_ch: int, k: int) -> Tensor:
        fan_in = in_ch * k * k
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, k, k))
        return Tensor(w.astype(dtype), requires_grad=True)

    def bn_block(name: str, in_ch: int, out_ch: int, k: int, stride: int) -> ConvBlock:
        return ConvBlock(
            name=name,
            weight=he_weight(out_ch, in_ch, k),
            stride=stride,
            padding=1 if k == 3 else 0,
            gamma=Tensor(np.ones(out_ch, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(out_ch, dtype=dtype),
            running_var=np.ones(out_ch, dtype=dtype),
        )

    nodes: list[_Node] = []
    channels = 3
    channel_at: list[int] = []
    for i, layer in enumerate(spec.layers):
        if layer.kind == "conv":
            out_ch = spec.scaled(layer.out_ch)
            nodes.append(_Node("conv", conv=bn_block(f"l{i:02d}", channels, out_ch, layer.ksize, layer.stride)))
            channels = out_ch
        elif layer.kind == "res":
            half = max(1, channels // 2)
            pairs = []
            for r in range(layer.repeats):
                pairs.append(
                    (
                        bn_block(f"l{i:02d}.r{r}a", channels, half, 1, 1),
                        bn_block(f"l{i:02d}.r{r}b", half, channels, 3, 1),
                    )
                )
            nodes.append(_Node("res", pairs=pairs))
        elif layer.kind == "up":
            nodes.append(_Node("up"))
        elif layer.kind == "cat":
            nodes.append(_Node("cat", source=layer.source))
            channels = channels + channel_at[layer.source]
        else:  # detect
            out_ch = spec.head_channels
            block = ConvBlock(
                name=f"l{i:02d}",
                weight=he_weight(out_ch, channels, 1),
                stride=1,
                padding=0,
                bias=Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True),
            )
            nodes.append(_Node("detect", conv=block, scale=layer.scale))
            # running tensor passes through: channel count unchanged
        channel_at.append(channels)

    return Network(spec, nodes, dtype)


def save_weights(net: Network, path) -> None:
    from .weights import write_tensors

    state = net.state_arrays()
    for name, arr in state.items():
        check_finite(arr, f"parameter {name}")
    write_tensors(path, state)


def load_weights(path, spec: ArchSpec, seed: int = 0, dtype=np.float32) -> Network:
    from .weights import read_tensors

    net = build(spec, seed=seed, dtype=dtype)
    net.load_state(read_tensors(path))
    return net
