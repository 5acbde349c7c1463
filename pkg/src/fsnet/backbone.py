"""Two-stream detector: stream trunks, fusion, autoencoder, multibox tail.

The forward pass factors as h(g(x)): `g` is encode (spatial) + encode
(temporal) + fuse + encode_bottleneck, `h` is decode_and_detect.  The
bottleneck feature map is the compact representation the future regressor
works in, so both named configs keep it at 256 channels.

Input contract: encode_spatial expects the already-normalized RGB tensor
(scale to [0, 1], then subtract 0.5 — see `normalize_rgb`); encode_temporal
expects the clipped/scaled flow pair from `flow_to_stream_input`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fsnet.errors import ConfigError
from fsnet.multibox import AnchorSet, RawPredictions, generate_anchors
from fsnet.nn import Conv2d, Deconv2d, ReLU, Stack
from fsnet.nn.ops import ConvSpec, concat_channels, split_channels

__all__ = [
    "BackboneConfig",
    "FeatureMap",
    "RawPredictions",
    "TwoStreamDetector",
    "preset_backbone",
    "shape_table",
    "build_anchors",
    "normalize_rgb",
]

_STAGES = 5
_AE_LAYERS = 5


@dataclass(frozen=True)
class BackboneConfig:
    name: str
    input_size: int
    num_classes: int
    stream_stage_channels: tuple
    stream_gap_strides: tuple
    fusion_channels: int
    ae_encoder_channels: tuple
    ae_strides: tuple
    tail_pre_channels: tuple  # stride-2 convs between decoder output and head 0
    tail_channels: tuple  # stride-2 convs between consecutive heads
    head_scales: tuple
    num_aspects: int = 3

    @property
    def ae_decoder_channels(self) -> tuple:
        # documented mirror: the encoder channel list reversed
        return tuple(reversed(self.ae_encoder_channels))

    @property
    def bottleneck_channels(self) -> int:
        return self.ae_encoder_channels[-1]

    def __post_init__(self) -> None:
        if len(self.stream_stage_channels) != _STAGES:
            raise ConfigError(f"{self.name}: need {_STAGES} stream stages")
        if len(self.stream_gap_strides) != _STAGES - 1:
            raise ConfigError(f"{self.name}: need {_STAGES - 1} gap strides")
        if len(self.ae_encoder_channels) != _AE_LAYERS or len(self.ae_strides) != _AE_LAYERS:
            raise ConfigError(f"{self.name}: autoencoder wants {_AE_LAYERS} layers")
        if len(self.tail_channels) != len(self.head_scales) - 1:
            raise ConfigError(
                f"{self.name}: {len(self.head_scales)} heads need "
                f"{len(self.head_scales) - 1} tail convs, got {len(self.tail_channels)}"
            )
        if self.num_classes < 1 or self.num_aspects < 1 or self.input_size < 1:
            raise ConfigError(f"{self.name}: sizes must be positive")
        bad = [c for c in self.all_channels() if c < 1]
        if bad or any(s < 1 for s in self.stream_gap_strides + self.ae_strides):
            raise ConfigError(f"{self.name}: channels and strides must be >= 1")
        self.ae_extents()  # raises if the decoder cannot mirror exactly
        got = self.tail_extents()
        if got != tuple(self.head_scales):
            raise ConfigError(
                f"{self.name}: tail produces scales {got}, config says {self.head_scales}"
            )

    def all_channels(self):
        return (
            tuple(self.stream_stage_channels)
            + (self.fusion_channels,)
            + tuple(self.ae_encoder_channels)
            + tuple(self.tail_pre_channels)
            + tuple(self.tail_channels)
        )

    def conv5_extent(self) -> int:
        e = self.input_size
        for s in self.stream_gap_strides:
            spec = ConvSpec(1, 1, 3, 3, s, 1)
            e = spec.out_hw(e, e)[0]
        return e

    def ae_extents(self) -> tuple:
        """Encoder extents [conv5, after enc 1..5] and decoder out_pads."""
        exts = [self.conv5_extent()]
        for s in self.ae_strides:
            exts.append(ConvSpec(1, 1, 5, 5, s, 2).out_hw(exts[-1], exts[-1])[0])
        pads = []
        for j in range(_AE_LAYERS):
            s = self.ae_strides[_AE_LAYERS - 1 - j]
            src = exts[_AE_LAYERS - j]
            want = exts[_AE_LAYERS - 1 - j]
            op = want - ((src - 1) * s + 1)
            if not 0 <= op < max(s, 2):
                raise ConfigError(
                    f"{self.name}: decoder layer {j + 1} cannot restore extent "
                    f"{want} from {src} at stride {s}"
                )
            pads.append(op)
        return tuple(exts), tuple(pads)

    def tail_extents(self) -> tuple:
        e = self.ae_extents()[0][0]  # decoder restores the conv5 extent
        for _ in self.tail_pre_channels:
            e = ConvSpec(1, 1, 3, 3, 2, 1).out_hw(e, e)[0]
        scales = [e]
        for _ in self.tail_channels:
            e = ConvSpec(1, 1, 3, 3, 2, 1).out_hw(e, e)[0]
            scales.append(e)
        return tuple(scales)


_PRESETS = {
    "paper": dict(
        input_size=400,
        num_classes=3,
        stream_stage_channels=(64, 128, 256, 256, 256),
        stream_gap_strides=(2, 2, 2, 2),
        fusion_channels=256,
        ae_encoder_channels=(512, 256, 128, 64, 256),
        ae_strides=(1, 1, 1, 1, 1),
        tail_pre_channels=(),
        tail_channels=(256, 256),
        head_scales=(25, 13, 7),
    ),
    "desk": dict(
        input_size=128,
        num_classes=3,
        stream_stage_channels=(16, 32, 64, 64, 64),
        stream_gap_strides=(2, 2, 1, 1),
        fusion_channels=64,
        ae_encoder_channels=(32, 32, 32, 32, 256),
        ae_strides=(1, 2, 2, 1, 1),
        tail_pre_channels=(64, 64),
        tail_channels=(64, 64),
        head_scales=(8, 4, 2),
    ),
}


def preset_backbone(name: str, **overrides) -> BackboneConfig:
    if name not in _PRESETS:
        raise ConfigError(f"unknown backbone preset {name!r}; have {sorted(_PRESETS)}")
    return BackboneConfig(name=name, **{**_PRESETS[name], **overrides})


@dataclass
class FeatureMap:
    """A (C, H, W) activation tagged with its frame index and provenance."""

    tensor: np.ndarray
    time_index: int = 0
    source: str = "observed"

    def __post_init__(self) -> None:
        if self.tensor.ndim != 3:
            raise ConfigError(f"feature map must be (C, H, W), got {self.tensor.shape}")
        if self.source not in ("observed", "regressed"):
            raise ConfigError(f"feature source must be observed|regressed: {self.source}")


def normalize_rgb(frame01: np.ndarray) -> np.ndarray:
    """[0, 1] RGB -> mean-centered stream input."""
    return (frame01 - 0.5).astype(np.float32)


def build_anchors(config: BackboneConfig) -> AnchorSet:
    return generate_anchors(list(config.head_scales))


def _trunk(prefix: str, in_channels: int, cfg: BackboneConfig, rng) -> Stack:
    layers = []
    prev = in_channels
    for i, ch in enumerate(cfg.stream_stage_channels, start=1):
        if i > 1:
            layers += [
                Conv2d(
                    f"{prefix}.g{i - 1}",
                    prev,
                    ch,
                    3,
                    stride=cfg.stream_gap_strides[i - 2],
                    padding=1,
                    rng=rng,
                ),
                ReLU(),
            ]
            prev = ch
        layers += [
            Conv2d(f"{prefix}.s{i}c1", prev, ch, 3, padding=1, rng=rng),
            ReLU(),
            Conv2d(f"{prefix}.s{i}c2", ch, ch, 3, padding=1, rng=rng),
            ReLU(),
        ]
        prev = ch
    layers[0].need_input_grad = False  # nothing upstream of the frame itself
    return Stack(layers)


class TwoStreamDetector:
    """The full detector; set two_stream=False for the RGB-only variant."""

    def __init__(self, config: BackboneConfig, rng=None, *, two_stream: bool = True):
        if rng is None:
            rng = np.random.default_rng(0)
        self.config = config
        self.two_stream = two_stream
        conv5_ch = config.stream_stage_channels[-1]
        if conv5_ch != config.fusion_channels:
            raise ConfigError(
                f"{config.name}: conv5 channels {conv5_ch} must equal "
                f"fusion channels {config.fusion_channels} for the one-stream bypass"
            )
        self.spatial = _trunk("spatial", 3, config, rng)
        self.temporal = _trunk("temporal", 2, config, rng) if two_stream else None
        self.fusion = (
            Conv2d("fusion", 2 * conv5_ch, config.fusion_channels, 1, rng=rng)
            if two_stream
            else None
        )
        enc = []
        prev = config.fusion_channels
        for i, (ch, s) in enumerate(zip(config.ae_encoder_channels, config.ae_strides), 1):
            enc += [Conv2d(f"enc{i}", prev, ch, 5, stride=s, padding=2, rng=rng), ReLU()]
            prev = ch
        self.encoder = Stack(enc)
        _, out_pads = config.ae_extents()
        dec = []
        dec_strides = tuple(reversed(config.ae_strides))
        for i, (ch, s, op) in enumerate(
            zip(config.ae_decoder_channels, dec_strides, out_pads), 1
        ):
            dec += [
                Deconv2d(f"dec{i}", prev, ch, 5, stride=s, padding=2, out_pad=op, rng=rng),
                ReLU(),
            ]
            prev = ch
        self.decoder = Stack(dec)
        pre = []
        for i, ch in enumerate(config.tail_pre_channels, 1):
            pre += [Conv2d(f"pre{i}", prev, ch, 3, stride=2, padding=1, rng=rng), ReLU()]
            prev = ch
        self.tail_pre = Stack(pre)
        self.tail = []
        tap_ch = [prev]
        for i, ch in enumerate(config.tail_channels, 1):
            self.tail.append(
                Stack([Conv2d(f"tail{i}", prev, ch, 3, stride=2, padding=1, rng=rng), ReLU()])
            )
            prev = ch
            tap_ch.append(ch)
        a = config.num_aspects
        self.heads = [
            (
                Conv2d(f"head{i}.loc", c, 4 * a, 3, padding=1, rng=rng),
                Conv2d(f"head{i}.conf", c, (config.num_classes + 1) * a, 3, padding=1, rng=rng),
            )
            for i, c in enumerate(tap_ch)
        ]

    # ---- g ----

    def _check_input(self, x: np.ndarray, channels: int, what: str) -> None:
        s = self.config.input_size
        if x.shape != (channels, s, s):
            raise ConfigError(f"{what} input must be ({channels}, {s}, {s}), got {x.shape}")

    def encode_spatial(self, frame_input: np.ndarray, time_index: int = 0) -> FeatureMap:
        self._check_input(frame_input, 3, "spatial")
        return FeatureMap(self.spatial.forward(frame_input), time_index, "observed")

    def encode_temporal(self, flow_input: np.ndarray, time_index: int = 0) -> FeatureMap:
        if not self.two_stream:
            raise ConfigError("one-stream model has no temporal stream")
        self._check_input(flow_input, 2, "temporal")
        return FeatureMap(self.temporal.forward(flow_input), time_index, "observed")

    def fuse(self, spatial: FeatureMap, temporal: FeatureMap) -> FeatureMap:
        if not self.two_stream:
            raise ConfigError("one-stream model has no fusion layer")
        if spatial.tensor.shape != temporal.tensor.shape:
            raise ConfigError(
                f"stream shapes differ: {spatial.tensor.shape} vs {temporal.tensor.shape}"
            )
        fused = self.fusion.forward(concat_channels([spatial.tensor, temporal.tensor]))
        return FeatureMap(fused, spatial.time_index, "observed")

    def encode_bottleneck(self, fused: FeatureMap) -> FeatureMap:
        return FeatureMap(
            self.encoder.forward(fused.tensor), fused.time_index, fused.source
        )

    # ---- h ----

    def decode_and_detect(self, bottleneck: FeatureMap) -> RawPredictions:
        x = self.decoder.forward(bottleneck.tensor)
        x = self.tail_pre.forward(x)
        taps = [x]
        for stack in self.tail:
            x = stack.forward(x)
            taps.append(x)
        self._taps = taps
        scales = [
            (loc.forward(t), conf.forward(t)) for t, (loc, conf) in zip(taps, self.heads)
        ]
        return RawPredictions(scales=scales, num_classes=self.config.num_classes)

    def forward(self, frame_input: np.ndarray, flow_input: np.ndarray | None = None,
                time_index: int = 0):
        """(bottleneck FeatureMap, RawPredictions) for one frame."""
        sp = self.encode_spatial(frame_input, time_index)
        if self.two_stream:
            if flow_input is None:
                raise ConfigError("two-stream model needs a flow input")
            fused = self.fuse(sp, self.encode_temporal(flow_input, time_index))
        else:
            fused = sp
        bottleneck = self.encode_bottleneck(fused)
        return bottleneck, self.decode_and_detect(bottleneck)

    # ---- training plumbing ----

    def backward(self, grad_scales: list) -> np.ndarray:
        """Backprop from per-scale (grad_loc, grad_conf); returns the
        gradient at the bottleneck for callers that want to inspect it."""
        n = len(self.heads)
        g = None
        for i in range(n - 1, -1, -1):
            loc, conf = self.heads[i]
            gi = loc.backward(grad_scales[i][0]) + conf.backward(grad_scales[i][1])
            if i == n - 1:
                g = gi
            else:
                g = gi + self.tail[i].backward(g)
        g = self.tail_pre.backward(g)
        g_bottleneck = self.decoder.backward(g)
        g = self.encoder.backward(g_bottleneck)
        if self.two_stream:
            g = self.fusion.backward(g)
            half = self.config.stream_stage_channels[-1]
            g_sp, g_tm = split_channels(g, [half, half])
            self.temporal.backward(g_tm)
            self.spatial.backward(g_sp)
        else:
            self.spatial.backward(g)
        return g_bottleneck

    def parameters(self):
        stacks = [self.spatial]
        if self.two_stream:
            stacks += [self.temporal, Stack([self.fusion])]
        stacks += [self.encoder, self.decoder, self.tail_pre, *self.tail]
        params = [p for s in stacks for p in s.parameters()]
        for loc, conf in self.heads:
            params += loc.parameters() + conf.parameters()
        return params

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def shape_table(config: BackboneConfig) -> list:
    """Declared (name, (C, H, W)) for every layer output, by arithmetic alone."""
    rows = []
    e = config.input_size
    prev = 3
    for i, ch in enumerate(config.stream_stage_channels, 1):
        if i > 1:
            e = ConvSpec(1, 1, 3, 3, config.stream_gap_strides[i - 2], 1).out_hw(e, e)[0]
            rows.append((f"stream.g{i - 1}", (ch, e, e)))
        rows.append((f"stream.s{i}c1", (ch, e, e)))
        rows.append((f"stream.s{i}c2", (ch, e, e)))
        prev = ch
    rows.append(("fusion", (config.fusion_channels, e, e)))
    exts, _ = config.ae_extents()
    for i, ch in enumerate(config.ae_encoder_channels, 1):
        rows.append((f"enc{i}", (ch, exts[i], exts[i])))
    for i, ch in enumerate(config.ae_decoder_channels, 1):
        rows.append((f"dec{i}", (ch, exts[_AE_LAYERS - i], exts[_AE_LAYERS - i])))
    taps = config.tail_extents()
    e = exts[0]
    for i, ch in enumerate(config.tail_pre_channels, 1):
        e = ConvSpec(1, 1, 3, 3, 2, 1).out_hw(e, e)[0]
        rows.append((f"pre{i}", (ch, e, e)))
    tap_ch = [config.tail_pre_channels[-1] if config.tail_pre_channels
              else config.ae_decoder_channels[-1]]
    for i, ch in enumerate(config.tail_channels, 1):
        rows.append((f"tail{i}", (ch, taps[i], taps[i])))
        tap_ch.append(ch)
    a = config.num_aspects
    for i, (c, s) in enumerate(zip(tap_ch, taps)):
        rows.append((f"head{i}.loc", (4 * a, s, s)))
        rows.append((f"head{i}.conf", ((config.num_classes + 1) * a, s, s)))
    return rows
