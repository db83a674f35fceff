"""Four-stage pyramid encoder with stage taps, aux heads, and a fuse decoder.

Each stage downsamples with a non-overlapping strided patch conv and then runs
a stack of token-mixing blocks, either self-attention or residual 3x3 conv
blocks (identical output shapes, so everything downstream is shared).  Every
stage exposes a 1x1 auxiliary head emitting a 1-channel logit map at the
stage's resolution.  The decoder projects each stage to a common width,
upsamples to stage-1 resolution, concatenates, fuses, predicts 1-channel
logits, and upsamples to the input size.

Checkpoints are a plain-text header (config metadata plus parameter names and
shapes) followed by the raw little-endian float64 parameter data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    Array,
    Tensor,
    add,
    attention_block,
    concat,
    conv2d,
    relu,
    reshape,
    transpose,
    upsample_bilinear,
)

BLOCK_TYPES = ("attention", "conv")

CHECKPOINT_MAGIC = "ftuseg-checkpoint 1"


@dataclass(frozen=True)
class EncoderConfig:
    stage_channels: tuple[int, ...] = (16, 32, 64, 96)
    stage_strides: tuple[int, ...] = (4, 2, 2, 2)
    blocks_per_stage: int = 1
    block_type: str = "attention"

    def __post_init__(self):
        if len(self.stage_channels) != len(self.stage_strides):
            raise ValueError(
                f"stage_channels ({len(self.stage_channels)}) and stage_strides "
                f"({len(self.stage_strides)}) must have equal length"
            )
        if not self.stage_channels:
            raise ValueError("at least one stage is required")
        if any(c < 1 for c in self.stage_channels):
            raise ValueError("stage channels must be positive")
        if any(s < 1 for s in self.stage_strides):
            raise ValueError("stage strides must be positive")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")
        if self.block_type not in BLOCK_TYPES:
            raise ValueError(f"block_type must be one of {BLOCK_TYPES}")

    @property
    def num_stages(self) -> int:
        return len(self.stage_channels)

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.stage_strides))


class SegModel:
    """Encoder/decoder segmentation model over the autodiff Tensor type.

    Stages are indexed 1..N from the input side.  ``forward`` returns the
    full-resolution main logit map plus auxiliary logit maps for the
    requested stages.
    """

    def __init__(
        self,
        config: EncoderConfig = EncoderConfig(),
        decoder_width: int = 16,
        in_channels: int = 3,
        seed: int = 0,
    ):
        if decoder_width < 1:
            raise ValueError("decoder_width must be >= 1")
        self.config = config
        self.decoder_width = int(decoder_width)
        self.in_channels = int(in_channels)
        self.seed = int(seed)
        self._params: dict[str, Tensor] = {}
        rng = np.random.default_rng([seed, 0x5E6])
        self._build(rng)

    # -- construction -------------------------------------------------------

    def _new_param(self, name: str, shape: tuple[int, ...], fan_in: int, rng) -> Tensor:
        bound = 1.0 / math.sqrt(fan_in)
        tensor = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
        self._params[name] = tensor
        return tensor

    def _build(self, rng) -> None:
        cfg = self.config
        prev = self.in_channels
        for idx, (ch, stride) in enumerate(zip(cfg.stage_channels, cfg.stage_strides), start=1):
            fan = prev * stride * stride
            self._new_param(f"enc{idx}.patch.w", (ch, prev, stride, stride), fan, rng)
            self._new_param(f"enc{idx}.patch.b", (ch, 1, 1), fan, rng)
            for b in range(1, cfg.blocks_per_stage + 1):
                if cfg.block_type == "attention":
                    for proj in ("wq", "wk", "wv", "wo"):
                        self._new_param(f"enc{idx}.block{b}.{proj}", (ch, ch), ch, rng)
                    for bias in ("bq", "bk", "bv", "bo"):
                        self._new_param(f"enc{idx}.block{b}.{bias}", (ch,), ch, rng)
                else:
                    fan3 = ch * 9
                    self._new_param(f"enc{idx}.block{b}.w1", (ch, ch, 3, 3), fan3, rng)
                    self._new_param(f"enc{idx}.block{b}.b1", (ch, 1, 1), fan3, rng)
                    self._new_param(f"enc{idx}.block{b}.w2", (ch, ch, 3, 3), fan3, rng)
                    self._new_param(f"enc{idx}.block{b}.b2", (ch, 1, 1), fan3, rng)
            prev = ch
        for idx, ch in enumerate(cfg.stage_channels, start=1):
            self._new_param(f"aux{idx}.w", (1, ch, 1, 1), ch, rng)
            self._new_param(f"aux{idx}.b", (1, 1, 1), ch, rng)
        width = self.decoder_width
        for idx, ch in enumerate(cfg.stage_channels, start=1):
            self._new_param(f"dec.proj{idx}.w", (width, ch, 1, 1), ch, rng)
            self._new_param(f"dec.proj{idx}.b", (width, 1, 1), ch, rng)
        fused_in = cfg.num_stages * width
        self._new_param("dec.fuse.w", (width, fused_in, 1, 1), fused_in, rng)
        self._new_param("dec.fuse.b", (width, 1, 1), fused_in, rng)
        self._new_param("dec.head.w", (1, width, 1, 1), width, rng)
        self._new_param("dec.head.b", (1, 1, 1), width, rng)

    # -- parameter access ----------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def parameters(self) -> list[Tensor]:
        return list(self._params.values())

    def stage_parameters(self, stage: int) -> list[Tensor]:
        """Encoder parameters of one stage (patch merge plus its blocks)."""
        self._check_stage(stage)
        prefix = f"enc{stage}."
        return [t for name, t in self._params.items() if name.startswith(prefix)]

    def parameter_count(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def _check_stage(self, stage: int) -> None:
        if not 1 <= stage <= self.config.num_stages:
            raise ValueError(
                f"stage must be in 1..{self.config.num_stages}, got {stage}"
            )

    # -- forward -------------------------------------------------------------

    def _run_block(self, x: Tensor, stage: int, block: int) -> Tensor:
        p = self._params
        key = f"enc{stage}.block{block}."
        if self.config.block_type == "attention":
            c, h, w = x.shape
            tokens = transpose(reshape(x, (c, h * w)))
            mixed = attention_block(
                tokens,
                p[key + "wq"], p[key + "wk"], p[key + "wv"], p[key + "wo"],
                p[key + "bq"], p[key + "bk"], p[key + "bv"], p[key + "bo"],
            )
            return reshape(transpose(mixed), (c, h, w))
        hidden = relu(add(conv2d(x, p[key + "w1"], stride=1, padding=1), p[key + "b1"]))
        return add(x, add(conv2d(hidden, p[key + "w2"], stride=1, padding=1), p[key + "b2"]))

    def encoder_forward(self, image: Tensor) -> list[Tensor]:
        """Stage feature maps (low to high stage index) for one ``[3, H, W]`` image."""
        if image.data.ndim != 3 or image.shape[0] != self.in_channels:
            raise ValueError(
                f"expected [{self.in_channels}, H, W] image, got {image.shape}"
            )
        _, h, w = image.shape
        total = self.config.total_stride
        if h % total or w % total:
            raise ValueError(f"input {h}x{w} not divisible by total stride {total}")
        feats: list[Tensor] = []
        x = image
        for stage, stride in enumerate(self.config.stage_strides, start=1):
            patch = self._params[f"enc{stage}.patch.w"]
            x = add(conv2d(x, patch, stride=stride, padding=0), self._params[f"enc{stage}.patch.b"])
            for block in range(1, self.config.blocks_per_stage + 1):
                x = self._run_block(x, stage, block)
            feats.append(x)
        return feats

    def aux_head_forward(self, feature: Tensor, stage: int) -> Tensor:
        """1-channel logit map from one stage's features, at that resolution."""
        self._check_stage(stage)
        p = self._params
        return add(conv2d(feature, p[f"aux{stage}.w"]), p[f"aux{stage}.b"])

    def decoder_forward(self, feats: list[Tensor], out_h: int, out_w: int) -> Tensor:
        p = self._params
        h1, w1 = feats[0].shape[1], feats[0].shape[2]
        lifted: list[Tensor] = []
        for idx, feat in enumerate(feats, start=1):
            proj = add(conv2d(feat, p[f"dec.proj{idx}.w"]), p[f"dec.proj{idx}.b"])
            if proj.shape[1] != h1 or proj.shape[2] != w1:
                proj = upsample_bilinear(proj, h1, w1)
            lifted.append(proj)
        fused = relu(add(conv2d(concat(lifted, axis=0), p["dec.fuse.w"]), p["dec.fuse.b"]))
        logits = add(conv2d(fused, p["dec.head.w"]), p["dec.head.b"])
        return upsample_bilinear(logits, out_h, out_w)

    def forward(
        self, image: Tensor, aux_stages: tuple[int, ...] = ()
    ) -> tuple[Tensor, dict[int, Tensor]]:
        """Main logits ``[1, H, W]`` plus aux logit maps for ``aux_stages``."""
        feats = self.encoder_forward(image)
        aux: dict[int, Tensor] = {}
        for stage in aux_stages:
            self._check_stage(stage)
            aux[stage] = self.aux_head_forward(feats[stage - 1], stage)
        main = self.decoder_forward(feats, image.shape[1], image.shape[2])
        return main, aux

    # -- checkpointing ---------------------------------------------------------

    def config_meta(self) -> dict[str, str]:
        cfg = self.config
        return {
            "stage_channels": ",".join(str(c) for c in cfg.stage_channels),
            "stage_strides": ",".join(str(s) for s in cfg.stage_strides),
            "blocks_per_stage": str(cfg.blocks_per_stage),
            "block_type": cfg.block_type,
            "decoder_width": str(self.decoder_width),
            "in_channels": str(self.in_channels),
        }

    @classmethod
    def from_meta(cls, meta: dict[str, str], seed: int = 0) -> "SegModel":
        cfg = EncoderConfig(
            stage_channels=tuple(int(c) for c in meta["stage_channels"].split(",")),
            stage_strides=tuple(int(s) for s in meta["stage_strides"].split(",")),
            blocks_per_stage=int(meta["blocks_per_stage"]),
            block_type=meta["block_type"],
        )
        return cls(
            cfg,
            decoder_width=int(meta["decoder_width"]),
            in_channels=int(meta.get("in_channels", "3")),
            seed=seed,
        )

    def state_arrays(self) -> dict[str, Array]:
        return {name: t.data for name, t in self._params.items()}

    def load_state(self, arrays: dict[str, Array]) -> None:
        missing = set(self._params) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint is missing parameters: {sorted(missing)[:4]}...")
        for name, tensor in self._params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != tensor.data.shape:
                raise ValueError(
                    f"shape mismatch for {name}: checkpoint {arr.shape}, model {tensor.data.shape}"
                )
            tensor.data = arr.copy()
            tensor.grad = None


def save_checkpoint(path, arrays: dict[str, Array], meta: dict[str, str]) -> None:
    """Write named float64 arrays with a text header and raw little-endian data."""
    lines = [CHECKPOINT_MAGIC]
    for key, value in meta.items():
        if any(ch.isspace() for ch in key) or "\n" in str(value):
            raise ValueError(f"malformed meta entry: {key!r}")
        lines.append(f"meta {key} {value}")
    ordered = list(arrays.items())
    for name, arr in ordered:
        if any(ch.isspace() for ch in name):
            raise ValueError(f"parameter names cannot contain whitespace: {name!r}")
        dims = " ".join(str(d) for d in np.asarray(arr).shape) or "0"
        lines.append(f"param {name} {dims}")
    lines.append("data")
    header = ("\n".join(lines) + "\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        for _, arr in ordered:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, str], dict[str, Array]]:
    """Parse a checkpoint into (meta, named arrays); validates sizes strictly."""
    with open(path, "rb") as fh:
        blob = fh.read()
    marker = b"\ndata\n"
    cut = blob.find(marker)
    if cut < 0:
        raise ValueError("truncated checkpoint: no data section")
    header_lines = blob[:cut].decode("ascii").split("\n")
    if not header_lines or header_lines[0] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic line)")
    meta: dict[str, str] = {}
    specs: list[tuple[str, tuple[int, ...]]] = []
    for line in header_lines[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
        elif kind == "param":
            fields = rest.split(" ")
            name = fields[0]
            shape = tuple(int(d) for d in fields[1:])
            if shape == (0,):
                shape = ()
            specs.append((name, shape))
        else:
            raise ValueError(f"malformed checkpoint header line: {line!r}")
    payload = blob[cut + len(marker):]
    expected = sum(int(np.prod(shape, dtype=np.int64)) for _, shape in specs) * 8
    if len(payload) != expected:
        raise ValueError(
            f"checkpoint data length {len(payload)} bytes, header promises {expected}"
        )
    arrays: dict[str, Array] = {}
    offset = 0
    for name, shape in specs:
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        arrays[name] = arr.astype(np.float64).reshape(shape)
        offset += count * 8
    return meta, arrays
