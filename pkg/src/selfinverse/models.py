"""U-Net generator, conditional patch discriminator, and the checkpoint container.

The full-scale configuration (depth 8, base 64, max 512, 256x256 input) gives
encoder channels 64-128-256-512-512-512-512-512 with a 1x1 bottleneck and the
skip-concatenated decoder input schedule 512-1024-1024-1024-1024-512-256-128.
Smaller depths scale the same schedule down for desk-scale experiments.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

CHECKPOINT_MAGIC = b"SINVCKPT"
CHECKPOINT_VERSION = 1

MODES = ("one2one", "pix2pixA", "pix2pixB")


class ModelSpecError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorSpec:
    in_channels: int = 1
    out_channels: int = 1
    depth: int = 8
    base_filters: int = 64
    max_filters: int = 512
    dropout_p: float = 0.5

    def __post_init__(self):
        if self.depth < 2:
            raise ModelSpecError(f"depth must be >= 2, got {self.depth}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ModelSpecError("channel counts must be positive")
        if self.base_filters < 1 or self.max_filters < self.base_filters:
            raise ModelSpecError("need max_filters >= base_filters >= 1")
        if not (0.0 <= self.dropout_p <= 1.0):
            raise ModelSpecError(f"dropout_p must be in [0,1], got {self.dropout_p}")

    @property
    def encoder_channels(self) -> list[int]:
        return [min(self.base_filters * 2 ** i, self.max_filters) for i in range(self.depth)]

    @property
    def decoder_out_channels(self) -> list[int]:
        enc = self.encoder_channels
        return [enc[self.depth - 2 - j] for j in range(self.depth - 1)] + [self.base_filters]

    @property
    def decoder_in_channels(self) -> list[int]:
        """Per-block input widths after skip concatenation."""
        enc = self.encoder_channels
        dec = self.decoder_out_channels
        ins = [enc[-1]]
        for j in range(1, self.depth):
            ins.append(dec[j - 1] + enc[self.depth - 1 - j])
        return ins

    def min_image_size(self) -> int:
        return 2 ** self.depth


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_channels: int = 2
    filter_schedule: tuple[int, ...] = (64, 128, 256, 512)

    def __post_init__(self):
        if self.in_channels < 2:
            raise ModelSpecError("conditional discriminator needs >= 2 input channels")
        sched = tuple(self.filter_schedule)
        if not sched or any(b <= a for a, b in zip(sched, sched[1:])):
            raise ModelSpecError(
                f"filter_schedule must be nonempty and strictly increasing, got {sched}"
            )
        object.__setattr__(self, "filter_schedule", sched)


class SafeBatchNorm2d(nn.BatchNorm2d):
    """BatchNorm that passes through when there is one value per channel.

    The 1x1 bottleneck at batch size 1 has degenerate variance; normalizing
    there would zero the activations.
    """

    def forward(self, x):
        if self.training and x.shape[0] * x.shape[2] * x.shape[3] == 1:
            return x
        return super().forward(x)


def _encoder_block(c_in: int, c_out: int, first: bool) -> nn.Sequential:
    layers: list[nn.Module] = [nn.Conv2d(c_in, c_out, 4, stride=2, padding=1)]
    if not first:
        layers.append(SafeBatchNorm2d(c_out))
    layers.append(nn.LeakyReLU(0.2, inplace=True))
    return nn.Sequential(*layers)


def _decoder_block(c_in: int, c_out: int, dropout_p: float) -> nn.Sequential:
    layers: list[nn.Module] = [
        nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1),
        SafeBatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    ]
    if dropout_p > 0:
        layers.append(nn.Dropout(dropout_p))
    return nn.Sequential(*layers)


class UnetGenerator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        enc = spec.encoder_channels
        dec_in = spec.decoder_in_channels
        dec_out = spec.decoder_out_channels
        self.encoder = nn.ModuleList(
            [_encoder_block(spec.in_channels if i == 0 else enc[i - 1], enc[i], first=i == 0)
             for i in range(spec.depth)]
        )
        self.decoder = nn.ModuleList(
            [_decoder_block(dec_in[j], dec_out[j], spec.dropout_p if j < 3 else 0.0)
             for j in range(spec.depth)]
        )
        self.head = nn.Conv2d(dec_out[-1], spec.out_channels, 3, stride=1, padding=1)
        self.out_act = nn.Tanh()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        size = x.shape[-1]
        if x.shape[-2] != size or size % (1 << self.spec.depth) != 0:
            raise ModelSpecError(
                f"input spatial size {tuple(x.shape[-2:])} must be square and a "
                f"multiple of 2^depth = {1 << self.spec.depth}"
            )
        if x.shape[1] != self.spec.in_channels:
            raise ModelSpecError(
                f"expected {self.spec.in_channels} input channels, got {x.shape[1]}"
            )
        feats = []
        h = x
        for blk in self.encoder:
            h = blk(h)
            feats.append(h)
        for j, blk in enumerate(self.decoder):
            if j > 0:
                h = torch.cat([h, feats[self.spec.depth - 1 - j]], dim=1)
            h = blk(h)
        return self.out_act(self.head(h))


class PatchDiscriminator(nn.Module):
    """Conditional discriminator over channel-concatenated (source, target) pairs."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        sched = spec.filter_schedule
        strides = [2] * (len(sched) - 1) + [1]
        blocks = []
        c_prev = spec.in_channels
        for i, (c, s) in enumerate(zip(sched, strides)):
            layers: list[nn.Module] = [nn.Conv2d(c_prev, c, 4, stride=s, padding=1)]
            if i > 0:
                layers.append(SafeBatchNorm2d(c))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            blocks.append(nn.Sequential(*layers))
            c_prev = c
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(c_prev, 1, 4, stride=1, padding=1)
        self.out_act = nn.Sigmoid()

    def min_input_size(self) -> int:
        # after the stride-2 chain the two stride-1 4x4 convs (pad 1) each cost
        # one pixel and the last needs >= 1 out: size / 2^(n-1) >= 3
        return 3 << (len(self.spec.filter_schedule) - 1)

    def forward(self, pair: torch.Tensor) -> torch.Tensor:
        if pair.shape[1] != self.spec.in_channels:
            raise ModelSpecError(
                f"expected {self.spec.in_channels} channels, got {pair.shape[1]}"
            )
        if min(pair.shape[-2:]) < self.min_input_size():
            raise ModelSpecError(
                f"discriminator with {len(self.spec.filter_schedule)} layers needs input "
                f">= {self.min_input_size()} px, got {tuple(pair.shape[-2:])}; "
                "use a shorter filter schedule for smaller images"
            )
        h = pair
        for blk in self.blocks:
            h = blk(h)
        return self.out_act(self.head(h))


def init_weights(model: nn.Module, rng: torch.Generator) -> None:
    """Gaussian(0, 0.02) conv weights, zero biases, Gaussian(1, 0.02) norm scales."""
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            with torch.no_grad():
                m.weight.normal_(0.0, 0.02, generator=rng)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            with torch.no_grad():
                m.weight.normal_(1.0, 0.02, generator=rng)
                m.bias.zero_()


def build_generator(spec: GeneratorSpec, rng: torch.Generator | int) -> UnetGenerator:
    if isinstance(rng, int):
        rng = torch.Generator().manual_seed(rng)
    g = UnetGenerator(spec)
    init_weights(g, rng)
    return g


def build_discriminator(spec: DiscriminatorSpec, rng: torch.Generator | int) -> PatchDiscriminator:
    if isinstance(rng, int):
        rng = torch.Generator().manual_seed(rng)
    d = PatchDiscriminator(spec)
    init_weights(d, rng)
    return d


def generator_forward(g: UnetGenerator, x: torch.Tensor, stochastic: bool = False) -> torch.Tensor:
    """Inference pass; stochastic=True keeps dropout live (the latent z)."""
    g.train(stochastic)
    with torch.no_grad():
        out = g(x)
    g.eval()
    return out


def discriminator_forward(d: PatchDiscriminator, source: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if source.shape != target.shape:
        raise ModelSpecError(
            f"source shape {tuple(source.shape)} != target shape {tuple(target.shape)}"
        )
    return d(torch.cat([source, target], dim=1))


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


class Translator:
    """Deterministic single-sample numpy-in/numpy-out wrapper around a generator."""

    def __init__(self, g: UnetGenerator):
        self.g = g.eval()

    def __call__(self, x: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return self.g(torch.from_numpy(np.ascontiguousarray(x))).numpy()


# ---------------------------------------------------------------------------
# checkpoint container: JSON header + named little-endian arrays

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8"), "<i8": np.dtype("<i8"), "|u1": np.dtype("|u1")}


@dataclass
class Checkpoint:
    generator_spec: GeneratorSpec
    weights: dict[str, np.ndarray]
    step: int = 0
    mode: str = "one2one"
    discriminator_spec: DiscriminatorSpec | None = None
    meta: dict = field(default_factory=dict)
    format_version: int = CHECKPOINT_VERSION

    def __post_init__(self):
        if self.mode not in MODES:
            raise CheckpointError(f"unknown mode {self.mode!r}")

    @property
    def has_optimizer(self) -> bool:
        return any(k.startswith("optim_") for k in self.weights)


def _normalize_array(arr: np.ndarray) -> tuple[np.ndarray, str]:
    a = np.asarray(arr)
    if not a.flags["C_CONTIGUOUS"]:
        a = np.ascontiguousarray(a).reshape(a.shape)  # keep 0-d arrays 0-d
    if a.dtype == np.float32:
        code = "<f4"
    elif a.dtype == np.float64:
        code = "<f8"
    elif a.dtype in (np.int64, np.int32):
        a = a.astype(np.int64)
        code = "<i8"
    elif a.dtype == np.uint8:
        code = "|u1"
    else:
        raise CheckpointError(f"unsupported array dtype {a.dtype}")
    return a.astype(_DTYPES[code]), code


def save_checkpoint(ckpt: Checkpoint, path: Path | str) -> None:
    path = Path(path)
    entries = []
    blob = io.BytesIO()
    offset = 0
    for name in sorted(ckpt.weights):
        arr, code = _normalize_array(ckpt.weights[name])
        data = arr.tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(data)})
        blob.write(data)
        offset += len(data)
    header = {
        "format_version": ckpt.format_version,
        "mode": ckpt.mode,
        "step": ckpt.step,
        "generator_spec": asdict(ckpt.generator_spec),
        "discriminator_spec": asdict(ckpt.discriminator_spec) if ckpt.discriminator_spec else None,
        "meta": ckpt.meta,
        "arrays": entries,
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(hdr)))
        f.write(hdr)
        f.write(blob.getvalue())


def load_checkpoint(path: Path | str) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 8 or raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    hlen = struct.unpack("<Q", raw[8:16])[0]
    try:
        header = json.loads(raw[16:16 + hlen])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format_version {header.get('format_version')} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    body = raw[16 + hlen:]
    weights = {}
    for e in header["arrays"]:
        dt = _DTYPES[e["dtype"]]
        seg = body[e["offset"]:e["offset"] + e["nbytes"]]
        if len(seg) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated array {e['name']}")
        weights[e["name"]] = np.frombuffer(seg, dtype=dt).reshape(e["shape"]).copy()
    gspec = GeneratorSpec(**header["generator_spec"])
    dspec = header["discriminator_spec"]
    if dspec is not None:
        dspec = DiscriminatorSpec(in_channels=dspec["in_channels"],
                                  filter_schedule=tuple(dspec["filter_schedule"]))
    return Checkpoint(
        generator_spec=gspec,
        discriminator_spec=dspec,
        weights=weights,
        step=header["step"],
        mode=header["mode"],
        meta=header.get("meta", {}),
        format_version=header["format_version"],
    )


def state_dict_to_arrays(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for k, v in module.state_dict().items():
        out[f"{prefix}.{k}"] = v.detach().cpu().numpy()
    return out


def load_arrays_into(module: nn.Module, weights: dict[str, np.ndarray], prefix: str) -> None:
    sd = module.state_dict()
    tensors = {}
    for k, v in sd.items():
        name = f"{prefix}.{k}"
        if name not in weights:
            raise CheckpointError(f"checkpoint missing tensor {name}")
        arr = weights[name]
        if tuple(arr.shape) != tuple(v.shape):
            raise CheckpointError(
                f"tensor {name}: checkpoint shape {tuple(arr.shape)} != model shape {tuple(v.shape)}"
            )
        tensors[k] = torch.from_numpy(arr.copy()).to(v.dtype)
    module.load_state_dict(tensors)


def generator_from_checkpoint(ckpt: Checkpoint) -> UnetGenerator:
    g = UnetGenerator(ckpt.generator_spec)
    load_arrays_into(g, ckpt.weights, "generator")
    return g


def discriminator_from_checkpoint(ckpt: Checkpoint) -> PatchDiscriminator:
    if ckpt.discriminator_spec is None:
        raise CheckpointError("checkpoint carries no discriminator spec")
    d = PatchDiscriminator(ckpt.discriminator_spec)
    load_arrays_into(d, ckpt.weights, "discriminator")
    return d
