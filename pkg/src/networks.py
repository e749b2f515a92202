"""
Networks - generator and segmentor

The generator is an encoder-decoder with residual blocks at the bottleneck
(reflection padding, 7x7 stem, stride-2 downsampling, transposed-conv
upsampling). The segmentor is a U-Net returning per-pixel probabilities
over {no-tumor, tumor}. Both accept any H x W: inputs are padded to a
multiple of 2**depth and the output is cropped back.
"""

import json
import logging
import os
import random
from collections import OrderedDict
from contextlib import contextmanager
from typing import Any, Dict, Iterator, List, Literal, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import GeneratorSpec, SegmentorSpec
from .data_pipeline import ImageGrid, stack_images
from .errors import CheckpointError, InvalidConfigError

logger = logging.getLogger(__name__)

Mode = Literal["train", "eval"]


def _norm_layer(kind: str, channels: int) -> nn.Module:
    if kind == "instance":
        return nn.InstanceNorm2d(channels)
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    return nn.Identity()


def _pad_to_multiple(x: torch.Tensor, multiple: int):
    h, w = x.shape[-2:]
    pad_h = (-h) % multiple
    pad_w = (-w) % multiple
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
    return x, h, w


class ResnetBlock(nn.Module):
    def __init__(self, dim: int, norm: str):
        super().__init__()
        self.conv_block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, kernel_size=3),
            _norm_layer(norm, dim),
            nn.ReLU(True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, kernel_size=3),
            _norm_layer(norm, dim),
        )

    def forward(self, x):
        return x + self.conv_block(x)


class GeneratorNet(nn.Module):
    """Image-to-image generator with a [0,1]-bounded head."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        ngf = spec.base_channels

        model: List[nn.Module] = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(1, ngf, kernel_size=7),
            _norm_layer(spec.norm, ngf),
            nn.ReLU(True),
        ]
        channels = ngf
        for _ in range(spec.n_downsampling):
            model += [
                nn.Conv2d(channels, channels * 2, kernel_size=3, stride=2, padding=1),
                _norm_layer(spec.norm, channels * 2),
                nn.ReLU(True),
            ]
            channels *= 2
        for _ in range(spec.n_residual_blocks):
            model.append(ResnetBlock(channels, spec.norm))
        for _ in range(spec.n_downsampling):
            model += [
                nn.ConvTranspose2d(channels, channels // 2, kernel_size=3, stride=2, padding=1, output_padding=1),
                _norm_layer(spec.norm, channels // 2),
                nn.ReLU(True),
            ]
            channels //= 2
        model += [nn.ReflectionPad2d(3), nn.Conv2d(channels, 1, kernel_size=7)]
        self.model = nn.Sequential(*model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        padded, h, w = _pad_to_multiple(x, 2 ** self.spec.n_downsampling)
        head = self.model(padded)[..., :h, :w]
        if self.spec.residual_head:
            return torch.clamp(x + torch.tanh(head), 0.0, 1.0)
        return torch.sigmoid(head)


class DoubleConv(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, norm: str):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1),
            _norm_layer(norm, out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, kernel_size=3, padding=1),
            _norm_layer(norm, out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class SegmentorNet(nn.Module):
    """U-Net producing a two-class probability map (channel 1 = tumor)."""

    def __init__(self, spec: SegmentorSpec):
        super().__init__()
        self.spec = spec
        widths = [spec.base_channels * 2 ** i for i in range(spec.depth + 1)]

        self.stem = DoubleConv(1, widths[0], spec.norm)
        self.down = nn.ModuleList(DoubleConv(widths[i], widths[i + 1], spec.norm) for i in range(spec.depth))
        self.up = nn.ModuleList(
            nn.ConvTranspose2d(widths[i + 1], widths[i], kernel_size=2, stride=2)
            for i in reversed(range(spec.depth))
        )
        skip = 2 if spec.skip_connections else 1
        self.decode = nn.ModuleList(
            DoubleConv(widths[i] * skip, widths[i], spec.norm) for i in reversed(range(spec.depth))
        )
        self.head = nn.Conv2d(widths[0], spec.num_classes, kernel_size=1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        padded, h, w = _pad_to_multiple(x, 2 ** self.spec.depth)
        features = [self.stem(padded)]
        for block in self.down:
            features.append(block(F.max_pool2d(features[-1], 2)))

        y = features.pop()
        for up, decode in zip(self.up, self.decode):
            y = up(y)
            skip = features.pop()
            y = decode(torch.cat([skip, y], dim=1) if self.spec.skip_connections else y)
        return self.head(y)[..., :h, :w]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(x), dim=1)


# ---------------------------------------------------------------------------
# Construction, seeding, parameter sets
# ---------------------------------------------------------------------------

def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def build_generator(spec: GeneratorSpec, seed: int = 0) -> GeneratorNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return GeneratorNet(spec)


def build_segmentor(spec: SegmentorSpec, seed: int = 0) -> SegmentorNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SegmentorNet(spec)


def snapshot(module: nn.Module) -> "OrderedDict[str, torch.Tensor]":
    """Immutable deep copy of every parameter and buffer, in a stable order."""
    return OrderedDict((name, t.detach().clone()) for name, t in module.state_dict().items())


def equals_snapshot(module: nn.Module, snap: Dict[str, torch.Tensor]) -> bool:
    current = module.state_dict()
    if list(current.keys()) != list(snap.keys()):
        return False
    return all(torch.equal(current[k], snap[k]) for k in snap)


def set_frozen(module: nn.Module, frozen: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(not frozen)


@contextmanager
def frozen(module: nn.Module) -> Iterator[nn.Module]:
    """Freeze parameters and restore buffers (e.g. BN running stats) on exit."""
    buffers = {name: b.detach().clone() for name, b in module.named_buffers()}
    set_frozen(module, True)
    try:
        yield module
    finally:
        set_frozen(module, False)
        with torch.no_grad():
            for name, b in module.named_buffers():
                b.copy_(buffers[name])


# ---------------------------------------------------------------------------
# Single-image and batched forward helpers
# ---------------------------------------------------------------------------

def _grid_tensor(x: ImageGrid, module: nn.Module) -> torch.Tensor:
    param = next(module.parameters())
    return torch.from_numpy(x.pixels).to(device=param.device, dtype=param.dtype)[None, None]


def _set_mode(module: nn.Module, mode: Mode) -> None:
    if mode not in ("train", "eval"):
        raise InvalidConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    module.train(mode == "train")


def generator_forward(x: ImageGrid, g: GeneratorNet, mode: Mode = "eval") -> ImageGrid:
    _set_mode(g, mode)
    with torch.no_grad():
        out = g(_grid_tensor(x, g))[0, 0]
    return ImageGrid(out.float().cpu().numpy())


def segmentor_forward(x: ImageGrid, s: SegmentorNet, mode: Mode = "eval") -> np.ndarray:
    """Returns the (2, H, W) probability map."""
    _set_mode(s, mode)
    with torch.no_grad():
        return s(_grid_tensor(x, s))[0].float().cpu().numpy()


def synthesize(g: GeneratorNet, grids: Sequence[ImageGrid], batch_size: int = 8) -> List[ImageGrid]:
    """Eval-mode generator outputs for a list of images."""
    g.eval()
    param = next(g.parameters())
    outputs: List[ImageGrid] = []
    with torch.no_grad():
        for start in range(0, len(grids), batch_size):
            batch = torch.from_numpy(stack_images(grids[start:start + batch_size]))
            result = g(batch.to(device=param.device, dtype=param.dtype))
            outputs.extend(ImageGrid(r[0].float().cpu().numpy()) for r in result)
    return outputs


def predict_masks(s: SegmentorNet, grids: Sequence[ImageGrid], batch_size: int = 8) -> np.ndarray:
    """Arg-max lesion masks (N, H, W) from an eval-mode segmentor."""
    s.eval()
    param = next(s.parameters())
    masks = []
    with torch.no_grad():
        for start in range(0, len(grids), batch_size):
            batch = torch.from_numpy(stack_images(grids[start:start + batch_size]))
            probs = s(batch.to(device=param.device, dtype=param.dtype))
            masks.append(probs.argmax(dim=1).cpu().numpy().astype(np.uint8))
    return np.concatenate(masks) if masks else np.zeros((0, 0, 0), dtype=np.uint8)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_KEYS = ("header_json", "generator", "segmentor")


def save_checkpoint(path: str, header: Dict[str, Any], tensors: Dict[str, Any]) -> str:
    """
    Write a named-parameter archive with a JSON header, atomically.

    `tensors` maps archive keys (generator, segmentor, opt_g, ...) to
    state dicts; `header` must hold at least {spec, seed, epoch, config_hash}.
    """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    payload = {"header_json": json.dumps(header, sort_keys=True), **tensors}
    tmp_path = path + ".tmp"
    try:
        torch.save(payload, tmp_path)
        os.replace(tmp_path, path)
    except OSError as e:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise CheckpointError(f"Could not write checkpoint {path}: {e}", path=path) from e
    return path


def read_checkpoint(path: str) -> Dict[str, Any]:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, EOFError) as e:
        raise CheckpointError(f"Could not read checkpoint {path}: {e}", path=path) from e
    missing = [k for k in CHECKPOINT_KEYS if k not in payload]
    if missing:
        raise CheckpointError(f"Checkpoint {path} is missing {missing}", path=path)
    payload["header"] = json.loads(payload.pop("header_json"))
    return payload


def load_state_checked(module: nn.Module, state: Dict[str, torch.Tensor], label: str) -> None:
    """Load a state dict only if every key and shape matches the module."""
    expected = module.state_dict()
    if set(expected) != set(state):
        extra = sorted(set(state) - set(expected))[:5]
        missing = sorted(set(expected) - set(state))[:5]
        raise CheckpointError(f"{label}: parameter names differ (missing={missing}, unexpected={extra})")
    for name, tensor in expected.items():
        if tuple(tensor.shape) != tuple(state[name].shape):
            raise CheckpointError(
                f"{label}: shape mismatch for {name}: {tuple(state[name].shape)} vs {tuple(tensor.shape)}"
            )
    module.load_state_dict(state)


def load_generator(path: str) -> GeneratorNet:
    payload = read_checkpoint(path)
    try:
        spec = GeneratorSpec.model_validate(payload["header"]["spec"]["generator"])
    except Exception as e:
        raise CheckpointError(f"Checkpoint {path} has no valid generator spec: {e}", path=path) from e
    g = GeneratorNet(spec)
    load_state_checked(g, payload["generator"], f"generator in {path}")
    g.eval()
    logger.info(f"📁 Loaded generator from {path} (epoch {payload['header'].get('epoch')})")
    return g


def load_segmentor(path: str) -> SegmentorNet:
    payload = read_checkpoint(path)
    try:
        spec = SegmentorSpec.model_validate(payload["header"]["spec"]["segmentor"])
    except Exception as e:
        raise CheckpointError(f"Checkpoint {path} has no valid segmentor spec: {e}", path=path) from e
    s = SegmentorNet(spec)
    load_state_checked(s, payload["segmentor"], f"segmentor in {path}")
    s.eval()
    return s
