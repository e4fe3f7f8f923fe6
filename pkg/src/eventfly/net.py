"""Small segmentation network, feature discriminators, EMA teacher and optimiser.

The segmentation net is a strided encoder (a non-overlapping patch convolution,
then stride-2 convolutions) followed by a two-layer feature head (``F``) and a
bilinear-upsample + 1x1 classifier. Because bilinear
interpolation and a 1x1 convolution are both linear and the interpolation
weights of every output pixel sum to one, the classifier is applied at feature
resolution and the logits are upsampled afterwards; the result is the same map
at a fraction of the cost. Upsampling is done with two dense interpolation
matrices instead of ``F.interpolate`` for the same reason.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import math
import struct
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, FormatError, ShapeError, StateError

LEAKY_SLOPE = 0.1
CKPT_MAGIC = b"EFK1"


def interpolation_matrix(n_out: int, n_in: int, dtype=torch.float32) -> torch.Tensor:
    """Rows reproduce 1-D bilinear resampling with half-pixel centres (align_corners=False)."""
    m = torch.zeros(n_out, n_in, dtype=torch.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        w = src - i0
        m[i, i0] += 1.0 - w
        m[i, i1] += w
    return m.to(dtype)


def _conv(cin, cout, stride=1, k=3):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


def _he_uniform(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_uniform_(m.weight, a=LEAKY_SLOPE, nonlinearity="leaky_relu")
            nn.init.zeros_(m.bias)


class SegNet(nn.Module):
    """``widths[0]`` channels after the ``patch x patch`` stem, one stride-2 stage per further width."""

    def __init__(self, in_bins=20, num_classes=11, feat_channels=32, widths=(16, 32), patch=4):
        super().__init__()
        if not widths or patch < 1:
            raise ConfigError("need at least one encoder width and a positive patch size")
        self.in_bins = in_bins
        self.num_classes = num_classes
        self.feat_channels = feat_channels
        layers = [nn.Conv2d(in_bins, widths[0], patch, stride=patch), nn.LeakyReLU(LEAKY_SLOPE)]
        for cin, cout in zip(widths[:-1], widths[1:]):
            layers += [_conv(cin, cout, 2), nn.LeakyReLU(LEAKY_SLOPE)]
        self.encoder = nn.Sequential(*layers)
        self.head = nn.Sequential(
            _conv(widths[-1], feat_channels), nn.LeakyReLU(LEAKY_SLOPE),
            _conv(feat_channels, feat_channels), nn.LeakyReLU(LEAKY_SLOPE),
        )
        self.classifier = nn.Conv2d(feat_channels, num_classes, 1)
        _he_uniform(self)
        nn.init.zeros_(self.classifier.weight)
        nn.init.zeros_(self.classifier.bias)
        self._interp = {}

    def _upsample(self, logits: torch.Tensor, size) -> torch.Tensor:
        key = (tuple(logits.shape[-2:]), tuple(size), logits.dtype)
        if key not in self._interp:
            ay = interpolation_matrix(size[0], logits.shape[-2], logits.dtype)
            ax = interpolation_matrix(size[1], logits.shape[-1], logits.dtype)
            self._interp[key] = (ay, ax.T.contiguous())
        ay, axt = self._interp[key]
        return ay @ logits @ axt

    def forward(self, x: torch.Tensor):
        if x.dim() != 4 or x.shape[1] != self.in_bins:
            raise ShapeError(f"expected (B, {self.in_bins}, H, W) input, got {tuple(x.shape)}")
        x = x.contiguous(memory_format=torch.channels_last)
        feats = self.head(self.encoder(x))
        logits = self._upsample(self.classifier(feats), x.shape[-2:])
        return feats, logits


def seg_forward(net: SegNet, v):
    """Return ``(features, logits, probs)`` for a ``(B, T, H, W)`` batch."""
    if isinstance(v, np.ndarray):
        v = torch.from_numpy(v)
    if v.dim() == 3:
        v = v.unsqueeze(0)
    feats, logits = net(v)
    return feats, logits, logits.softmax(dim=1)


class Discriminator(nn.Module):
    """Fully convolutional per-pixel domain classifier on feature maps."""

    def __init__(self, in_channels=32, width=32):
        super().__init__()
        self.in_channels = in_channels
        self.body = nn.Sequential(
            _conv(in_channels, width), nn.LeakyReLU(LEAKY_SLOPE),
            _conv(width, width), nn.LeakyReLU(LEAKY_SLOPE),
            _conv(width, 1),
        )
        _he_uniform(self)

    def logits(self, feats: torch.Tensor) -> torch.Tensor:
        if feats.dim() != 4 or feats.shape[1] != self.in_channels:
            raise ShapeError(f"expected (B, {self.in_channels}, h, w) features, got {tuple(feats.shape)}")
        return self.body(feats)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        # torch.sigmoid is overflow-safe for large |logit|
        return torch.sigmoid(self.logits(feats))


def disc_forward(d: Discriminator, feats: torch.Tensor) -> torch.Tensor:
    return d(feats)


def backward(loss: torch.Tensor, params: dict[str, torch.Tensor] | Iterable[tuple[str, torch.Tensor]]):
    """Run reverse mode from ``loss`` and return ``{name: grad}`` for every parameter.

    Parameters the loss does not touch get a zero gradient.
    """
    if not isinstance(loss, torch.Tensor) or loss.grad_fn is None:
        raise StateError("backward called on a value that was not produced by a forward pass")
    named = dict(params)
    grads = torch.autograd.grad(loss, list(named.values()), allow_unused=True)
    return {
        k: (g if g is not None else torch.zeros_like(p))
        for (k, p), g in zip(named.items(), grads)
    }


# -- EMA teacher ------------------------------------------------------------------------


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, momentum: float) -> None:
    """``teacher <- m * teacher + (1 - m) * student``, parameter by parameter."""
    if not 0.0 <= momentum <= 1.0:
        raise ConfigError(f"EMA momentum must be in [0, 1], got {momentum}")
    t_params = list(teacher.parameters())
    s_params = list(student.parameters())
    if len(t_params) != len(s_params) or any(a.shape != b.shape for a, b in zip(t_params, s_params)):
        raise StateError("teacher and student parameter shapes differ")
    for pt, ps in zip(t_params, s_params):
        if momentum == 1.0:
            continue
        if momentum == 0.0:
            pt.copy_(ps)
        else:
            pt.mul_(momentum).add_(ps, alpha=1.0 - momentum)


class EmaTeacher:
    def __init__(self, student: nn.Module, momentum: float = 0.999):
        if not 0.0 <= momentum <= 1.0:
            raise ConfigError(f"EMA momentum must be in [0, 1], got {momentum}")
        self.momentum = momentum
        self.net = copy.deepcopy(student)
        for p in self.net.parameters():
            p.requires_grad_(False)

    def update(self, student: nn.Module, momentum: float | None = None) -> None:
        ema_update(self.net, student, self.momentum if momentum is None else momentum)

    @torch.no_grad()
    def predict(self, v):
        return seg_forward(self.net, v)


# -- optimisation -------------------------------------------------------------------------


def adamw_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
    """One decoupled-weight-decay Adam update, in place.

    ``state`` is a dict holding ``step`` and per-parameter ``m``/``v`` lists; it is
    created on first use.
    """
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    params = list(params)
    grads = list(grads)
    if not state:
        state["step"] = 0
        state["m"] = [torch.zeros_like(p) for p in params]
        state["v"] = [torch.zeros_like(p) for p in params]
    state["step"] += 1
    k = state["step"]
    bc1 = 1.0 - beta1**k
    bc2 = 1.0 - beta2**k
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state["m"], state["v"]):
            if g is None:
                continue
            p.mul_(1.0 - lr * weight_decay)
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / bc1)


class AdamW:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = [p for p in params]
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        adamw_step(
            self.params,
            [p.grad for p in self.params],
            self.state,
            self.lr if lr is None else lr,
            self.betas[0],
            self.betas[1],
            self.eps,
            self.weight_decay,
        )


def onecycle_lr(step: int, total: int, lr_max: float, warmup_frac: float = 0.3, div: float = 25.0) -> float:
    """Linear warm-up from ``lr_max/div`` to ``lr_max`` over the first 30% of the
    steps, then cosine decay back to ``lr_max/div`` at ``total``."""
    if not lr_max > 0:
        raise ConfigError(f"learning rate must be positive, got {lr_max}")
    if total <= 0 or not 0 <= step <= total:
        raise ConfigError(f"step {step} outside schedule of {total} steps")
    lo = lr_max / div
    peak = warmup_frac * total
    if step <= peak:
        return lo + (lr_max - lo) * (step / peak if peak > 0 else 1.0)
    frac = (step - peak) / (total - peak)
    return lo + (lr_max - lo) * 0.5 * (1.0 + math.cos(math.pi * frac))


# -- checkpoints ------------------------------------------------------------------------------


def config_digest(config: dict) -> bytes:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).digest()


def encode_checkpoint(blocks: dict[str, nn.Module], config: dict) -> bytes:
    """``EFK1``, sha256 config digest, block count, then named float32 tensors.

    Every module in ``blocks`` contributes its state dict under ``<block>.<name>``.
    """
    out = io.BytesIO()
    entries = []
    for prefix, module in blocks.items():
        for name, t in module.state_dict().items():
            entries.append((f"{prefix}.{name}", t.detach().cpu().contiguous().to(torch.float32).numpy()))
    out.write(CKPT_MAGIC)
    out.write(config_digest(config))
    out.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        raw = name.encode()
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.astype("<f4").tobytes())
    return out.getvalue()


def decode_checkpoint(buf: bytes, path=None) -> tuple[bytes, dict[str, np.ndarray]]:
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0, path)
    pos = 4
    if len(buf) < pos + 36:
        raise FormatError("truncated checkpoint header", len(buf), path)
    digest = buf[pos : pos + 32]
    pos += 32
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + n].decode()
            pos += n
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = 4 * int(np.prod(shape, dtype=np.int64))
            if pos + size > len(buf):
                raise FormatError(f"truncated tensor {name!r}", pos, path)
            tensors[name] = np.frombuffer(buf, "<f4", count=size // 4, offset=pos).reshape(shape).copy()
            pos += size
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}", pos, path) from None
    if pos != len(buf):
        raise FormatError("trailing bytes after last tensor", pos, path)
    return digest, tensors


def save_checkpoint(path, blocks: dict[str, nn.Module], config: dict) -> None:
    from .io import atomic_write

    atomic_write(path, encode_checkpoint(blocks, config))


def load_checkpoint(path) -> tuple[bytes, dict[str, np.ndarray]]:
    return decode_checkpoint(Path(path).read_bytes(), path)


def load_block(module: nn.Module, tensors: dict[str, np.ndarray], prefix: str) -> None:
    state = {
        k[len(prefix) + 1 :]: torch.from_numpy(v)
        for k, v in tensors.items()
        if k.startswith(prefix + ".")
    }
    if not state:
        raise StateError(f"checkpoint has no block named {prefix!r}")
    module.load_state_dict(state)
