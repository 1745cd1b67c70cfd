"""Residual U-Net mask estimator with a frame-level activity classifier.

The encoder halves frequency and time in every block, the decoder mirrors it
with transposed convolutions and U-Net skip connections, and a sigmoid mask
is produced at input resolution. A transposed-convolution classifier reads
the bottleneck and emits one activity logit per input frame.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dsp import MagSpectrogram
from .labels import ActivationCurve
from .errors import CheckpointError, ConfigurationError, NumericalError


@dataclass
class ModelConfig:
    num_blocks: int = 3
    convs_per_block: int = 3
    channel_widths: list = field(default_factory=lambda: [32, 64, 128])
    inner_kernel: tuple = (3, 3)
    resample_kernel: tuple = (3, 1)
    resample_stride: tuple = (2, 2)
    leaky_slope: float = 0.2
    classifier_layers: int = 4
    alpha: float = 0.1
    mask_nonlinearity: str = "sigmoid"

    def __post_init__(self):
        self.channel_widths = list(self.channel_widths)
        self.inner_kernel = tuple(self.inner_kernel)
        self.resample_kernel = tuple(self.resample_kernel)
        self.resample_stride = tuple(self.resample_stride)

    def validate(self):
        if self.num_blocks < 1:
            raise ConfigurationError(f"num_blocks must be >= 1, got {self.num_blocks}")
        if len(self.channel_widths) != self.num_blocks:
            raise ConfigurationError(
                f"channel_widths has {len(self.channel_widths)} entries for {self.num_blocks} blocks")
        if any(w < 1 for w in self.channel_widths):
            raise ConfigurationError("channel widths must be positive")
        if self.convs_per_block != 3:
            raise ConfigurationError("blocks are built from exactly three convolutions")
        if self.classifier_layers < self.num_blocks:
            raise ConfigurationError(
                "the classifier needs one upsampling layer per encoder block "
                f"({self.classifier_layers} < {self.num_blocks})")
        if any(k % 2 == 0 for k in self.inner_kernel + self.resample_kernel):
            raise ConfigurationError("kernel sizes must be odd")
        if self.alpha < 0:
            raise ConfigurationError(f"alpha must be >= 0, got {self.alpha}")
        if self.mask_nonlinearity != "sigmoid":
            raise ConfigurationError(f"unsupported mask nonlinearity {self.mask_nonlinearity!r}")
        return self

    @property
    def multiple(self) -> int:
        """Input frequency/time sizes are padded to a multiple of this."""
        return max(self.resample_stride) ** self.num_blocks

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("inner_kernel", "resample_kernel", "resample_stride"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _same_padding(kernel):
    return tuple((k - 1) // 2 for k in kernel)


class ResidualUnit(nn.Module):
    """``x + act(bn(conv(x)))``; zeroing the conv weights leaves the identity."""

    def __init__(self, channels, kernel, slope, transposed=False):
        super().__init__()
        conv = nn.ConvTranspose2d if transposed else nn.Conv2d
        self.conv = conv(channels, channels, kernel, padding=_same_padding(kernel), bias=False)
        self.bn = nn.BatchNorm2d(channels)
        self.slope = slope

    def forward(self, x):
        return x + F.leaky_relu(self.bn(self.conv(x)), self.slope)


class EncoderBlock(nn.Module):
    def __init__(self, in_ch, out_ch, cfg: ModelConfig):
        super().__init__()
        self.conv_in = nn.Conv2d(in_ch, out_ch, cfg.inner_kernel,
                                 padding=_same_padding(cfg.inner_kernel), bias=False)
        self.bn_in = nn.BatchNorm2d(out_ch)
        self.residual = ResidualUnit(out_ch, cfg.inner_kernel, cfg.leaky_slope)
        self.down = nn.Conv2d(out_ch, out_ch, cfg.resample_kernel, stride=cfg.resample_stride,
                              padding=_same_padding(cfg.resample_kernel))
        self.slope = cfg.leaky_slope

    def forward(self, x):
        h = F.leaky_relu(self.bn_in(self.conv_in(x)), self.slope)
        h = self.residual(h)
        return h, self.down(h)


class DecoderBlock(nn.Module):
    def __init__(self, in_ch, out_ch, cfg: ModelConfig):
        super().__init__()
        self.conv_in = nn.ConvTranspose2d(in_ch, out_ch, cfg.inner_kernel,
                                          padding=_same_padding(cfg.inner_kernel), bias=False)
        self.bn_in = nn.BatchNorm2d(out_ch)
        self.residual = ResidualUnit(out_ch, cfg.inner_kernel, cfg.leaky_slope, transposed=True)
        pad = _same_padding(cfg.resample_kernel)
        out_pad = tuple(s + 2 * p - k for s, p, k in
                        zip(cfg.resample_stride, pad, cfg.resample_kernel))
        self.up = nn.ConvTranspose2d(out_ch, out_ch, cfg.resample_kernel, stride=cfg.resample_stride,
                                     padding=pad, output_padding=out_pad)
        self.slope = cfg.leaky_slope

    def forward(self, x):
        h = F.leaky_relu(self.bn_in(self.conv_in(x)), self.slope)
        return self.up(self.residual(h))


class ActivityClassifier(nn.Module):
    """Frequency-pooled bottleneck -> transposed 1-D convolutions -> one logit per frame."""

    def __init__(self, channels, cfg: ModelConfig):
        super().__init__()
        time_stride = cfg.resample_stride[1]
        self.layers = nn.ModuleList()
        self.norms = nn.ModuleList()
        n = cfg.classifier_layers
        for i in range(n):
            out = 1 if i == n - 1 else channels
            if i < cfg.num_blocks and time_stride > 1:
                layer = nn.ConvTranspose1d(channels, out, 2 * time_stride,
                                           stride=time_stride, padding=time_stride // 2,
                                           bias=(i == n - 1))
            else:
                layer = nn.ConvTranspose1d(channels, out, 3, padding=1, bias=(i == n - 1))
            self.layers.append(layer)
            if i < n - 1:
                self.norms.append(nn.BatchNorm1d(channels))
        self.slope = cfg.leaky_slope

    def forward(self, latent):
        h = latent.mean(dim=2)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.norms):
                h = F.leaky_relu(self.norms[i](h), self.slope)
        return h[:, 0]


class IASSNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        w = cfg.channel_widths
        self.encoders = nn.ModuleList(
            EncoderBlock(1 if i == 0 else w[i - 1], w[i], cfg) for i in range(cfg.num_blocks))
        decoders = []
        for k in reversed(range(cfg.num_blocks)):
            in_ch = w[-1] if k == cfg.num_blocks - 1 else 2 * w[k + 1]
            decoders.append(DecoderBlock(in_ch, w[k], cfg))
        self.decoders = nn.ModuleList(decoders)
        self.head = nn.Conv2d(2 * w[0], 1, 1)
        self.classifier = ActivityClassifier(w[-1], cfg)
        self.meta = {"leaky_slope": cfg.leaky_slope, "initializer": None}

    def _pad(self, x):
        m = self.cfg.multiple
        f, t = x.shape[-2:]
        pf, pt = (-f) % m, (-t) % m
        if pf == 0 and pt == 0:
            return x
        mode = "reflect" if (pf < f and pt < t) else "replicate"
        return F.pad(x, (0, pt, 0, pf), mode=mode)

    def forward(self, mix_mag):
        """``mix_mag`` is ``[batch, bins, frames]``; returns (mask, logits)."""
        f, t = mix_mag.shape[-2:]
        x = self._pad(torch.log1p(mix_mag).unsqueeze(1))
        skips = []
        for enc in self.encoders:
            skip, x = enc(x)
            skips.append(skip)
        latent = x
        h = latent
        for i, dec in enumerate(self.decoders):
            if i > 0:
                h = torch.cat([h, skips[len(skips) - i]], dim=1)
            h = dec(h)
        h = torch.cat([h, skips[0]], dim=1)
        mask = torch.sigmoid(self.head(h))[:, 0, :f, :t]
        logits = self.classifier(latent)[:, :t]
        return mask, logits

    def param_records(self) -> list[dict]:
        init = self.meta.get("initializer") or {}
        return [{"name": n, "shape": list(p.shape), "initializer": init.get(n)}
                for n, p in self.named_parameters()]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, tensor in self.state_dict().items():
            h.update(name.encode())
            h.update(tensor.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    @torch.no_grad()
    def predict(self, mag: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode mask ``[bins, frames]`` and logits ``[frames]`` for one spectrogram."""
        out = forward(self, mag, "eval")
        return out.mask, out.activation_logits


def init_model(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> IASSNet:
    """Build the network with seeded fan-in-scaled uniform weights.

    Weight bound ``sqrt(6 / ((1 + slope^2) * fan_in))``; biases and batch-norm
    shifts start at 0, batch-norm scales at 1.
    """
    cfg.validate()
    gen = torch.Generator().manual_seed(int(seed))
    net = IASSNet(cfg).to(dtype)
    gain2 = 2.0 / (1.0 + cfg.leaky_slope ** 2)
    records = {}
    with torch.no_grad():
        for mod_name, mod in net.named_modules():
            prefix = f"{mod_name}." if mod_name else ""
            if isinstance(mod, nn.modules.batchnorm._BatchNorm):
                mod.weight.fill_(1.0)
                mod.bias.zero_()
                records[prefix + "weight"] = "constant(1)"
                records[prefix + "bias"] = "constant(0)"
            elif isinstance(mod, nn.modules.conv._ConvNd):
                fan_in = nn.init._calculate_fan_in_and_fan_out(mod.weight)[0]
                bound = math.sqrt(3.0 * gain2 / fan_in)
                mod.weight.uniform_(-bound, bound, generator=gen)
                records[prefix + "weight"] = f"uniform(+-{bound:.6g}, fan_in={fan_in})"
                if mod.bias is not None:
                    mod.bias.zero_()
                    records[prefix + "bias"] = "constant(0)"
    net.meta["initializer"] = records
    return net


class ForwardOutput(NamedTuple):
    mask: np.ndarray | torch.Tensor
    activation_logits: np.ndarray | torch.Tensor


def _to_tensor(x, dtype):
    if isinstance(x, MagSpectrogram):
        x = x.values
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def forward(params: IASSNet, mix_mag, mode: str = "eval") -> ForwardOutput:
    """Run the network on one spectrogram (``[bins, frames]``) or a batch.

    Numpy / MagSpectrogram input returns numpy arrays; tensor input returns
    tensors (with gradients in train mode). Eval mode uses running batch-norm
    statistics.
    """
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")
    dtype = next(params.parameters()).dtype
    as_numpy = not isinstance(mix_mag, torch.Tensor)
    x = _to_tensor(mix_mag, dtype)
    if not torch.isfinite(x).all():
        raise NumericalError("non-finite values in the input spectrogram")
    single = x.ndim == 2
    if single:
        x = x.unsqueeze(0)
    params.train(mode == "train")
    with torch.set_grad_enabled(mode == "train" and torch.is_grad_enabled()):
        mask, logits = params(x)
    if single:
        mask, logits = mask[0], logits[0]
    if as_numpy:
        return ForwardOutput(mask.detach().cpu().numpy().astype(np.float64),
                             logits.detach().cpu().numpy().astype(np.float64))
    return ForwardOutput(mask, logits)


def predicted_spectrogram(mask, mix_mag):
    m = mix_mag.values if isinstance(mix_mag, MagSpectrogram) else mix_mag
    if tuple(mask.shape) != tuple(m.shape):
        raise ConfigurationError(f"mask shape {tuple(mask.shape)} != spectrogram shape {tuple(m.shape)}")
    out = mask * m
    return MagSpectrogram(out, mix_mag.config) if isinstance(mix_mag, MagSpectrogram) else out


class LossTerms(NamedTuple):
    total: torch.Tensor | float
    mse: torch.Tensor | float
    bce: torch.Tensor | float


def loss(pred_mag, target_mag, activation_logits, labels, alpha: float) -> LossTerms:
    """``L = L_MSE + alpha * L_BCE``; means over all bins/frames and frames."""
    if alpha < 0:
        raise ConfigurationError(f"alpha must be >= 0, got {alpha}")
    as_float = not isinstance(pred_mag, torch.Tensor)
    dtype = pred_mag.dtype if not as_float else torch.float64
    pred = _to_tensor(pred_mag, dtype)
    target = _to_tensor(target_mag, dtype)
    logits = _to_tensor(activation_logits, dtype)
    y = _to_tensor(labels.values if isinstance(labels, ActivationCurve) else labels, dtype)
    if pred.shape != target.shape:
        raise ConfigurationError(f"prediction shape {tuple(pred.shape)} != target {tuple(target.shape)}")
    if logits.shape != y.shape:
        raise ConfigurationError(f"{tuple(logits.shape)} logits for {tuple(y.shape)} labels")
    mse = F.mse_loss(pred, target)
    bce = F.binary_cross_entropy_with_logits(logits, y)
    total = mse + alpha * bce
    if as_float:
        return LossTerms(total.item(), mse.item(), bce.item())
    return LossTerms(total, mse, bce)


class Batch(NamedTuple):
    mix_mag: torch.Tensor     # [B, bins, frames]
    target_mag: torch.Tensor  # [B, bins, frames]
    labels: torch.Tensor      # [B, frames]

    @classmethod
    def from_arrays(cls, mixes, targets, labels, dtype=torch.float32) -> "Batch":
        as_t = lambda xs: torch.as_tensor(np.stack(xs), dtype=dtype)  # noqa: E731
        return cls(as_t(mixes), as_t(targets), as_t(labels))


def loss_and_gradients(params: IASSNet, batch: Batch, alpha: float) -> tuple[LossTerms, dict]:
    """Train-mode loss of a batch and its gradient for every named parameter.

    Parameters without a path to the loss get an all-zero gradient.
    """
    params.zero_grad(set_to_none=True)
    mask, logits = forward(params, batch.mix_mag, "train")
    terms = loss(predicted_spectrogram(mask, batch.mix_mag), batch.target_mag, logits,
                 batch.labels, alpha)
    if not torch.isfinite(terms.total):
        raise NumericalError(f"non-finite loss (mse={terms.mse.item()}, bce={terms.bce.item()})")
    terms.total.backward()
    grads = {}
    for name, p in params.named_parameters():
        g = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
        if not torch.isfinite(g).all():
            raise NumericalError(f"non-finite gradient in {name}")
        grads[name] = g
    params.zero_grad(set_to_none=True)
    detached = LossTerms(terms.total.item(), terms.mse.item(), terms.bce.item())
    return detached, grads


def gradients(params: IASSNet, batch: Batch, alpha: float) -> dict:
    return loss_and_gradients(params, batch, alpha)[1]


# --------------------------------------------------------------------------- checkpoints

MAGIC = b"IASSCKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model: IASSNet
    config: ModelConfig
    optimizer: dict | None = None   # {"step": int, "m": {name: ndarray}, "v": {...}}
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)


def _le_dtype(arr: np.ndarray) -> np.ndarray:
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def save_checkpoint(path, model: IASSNet, optimizer: dict | None = None,
                    rng_state: dict | None = None, extra: dict | None = None,
                    sidecar: dict | None = None) -> Path:
    """Write the binary container and, if given, a JSON sidecar ``<path>.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = [(f"model.{k}", v.detach().cpu().numpy()) for k, v in model.state_dict().items()]
    opt_header = None
    if optimizer is not None:
        opt_header = {"step": int(optimizer["step"]),
                      **{k: v for k, v in optimizer.items() if k not in ("step", "m", "v")}}
        for slot in ("m", "v"):
            tensors += [(f"adam.{slot}.{k}", np.asarray(v)) for k, v in optimizer[slot].items()]

    index, chunks, offset = [], [], 0
    for name, arr in tensors:
        raw = _le_dtype(np.ascontiguousarray(arr)).tobytes()
        index.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.newbyteorder("<").str,
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "config": model.cfg.to_dict(),
        "meta": {"leaky_slope": model.meta["leaky_slope"]},
        "tensors": index,
        "optimizer": opt_header,
        "rng_state": rng_state,
        "extra": extra or {},
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header).encode()
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    tmp.replace(path)
    if sidecar is not None:
        Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 20 or blob[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[20:20 + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    payload = blob[20 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch (truncated or corrupt)")

    arrays = {}
    for t in header["tensors"]:
        raw = payload[t["offset"]:t["offset"] + t["nbytes"]]
        arrays[t["name"]] = np.frombuffer(raw, dtype=np.dtype(t["dtype"])).reshape(t["shape"]).copy()

    cfg = ModelConfig.from_dict(header["config"])
    state = {k[len("model."):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("model.")}
    dtype = next(v for k, v in state.items() if k.endswith("weight")).dtype
    model = IASSNet(cfg).to(dtype)
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: tensors do not match the stored config: {exc}") from exc

    optimizer = None
    if header.get("optimizer") is not None:
        optimizer = dict(header["optimizer"])
        for slot in ("m", "v"):
            prefix = f"adam.{slot}."
            optimizer[slot] = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
    return Checkpoint(model, cfg, optimizer, header.get("rng_state"), header.get("extra", {}))
