"""Generator / discriminator networks and segment merging.

The generator maps a feature sequence (T, D) to per-frame unit logits at a
reduced rate set by the first convolution's stride; an auxiliary linear head
branches off the hidden layer for the self-supervised pseudo-label loss.
The discriminator scores a (T, V) distribution-or-one-hot sequence as a
single real/fake probability.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .errors import ContractError, FormatError

CKPT_MAGIC = b"UASRCKPT"
CKPT_VERSION = 1


@dataclass
class GeneratorConfig:
    in_dim: int = 16
    hidden: int = 64
    vocab: int = 12           # unit inventory size, silence included
    aux_classes: int = 64     # pseudo-label inventory
    kernel: int = 4
    stride: int = 3
    bn_scale_init: float = 30.0
    bn_eps: float = 1e-5
    # output layer gain: with weight normalization this is the fixed per-unit
    # norm of the output filters; without it, an init scale. Kept small so
    # logits stay O(1); otherwise the batchnorm scale inflates the
    # squared-difference penalty by orders of magnitude and swamps the
    # adversarial signal
    out_init_gain: float = 0.05
    # parametrize the output conv as direction x fixed gain. The smoothness
    # penalty rewards shrinking output logits toward a constant sequence —
    # a sign-consistent gradient that Adam integrates until the generator
    # emits one merged segment per utterance, an absorbing state the
    # mean-pooled discriminator cannot punish. Fixing the filter norm removes
    # that radial escape direction while leaving content directions free.
    out_weight_norm: bool = True


@dataclass
class DiscriminatorConfig:
    vocab: int = 12
    hidden: int = 48
    kernel: int = 8


def _same_pad(kernel: int) -> tuple[int, int]:
    # total kernel-1, symmetric with the extra frame on the left
    total = kernel - 1
    return (total - total // 2, total // 2)


def _init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)


class Generator:
    """2-layer CNN over input-batchnormed features, plus an auxiliary head."""

    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        c = cfg
        self.params = {
            "bn_scale": ad.parameter(np.full(c.in_dim, c.bn_scale_init, dtype=dtype)),
            "bn_bias": ad.parameter(np.zeros(c.in_dim, dtype=dtype)),
            "w1": ad.parameter(_init(rng, (c.kernel, c.in_dim, c.hidden), c.kernel * c.in_dim, dtype)),
            "b1": ad.parameter(np.zeros(c.hidden, dtype=dtype)),
            "aux_w": ad.parameter(_init(rng, (c.hidden, c.aux_classes), c.hidden, dtype)),
            "aux_b": ad.parameter(np.zeros(c.aux_classes, dtype=dtype)),
        }
        # no bias on the output conv: a bias alone can realize a constant
        # one-hot output at zero smoothness cost, an absorbing failure
        # mode for adversarial training (merging collapses it to one
        # segment that gradients cannot split again)
        w2 = _init(rng, (c.kernel, c.hidden, c.vocab), c.kernel * c.hidden, dtype)
        if c.out_weight_norm:
            self.params["w2_v"] = ad.parameter(w2)
        else:
            self.params["w2"] = ad.parameter(c.out_init_gain * w2)

    def _w2(self) -> ad.Value:
        if not self.cfg.out_weight_norm:
            return self.params["w2"]
        v = self.params["w2_v"]
        norm = ad.sqrt(ad.vsum(v * v, axis=(0, 1), keepdims=True) + 1e-12)
        return v * (self.cfg.out_init_gain * ad.power(norm, -1.0))

    def forward(self, frames: np.ndarray, stride_override: int | None = None,
                with_aux: bool = True):
        """Returns (logits (T', V), aux_logits (T', K) or None)."""
        if frames.ndim != 2 or frames.shape[1] != self.cfg.in_dim:
            raise ContractError(
                f"generator expects (T, {self.cfg.in_dim}) features, got {frames.shape}"
            )
        p = self.params
        stride = stride_override or self.cfg.stride
        x = ad.constant(frames, dtype=p["w1"].dtype)
        x = ad.batchnorm_time(x, p["bn_scale"], p["bn_bias"], eps=self.cfg.bn_eps)
        h = ad.conv1d(x, p["w1"], p["b1"], stride=stride, pad=_same_pad(self.cfg.kernel))
        h = ad.silu(h)
        aux = ad.linear(h, p["aux_w"], p["aux_b"]) if with_aux else None
        logits = ad.conv1d(h, self._w2(), None, stride=1, pad=_same_pad(self.cfg.kernel))
        return logits, aux

    def out_len(self, t: int, stride_override: int | None = None) -> int:
        stride = stride_override or self.cfg.stride
        return ad.conv1d_out_len(t, self.cfg.kernel, stride, self.cfg.kernel - 1)

    def receptive_spans(self, t: int, stride_override: int | None = None) -> list[tuple[int, int]]:
        """Input-frame span [start, end) each output frame draws on."""
        stride = stride_override or self.cfg.stride
        left, _ = _same_pad(self.cfg.kernel)
        spans = []
        for i in range(self.out_len(t, stride_override)):
            s = i * stride - left
            spans.append((max(0, s), min(t, s + self.cfg.kernel)))
        return spans


class Discriminator:
    """2-layer CNN -> per-frame scalar -> mean pool -> sigmoid."""

    def __init__(self, cfg: DiscriminatorConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        c = cfg
        self.params = {
            "w1": ad.parameter(_init(rng, (c.kernel, c.vocab, c.hidden), c.kernel * c.vocab, dtype)),
            "b1": ad.parameter(np.zeros(c.hidden, dtype=dtype)),
            "w2": ad.parameter(_init(rng, (c.kernel, c.hidden, 1), c.kernel * c.hidden, dtype)),
            "b2": ad.parameter(np.zeros(1, dtype=dtype)),
        }

    def forward(self, seq: ad.Value) -> ad.Value:
        """Score a (T, V) sequence; returns a scalar probability in (0, 1)."""
        if len(seq.shape) != 2 or seq.shape[1] != self.cfg.vocab:
            raise ContractError(
                f"discriminator expects (T, {self.cfg.vocab}), got {seq.shape}"
            )
        if seq.shape[0] == 0:
            raise ContractError("discriminator is undefined on empty sequences")
        p = self.params
        h = ad.silu(self._valid_conv(seq, p["w1"], p["b1"]))
        scores = self._valid_conv(h, p["w2"], p["b2"])
        return ad.sigmoid(ad.mean(scores))

    @staticmethod
    def _valid_conv(x: ad.Value, w: ad.Value, b: ad.Value) -> ad.Value:
        # unpadded conv; kernel truncated to the sequence length when shorter
        k_eff = min(w.shape[0], x.shape[0])
        if k_eff < w.shape[0]:
            w = w[:k_eff]
        return ad.conv1d(x, w, b, stride=1, pad=(0, 0))


@dataclass
class DistributionSequence:
    """Merged generator output: logits plus the input span of each row."""

    logits: ad.Value
    segment_map: list[tuple[int, int]] = field(default_factory=list)

    @property
    def probs(self) -> ad.Value:
        return ad.softmax(self.logits)

    def __len__(self):
        return self.logits.shape[0]


def merge_consecutive(logits: ad.Value, rng: np.random.Generator) -> DistributionSequence:
    """Collapse maximal runs sharing an argmax unit to one uniformly chosen row."""
    t = logits.shape[0]
    if t == 0:
        return DistributionSequence(logits, [])
    arg = np.argmax(logits.data, axis=-1)
    boundaries = np.flatnonzero(np.diff(arg)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [t]])
    picks = np.array([s if e - s == 1 else rng.integers(s, e) for s, e in zip(starts, ends)])
    merged = logits[picks]
    return DistributionSequence(merged, list(zip(starts.tolist(), ends.tolist())))


# --- checkpoint I/O -------------------------------------------------------


def save_checkpoint(path, gen: Generator, disc: Discriminator, *, step: int = 0,
                    extra: dict | None = None, arrays: dict | None = None) -> None:
    """Binary checkpoint: magic, version, JSON header, then named arrays."""
    named: dict[str, np.ndarray] = {}
    for k, v in gen.params.items():
        named[f"gen.{k}"] = v.data
    for k, v in disc.params.items():
        named[f"disc.{k}"] = v.data
    if arrays:
        named.update(arrays)
    header = {
        "generator": asdict(gen.cfg),
        "discriminator": asdict(disc.cfg),
        "step": step,
        "dtype": str(next(iter(gen.params.values())).data.dtype),
        "arrays": {k: list(v.shape) for k, v in named.items()},
        "extra": extra or {},
    }
    hdr = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(hdr)))
        f.write(hdr)
        for k in sorted(named):
            arr = np.ascontiguousarray(named[k], dtype="<f4")
            f.write(arr.tobytes())


def load_checkpoint(path):
    """Returns (Generator, Discriminator, header dict, extra arrays dict)."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CKPT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        header = json.loads(f.read(hlen).decode("utf-8"))
        named = {}
        for k in sorted(header["arrays"]):
            shape = tuple(header["arrays"][k])
            n = int(np.prod(shape)) if shape else 1
            named[k] = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape).copy()
    dtype = np.dtype(header.get("dtype", "float32"))
    rng = np.random.default_rng(0)
    gen = Generator(GeneratorConfig(**header["generator"]), rng, dtype=dtype)
    disc = Discriminator(DiscriminatorConfig(**header["discriminator"]), rng, dtype=dtype)
    extra_arrays = {}
    for k, arr in named.items():
        arr = arr.astype(dtype)
        if k.startswith("gen."):
            gen.params[k[4:]].data = arr
        elif k.startswith("disc."):
            disc.params[k[5:]].data = arr
        else:
            extra_arrays[k] = arr
    return gen, disc, header, extra_arrays
