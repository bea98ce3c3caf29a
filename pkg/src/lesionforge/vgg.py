"""Fixed VGG19 feature graph: weight container, forward pass, input gradient.

The graph is hard-coded to the VGG19 topology through block 5 (16 conv
layers, no fully connected head).  Channel widths may be uniformly scaled
(e.g. an eighth-width network for tests); the per-block ratio 1:2:4:8:8 is
enforced.  Weights are frozen: the only gradient ever computed is the one
at the input image, seeded by loss gradients injected at named layers.

Weight files use the ``VGGW1`` container:

    magic "VGGW" | u32 version=1 | u32 record count
    per record:  u32 name length | UTF-8 name | u32 rank | u32 dims[rank]
                 | float32 little-endian payload
    trailer:     3 float32 channel means | u32 CRC32

Records are named ``convB_N.weight`` / ``convB_N.bias``.  The CRC32 covers
every byte after the magic + version header up to (excluding) the CRC
itself.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .ops import (
    conv2d_backward,
    conv2d_forward,
    maxpool2_backward,
    maxpool2_forward,
    relu_backward,
    relu_forward,
)

# conv layers per block; widths are BASE_WIDTH * BLOCK_MULT[b]
BLOCK_CONVS = (2, 2, 4, 4, 4)
BLOCK_MULT = (1, 2, 4, 8, 8)
CANONICAL_BASE_WIDTH = 64
KERNEL_SIZE = 3


class WeightFormatError(ValueError):
    """Raised for malformed or inconsistent VGGW1 weight files."""


def conv_layer_names() -> list[str]:
    names = []
    for b, n_convs in enumerate(BLOCK_CONVS, start=1):
        names.extend(f"conv{b}_{i}" for i in range(1, n_convs + 1))
    return names


def layer_sequence() -> list[tuple[str, str]]:
    """Ordered (name, kind) pairs: convB_N, reluB_N, poolB per VGG19."""
    seq: list[tuple[str, str]] = []
    for b, n_convs in enumerate(BLOCK_CONVS, start=1):
        for i in range(1, n_convs + 1):
            seq.append((f"conv{b}_{i}", "conv"))
            seq.append((f"relu{b}_{i}", "relu"))
        seq.append((f"pool{b}", "pool"))
    return seq


LAYER_SEQUENCE = layer_sequence()
LAYER_INDEX = {name: i for i, (name, _) in enumerate(LAYER_SEQUENCE)}


def _expected_channels(base_width: int) -> dict[str, tuple[int, int]]:
    """Map conv name -> (C_in, C_out) for a given base width."""
    out: dict[str, tuple[int, int]] = {}
    prev = 3
    for b, n_convs in enumerate(BLOCK_CONVS, start=1):
        width = base_width * BLOCK_MULT[b - 1]
        for i in range(1, n_convs + 1):
            out[f"conv{b}_{i}"] = (prev, width)
            prev = width
    return out


@dataclass(frozen=True)
class VggNetwork:
    """Immutable frozen-weight VGG19 feature extractor.

    ``weights`` maps conv layer names to ``(kernel, bias)`` with kernel
    shape ``3 x 3 x C_in x C_out``.  ``channel_means`` are the per-channel
    offsets subtracted from input images before the first conv; they ship
    inside the weight file so the weight provenance is self-describing.
    """

    weights: dict[str, tuple[np.ndarray, np.ndarray]]
    channel_means: np.ndarray
    base_width: int = field(init=False, default=0)

    def __post_init__(self):
        names = conv_layer_names()
        missing = [n for n in names if n not in self.weights]
        if missing:
            raise WeightFormatError(f"missing conv layers: {missing}")
        w11 = self.weights["conv1_1"][0]
        if w11.ndim != 4:
            raise WeightFormatError(f"conv1_1 kernel must be rank 4, got shape {w11.shape}")
        base = w11.shape[3]
        expected = _expected_channels(base)
        for name in names:
            kern, bias = self.weights[name]
            c_in, c_out = expected[name]
            want = (KERNEL_SIZE, KERNEL_SIZE, c_in, c_out)
            if kern.shape != want:
                raise WeightFormatError(
                    f"layer {name}: kernel shape {kern.shape} != expected {want}"
                )
            if bias.shape != (c_out,):
                raise WeightFormatError(
                    f"layer {name}: bias shape {bias.shape} != expected ({c_out},)"
                )
        if np.asarray(self.channel_means).shape != (3,):
            raise WeightFormatError("channel_means must have exactly 3 entries")
        object.__setattr__(self, "base_width", base)

    def preprocess(self, image: np.ndarray) -> np.ndarray:
        """Subtract the stored per-channel means from an H x W x 3 image."""
        return np.asarray(image, dtype=np.float64) - self.channel_means[None, None, :]


def random_network(seed: int = 0, base_width: int = 8, scale: float = 0.3) -> VggNetwork:
    """Seeded random-weight network, used for tests and smoke runs."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, (c_in, c_out) in _expected_channels(base_width).items():
        kern = rng.standard_normal((KERNEL_SIZE, KERNEL_SIZE, c_in, c_out)) * scale / np.sqrt(
            KERNEL_SIZE * KERNEL_SIZE * c_in
        )
        bias = rng.standard_normal(c_out) * 0.01
        weights[name] = (kern, bias)
    means = np.array([0.485, 0.456, 0.406])
    return VggNetwork(weights=weights, channel_means=means)


# ---------------------------------------------------------------------------
# VGGW1 container
# ---------------------------------------------------------------------------

_MAGIC = b"VGGW"
_VERSION = 1


def save_weights(net: VggNetwork, path) -> None:
    """Write a network to a VGGW1 file."""
    payload = bytearray()
    names = conv_layer_names()
    payload += struct.pack("<I", 2 * len(names))
    for name in names:
        kern, bias = net.weights[name]
        for suffix, arr in (("weight", kern), ("bias", bias)):
            rec_name = f"{name}.{suffix}".encode()
            payload += struct.pack("<I", len(rec_name)) + rec_name
            payload += struct.pack("<I", arr.ndim)
            payload += struct.pack(f"<{arr.ndim}I", *arr.shape)
            payload += np.asarray(arr, dtype="<f4").tobytes()
    payload += np.asarray(net.channel_means, dtype="<f4").tobytes()
    crc = zlib.crc32(bytes(payload)) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<I", _VERSION) + payload + struct.pack("<I", crc))


def load_weights(path) -> VggNetwork:
    """Load a VGGW1 file; verifies magic, version, CRC, and layer shapes."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != _MAGIC:
        raise WeightFormatError(f"{path}: bad magic, not a VGGW1 file")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != _VERSION:
        raise WeightFormatError(f"{path}: unsupported version {version}")
    payload = blob[8:-4]
    (stored_crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise WeightFormatError(f"{path}: CRC32 mismatch, file corrupt")

    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(payload):
            raise WeightFormatError(f"{path}: truncated while reading {what}")
        chunk = payload[off : off + n]
        off += n
        return chunk

    (count,) = struct.unpack("<I", take(4, "record count"))
    records: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = struct.unpack("<I", take(4, f"record {i} name length"))
        name = take(name_len, f"record {i} name").decode()
        (rank,) = struct.unpack("<I", take(4, f"{name} rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"{name} dims"))
        n_vals = int(np.prod(dims)) if rank else 1
        data = take(4 * n_vals, f"{name} data")
        records[name] = np.frombuffer(data, dtype="<f4").astype(np.float64).reshape(dims)
    means = np.frombuffer(take(12, "channel means"), dtype="<f4").astype(np.float64)
    if off != len(payload):
        raise WeightFormatError(f"{path}: {len(payload) - off} trailing payload bytes")

    weights = {}
    for name in conv_layer_names():
        for suffix in ("weight", "bias"):
            if f"{name}.{suffix}" not in records:
                raise WeightFormatError(f"{path}: missing record {name}.{suffix}")
        weights[name] = (records[f"{name}.weight"], records[f"{name}.bias"])
    return VggNetwork(weights=weights, channel_means=means)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

class ForwardPass:
    """Per-image forward pass with the cache needed for the reverse pass.

    One instance per transfer session; the shared network is read-only.
    """

    def __init__(self, net: VggNetwork, image: np.ndarray, wanted):
        wanted = set(wanted)
        unknown = [n for n in wanted if n not in LAYER_INDEX]
        if unknown:
            raise KeyError(f"unknown layer name(s): {sorted(unknown)}")
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"image must be H x W x 3, got shape {image.shape}")
        self.net = net
        self.wanted = wanted
        self._deepest = max(LAYER_INDEX[n] for n in wanted) if wanted else -1
        self.activations: dict[str, np.ndarray] = {}
        # per executed layer: (name, kind, record) where record is the layer
        # input for conv/relu and (argmax, input_shape) for pool
        self._trace: list[tuple[str, str, object]] = []
        self._input_shape = image.shape

        x = np.asarray(image, dtype=np.float64)
        for idx, (name, kind) in enumerate(LAYER_SEQUENCE):
            if idx > self._deepest:
                break
            if kind == "conv":
                kern, bias = net.weights[name]
                self._trace.append((name, kind, x))
                x = conv2d_forward(x, kern, bias)
            elif kind == "relu":
                self._trace.append((name, kind, x))
                x = relu_forward(x)
            else:
                pooled, argmax = maxpool2_forward(x)
                self._trace.append((name, kind, (argmax, x.shape)))
                x = pooled
            if name in wanted:
                self.activations[name] = x

    def backward(self, grad_seeds: dict[str, np.ndarray]) -> np.ndarray:
        """Accumulate seeds injected at layer outputs down to the image.

        Returns dL/d(image) for L = sum_l <seed_l, activation_l>.
        """
        for name, seed in grad_seeds.items():
            if name not in self.activations:
                raise KeyError(f"seed at layer {name!r} which was not in the forward wanted-set")
            if seed.shape != self.activations[name].shape:
                raise ValueError(
                    f"seed shape {seed.shape} != activation shape "
                    f"{self.activations[name].shape} at {name}"
                )
        if not grad_seeds:
            return np.zeros(self._input_shape)
        deepest = max(LAYER_INDEX[n] for n in grad_seeds)
        grad = np.zeros_like(self.activations[LAYER_SEQUENCE[deepest][0]])
        for name, kind, rec in reversed(self._trace[: deepest + 1]):
            if name in grad_seeds:
                grad = grad + grad_seeds[name]
            if kind == "conv":
                kern, _ = self.net.weights[name]
                grad = conv2d_backward(grad, rec, kern)
            elif kind == "relu":
                grad = relu_backward(grad, rec)
            else:
                argmax, in_shape = rec
                grad = maxpool2_backward(grad, argmax, in_shape)
        return grad


def forward_collect(net: VggNetwork, image: np.ndarray, wanted) -> dict[str, np.ndarray]:
    """Activations for exactly the wanted layers (h_l x w_l x N_l arrays)."""
    return ForwardPass(net, image, wanted).activations


def backward_to_input(net: VggNetwork, image: np.ndarray,
                      grad_seeds: dict[str, np.ndarray]) -> np.ndarray:
    """One-shot forward + reverse pass; see ``ForwardPass.backward``."""
    return ForwardPass(net, image, set(grad_seeds)).backward(grad_seeds)
