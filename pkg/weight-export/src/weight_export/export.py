"""Checkpoint-to-VGGW1 conversion and the tiny random-weight generator.

Supported checkpoint sources:

* ``.npz`` archives keyed like torchvision state dicts
  (``features.0.weight`` ...), kernels stored ``(out, in, kh, kw)``;
* ``.pth``/``.pt`` state dicts, loaded through torch when it is installed.

The VGGW1 consumer stores kernels as ``(kh, kw, in, out)``, so conversion
transposes each kernel.  All framework knowledge lives here; the consumer
never reads framework formats.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .vggw1 import write_vggw1

BLOCK_CONVS = (2, 2, 4, 4, 4)
BLOCK_MULT = (1, 2, 4, 8, 8)
CANONICAL_BASE = 64
KERNEL_SIZE = 3

# torchvision vgg19 "features" indices of the 16 conv layers, in graph order
TORCHVISION_FEATURE_INDICES = (0, 2, 5, 7, 10, 12, 14, 16, 19, 21, 23, 25, 28, 30, 32, 34)

# ImageNet RGB means for [0, 1]-scaled inputs
DEFAULT_CHANNEL_MEANS = (0.485, 0.456, 0.406)


class ExportError(ValueError):
    pass


def conv_names() -> list[str]:
    names = []
    for b, n in enumerate(BLOCK_CONVS, start=1):
        names.extend(f"conv{b}_{i}" for i in range(1, n + 1))
    return names


def torchvision_mapping() -> dict[str, str]:
    """Source layer prefix (``features.N``) -> target conv name."""
    return {
        f"features.{idx}": name
        for idx, name in zip(TORCHVISION_FEATURE_INDICES, conv_names())
    }


def expected_shapes(base_width: int = CANONICAL_BASE) -> dict[str, tuple[int, int]]:
    out = {}
    prev = 3
    for b, n in enumerate(BLOCK_CONVS, start=1):
        width = base_width * BLOCK_MULT[b - 1]
        for i in range(1, n + 1):
            out[f"conv{b}_{i}"] = (prev, width)
            prev = width
    return out


def _load_state_dict(source: Path) -> dict[str, np.ndarray]:
    if source.suffix == ".npz":
        with np.load(source) as data:
            return {k: np.asarray(data[k]) for k in data.files}
    if source.suffix in (".pth", ".pt"):
        try:
            import torch
        except ImportError:
            raise ExportError(
                f"{source}: reading torch checkpoints requires torch; "
                "convert to .npz first"
            ) from None
        state = torch.load(source, map_location="cpu", weights_only=True)
        return {k: v.detach().numpy() for k, v in state.items()}
    raise ExportError(f"{source}: unsupported checkpoint format {source.suffix!r}")


def export(source, out, *, mapping: dict[str, str] | None = None,
           channel_means=DEFAULT_CHANNEL_MEANS, verbose: bool = False) -> None:
    """Convert a VGG19 checkpoint to VGGW1 at ``out``.

    ``mapping`` maps source key prefixes to conv names; it must cover all 16
    conv layers exactly once.  Shapes are validated against the canonical
    VGG19 channel plan before anything is written.
    """
    source = Path(source)
    if mapping is None:
        mapping = torchvision_mapping()
    names = conv_names()
    inverse = {v: k for k, v in mapping.items()}
    if len(inverse) != len(mapping):
        dup = next(n for n in names if list(mapping.values()).count(n) > 1)
        raise ExportError(f"layer {dup!r} mapped more than once")
    for name in names:
        if name not in inverse:
            raise ExportError(f"layer {name!r} is not mapped to any source key")

    state = _load_state_dict(source)
    shapes = expected_shapes()
    records = []
    rows = []
    for name in names:
        prefix = inverse[name]
        w_key, b_key = f"{prefix}.weight", f"{prefix}.bias"
        for key in (w_key, b_key):
            if key not in state:
                raise ExportError(f"layer {name!r}: source key {key!r} missing")
        kern = np.asarray(state[w_key])
        bias = np.asarray(state[b_key])
        c_in, c_out = shapes[name]
        if kern.shape != (c_out, c_in, KERNEL_SIZE, KERNEL_SIZE):
            raise ExportError(
                f"layer {name!r}: kernel shape {kern.shape} != expected "
                f"{(c_out, c_in, KERNEL_SIZE, KERNEL_SIZE)}"
            )
        if bias.shape != (c_out,):
            raise ExportError(f"layer {name!r}: bias shape {bias.shape} != ({c_out},)")
        kern = kern.transpose(2, 3, 1, 0)  # -> (kh, kw, in, out)
        records.append((f"{name}.weight", kern))
        records.append((f"{name}.bias", bias))
        rows.append((name, kern.shape, bias.shape))
    write_vggw1(records, channel_means, out)
    if verbose:
        for name, kshape, bshape in rows:
            print(f"{name:<10} kernel {kshape}  bias {bshape}")


def make_tiny(out, seed: int = 0) -> None:
    """Write a seeded random VGGW1 file at 1/8 of the canonical widths."""
    base = math.ceil(CANONICAL_BASE / 8)
    rng = np.random.default_rng(seed)
    records = []
    for name, (c_in, c_out) in expected_shapes(base).items():
        kern = rng.standard_normal((KERNEL_SIZE, KERNEL_SIZE, c_in, c_out)) * (
            0.3 / math.sqrt(KERNEL_SIZE * KERNEL_SIZE * c_in)
        )
        bias = rng.standard_normal(c_out) * 0.01
        records.append((f"{name}.weight", kern))
        records.append((f"{name}.bias", bias))
    write_vggw1(records, DEFAULT_CHANNEL_MEANS, out)
