"""Guided style transfer: content / masked-Gram style / TV losses, synthesis.

Feature matrices are ``M_l x N_l`` (rows = flattened spatial positions,
columns = feature maps), obtained by reshaping an ``h x w x N`` activation
row-major.  Mask vectors from :mod:`lesionforge.masks` use the same
flattening, so masking a feature matrix is a row scaling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .masks import MaskPyramid
from .ops import AdamState, adam_step
from .vgg import LAYER_INDEX, ForwardPass, VggNetwork

STYLE_LAYER_CHOICES = ("relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1")
CONTENT_LAYER_CHOICES = ("relu1_2", "relu2_2", "relu3_2", "relu4_2", "relu5_2")


class TransferDivergence(RuntimeError):
    """Raised when the synthesis loss becomes NaN or infinite."""


@dataclass(frozen=True)
class TransferConfig:
    """Knobs of one synthesis run.

    ``beta`` acts as the style/content ratio with ``alpha`` conventionally
    fixed to 1.  Unset layer weights default to ``1/len(style_layers)``.
    """

    style_layers: tuple[str, ...] = STYLE_LAYER_CHOICES
    content_layer: str = "relu4_2"
    alpha: float = 1.0
    beta: float = 1000.0
    gamma: float = 1.0
    layer_weights: dict[str, float] | None = None
    max_iters: int = 500
    rel_tol: float = 5e-4
    learning_rate: float = 0.02
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999

    def __post_init__(self):
        if not self.style_layers:
            raise ValueError("style_layers must be nonempty")
        for name in self.style_layers:
            if name not in LAYER_INDEX:
                raise ValueError(f"unknown style layer {name!r}")
        if self.content_layer not in LAYER_INDEX:
            raise ValueError(f"unknown content layer {self.content_layer!r}")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be nonnegative")

    def weight(self, layer: str) -> float:
        if self.layer_weights is not None:
            return self.layer_weights.get(layer, 0.0)
        return 1.0 / len(self.style_layers)


@dataclass(frozen=True)
class StyleTargets:
    """Masked style Gram matrices and the content-layer activation target."""

    grams: dict[str, np.ndarray]          # layer -> N_l x N_l
    content: np.ndarray                   # h x w x N at the content layer


@dataclass
class TransferResult:
    image: np.ndarray
    loss_trace: list[float]
    termination: str                      # "converged" | "max-iters"
    content_loss: float
    style_loss: float
    tv_loss: float


# ---------------------------------------------------------------------------
# Loss primitives
# ---------------------------------------------------------------------------

def gram(feats: np.ndarray) -> np.ndarray:
    """Feature-map correlation matrix F^T F of an M x N feature matrix."""
    return feats.T @ feats


def mask_features(feats: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Scale every feature-map column elementwise by the mask vector."""
    if feats.shape[0] != t.shape[0]:
        raise ValueError(f"mask length {t.shape[0]} != feature rows {feats.shape[0]}")
    return feats * t[:, None]


def content_loss(feats: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Half squared distance between activations; seed is the residual."""
    if feats.shape != target.shape:
        raise ValueError(f"shape mismatch {feats.shape} != {target.shape}")
    diff = feats - target
    return 0.5 * float(np.sum(diff * diff)), diff


def style_layer_loss(masked_feats: np.ndarray, target_gram: np.ndarray,
                     n_l: int, m_l: int) -> tuple[float, np.ndarray]:
    """Per-layer Gram distance 1/(4 N^2 M^2) sum (G - A)^2 and its seed."""
    g = gram(masked_feats)
    if target_gram.shape != g.shape:
        raise ValueError(f"target gram shape {target_gram.shape} != {g.shape}")
    diff = g - target_gram
    scale = 1.0 / (n_l * n_l * m_l * m_l)
    loss = 0.25 * scale * float(np.sum(diff * diff))
    seed = scale * (masked_feats @ diff)
    return loss, seed


def tv_loss(x: np.ndarray) -> tuple[float, np.ndarray]:
    """Anisotropic total variation, per channel; subgradient 0 at ties."""
    x = np.asarray(x, dtype=np.float64)
    dv = x[:-1, :, :] - x[1:, :, :]
    dh = x[:, :-1, :] - x[:, 1:, :]
    loss = float(np.sum(np.abs(dv)) + np.sum(np.abs(dh)))
    grad = np.zeros_like(x)
    sv = np.sign(dv)
    sh = np.sign(dh)
    grad[:-1, :, :] += sv
    grad[1:, :, :] -= sv
    grad[:, :-1, :] += sh
    grad[:, 1:, :] -= sh
    return loss, grad


# ---------------------------------------------------------------------------
# Objective assembly
# ---------------------------------------------------------------------------

def _flat(act: np.ndarray) -> np.ndarray:
    h, w, n = act.shape
    return act.reshape(h * w, n)


def build_style_targets(net: VggNetwork, style_image: np.ndarray,
                        content_image: np.ndarray, pyramid: MaskPyramid,
                        config: TransferConfig) -> StyleTargets:
    """Masked Gram targets of the style image plus the content activation."""
    style_acts = ForwardPass(net, net.preprocess(style_image), config.style_layers).activations
    grams = {}
    for layer in config.style_layers:
        feats = _flat(style_acts[layer])
        grams[layer] = gram(mask_features(feats, pyramid.vector(layer)))
    content_acts = ForwardPass(
        net, net.preprocess(content_image), {config.content_layer}
    ).activations
    return StyleTargets(grams=grams, content=content_acts[config.content_layer])


def total_loss(x: np.ndarray, net: VggNetwork, targets: StyleTargets,
               pyramid: MaskPyramid, config: TransferConfig
               ) -> tuple[float, np.ndarray, dict[str, float]]:
    """Combined objective and its pixel gradient.

    Returns ``(loss, grad, parts)`` where ``parts`` holds the unweighted
    content, style, and TV terms.
    """
    wanted = set(config.style_layers) | {config.content_layer}
    fp = ForwardPass(net, net.preprocess(x), wanted)
    seeds: dict[str, np.ndarray] = {}

    c_loss, c_seed = content_loss(fp.activations[config.content_layer], targets.content)
    if config.alpha != 0.0:
        seeds[config.content_layer] = config.alpha * c_seed

    s_loss = 0.0
    for layer in config.style_layers:
        act = fp.activations[layer]
        h, w, n_l = act.shape
        m_l = h * w
        t = pyramid.vector(layer)
        feats = _flat(act)
        masked = mask_features(feats, t)
        e_l, seed_masked = style_layer_loss(masked, targets.grams[layer], n_l, m_l)
        s_loss += config.weight(layer) * e_l
        if config.beta != 0.0:
            seed = config.beta * config.weight(layer) * mask_features(seed_masked, t)
            seed = seed.reshape(act.shape)
            seeds[layer] = seeds.get(layer, 0.0) + seed

    t_loss, t_grad = tv_loss(x)

    grad = fp.backward(seeds) if seeds else np.zeros_like(np.asarray(x, dtype=np.float64))
    grad = grad + config.gamma * t_grad
    loss = config.alpha * c_loss + config.beta * s_loss + config.gamma * t_loss
    parts = {"content": c_loss, "style": s_loss, "tv": t_loss}
    return loss, grad, parts


# ---------------------------------------------------------------------------
# Synthesis loop
# ---------------------------------------------------------------------------

def run_transfer(style_image: np.ndarray, content_image: np.ndarray,
                 pyramid: MaskPyramid, net: VggNetwork,
                 config: TransferConfig) -> TransferResult:
    """Adam synthesis starting from the content image.

    The pixel buffer is optimized unclamped and clamped to [0, 1] only on
    emission.  Terminates after ``max_iters`` iterations or when the
    relative loss change drops to ``rel_tol``.
    """
    if style_image.shape != content_image.shape:
        raise ValueError(
            f"style shape {style_image.shape} != content shape {content_image.shape}"
        )
    targets = build_style_targets(net, style_image, content_image, pyramid, config)

    x = np.asarray(content_image, dtype=np.float64).copy()
    state = AdamState.init(
        x.shape,
        learning_rate=config.learning_rate,
        beta1=config.adam_beta1,
        beta2=config.adam_beta2,
    )
    trace: list[float] = []
    parts = {"content": 0.0, "style": 0.0, "tv": 0.0}
    termination = "max-iters"
    for it in range(config.max_iters):
        loss, grad, parts = total_loss(x, net, targets, pyramid, config)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise TransferDivergence(f"non-finite loss at iteration {it}")
        trace.append(loss)
        if trace and len(trace) >= 2:
            prev, cur = trace[-2], trace[-1]
            if cur == 0.0 or abs(cur - prev) / cur <= config.rel_tol:
                termination = "converged"
                break
        x, state = adam_step(x, grad, state)

    return TransferResult(
        image=np.clip(x, 0.0, 1.0),
        loss_trace=trace,
        termination=termination,
        content_loss=parts["content"],
        style_loss=parts["style"],
        tv_loss=parts["tv"],
    )
