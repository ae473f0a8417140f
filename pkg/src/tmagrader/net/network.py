"""U-Net style encoder/decoder with analytic gradients.

Encoder: four blocks of (conv3x3 -> BN -> ELU) x2 with 2x2 max-pooling
between blocks. Decoder: three blocks, each a 2x2 stride-2 transposed
convolution followed by concatenation with the matching encoder feature map
and another double conv block. Head: 1x1 convolution to the class channels
plus per-pixel softmax.

Tensor naming (also the on-disk weight order):
``enc{k}.conv{i}.{w,b}``, ``enc{k}.bn{i}.{gamma,beta,running_mean,
running_var}`` for k in 1..4, then ``dec{k}.up.{w,b}`` plus the same block
tensors for k in 1..3, then ``head.{w,b}``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import GeometryError
from . import layers


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 3
    num_classes: int = 6
    encoder_filters: tuple[int, int, int, int] = (64, 128, 256, 512)
    decoder_filters: tuple[int, int, int] = (256, 128, 64)
    elu_alpha: float = 1.0
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.9

    def __post_init__(self):
        if len(self.encoder_filters) != 4 or len(self.decoder_filters) != 3:
            raise ValueError("encoder takes 4 filter counts, decoder 3")
        if min(self.encoder_filters) < 1 or min(self.decoder_filters) < 1:
            raise ValueError("filter counts must be positive")
        if not 0 < self.bn_momentum < 1:
            raise ValueError("bn_momentum must be in (0,1)")


def param_shapes(config: UNetConfig) -> dict[str, tuple[int, ...]]:
    """Every tensor's shape, in canonical order; a pure function of config."""
    e = config.encoder_filters
    d = config.decoder_filters
    shapes: dict[str, tuple[int, ...]] = {}

    def block(prefix: str, cin: int, cout: int) -> None:
        shapes[f"{prefix}.conv1.w"] = (3, 3, cin, cout)
        shapes[f"{prefix}.conv1.b"] = (cout,)
        _bn(f"{prefix}.bn1", cout)
        shapes[f"{prefix}.conv2.w"] = (3, 3, cout, cout)
        shapes[f"{prefix}.conv2.b"] = (cout,)
        _bn(f"{prefix}.bn2", cout)

    def _bn(prefix: str, c: int) -> None:
        for t in ("gamma", "beta", "running_mean", "running_var"):
            shapes[f"{prefix}.{t}"] = (c,)

    cin = config.in_channels
    for k, f in enumerate(e, start=1):
        block(f"enc{k}", cin, f)
        cin = f
    up_in = e[3]
    for k, f in enumerate(d, start=1):
        shapes[f"dec{k}.up.w"] = (2, 2, up_in, f)
        shapes[f"dec{k}.up.b"] = (f,)
        skip = e[3 - k]
        block(f"dec{k}", f + skip, f)
        up_in = f
    shapes["head.w"] = (1, 1, d[2], config.num_classes)
    shapes["head.b"] = (config.num_classes,)
    return shapes


class UNetParams:
    """All tensors of the network plus batch-norm running statistics."""

    def __init__(self, config: UNetConfig, tensors: dict[str, np.ndarray]):
        expected = param_shapes(config)
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ValueError(f"tensor set mismatch: missing {missing}, extra {extra}")
        for name, shape in expected.items():
            if tuple(tensors[name].shape) != shape:
                raise ValueError(
                    f"{name}: expected shape {shape}, found {tuple(tensors[name].shape)}"
                )
        self.config = config
        self.tensors = {name: tensors[name] for name in expected}  # canonical order

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.tensors.values())).dtype

    def trainable_names(self) -> list[str]:
        return [n for n in self.tensors if "running_" not in n]

    def parameter_count(self, trainable_only: bool = False) -> int:
        names = self.trainable_names() if trainable_only else list(self.tensors)
        return int(sum(np.prod(self.tensors[n].shape) for n in names))

    def copy(self) -> "UNetParams":
        return UNetParams(self.config, {n: t.copy() for n, t in self.tensors.items()})

    def astype(self, dtype) -> "UNetParams":
        return UNetParams(self.config, {n: t.astype(dtype) for n, t in self.tensors.items()})

    def allclose(self, other: "UNetParams", **kw) -> bool:
        return all(np.allclose(self.tensors[n], other.tensors[n], **kw) for n in self.tensors)

    def equal(self, other: "UNetParams") -> bool:
        return all(np.array_equal(self.tensors[n], other.tensors[n]) for n in self.tensors)


def init_params(config: UNetConfig, seed: int, dtype=np.float32) -> UNetParams:
    """Fan-in-scaled normal init for conv weights; zero biases; identity BN.

    Deterministic given the seed: tensors are drawn in canonical order.
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[:-1]))
            std = np.sqrt(2.0 / fan_in)
            tensors[name] = rng.normal(0.0, std, size=shape).astype(dtype)
        elif name.endswith((".b", ".beta", ".running_mean")):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:  # gamma, running_var
            tensors[name] = np.ones(shape, dtype=dtype)
    return UNetParams(config, tensors)


def _block_forward(t, prefix, params, train, update, caches):
    cfg = params.config
    p = params.tensors
    for i in (1, 2):
        t, conv_cache = layers.conv2d_forward(t, p[f"{prefix}.conv{i}.w"], p[f"{prefix}.conv{i}.b"])
        bn = f"{prefix}.bn{i}"
        if train:
            t, bn_cache, mu, var = layers.bn_forward_train(
                t, p[f"{bn}.gamma"], p[f"{bn}.beta"], cfg.bn_epsilon
            )
            if update:
                mom = cfg.bn_momentum
                p[f"{bn}.running_mean"][:] = mom * p[f"{bn}.running_mean"] + (1 - mom) * mu
                p[f"{bn}.running_var"][:] = mom * p[f"{bn}.running_var"] + (1 - mom) * var
        else:
            t = layers.bn_forward_infer(
                t, p[f"{bn}.gamma"], p[f"{bn}.beta"],
                p[f"{bn}.running_mean"], p[f"{bn}.running_var"], cfg.bn_epsilon,
            )
            bn_cache = None
        t, y = layers.elu_forward(t, cfg.elu_alpha)
        if caches is not None:
            caches[f"{prefix}.conv{i}"] = conv_cache
            caches[f"{prefix}.bn{i}"] = bn_cache
            caches[f"{prefix}.elu{i}"] = y
    return t


def forward(
    params: UNetParams,
    x: np.ndarray,
    mode: str = "infer",
    return_cache: bool = False,
    update_stats: bool | None = None,
):
    """Run the network on a batch (N, H, W, C) -> per-pixel class probabilities.

    ``mode='train'`` normalizes with batch statistics and (by default)
    updates the running statistics; ``mode='infer'`` uses the stored running
    statistics and is a pure function of (params, x).
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    train = mode == "train"
    update = train if update_stats is None else update_stats
    if return_cache and not train:
        raise ValueError("gradients require mode='train'")
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[3] != params.config.in_channels:
        raise GeometryError(f"expected batch (N,H,W,{params.config.in_channels}), got {x.shape}")
    if x.shape[1] % 8 or x.shape[2] % 8:
        raise GeometryError(f"spatial size {x.shape[1:3]} not divisible by 8")
    x = x.astype(params.dtype, copy=False)

    p = params.tensors
    caches: dict | None = {} if return_cache else None
    skips = []
    t = x
    for k in range(1, 5):
        if k > 1:
            t, pool_cache = layers.maxpool2_forward(t)
            if caches is not None:
                caches[f"pool{k-1}"] = pool_cache
        t = _block_forward(t, f"enc{k}", params, train, update, caches)
        if k < 4:
            skips.append(t)
    for k in range(1, 4):
        t, up_cache = layers.upconv2_forward(t, p[f"dec{k}.up.w"], p[f"dec{k}.up.b"])
        skip = skips[3 - k]
        if caches is not None:
            caches[f"dec{k}.up"] = up_cache
            caches[f"dec{k}.split"] = t.shape[3]
        t = np.concatenate([t, skip], axis=3)
        t = _block_forward(t, f"dec{k}", params, train, update, caches)
    logits, head_cache = layers.conv2d_forward(t, p["head.w"], p["head.b"])
    probs = layers.softmax(logits)
    if caches is not None:
        caches["head"] = head_cache
        caches["probs"] = probs
        return probs, caches
    return probs


def loss_xent(pred: np.ndarray, target: np.ndarray) -> float:
    """Soft-target cross-entropy averaged over pixels."""
    return layers.xent_loss(pred, target)


def _block_backward(d, prefix, params, caches, grads):
    cfg = params.config
    p = params.tensors
    for i in (2, 1):
        d = layers.elu_backward(d, caches[f"{prefix}.elu{i}"], cfg.elu_alpha)
        d, dgamma, dbeta = layers.bn_backward(d, caches[f"{prefix}.bn{i}"])
        grads[f"{prefix}.bn{i}.gamma"] = dgamma
        grads[f"{prefix}.bn{i}.beta"] = dbeta
        d, dw, db = layers.conv2d_backward(d, p[f"{prefix}.conv{i}.w"], caches[f"{prefix}.conv{i}"])
        grads[f"{prefix}.conv{i}.w"] = dw
        grads[f"{prefix}.conv{i}.b"] = db
    return d


def backward(params: UNetParams, caches: dict, target: np.ndarray) -> dict[str, np.ndarray]:
    """Analytic gradients of the cross-entropy loss for every trainable tensor.

    ``caches`` must come from ``forward(..., mode='train', return_cache=True)``
    on the same batch.
    """
    p = params.tensors
    grads: dict[str, np.ndarray] = {}
    probs = caches["probs"]
    if probs.shape != target.shape:
        raise ValueError(f"target shape {target.shape} != output shape {probs.shape}")
    dz = layers.xent_softmax_grad(probs, target.astype(probs.dtype, copy=False))
    d, dw, db = layers.conv2d_backward(dz, p["head.w"], caches["head"])
    grads["head.w"] = dw
    grads["head.b"] = db

    dskip: dict[int, np.ndarray] = {}
    for k in (3, 2, 1):
        d = _block_backward(d, f"dec{k}", params, caches, grads)
        cup = caches[f"dec{k}.split"]
        dup, ds = d[..., :cup], d[..., cup:]
        dskip[4 - k] = ds  # dec1 pairs with enc3, dec2 with enc2, dec3 with enc1
        d, dw, db = layers.upconv2_backward(dup, p[f"dec{k}.up.w"], caches[f"dec{k}.up"])
        grads[f"dec{k}.up.w"] = dw
        grads[f"dec{k}.up.b"] = db
    for k in (4, 3, 2, 1):
        d = _block_backward(d, f"enc{k}", params, caches, grads)
        if k > 1:
            d = layers.maxpool2_backward(d, caches[f"pool{k-1}"])
            d = d + dskip[k - 1]
    return {n: grads[n] for n in params.trainable_names()}
