"""Model specification and graph assembly for the segmentation networks.

Three families share one encoder: a 3x3 stem followed by four stages,
each opened by a stride-2 convolution and continued with residual basic
blocks (two 3x3 convs with batch norm and an identity shortcut).

* ``unet``     -- stage widths double (w, 2w, 4w, 8w); the decoder
                  upsamples, concatenates the encoder skip, and fuses
                  with a 3x3 convolution.
* ``linknet``  -- same encoder; the decoder projects with a 3x3
                  convolution first and then *adds* the skip, which keeps
                  decoder tensors narrow.
* ``dwm``      -- a fixed-width hourglass: every stage keeps ``base_width``
                  channels and skips are additive.

A model is a static DAG stored as a topologically ordered layer list plus,
for each layer, the indices of the layers feeding it (``-1`` is the network
input).  Forward/backward walk that list directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ArgumentError
from .layers import Add, BatchNorm2d, Concat, Conv2d, Layer, ReLU, Sigmoid, Upsample2x

__all__ = ["ModelSpec", "Model", "build_model", "count_params", "count_flops"]

_FAMILY_SKIP = {"unet": "concat", "linknet": "add", "dwm": "add"}
#: spatial dims consumed by the encoder: four stride-2 stages
STRIDE_FACTOR = 16


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; hashable and checkpoint-embeddable.

    ``backbone_blocks`` gives the residual-block count per stage:
    ``(2, 2, 2, 2)`` is the 18-layer pattern, ``(3, 4, 6, 3)`` the
    34-layer pattern.  ``skip_mode`` may be omitted and is derived from
    the family (``unet`` concatenates, the others add).
    """

    family: str
    backbone_blocks: tuple[int, int, int, int] = (2, 2, 2, 2)
    base_width: int = 16
    in_bands: int = 4
    skip_mode: str | None = None

    def __post_init__(self) -> None:
        fam = str(self.family).lower()
        if fam not in _FAMILY_SKIP:
            raise ArgumentError(f"unknown family {self.family!r}")
        object.__setattr__(self, "family", fam)
        blocks = tuple(int(b) for b in self.backbone_blocks)
        if len(blocks) != 4 or any(b < 1 for b in blocks):
            raise ArgumentError(f"backbone_blocks needs 4 positive entries, got {blocks}")
        object.__setattr__(self, "backbone_blocks", blocks)
        if self.base_width < 1:
            raise ArgumentError(f"base_width must be positive, got {self.base_width}")
        if self.in_bands not in (1, 4, 8):
            raise ArgumentError(f"in_bands must be 1, 4 or 8, got {self.in_bands}")
        derived = _FAMILY_SKIP[fam]
        if self.skip_mode is None:
            object.__setattr__(self, "skip_mode", derived)
        elif self.skip_mode != derived:
            raise ArgumentError(
                f"family {fam!r} requires skip_mode {derived!r}, got {self.skip_mode!r}"
            )

    @property
    def stage_widths(self) -> tuple[int, int, int, int]:
        w = self.base_width
        if self.family == "dwm":
            return (w, w, w, w)
        return (w, 2 * w, 4 * w, 8 * w)


class Model:
    """A built network: layers in topological order plus wiring."""

    def __init__(self, spec: ModelSpec, layers: list[Layer],
                 inputs: list[tuple[int, ...]], dtype: np.dtype = np.float32) -> None:
        self.spec = spec
        self.layers = layers
        self.inputs = inputs
        self.dtype = np.dtype(dtype)
        self._fwd_meta: tuple | None = None
        # consumer counts let eval-mode forward drop activations eagerly
        counts: dict[int, int] = {}
        for ins in inputs:
            for j in ins:
                counts[j] = counts.get(j, 0) + 1
        self._consumers = counts

    # ---- weight access -------------------------------------------------
    def named_arrays(self):
        """Yield ``("n{i}.{name}", array)`` for all params and buffers."""
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                yield f"n{i}.{name}", arr
            for name, arr in layer.state().items():
                yield f"n{i}.{name}", arr

    def get_weights(self) -> dict[str, np.ndarray]:
        return {name: arr.copy() for name, arr in self.named_arrays()}

    def set_weights(self, weights: dict[str, np.ndarray]) -> None:
        for name, arr in weights.items():
            try:
                node, attr = name.split(".", 1)
                layer = self.layers[int(node[1:])]
            except (ValueError, IndexError) as exc:
                raise ArgumentError(f"unknown weight {name!r}") from exc
            if attr not in layer.params() and attr not in layer.state():
                raise ArgumentError(f"unknown weight {name!r}")
            have = getattr(layer, attr)
            if have.shape != arr.shape:
                raise ArgumentError(
                    f"shape mismatch for {name}: {have.shape} vs {arr.shape}"
                )
            setattr(layer, attr, np.asarray(arr, dtype=have.dtype))

    def cast(self, dtype) -> None:
        """Convert all weights/buffers to ``dtype`` (e.g. float64 shadows)."""
        self.dtype = np.dtype(dtype)
        for layer in self.layers:
            layer.cast(self.dtype)

    # ---- execution -----------------------------------------------------
    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        """Probability maps for a batch.

        Accepts ``(N, C, H, W)`` or a single ``(C, H, W)`` image with
        ``H, W >= 16``; returns ``(N, H, W)`` (or ``(H, W)``) in (0, 1).
        Sizes that are not multiples of 16 are reflect-padded on the
        right/bottom edges internally and cropped back afterwards.
        """
        x = np.asarray(x)
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        if x.ndim != 4:
            raise ArgumentError(f"expected (N, C, H, W) input, got shape {x.shape}")
        n, c, h, w = x.shape
        if c != self.spec.in_bands:
            raise ArgumentError(f"model expects {self.spec.in_bands} bands, got {c}")
        if h < STRIDE_FACTOR or w < STRIDE_FACTOR:
            raise ArgumentError(f"input must be at least {STRIDE_FACTOR}x{STRIDE_FACTOR}")
        pad_h = -h % STRIDE_FACTOR
        pad_w = -w % STRIDE_FACTOR
        x = x.astype(self.dtype, copy=False)
        if pad_h or pad_w:
            x = np.pad(x, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)), mode="reflect")
        vals: dict[int, np.ndarray] = {-1: x}
        remaining = dict(self._consumers)
        for i, (layer, ins) in enumerate(zip(self.layers, self.inputs)):
            vals[i] = layer.forward([vals[j] for j in ins], training)
            for j in ins:
                remaining[j] -= 1
                if remaining[j] == 0:
                    del vals[j]
        out = vals[len(self.layers) - 1][:, 0]
        if pad_h or pad_w:
            out = out[:, :h, :w]
        if training:
            self._fwd_meta = ((h, w), (h + pad_h, w + pad_w), squeeze)
        return out[0] if squeeze else out

    def backward_from_logits(self, dz: np.ndarray) -> dict[str, np.ndarray]:
        """Reverse-mode pass seeded with dL/d(logits) of the final conv.

        ``dz`` has the cropped output shape ``(N, H, W)``.  Returns
        gradients keyed like :meth:`named_arrays` (parameters only).
        """
        if self._fwd_meta is None:
            raise ArgumentError("backward requires a preceding training-mode forward")
        (h, w), (hp, wp), _ = self._fwd_meta
        self._fwd_meta = None
        if dz.ndim == 2:
            dz = dz[None]
        full = np.zeros((dz.shape[0], 1, hp, wp), dtype=self.dtype)
        full[:, 0, :h, :w] = dz
        last = len(self.layers) - 1
        if not isinstance(self.layers[last], Sigmoid):  # pragma: no cover - graph shape
            raise ArgumentError("network must end with a sigmoid")
        self.layers[last].clear_cache()
        flowing: dict[int, np.ndarray] = {self.inputs[last][0]: full}
        for i in range(last - 1, -1, -1):
            layer = self.layers[i]
            g = flowing.pop(i, None)
            if g is None:
                layer.clear_cache()
                continue
            for j, dj in zip(self.inputs[i], layer.backward(g)):
                if j == -1:
                    continue  # gradient w.r.t. the input image is not needed
                if j in flowing:
                    flowing[j] = flowing[j] + dj
                else:
                    flowing[j] = dj
        grads: dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.layers):
            for name in layer.params():
                grads[f"n{i}.{name}"] = layer.grads[name]
            layer.grads = {}
        return grads


def build_model(spec: ModelSpec, rng: np.random.Generator | int | None = None,
                dtype=np.float32) -> Model:
    """Assemble and initialise a network (He-scaled Gaussian weights)."""
    if not isinstance(spec, ModelSpec):
        raise ArgumentError(f"expected a ModelSpec, got {type(spec).__name__}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    layers: list[Layer] = []
    inputs: list[tuple[int, ...]] = []

    def add(layer: Layer, *ins: int) -> int:
        layers.append(layer)
        inputs.append(ins)
        return len(layers) - 1

    def conv_bn_relu(src: int, cin: int, cout: int, stride: int = 1) -> int:
        c = add(Conv2d(cin, cout, 3, stride, rng=rng, dtype=dtype), src)
        b = add(BatchNorm2d(cout, dtype=dtype), c)
        return add(ReLU(), b)

    def basic_block(src: int, ch: int) -> int:
        mid = conv_bn_relu(src, ch, ch)
        c2 = add(Conv2d(ch, ch, 3, 1, rng=rng, dtype=dtype), mid)
        b2 = add(BatchNorm2d(ch, dtype=dtype), c2)
        merged = add(Add(), b2, src)
        return add(ReLU(), merged)

    widths = spec.stage_widths
    stem = conv_bn_relu(-1, spec.in_bands, spec.base_width)
    feats = [stem]
    cur, ch = stem, spec.base_width
    for s in range(4):
        cur = conv_bn_relu(cur, ch, widths[s], stride=2)
        ch = widths[s]
        for _ in range(spec.backbone_blocks[s]):
            cur = basic_block(cur, ch)
        feats.append(cur)

    skip_channels = [spec.base_width, widths[0], widths[1], widths[2]]
    d, dch = cur, ch
    for s in (3, 2, 1, 0):
        up = add(Upsample2x(), d)
        target = skip_channels[s]
        if spec.skip_mode == "concat":
            cat = add(Concat(), up, feats[s])
            d = conv_bn_relu(cat, dch + target, target)
        else:
            d = conv_bn_relu(up, dch, target)
            d = add(Add(), d, feats[s])
        dch = target

    head = add(Conv2d(dch, 1, 3, 1, rng=rng, dtype=dtype), d)
    add(Sigmoid(), head)
    return Model(spec, layers, inputs, dtype=dtype)


def count_params(m: Model) -> int:
    """Number of trainable scalars (running statistics excluded)."""
    return sum(int(p.size) for layer in m.layers for p in layer.params().values())


def count_flops(m: Model, height: int, width: int) -> int:
    """FLOP estimate for one forward pass on a ``height x width`` image.

    Convolutions count ``2 * k^2 * Cin * Cout * Hout * Wout`` (multiply +
    add; bias excluded).  Elementwise accounting: batch norm 2/value
    (scale, shift), ReLU and additive merges 1/value, sigmoid 4/value;
    upsampling and concatenation are copies and count 0.
    """
    if height < 1 or width < 1:
        raise ArgumentError("image dims must be positive")
    dims: dict[int, tuple[int, int, int]] = {-1: (m.spec.in_bands, height, width)}
    total = 0
    for i, (layer, ins) in enumerate(zip(m.layers, m.inputs)):
        shapes = [dims[j] for j in ins]
        c, h, w = shapes[0]
        if isinstance(layer, Conv2d):
            ho, wo = h // layer.stride, w // layer.stride
            total += 2 * layer.kernel ** 2 * layer.in_channels * layer.out_channels_ * ho * wo
            dims[i] = (layer.out_channels_, ho, wo)
        elif isinstance(layer, BatchNorm2d):
            total += 2 * c * h * w
            dims[i] = shapes[0]
        elif isinstance(layer, (ReLU, Add)):
            total += c * h * w
            dims[i] = shapes[0]
        elif isinstance(layer, Upsample2x):
            dims[i] = (c, 2 * h, 2 * w)
        elif isinstance(layer, Concat):
            dims[i] = (sum(s[0] for s in shapes), h, w)
        elif isinstance(layer, Sigmoid):
            total += 4 * c * h * w
            dims[i] = shapes[0]
        else:  # pragma: no cover - future layer types
            dims[i] = shapes[0]
    return total
