"""Network definitions: the joint localizer and the two grading networks.

A model is a flat description (trunk layer list plus named heads), a
parameter dictionary, and per-batchnorm running statistics. Shapes are
inferred once at build time, so a bad input size fails at construction
rather than mid-training.

All three architectures share the building blocks: 3x3 same convolutions
followed by batchnorm and relu, 2x2 max pooling between stages, and
dense layers after flattening. The localizer is fully convolutional and
ends in an 8x nearest-neighbour upsample with a 1x1 scoring convolution
and sigmoid, so its output mask matches the input resolution. The
classifier ends in a 5-way softmax; the joint network adds a parallel
1-unit regression head on the shared trunk.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tape, Tensor
from .errors import ArgumentError, DimensionError

BN_MOMENTUM = 0.99
BN_EPS = 1e-5
L2_LAMBDA = 0.01


@dataclass
class LayerSpec:
    kind: str
    name: str
    options: dict = field(default_factory=dict)


@dataclass
class ModelGraph:
    kind: str
    input_shape: tuple[int, int, int]  # (C, H, W)
    trunk: list[LayerSpec]
    heads: dict[str, list[LayerSpec]]
    params: dict[str, Tensor] = field(default_factory=dict)
    bn_stats: dict[str, BatchNormState] = field(default_factory=dict)
    dtype: type = np.float32
    bn_momentum: float = BN_MOMENTUM


def _infer_conv_out(shape, filters, k, padding):
    c, h, w = shape
    if padding == "same":
        return (filters, h, w)
    if h < k or w < k:
        raise DimensionError(f"valid conv kernel {k} does not fit input {h}x{w}")
    return (filters, h - k + 1, w - k + 1)


def make_model(kind: str, input_shape: tuple[int, int, int], trunk: list[LayerSpec],
               heads: dict[str, list[LayerSpec]], dtype=np.float32) -> ModelGraph:
    """Allocate parameters for a layer stack, inferring shapes on the way.

    Raises at build time if any layer cannot accept its input shape.
    """
    model = ModelGraph(kind=kind, input_shape=tuple(input_shape), trunk=list(trunk),
                       heads={k: list(v) for k, v in heads.items()}, dtype=dtype)

    def alloc(name: str, shape) -> None:
        if name in model.params:
            raise ArgumentError(f"duplicate parameter name {name!r}")
        model.params[name] = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True,
                                    name=name)

    def walk(shape, layers):
        for layer in layers:
            o = layer.options
            if layer.kind == "conv":
                k = o["k"]
                alloc(f"{layer.name}.weight", (o["filters"], shape[0], k, k))
                alloc(f"{layer.name}.bias", (o["filters"],))
                shape = _infer_conv_out(shape, o["filters"], k, o.get("padding", "same"))
            elif layer.kind == "batchnorm":
                alloc(f"{layer.name}.gamma", (shape[0],))
                alloc(f"{layer.name}.beta", (shape[0],))
                model.bn_stats[layer.name] = BatchNormState(shape[0], dtype)
            elif layer.kind == "pool":
                c, h, w = shape
                if h < 2 or w < 2:
                    raise DimensionError(f"pool layer {layer.name!r} got {h}x{w} input")
                shape = (c, h // 2, w // 2)
            elif layer.kind == "upsample":
                c, h, w = shape
                f = o["factor"]
                shape = (c, h * f, w * f)
            elif layer.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif layer.kind == "dense":
                if len(shape) != 1:
                    raise DimensionError(
                        f"dense layer {layer.name!r} needs flattened input, got {shape}"
                    )
                alloc(f"{layer.name}.weight", (shape[0], o["units"]))
                alloc(f"{layer.name}.bias", (o["units"],))
                shape = (o["units"],)
            elif layer.kind in ("relu", "sigmoid", "softmax", "dropout"):
                pass
            else:
                raise ArgumentError(f"unknown layer kind {layer.kind!r}")
        return shape

    trunk_shape = walk(tuple(input_shape), model.trunk)
    for head_layers in model.heads.values():
        walk(trunk_shape, head_layers)
    return model


def _apply_layer(layer: LayerSpec, x: Tensor, model: ModelGraph, mode: str,
                 tape: Tape | None, rng) -> Tensor:
    o = layer.options
    p = model.params
    if layer.kind == "conv":
        return ad.conv2d(x, p[f"{layer.name}.weight"], p[f"{layer.name}.bias"],
                         o.get("padding", "same"), 1, tape)
    if layer.kind == "batchnorm":
        bn_mode = "train" if mode in ("train", "stats") else "infer"
        return ad.batchnorm(x, p[f"{layer.name}.gamma"], p[f"{layer.name}.beta"],
                            bn_mode, model.bn_stats[layer.name],
                            momentum=model.bn_momentum, eps=BN_EPS, tape=tape)
    if layer.kind == "pool":
        return ad.maxpool2(x, tape)
    if layer.kind == "upsample":
        return ad.upsample_nn(x, o["factor"], tape)
    if layer.kind == "relu":
        return ad.relu(x, tape)
    if layer.kind == "sigmoid":
        return ad.sigmoid(x, tape)
    if layer.kind == "softmax":
        return ad.softmax(x, tape)
    if layer.kind == "dropout":
        return ad.dropout(x, o["p"], "train" if mode == "train" else "infer", rng, tape)
    if layer.kind == "flatten":
        return ad.flatten(x, tape)
    if layer.kind == "dense":
        return ad.dense(x, p[f"{layer.name}.weight"], p[f"{layer.name}.bias"], tape)
    raise ArgumentError(f"unknown layer kind {layer.kind!r}")


def forward(model: ModelGraph, x, mode: str = "infer", tape: Tape | None = None,
            rng: np.random.Generator | None = None) -> dict[str, Tensor]:
    """Run the trunk then every head; returns {head_name: output tensor}.

    Modes: 'train' (batch statistics, dropout active), 'infer' (running
    statistics, no dropout), 'stats' (batch statistics but no dropout,
    for re-estimating the running stats).
    """
    if mode not in ("train", "infer", "stats"):
        raise ArgumentError(f"mode must be 'train', 'infer' or 'stats', got {mode!r}")
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=model.dtype))
    if x.data.ndim != 4 or x.shape[1:] != model.input_shape:
        raise DimensionError(
            f"input shape {x.shape} does not match model input {model.input_shape}"
        )
    h = x
    for layer in model.trunk:
        h = _apply_layer(layer, h, model, mode, tape, rng)
    outputs = {}
    for name, layers in model.heads.items():
        y = h
        for layer in layers:
            y = _apply_layer(layer, y, model, mode, tape, rng)
        outputs[name] = y
    return outputs


def init_weights(model: ModelGraph, rng: np.random.Generator) -> None:
    """He-normal conv/dense weights, zero biases, unit batchnorm scale.

    Layer order is fixed by the model description, so one seed gives one
    reproducible initialization.
    """
    for layer in model.trunk + [l for ls in model.heads.values() for l in ls]:
        if layer.kind == "conv":
            w = model.params[f"{layer.name}.weight"]
            fan_in = int(np.prod(w.shape[1:]))
            w.data[:] = (rng.standard_normal(w.shape) * np.sqrt(2.0 / fan_in)).astype(model.dtype)
            model.params[f"{layer.name}.bias"].data[:] = 0.0
        elif layer.kind == "dense":
            w = model.params[f"{layer.name}.weight"]
            fan_in = w.shape[0]
            w.data[:] = (rng.standard_normal(w.shape) * np.sqrt(2.0 / fan_in)).astype(model.dtype)
            model.params[f"{layer.name}.bias"].data[:] = 0.0
        elif layer.kind == "batchnorm":
            model.params[f"{layer.name}.gamma"].data[:] = 1.0
            model.params[f"{layer.name}.beta"].data[:] = 0.0
            model.bn_stats[layer.name].reset()


def reestimate_bn_stats(model: ModelGraph, images: np.ndarray,
                        batch_size: int = 8) -> None:
    """Replace batchnorm running stats with the mean of batch statistics
    over the given images (an (M, C, H, W) array).

    The exponential update with momentum 1 - 1/i at step i telescopes to
    the plain arithmetic mean, so this needs no access to the layer
    internals. Training with momentum 0.99 from cold stats takes hundreds
    of steps to stop underestimating activation spread; calling this
    before validating or serializing removes that warmup bias.
    """
    for st in model.bn_stats.values():
        st.mean[:] = 0.0
        st.var[:] = 0.0
    saved = model.bn_momentum
    try:
        step = 0
        for i in range(0, images.shape[0], batch_size):
            step += 1
            model.bn_momentum = 1.0 - 1.0 / step
            forward(model, images[i:i + batch_size], "stats")
    finally:
        model.bn_momentum = saved


def count_params(model: ModelGraph) -> int:
    """Learned parameters only; running statistics are not counted."""
    return sum(p.data.size for p in model.params.values())


def param_list(model: ModelGraph) -> list[Tensor]:
    return list(model.params.values())


def l2_weight_tensors(model: ModelGraph) -> list[Tensor]:
    """Weight tensors of layers flagged for the L2 penalty (never biases)."""
    out = []
    for layer in model.trunk + [l for ls in model.heads.values() for l in ls]:
        if layer.options.get("l2"):
            out.append(model.params[f"{layer.name}.weight"])
    return out


def state_entries(model: ModelGraph) -> dict[str, np.ndarray]:
    """Everything that defines the trained model, in a fixed order:
    parameters first (creation order), then batchnorm running stats."""
    entries: dict[str, np.ndarray] = {}
    for name, p in model.params.items():
        entries[name] = p.data
    for name, st in model.bn_stats.items():
        entries[f"{name}.running_mean"] = st.mean
        entries[f"{name}.running_var"] = st.var
    return entries


def snapshot(model: ModelGraph) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in state_entries(model).items()}


def restore(model: ModelGraph, snap: dict[str, np.ndarray]) -> None:
    entries = state_entries(model)
    if set(snap) != set(entries):
        raise ArgumentError("snapshot does not match model structure")
    for k, v in entries.items():
        v[:] = snap[k]


# --- the three concrete architectures ---------------------------------------


def _conv_block(name: str, filters: int, l2: bool = False) -> list[LayerSpec]:
    specs = [LayerSpec("conv", name, {"filters": filters, "k": 3, "padding": "same"})]
    if l2:
        specs[0].options["l2"] = True
    specs.append(LayerSpec("batchnorm", f"{name}_bn"))
    specs.append(LayerSpec("relu", f"{name}_relu"))
    return specs


def build_fcn_localizer(input_size: int = 256, dtype=np.float32) -> ModelGraph:
    """Fully convolutional joint localizer.

    Four stages of two 3x3 conv+batchnorm+relu blocks with 32/32/64/96
    filters; 2x2 pooling after the first three stages only, so the trunk
    downsamples by 8. The mask head restores full resolution with an 8x
    nearest-neighbour upsample, then scores each pixel with a 1x1
    convolution and sigmoid. Output is (N, 1, input_size, input_size).
    """
    if input_size % 8 != 0 or input_size < 8:
        raise ArgumentError(f"input size must be a positive multiple of 8, got {input_size}")
    trunk: list[LayerSpec] = []
    for stage, filters in enumerate([32, 32, 64, 96], start=1):
        trunk += _conv_block(f"conv{stage}_1", filters)
        trunk += _conv_block(f"conv{stage}_2", filters)
        if stage < 4:
            trunk.append(LayerSpec("pool", f"pool{stage}"))
    head = [
        LayerSpec("upsample", "up", {"factor": 8}),
        LayerSpec("conv", "score", {"filters": 1, "k": 1, "padding": "same"}),
        LayerSpec("sigmoid", "score_sigmoid"),
    ]
    return make_model("fcn", (1, input_size, input_size), trunk, {"mask": head}, dtype)


def build_classifier(input_h: int = 200, input_w: int = 300, dtype=np.float32) -> ModelGraph:
    """Five-class grading network on fixed-aspect joint crops.

    Four conv stages (32/64/96/96 filters) each followed by pooling,
    dropout 0.2 before the flatten, one 256-unit dense layer with dropout
    0.5, and a 5-way softmax. The last two conv layers and the dense
    layer carry the L2 penalty.
    """
    if input_h < 16 or input_w < 16:
        raise ArgumentError(f"classifier input must be at least 16x16, got {input_h}x{input_w}")
    trunk: list[LayerSpec] = []
    for i, (filters, l2) in enumerate([(32, False), (64, False), (96, True), (96, True)],
                                      start=1):
        trunk += _conv_block(f"conv{i}", filters, l2)
        trunk.append(LayerSpec("pool", f"pool{i}"))
    trunk.append(LayerSpec("dropout", "drop4", {"p": 0.2}))
    trunk.append(LayerSpec("flatten", "flatten"))
    trunk.append(LayerSpec("dense", "fc5", {"units": 256, "l2": True}))
    trunk.append(LayerSpec("relu", "fc5_relu"))
    trunk.append(LayerSpec("dropout", "drop5", {"p": 0.5}))
    head = [LayerSpec("dense", "out", {"units": 5}), LayerSpec("softmax", "out_softmax")]
    return make_model("classifier", (1, input_h, input_w), trunk, {"probs": head}, dtype)


def build_joint_net(input_h: int = 200, input_w: int = 300, dtype=np.float32) -> ModelGraph:
    """Grading network with shared trunk and two heads.

    Five conv layers (32/64/64/96/96), each pooled, then a 768-unit dense
    layer with dropout 0.5. One head emits 5-way class probabilities, the
    other a single continuous grade (clipped to [0, 4] at prediction
    time, outside the graph). L2 applies to the last two conv layers and
    the dense layer.
    """
    if input_h < 32 or input_w < 32:
        raise ArgumentError(f"joint net input must be at least 32x32, got {input_h}x{input_w}")
    trunk: list[LayerSpec] = []
    for name, filters, l2 in [("conv1", 32, False), ("conv2_1", 64, False),
                              ("conv2_2", 64, False), ("conv3_1", 96, True),
                              ("conv3_2", 96, True)]:
        trunk += _conv_block(name, filters, l2)
        trunk.append(LayerSpec("pool", f"pool_{name}"))
    trunk.append(LayerSpec("flatten", "flatten"))
    trunk.append(LayerSpec("dense", "fc5", {"units": 768, "l2": True}))
    trunk.append(LayerSpec("relu", "fc5_relu"))
    trunk.append(LayerSpec("dropout", "drop5", {"p": 0.5}))
    heads = {
        "probs": [LayerSpec("dense", "out_cls", {"units": 5}),
                  LayerSpec("softmax", "out_softmax")],
        "grade": [LayerSpec("dense", "out_reg", {"units": 1})],
    }
    return make_model("joint", (1, input_h, input_w), trunk, heads, dtype)
