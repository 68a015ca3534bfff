"""
Teacher architectures and the layer-indexed model graph.

Layer indices follow the convention of the published architecture tables:
pooling and activation rows carry the index of the conv/FC layer they follow,
so the Digit teacher has N=4 indexed layers.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from com.mhire.app.config.errors import InputError, TensorError
from com.mhire.app.services.autodiff.autodiff import (
    DTYPE,
    Tensor,
    conv2d,
    fully_connected,
    glorot_uniform,
    maxpool2d,
    mul,
    parameter_leaves,
    relu,
    softmax,
)
from com.mhire.app.services.model_zoo.model_zoo_schema import PARAMETRIC_KINDS, LayerKind, LayerSpec

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

EVAL_BATCH = 256


def weight_name(index: int) -> str:
    return f"{index}.weight"


def bias_name(index: int) -> str:
    return f"{index}.bias"


@dataclass
class ForwardResult:
    output: Tensor
    taps: Dict[int, Tensor]
    parameters: Dict[str, Tensor]


def forward(
    layers: Sequence[LayerSpec],
    params: Dict[str, Union[np.ndarray, Tensor]],
    x: Tensor,
    upto: Optional[int] = None,
    taps: Iterable[int] = (),
    include_softmax: bool = False,
    unit_masks: Optional[Dict[int, np.ndarray]] = None,
) -> Tuple[Tensor, Dict[int, Tensor]]:
    """
    Run an ordered layer list on `x`. Returns the last activation and the
    outputs captured at the requested layer indices (post-activation, after
    any pooling that shares the index).
    """
    taps = set(taps)
    unit_masks = unit_masks or {}
    captured: Dict[int, Tensor] = {}
    h = x
    for pos, spec in enumerate(layers):
        if upto is not None and spec.index > upto:
            break
        if spec.kind == LayerKind.CONV2D:
            h = conv2d(h, _leaf(params[weight_name(spec.index)]), _leaf(params[bias_name(spec.index)]),
                       stride=spec.stride, padding=spec.padding)
            if spec.index in unit_masks:
                h = mul(h, Tensor(unit_masks[spec.index][None, :, None, None]))
        elif spec.kind == LayerKind.FULLY_CONNECTED:
            h = fully_connected(h, _leaf(params[weight_name(spec.index)]), _leaf(params[bias_name(spec.index)]))
            if spec.index in unit_masks:
                h = mul(h, Tensor(unit_masks[spec.index][None, :]))
        elif spec.kind == LayerKind.RELU:
            h = relu(h)
        elif spec.kind == LayerKind.MAXPOOL2D:
            h = maxpool2d(h, size=spec.kernel_size, stride=spec.stride)
        elif spec.kind == LayerKind.SOFTMAX:
            if include_softmax:
                h = Tensor(softmax(h.data))
        else:
            raise TensorError("unknown-layer-kind", f"layer {spec.index} has kind {spec.kind!r}")
        last_of_index = pos + 1 == len(layers) or layers[pos + 1].index != spec.index
        if last_of_index and spec.index in taps:
            captured[spec.index] = h
    return h, captured


def _leaf(value: Union[np.ndarray, Tensor]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass(frozen=True)
class HeadSnapshot:
    """Copy of a classification layer, kept so a head swap can be undone byte for byte."""

    spec: LayerSpec
    weight: np.ndarray
    bias: np.ndarray
    mask: Optional[np.ndarray] = None


class ModelGraph:
    def __init__(
        self,
        name: str,
        input_shape: Sequence[int],
        layers: List[LayerSpec],
        params: Dict[str, np.ndarray],
        unit_masks: Optional[Dict[int, np.ndarray]] = None,
        metadata: Optional[Dict[str, Union[str, int, float]]] = None,
    ):
        self.name = name
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers = list(layers)
        self.params = dict(params)
        self.unit_masks = dict(unit_masks or {})
        self.metadata = dict(metadata or {})

    @property
    def N(self) -> int:
        return max(spec.index for spec in self.layers)

    @property
    def class_count(self) -> int:
        return self.head_spec().out_features

    def head_spec(self) -> LayerSpec:
        parametric = [s for s in self.layers if s.kind in PARAMETRIC_KINDS]
        if not parametric or parametric[-1].kind != LayerKind.FULLY_CONNECTED or parametric[-1].index != self.N:
            raise InputError("model-has-no-fc-head", f"model {self.name} does not end in a fully-connected layer")
        return parametric[-1]

    def layer_indices(self) -> List[int]:
        return sorted({spec.index for spec in self.layers})

    def parameter_names(self, index: Optional[int] = None) -> List[str]:
        return [
            name for spec in self.layers if spec.kind in PARAMETRIC_KINDS and (index is None or spec.index == index)
            for name in (weight_name(spec.index), bias_name(spec.index))
        ]

    def is_frozen(self, index: int) -> bool:
        return any(spec.frozen for spec in self.layers if spec.index == index)

    def frozen_parameter_names(self) -> List[str]:
        return [n for i in self.layer_indices() if self.is_frozen(i) for n in self.parameter_names(i)]

    def trainable_parameter_names(self) -> List[str]:
        frozen = set(self.frozen_parameter_names())
        return [n for n in self.parameter_names() if n not in frozen]

    def check_input(self, x: np.ndarray) -> None:
        if x.ndim != len(self.input_shape) + 1 or tuple(x.shape[1:]) != self.input_shape:
            raise TensorError("shape-mismatch", f"input {x.shape} does not match model input {self.input_shape}")

    def forward_pass(
        self,
        x: Union[np.ndarray, Tensor],
        upto: Optional[int] = None,
        taps: Iterable[int] = (),
        include_softmax: bool = False,
        requires_grad: bool = False,
    ) -> ForwardResult:
        """Graph-building forward. With `requires_grad` the non-frozen weights become gradient leaves."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        self.check_input(x.data)
        if upto is not None and not 1 <= upto <= self.N:
            raise InputError("index-out-of-range", f"layer {upto} outside 1..{self.N}")
        trainable = self.trainable_parameter_names() if requires_grad else ()
        leaves = parameter_leaves(self.params, trainable)
        output, captured = forward(
            self.layers, leaves, x, upto=upto, taps=taps, include_softmax=include_softmax, unit_masks=self.unit_masks
        )
        return ForwardResult(output=output, taps=captured, parameters=leaves)

    def _batched(self, x: np.ndarray, upto: Optional[int], include_softmax: bool) -> np.ndarray:
        self.check_input(x)
        outputs = [
            self.forward_pass(x[start:start + EVAL_BATCH], upto=upto, include_softmax=include_softmax).output.data
            for start in range(0, x.shape[0], EVAL_BATCH)
        ]
        return np.concatenate(outputs, axis=0)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Class probabilities for a batch."""
        return self._batched(x, upto=None, include_softmax=True)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self._batched(x, upto=None, include_softmax=False)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x).argmax(axis=1)

    def feature_at(self, k: int, x: np.ndarray) -> np.ndarray:
        """F^k(x): output of indexed layer k; k=N gives the probability vector."""
        if not 1 <= k <= self.N:
            raise InputError("index-out-of-range", f"layer {k} outside 1..{self.N}")
        return self._batched(x, upto=k, include_softmax=True)

    def with_params(self, params: Dict[str, np.ndarray]) -> "ModelGraph":
        merged = dict(self.params)
        merged.update(params)
        for index, mask in self.unit_masks.items():
            merged.update(_apply_unit_mask(self.layers, index, merged, mask))
        return ModelGraph(self.name, self.input_shape, self.layers, merged, self.unit_masks, self.metadata)

    def with_frozen(self, frozen_count: int) -> "ModelGraph":
        layers = [spec.model_copy(update={"frozen": spec.index <= frozen_count}) for spec in self.layers]
        return ModelGraph(self.name, self.input_shape, layers, self.params, self.unit_masks, self.metadata)

    def clone(self) -> "ModelGraph":
        return ModelGraph(
            self.name,
            self.input_shape,
            [spec.model_copy() for spec in self.layers],
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.unit_masks.items()},
            dict(self.metadata),
        )


def layer_bytes(model: ModelGraph, index: int) -> bytes:
    """Raw bytes of every weight owned by indexed layer `index`."""
    chunks = [np.ascontiguousarray(model.params[n], dtype="<f8").tobytes() for n in model.parameter_names(index)]
    if index in model.unit_masks:
        chunks.append(np.ascontiguousarray(model.unit_masks[index], dtype="<f8").tobytes())
    return b"".join(chunks)


def _apply_unit_mask(layers, index: int, params: Dict[str, np.ndarray], mask: np.ndarray) -> Dict[str, np.ndarray]:
    """Zero the weights feeding masked units so pruned units stay exactly zero."""
    spec = next(s for s in layers if s.index == index and s.kind in PARAMETRIC_KINDS)
    weight, bias = params[weight_name(index)], params[bias_name(index)]
    if spec.kind == LayerKind.CONV2D:
        weight = weight * mask[:, None, None, None]
    else:
        weight = weight * mask[None, :]
    return {weight_name(index): weight, bias_name(index): bias * mask}


def infer_parameter_shapes(layers: Sequence[LayerSpec], input_shape: Sequence[int]) -> Dict[str, Tuple[int, ...]]:
    """Derive every weight shape from the layer specs and the input shape."""
    shape = tuple(input_shape)
    shapes: Dict[str, Tuple[int, ...]] = {}
    for spec in layers:
        if spec.kind == LayerKind.CONV2D:
            c, h, w = shape
            k = spec.kernel_size
            shapes[weight_name(spec.index)] = (spec.out_features, c, k, k)
            shapes[bias_name(spec.index)] = (spec.out_features,)
            shape = (
                spec.out_features,
                (h + 2 * spec.padding - k) // spec.stride + 1,
                (w + 2 * spec.padding - k) // spec.stride + 1,
            )
        elif spec.kind == LayerKind.MAXPOOL2D:
            c, h, w = shape
            k = spec.kernel_size
            shape = (c, (h - k) // spec.stride + 1, (w - k) // spec.stride + 1)
        elif spec.kind == LayerKind.FULLY_CONNECTED:
            fan_in = int(np.prod(shape))
            shapes[weight_name(spec.index)] = (fan_in, spec.out_features)
            shapes[bias_name(spec.index)] = (spec.out_features,)
            shape = (spec.out_features,)
        if any(d < 1 for d in shape):
            raise TensorError("shape-mismatch", f"layer {spec.index} ({spec.kind.value}) collapses input to {shape}")
    return shapes


def init_layer(spec: LayerSpec, shapes: Dict[str, Tuple[int, ...]], rng: np.random.Generator) -> Dict[str, np.ndarray]:
    w_shape = shapes[weight_name(spec.index)]
    if spec.kind == LayerKind.CONV2D:
        receptive = w_shape[2] * w_shape[3]
        fan_in, fan_out = w_shape[1] * receptive, w_shape[0] * receptive
    else:
        fan_in, fan_out = w_shape
    return {
        weight_name(spec.index): glorot_uniform(w_shape, fan_in, fan_out, rng),
        bias_name(spec.index): np.zeros(shapes[bias_name(spec.index)], dtype=DTYPE),
    }


def build_model(name: str, input_shape: Sequence[int], layers: List[LayerSpec], seed: int = 0) -> ModelGraph:
    rng = np.random.default_rng(seed)
    shapes = infer_parameter_shapes(layers, input_shape)
    params: Dict[str, np.ndarray] = {}
    for spec in layers:
        if spec.kind in PARAMETRIC_KINDS:
            params.update(init_layer(spec, shapes, rng))
    return ModelGraph(name, input_shape, layers, params)


def _conv_block(index: int, channels: int, kernel: int, padding: int = 0, pool: bool = True) -> List[LayerSpec]:
    block = [
        LayerSpec(index=index, kind=LayerKind.CONV2D, out_features=channels, kernel_size=kernel, padding=padding),
        LayerSpec(index=index, kind=LayerKind.RELU),
    ]
    if pool:
        block.append(LayerSpec(index=index, kind=LayerKind.MAXPOOL2D, kernel_size=2, stride=2))
    return block


def _fc(index: int, units: int, output: bool = False) -> List[LayerSpec]:
    tail = LayerKind.SOFTMAX if output else LayerKind.RELU
    return [
        LayerSpec(index=index, kind=LayerKind.FULLY_CONNECTED, out_features=units),
        LayerSpec(index=index, kind=tail),
    ]


def build_digit_teacher(classes: int = 5, seed: int = 0) -> ModelGraph:
    """2 conv + 2 FC for 28x28 grayscale digits; N=4."""
    layers = _conv_block(1, 16, 5) + _conv_block(2, 32, 5) + _fc(3, 512) + _fc(4, classes, output=True)
    return build_model("digit-teacher", (1, 28, 28), layers, seed=seed)


def build_medium_teacher(input_shape: Sequence[int] = (3, 32, 32), classes: int = 43, seed: int = 0) -> ModelGraph:
    """6 conv + 2 FC, same-padded 3x3 convs with pooling after convs 2, 4 and 6; N=8."""
    layers: List[LayerSpec] = []
    for index, channels in zip(range(1, 7), (32, 32, 64, 64, 128, 128)):
        layers += _conv_block(index, channels, 3, padding=1, pool=index % 2 == 0)
    layers += _fc(7, 512) + _fc(8, classes, output=True)
    return build_model("medium-teacher", input_shape, layers, seed=seed)


def build_toy_teacher(input_shape: Sequence[int], classes: int, hidden: int = 32, channels: int = 8,
                      seed: int = 0) -> ModelGraph:
    """conv+pool, optional FC hidden layer, FC output. Small enough for unit tests."""
    layers = _conv_block(1, channels, 3)
    if hidden:
        layers += _fc(2, hidden) + _fc(3, classes, output=True)
    else:
        layers += _fc(2, classes, output=True)
    return build_model("toy-teacher", input_shape, layers, seed=seed)


def snapshot_head(model: ModelGraph) -> HeadSnapshot:
    spec = model.head_spec()
    mask = model.unit_masks.get(spec.index)
    return HeadSnapshot(
        spec=spec.model_copy(),
        weight=model.params[weight_name(spec.index)].copy(),
        bias=model.params[bias_name(spec.index)].copy(),
        mask=None if mask is None else mask.copy(),
    )


def _swap_head(model: ModelGraph, spec: LayerSpec, weight: np.ndarray, bias: np.ndarray,
               mask: Optional[np.ndarray]) -> ModelGraph:
    layers = [spec if (s.index == spec.index and s.kind == LayerKind.FULLY_CONNECTED) else s for s in model.layers]
    params = dict(model.params)
    params[weight_name(spec.index)] = weight
    params[bias_name(spec.index)] = bias
    masks = {k: v for k, v in model.unit_masks.items() if k != spec.index}
    if mask is not None:
        masks[spec.index] = mask
    return ModelGraph(model.name, model.input_shape, layers, params, masks, model.metadata)


def replace_classification_layer(model: ModelGraph, new_class_count: int, seed: int = 0) -> ModelGraph:
    """Swap the final FC layer for a freshly initialized one of `new_class_count` outputs."""
    if new_class_count < 1:
        raise InputError("invalid-class-count", f"class count must be positive, got {new_class_count}")
    head = model.head_spec()
    new_spec = head.model_copy(update={"out_features": new_class_count})
    fan_in = model.params[weight_name(head.index)].shape[0]
    shapes = {weight_name(head.index): (fan_in, new_class_count), bias_name(head.index): (new_class_count,)}
    fresh = init_layer(new_spec, shapes, np.random.default_rng(seed))
    logger.info(f"Replacing head of {model.name}: {head.out_features} -> {new_class_count} classes")
    return _swap_head(model, new_spec, fresh[weight_name(head.index)], fresh[bias_name(head.index)], None)


def restore_head(model: ModelGraph, snapshot: HeadSnapshot) -> ModelGraph:
    head = model.head_spec()
    fan_in = model.params[weight_name(head.index)].shape[0]
    if snapshot.spec.index != head.index or snapshot.weight.shape[0] != fan_in:
        raise InputError(
            "snapshot-shape-mismatch",
            f"snapshot head {snapshot.spec.index}:{snapshot.weight.shape} does not fit layer {head.index} "
            f"with {fan_in} inputs",
        )
    return _swap_head(
        model,
        snapshot.spec.model_copy(),
        snapshot.weight.copy(),
        snapshot.bias.copy(),
        None if snapshot.mask is None else snapshot.mask.copy(),
    )
