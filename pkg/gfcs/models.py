from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import (
    TYPE_CHECKING,
    Any,
    Callable,
    Dict,
    List,
    Optional,
    Protocol,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
import numpy.typing as npt
from scipy.special import log_softmax, softmax

from .errors import FormatError, InvalidInputError, TrainingError
from .layers import (
    Affine,
    AvgPool2d,
    Conv2d,
    Flatten,
    Layer,
    LayerSpec,
    ReLU,
    build_layers,
    empty_layer,
    get_subclasses,
    parse_architecture,
)
from .numerics import (
    FloatArray,
    RandomStream,
    as_vector,
    bilinear_resize,
    bilinear_resize_adjoint,
)
from .serialization import PathLike, read_container, write_container

if TYPE_CHECKING:
    from .data import LabeledDataset

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"GFCSMODL"
MODEL_FORMAT_VERSION = 1

Gradients = Dict[str, FloatArray]


class Classifier(Protocol):
    input_shape: Tuple[int, ...]
    num_classes: int

    @property
    def input_size(self) -> int:
        ...

    def forward_batch(self, inputs: npt.ArrayLike) -> FloatArray:
        ...

    def forward_scores(self, x: npt.ArrayLike) -> FloatArray:
        ...

    def weighted_input_gradient(self, x: npt.ArrayLike, w: npt.ArrayLike) -> FloatArray:
        ...


class LayerEvaluator:
    """Forward and reverse-mode passes over batched layer inputs.

    Spatial activations are ``(N, H, W, C)``; flat ones are ``(N, F)``.
    Handlers are looked up by layer class name, ``_forward_<Name>`` and
    ``_backward_<Name>``.
    """

    def __init__(self) -> None:
        self._forward_table: Dict[type, Callable[..., Tuple[FloatArray, Any]]] = {
            layer_class: getattr(self, f"_forward_{layer_class.__name__}")
            for layer_class in get_subclasses(Layer)
            if hasattr(self, f"_forward_{layer_class.__name__}")
        }
        self._backward_table: Dict[
            type, Callable[..., Tuple[FloatArray, Gradients]]
        ] = {
            layer_class: getattr(self, f"_backward_{layer_class.__name__}")
            for layer_class in get_subclasses(Layer)
            if hasattr(self, f"_backward_{layer_class.__name__}")
        }

    def forward(self, layer: Layer, x: FloatArray) -> Tuple[FloatArray, Any]:
        return self._forward_table[layer.__class__](layer, x)

    def backward(
        self, layer: Layer, cache: Any, grad: FloatArray
    ) -> Tuple[FloatArray, Gradients]:
        return self._backward_table[layer.__class__](layer, cache, grad)

    def _forward_Affine(self, layer: Affine, x: FloatArray):
        return x @ layer.weight.T + layer.bias, x

    def _backward_Affine(self, layer: Affine, x: FloatArray, grad: FloatArray):
        return grad @ layer.weight, {
            "weight": grad.T @ x,
            "bias": grad.sum(axis=0),
        }

    @staticmethod
    def _windows(layer: Conv2d, x: FloatArray):
        kernel = layer.weight.shape[0]
        stride = layer.stride
        out_height = (x.shape[1] - kernel) // stride + 1
        out_width = (x.shape[2] - kernel) // stride + 1
        for i in range(kernel):
            for j in range(kernel):
                rows = slice(i, i + stride * (out_height - 1) + 1, stride)
                cols = slice(j, j + stride * (out_width - 1) + 1, stride)
                yield i, j, rows, cols

    def _forward_Conv2d(self, layer: Conv2d, x: FloatArray):
        out = None
        for i, j, rows, cols in self._windows(layer, x):
            term = x[:, rows, cols, :] @ layer.weight[i, j]
            out = term if out is None else out + term
        return out + layer.bias, x

    def _backward_Conv2d(self, layer: Conv2d, x: FloatArray, grad: FloatArray):
        dx = np.zeros_like(x)
        dweight = np.zeros_like(layer.weight)
        for i, j, rows, cols in self._windows(layer, x):
            dx[:, rows, cols, :] += grad @ layer.weight[i, j].T
            dweight[i, j] = np.tensordot(
                x[:, rows, cols, :], grad, axes=([0, 1, 2], [0, 1, 2])
            )
        return dx, {"weight": dweight, "bias": grad.sum(axis=(0, 1, 2))}

    def _forward_ReLU(self, layer: ReLU, x: FloatArray):
        return np.maximum(x, 0.0), x

    def _backward_ReLU(self, layer: ReLU, x: FloatArray, grad: FloatArray):
        # subgradient 0 at the kink
        return grad * (x > 0), {}

    def _forward_AvgPool2d(self, layer: AvgPool2d, x: FloatArray):
        n, height, width, channels = x.shape
        size = layer.size
        out_height, out_width = height // size, width // size
        cropped = x[:, : out_height * size, : out_width * size, :]
        pooled = cropped.reshape(n, out_height, size, out_width, size, channels).mean(
            axis=(2, 4)
        )
        return pooled, x.shape

    def _backward_AvgPool2d(self, layer: AvgPool2d, shape, grad: FloatArray):
        size = layer.size
        dx = np.zeros(shape)
        spread = np.repeat(np.repeat(grad, size, axis=1), size, axis=2) / (size * size)
        dx[:, : spread.shape[1], : spread.shape[2], :] = spread
        return dx, {}

    def _forward_Flatten(self, layer: Flatten, x: FloatArray):
        return x.reshape(x.shape[0], -1), x.shape

    def _backward_Flatten(self, layer: Flatten, shape, grad: FloatArray):
        return grad.reshape(shape), {}


_EVALUATOR = LayerEvaluator()


class ScoreModel:
    """A feed-forward classifier mapping inputs of ``input_shape`` to logits."""

    def __init__(
        self,
        layers: Sequence[Layer],
        input_shape: Sequence[int],
        num_classes: int,
        seed: int = 0,
        metadata: Optional[Dict[str, Any]] = None,
    ):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.num_classes = int(num_classes)
        self.seed = int(seed)
        self.metadata: Dict[str, Any] = dict(metadata or {})

    @classmethod
    def build(
        cls,
        architecture: List[LayerSpec],
        input_shape: Sequence[int],
        num_classes: int,
        seed: int,
    ) -> ScoreModel:
        layers = build_layers(
            architecture, tuple(input_shape), num_classes, RandomStream(seed)
        )
        return cls(layers, input_shape, num_classes, seed=seed)

    @property
    def architecture(self) -> List[LayerSpec]:
        return [layer.spec() for layer in self.layers]

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    def _as_batch(self, inputs: npt.ArrayLike) -> FloatArray:
        batch = np.asarray(inputs, dtype=np.float64)
        if batch.size == 0 or batch.size % self.input_size:
            raise InvalidInputError(
                f"input of shape {np.shape(inputs)} does not match {self.input_shape}"
            )
        return batch.reshape(-1, *self.input_shape)

    def _forward(self, batch: FloatArray) -> Tuple[FloatArray, List[Any]]:
        caches = []
        for layer in self.layers:
            batch, cache = _EVALUATOR.forward(layer, batch)
            caches.append(cache)
        return batch, caches

    def _backward(
        self, caches: List[Any], grad: FloatArray
    ) -> Tuple[FloatArray, List[Gradients]]:
        parameter_grads: List[Gradients] = []
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            grad, layer_grads = _EVALUATOR.backward(layer, cache, grad)
            parameter_grads.append(layer_grads)
        return grad, parameter_grads[::-1]

    def forward_batch(self, inputs: npt.ArrayLike) -> FloatArray:
        """Logits for a batch of flattened (or already shaped) inputs."""
        scores, _ = self._forward(self._as_batch(inputs))
        return scores

    def forward_scores(self, x: npt.ArrayLike) -> FloatArray:
        x = as_vector(x, "input")
        if x.size != self.input_size:
            raise InvalidInputError(
                f"input has {x.size} entries, model expects {self.input_size}"
            )
        return self.forward_batch(x)[0]

    def weighted_input_gradient(self, x: npt.ArrayLike, w: npt.ArrayLike) -> FloatArray:
        """Gradient of ``w @ f(x)`` with respect to ``x``, flattened."""
        x = as_vector(x, "input")
        w = as_vector(w, "weights")
        if x.size != self.input_size:
            raise InvalidInputError(
                f"input has {x.size} entries, model expects {self.input_size}"
            )
        if w.size != self.num_classes:
            raise InvalidInputError(
                f"weights have {w.size} entries, model has {self.num_classes} classes"
            )
        _, caches = self._forward(self._as_batch(x))
        grad, _ = self._backward(caches, w.reshape(1, -1))
        return grad.reshape(-1)

    def parameter_blocks(self) -> List[Tuple[int, str, FloatArray]]:
        return [
            (index, name, getattr(layer, name))
            for index, layer in enumerate(self.layers)
            for name in layer.parameters
        ]


class ResizedModel:
    """A classifier composed with a bilinear resize from another input resolution.

    The forward pass resizes ``(H, W, C)`` inputs to the wrapped model's grid;
    gradients are mapped back with the exact adjoint of that resize.
    """

    def __init__(self, model: Classifier, input_shape: Sequence[int]):
        self.model = model
        self.input_shape = tuple(int(d) for d in input_shape)
        self.num_classes = model.num_classes

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    def _resize(self, inputs: npt.ArrayLike) -> FloatArray:
        batch = np.asarray(inputs, dtype=np.float64).reshape(-1, *self.input_shape)
        height, width, _ = self.model.input_shape
        return bilinear_resize(batch, height, width)

    def forward_batch(self, inputs: npt.ArrayLike) -> FloatArray:
        return self.model.forward_batch(self._resize(inputs))

    def forward_scores(self, x: npt.ArrayLike) -> FloatArray:
        x = as_vector(x, "input")
        if x.size != self.input_size:
            raise InvalidInputError(
                f"input has {x.size} entries, model expects {self.input_size}"
            )
        return self.forward_batch(x)[0]

    def weighted_input_gradient(self, x: npt.ArrayLike, w: npt.ArrayLike) -> FloatArray:
        x = as_vector(x, "input")
        if x.size != self.input_size:
            raise InvalidInputError(
                f"input has {x.size} entries, model expects {self.input_size}"
            )
        resized = self._resize(x)[0]
        grad = self.model.weighted_input_gradient(resized, w)
        height, width, _ = self.input_shape
        grad = bilinear_resize_adjoint(
            grad.reshape(self.model.input_shape), height, width
        )
        return grad.reshape(-1)


def adapt_domain(surrogate: Classifier, victim_shape: Sequence[int]) -> Classifier:
    victim_shape = tuple(int(d) for d in victim_shape)
    if surrogate.input_shape == victim_shape:
        return surrogate
    if len(surrogate.input_shape) != 3 or len(victim_shape) != 3:
        raise InvalidInputError(
            f"cannot resize between shapes {surrogate.input_shape} and {victim_shape}"
        )
    if surrogate.input_shape[2] != victim_shape[2]:
        raise InvalidInputError(
            f"channel mismatch: surrogate has {surrogate.input_shape[2]} channels,"
            f" victim has {victim_shape[2]}"
        )
    return ResizedModel(surrogate, victim_shape)


def jacobian(model: Classifier, x: npt.ArrayLike) -> FloatArray:
    """Input Jacobian of ``model`` at ``x`` as a ``C x D`` matrix."""
    eye = np.eye(model.num_classes)
    return np.stack([model.weighted_input_gradient(x, row) for row in eye])


def predict(model: Classifier, inputs: npt.ArrayLike, batch_size: int = 256) -> FloatArray:
    inputs = np.asarray(inputs, dtype=np.float64).reshape(-1, model.input_size)
    if inputs.shape[0] == 0:
        return np.zeros((0, model.num_classes))
    return np.concatenate(
        [
            model.forward_batch(inputs[start : start + batch_size])
            for start in range(0, inputs.shape[0], batch_size)
        ]
    )


def accuracy(model: Classifier, data: LabeledDataset) -> float:
    if len(data) == 0:
        return 0.0
    predictions = np.argmax(predict(model, data.inputs), axis=1)
    return float(np.mean(predictions == data.labels))


@dataclass(frozen=True)
class TrainSpec:
    learning_rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise InvalidInputError(f"learning rate must be positive: {self.learning_rate!r}")
        if not 0 <= self.momentum < 1:
            raise InvalidInputError(f"momentum must be in [0, 1): {self.momentum!r}")
        if self.epochs < 0:
            raise InvalidInputError(f"epochs must be nonnegative: {self.epochs!r}")
        if self.batch_size < 1:
            raise InvalidInputError(f"batch size must be positive: {self.batch_size!r}")


def train_classifier(
    data: LabeledDataset,
    architecture: Union[str, List[LayerSpec]],
    spec: TrainSpec,
    test_data: Optional[LabeledDataset] = None,
) -> ScoreModel:
    """Fit a classifier with minibatch SGD with momentum on softmax cross-entropy.

    All randomness (initialization and shuffling) derives from ``spec.seed``.
    Final train and test accuracies are logged and kept in ``model.metadata``.
    """
    if len(data) == 0:
        raise InvalidInputError("cannot train on an empty dataset")
    if np.any(data.labels < 0) or np.any(data.labels >= data.num_classes):
        raise InvalidInputError(f"labels must be in [0, {data.num_classes})")
    if isinstance(architecture, str):
        architecture = parse_architecture(architecture)
    stream = RandomStream(spec.seed)
    model = ScoreModel(
        build_layers(architecture, data.shape, data.num_classes, stream.child(0)),
        data.shape,
        data.num_classes,
        seed=spec.seed,
    )
    shuffle_stream = stream.child(1)
    inputs = data.inputs.reshape(-1, *data.shape)
    targets = np.eye(data.num_classes)[data.labels]
    velocity = [
        np.zeros_like(block) for _, _, block in model.parameter_blocks()
    ]

    for epoch in range(spec.epochs):
        order = shuffle_stream.permutation(len(data))
        total_loss = 0.0
        for start in range(0, len(order), spec.batch_size):
            batch = order[start : start + spec.batch_size]
            scores, caches = model._forward(inputs[batch])
            loss = -np.sum(targets[batch] * log_softmax(scores, axis=1)) / len(batch)
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged in epoch {epoch}: {loss!r}", epoch)
            total_loss += loss * len(batch)
            grad = (softmax(scores, axis=1) - targets[batch]) / len(batch)
            _, parameter_grads = model._backward(caches, grad)
            flat_grads = [
                grads[name]
                for layer, grads in zip(model.layers, parameter_grads)
                for name in layer.parameters
            ]
            for (index, name, block), step, g in zip(
                model.parameter_blocks(), velocity, flat_grads
            ):
                step *= spec.momentum
                step -= spec.learning_rate * g
                setattr(model.layers[index], name, block + step)
        logger.debug("epoch %d: mean loss %.6f", epoch, total_loss / len(data))

    model.metadata["train_accuracy"] = accuracy(model, data)
    logger.info("train accuracy: %.4f", model.metadata["train_accuracy"])
    if test_data is not None:
        model.metadata["test_accuracy"] = accuracy(model, test_data)
        logger.info("test accuracy: %.4f", model.metadata["test_accuracy"])
    return model


def save_model(model: ScoreModel, filename: PathLike) -> None:
    blocks = model.parameter_blocks()
    header = {
        "version": MODEL_FORMAT_VERSION,
        "kind": "score-model",
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "seed": model.seed,
        "layers": model.architecture,
        "blocks": [
            {"layer": index, "name": name, "shape": list(block.shape)}
            for index, name, block in blocks
        ],
        "metadata": model.metadata,
    }
    write_container(
        filename,
        MODEL_MAGIC,
        header,
        [block.astype("<f8") for _, _, block in blocks],
    )


def load_model(filename: PathLike) -> ScoreModel:
    reader = read_container(filename, MODEL_MAGIC)
    header_offset = reader.offset
    header = reader.read_header(MODEL_FORMAT_VERSION)
    try:
        layers = [empty_layer(spec) for spec in header["layers"]]
        block_specs = header["blocks"]
        input_shape = tuple(header["input_shape"])
        num_classes = int(header["num_classes"])
        seed = int(header["seed"])
    except (KeyError, TypeError, ValueError, InvalidInputError) as e:
        raise FormatError(f"Malformed model header: {e}", header_offset) from e
    for block in block_specs:
        try:
            layer = layers[block["layer"]]
            name = block["name"]
            shape = tuple(int(d) for d in block["shape"])
        except (KeyError, TypeError, ValueError, IndexError) as e:
            raise FormatError(f"Malformed block entry: {block!r}", header_offset) from e
        if name not in layer.parameters or any(d < 0 for d in shape):
            raise FormatError(
                f"Invalid parameter block {name!r} for layer {layer.kind!r}",
                header_offset,
            )
        values = reader.read_array("<f8", shape, f"layer {block['layer']} {name}")
        setattr(layer, name, values.astype(np.float64))
    reader.expect_end()
    model = ScoreModel(
        layers, input_shape, num_classes, seed=seed, metadata=header.get("metadata")
    )
    try:
        shape = model.input_shape
        for layer in model.layers:
            shape = layer.output_shape(shape)
    except (InvalidInputError, IndexError, ValueError) as e:
        raise FormatError(f"Inconsistent model: {e}", header_offset) from e
    if shape != (num_classes,):
        raise FormatError(
            f"Inconsistent model: outputs {shape}, expected ({num_classes},)",
            header_offset,
        )
    return model


__all__ = [
    "Classifier",
    "ResizedModel",
    "ScoreModel",
    "TrainSpec",
    "accuracy",
    "adapt_domain",
    "jacobian",
    "load_model",
    "predict",
    "save_model",
    "train_classifier",
]
