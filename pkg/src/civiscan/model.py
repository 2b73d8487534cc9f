"""Small convolutional classifier with exact backpropagation.

Layer set: Conv (cross-correlation, zero padding, optional relu), MaxPool,
Flatten, Dense (relu or linear), SoftmaxOutput. Training is plain mini-batch
gradient descent on mean categorical cross-entropy with He-style seeded
initialization, seeded shuffling, and online geometric augmentation. The
softmax stage always runs in float64 so probability vectors sum to 1 within
1e-9 regardless of the training dtype.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .corpus import DatasetManifest, IssueClass, load_image
from .imaging import UNIT, AugmentSpec, RasterImage, augment, gaussian_blur, normalize, resize_to_standard


class ModelError(ValueError):
    pass


class ShapeError(ModelError):
    pass


class InvalidLabelError(ModelError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch, batch):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class NoViableConfigError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


# --- network description -------------------------------------------------------


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int
    stride: int = 1
    zero_padding: int = 0
    activation: str = "relu"


@dataclass(frozen=True)
class MaxPool:
    window: int
    stride: int


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    units: int
    activation: str = "relu"


@dataclass(frozen=True)
class SoftmaxOutput:
    pass


@dataclass
class NetworkSpec:
    input_shape: tuple  # (height, width, channels)
    layers: list

    def propagate_shapes(self):
        """Static shape propagation; raises ShapeError naming the bad layer."""
        shapes = [tuple(self.input_shape)]
        shape = tuple(self.input_shape)
        for idx, layer in enumerate(self.layers):
            name = f"layer {idx} ({type(layer).__name__})"
            if isinstance(layer, Conv):
                if len(shape) != 3:
                    raise ShapeError(f"{name}: expected HWC input, got {shape}")
                if layer.kernel % 2 != 1:
                    raise ShapeError(f"{name}: kernel must be odd, got {layer.kernel}")
                if layer.stride < 1 or layer.zero_padding < 0 or layer.out_channels < 1:
                    raise ShapeError(f"{name}: bad conv geometry")
                h = (shape[0] + 2 * layer.zero_padding - layer.kernel) // layer.stride + 1
                w = (shape[1] + 2 * layer.zero_padding - layer.kernel) // layer.stride + 1
                if h < 1 or w < 1:
                    raise ShapeError(f"{name}: output would be empty from input {shape}")
                shape = (h, w, layer.out_channels)
            elif isinstance(layer, MaxPool):
                if len(shape) != 3:
                    raise ShapeError(f"{name}: expected HWC input, got {shape}")
                if layer.window < 1 or layer.stride < 1:
                    raise ShapeError(f"{name}: bad pool geometry")
                h = (shape[0] - layer.window) // layer.stride + 1
                w = (shape[1] - layer.window) // layer.stride + 1
                if h < 1 or w < 1:
                    raise ShapeError(f"{name}: output would be empty from input {shape}")
                shape = (h, w, shape[2])
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, Dense):
                if len(shape) != 1:
                    raise ShapeError(f"{name}: Dense requires flattened input, got {shape}")
                if layer.units < 1:
                    raise ShapeError(f"{name}: units must be >= 1")
                shape = (layer.units,)
            elif isinstance(layer, SoftmaxOutput):
                if len(shape) != 1:
                    raise ShapeError(f"{name}: softmax requires flattened input, got {shape}")
            else:
                raise ShapeError(f"{name}: unknown layer kind")
            shapes.append(shape)
        return shapes

    def validate(self):
        if not self.layers or not isinstance(self.layers[-1], SoftmaxOutput):
            raise ShapeError("network must end in SoftmaxOutput")
        shapes = self.propagate_shapes()
        if shapes[-1] != (3,):
            raise ShapeError(f"final dimension must be 3 (one per issue class), got {shapes[-1]}")
        return self

    def num_classes(self):
        return 3


def reference_network(input_size: int = 64) -> NetworkSpec:
    """The default desk-scale classifier: two conv blocks then two dense layers."""
    return NetworkSpec(
        input_shape=(input_size, input_size, 3),
        layers=[
            Conv(8, 3, stride=1, zero_padding=1),
            MaxPool(2, 2),
            Conv(16, 3, stride=1, zero_padding=1),
            MaxPool(2, 2),
            Flatten(),
            Dense(32, activation="relu"),
            Dense(3, activation="none"),
            SoftmaxOutput(),
        ],
    ).validate()


class Parameters:
    """Weight/bias arrays for each parametric layer, keyed by layer index."""

    def __init__(self, arrays: dict):
        self.arrays = arrays  # {layer_idx: (w, b)}

    def copy(self):
        return Parameters({i: (w.copy(), b.copy()) for i, (w, b) in self.arrays.items()})

    def all_finite(self):
        return all(np.isfinite(w).all() and np.isfinite(b).all() for w, b in self.arrays.values())

    def astype(self, dtype):
        return Parameters({i: (w.astype(dtype), b.astype(dtype)) for i, (w, b) in self.arrays.items()})


def init_parameters(spec: NetworkSpec, seed: int, dtype=np.float32) -> Parameters:
    """He-style init: weights ~ N(0, sqrt(2/fan_in)), biases zero."""
    spec.validate()
    rng = np.random.default_rng(np.random.PCG64(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, 0x1111])))
    shapes = spec.propagate_shapes()
    arrays = {}
    for idx, layer in enumerate(spec.layers):
        in_shape = shapes[idx]
        if isinstance(layer, Conv):
            fan_in = layer.kernel * layer.kernel * in_shape[2]
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(layer.kernel, layer.kernel, in_shape[2], layer.out_channels))
            b = np.zeros(layer.out_channels)
        elif isinstance(layer, Dense):
            fan_in = in_shape[0]
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(in_shape[0], layer.units))
            b = np.zeros(layer.units)
        else:
            continue
        arrays[idx] = (w.astype(dtype), b.astype(dtype))
    return Parameters(arrays)


# --- forward / backward ----------------------------------------------------------


def _check_input(spec, x):
    if x.shape[-3:] != tuple(spec.input_shape):
        raise ShapeError(f"input shape {x.shape[-3:]} does not match network input {tuple(spec.input_shape)}")


def _forward_cached(spec: NetworkSpec, params: Parameters, x: np.ndarray):
    """Batched forward pass keeping per-layer caches for backprop."""
    _check_input(spec, x)
    caches = []
    out = x
    for idx, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            w, b = params.arrays[idx]
            if w.shape != (layer.kernel, layer.kernel, out.shape[3], layer.out_channels):
                raise ShapeError(f"layer {idx} (Conv): weight shape {w.shape} mismatches input {out.shape}")
            z = kernels.conv2d_forward(out, w, b, layer.stride, layer.zero_padding)
            if layer.activation == "relu":
                a = np.maximum(z, 0)
                caches.append(("conv_relu", out, z))
            else:
                a = z
                caches.append(("conv", out, None))
            out = a
        elif isinstance(layer, MaxPool):
            y, arg = kernels.maxpool_forward(out, layer.window, layer.stride)
            caches.append(("pool", out.shape, arg))
            out = y
        elif isinstance(layer, Flatten):
            caches.append(("flatten", out.shape, None))
            out = out.reshape(out.shape[0], -1)
        elif isinstance(layer, Dense):
            w, b = params.arrays[idx]
            if out.shape[1] != w.shape[0]:
                raise ShapeError(f"layer {idx} (Dense): input width {out.shape[1]} mismatches weights {w.shape}")
            z = out @ w + b
            if layer.activation == "relu":
                a = np.maximum(z, 0)
                caches.append(("dense_relu", out, z))
            else:
                a = z
                caches.append(("dense", out, None))
            out = a
        elif isinstance(layer, SoftmaxOutput):
            logits = out.astype(np.float64)
            logits -= logits.max(axis=1, keepdims=True)
            e = np.exp(logits)
            probs = e / e.sum(axis=1, keepdims=True)
            caches.append(("softmax", None, None))
            out = probs
    return out, caches


def forward_batch(spec: NetworkSpec, params: Parameters, x: np.ndarray) -> np.ndarray:
    """Class probabilities for a batch of (h, w, c) tensors; rows sum to 1."""
    probs, _ = _forward_cached(spec, params, x)
    return probs


def forward(spec: NetworkSpec, params: Parameters, image) -> np.ndarray:
    """Probabilities for one image (RasterImage or HWC array in unit domain)."""
    x = image.pixels if isinstance(image, RasterImage) else np.asarray(image)
    dtype = next(iter(params.arrays.values()))[0].dtype
    return forward_batch(spec, params, x[None].astype(dtype))[0]


def _loss_and_gradients_inner(spec, params, batch_x, batch_y):
    y = np.asarray(batch_y)
    if y.size == 0:
        raise InvalidLabelError("batch must be non-empty")
    k = spec.num_classes()
    if y.min() < 0 or y.max() >= k:
        raise InvalidLabelError(f"labels must lie in [0, {k}), got {sorted(set(int(v) for v in y))}")

    probs, caches = _forward_cached(spec, params, batch_x)
    n = batch_x.shape[0]
    with np.errstate(divide="ignore"):
        loss = float(-np.log(probs[np.arange(n), y]).mean())

    onehot = np.zeros_like(probs)
    onehot[np.arange(n), y] = 1.0
    dtype = next(iter(params.arrays.values()))[0].dtype
    grad = ((probs - onehot) / n).astype(dtype)

    grads = {}
    for idx in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[idx]
        kind, a, aux = caches[idx]
        if kind == "softmax":
            continue
        if kind in ("dense", "dense_relu"):
            if kind == "dense_relu":
                grad = grad * (aux > 0)
            w, _ = params.arrays[idx]
            grads[idx] = (a.T @ grad, grad.sum(axis=0))
            grad = grad @ w.T
        elif kind == "flatten":
            grad = grad.reshape(a)
        elif kind == "pool":
            grad = kernels.maxpool_backward(grad, aux, a, layer.window, layer.stride)
        elif kind in ("conv", "conv_relu"):
            if kind == "conv_relu":
                grad = grad * (aux > 0)
            w, _ = params.arrays[idx]
            grad, dw, db = kernels.conv2d_backward(a, w, layer.stride, layer.zero_padding, grad)
            grads[idx] = (dw, db)
    return loss, Parameters(grads), probs


def loss_and_gradients(spec: NetworkSpec, params: Parameters, batch_x: np.ndarray, batch_y):
    """Mean categorical cross-entropy and reverse-mode gradients.

    Gradient arrays mirror the Parameters structure and dtype.
    """
    loss, grads, _ = _loss_and_gradients_inner(spec, params, batch_x, batch_y)
    return loss, grads


# --- predictions --------------------------------------------------------------------


@dataclass
class Prediction:
    cls: IssueClass
    confidence: float
    probabilities: tuple

    @staticmethod
    def from_probs(probs) -> "Prediction":
        probs = np.asarray(probs, dtype=np.float64)
        probs = probs / probs.sum()
        idx = int(np.argmax(probs))  # argmax takes the lowest index on ties
        return Prediction(IssueClass(idx), float(probs[idx]), tuple(float(p) for p in probs))


def predict_case(spec: NetworkSpec, params: Parameters, img: RasterImage, proposals) -> Prediction:
    """Classify a standardized case image, aggregating over region proposals.

    With no proposals the whole image is classified. Otherwise each proposal
    is cropped, standardized to the network input, classified, and the
    probability vectors are combined by objectness-weighted mean (uniform if
    all objectness is zero). Proposals are canonically ordered first so the
    result is independent of list order.
    """
    img.validate()
    if img.value_domain != UNIT:
        raise ModelError("predict_case expects a unit-domain image")
    input_size = spec.input_shape[0]
    dtype = next(iter(params.arrays.values()))[0].dtype

    if not proposals:
        whole = resize_to_standard(img, input_size)
        return Prediction.from_probs(forward_batch(spec, params, whole.pixels[None].astype(dtype))[0])

    ordered = sorted(proposals, key=lambda p: (p.bbox.x, p.bbox.y, p.bbox.w, p.bbox.h, -p.objectness))
    crops = []
    for p in ordered:
        bb = p.bbox
        crop = RasterImage(np.ascontiguousarray(img.pixels[bb.y : bb.y + bb.h, bb.x : bb.x + bb.w, :]), UNIT)
        crops.append(resize_to_standard(crop, input_size).pixels)
    batch = np.stack(crops).astype(dtype)
    probs = forward_batch(spec, params, batch)
    weights = np.array([p.objectness for p in ordered], dtype=np.float64)
    if weights.sum() <= 0.0:
        weights = np.ones_like(weights)
    combined = (probs * weights[:, None]).sum(axis=0) / weights.sum()
    return Prediction.from_probs(combined)


# --- training -------------------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float
    batch_size: int
    epochs: int
    seed: int = 0
    augment_online: bool = True
    crop_view_rate: float = 0.4     # probability of a primitive-crop view
    context_view_rate: float = 0.1  # probability of a context (junk-box) view
    zoom_max: float = 1.5

    def validate(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ModelError("learning_rate, batch_size and epochs must be positive")
        return self


@dataclass
class GridSpace:
    learning_rates: list
    batch_sizes: list
    epoch_counts: list

    def validate(self):
        if not (self.learning_rates and self.batch_sizes and self.epoch_counts):
            raise ModelError("grid space lists must be non-empty")
        return self


def default_grid() -> GridSpace:
    # sized so the full protocol (corpus + grid + evaluation) fits the
    # 20-minute budget on a 2-core desktop; see decisions ledger
    return GridSpace(learning_rates=[0.012, 0.016], batch_sizes=[32], epoch_counts=[32])


@dataclass
class TrainingData:
    """Preprocessed in-memory tensors: three views per record.

    whole scene, a primitive crop (truth-overlapping proposal or jittered
    ground-truth box), and a context crop (a non-matching proposal, the kind
    of box the proposer emits around strong edges). All three carry the
    scene label; context views teach the classifier to vote with the scene
    on the junk boxes it will see inside aggregated predictions.
    """

    whole: np.ndarray         # (n, s, s, 3) float32
    crops: np.ndarray         # (n, s, s, 3) float32; row i valid iff has_crop[i]
    has_crop: np.ndarray      # (n,) bool
    labels: np.ndarray        # (n,) int64
    boxes: list | None = None  # per record: truth boxes scaled to the whole view
    context: np.ndarray | None = None   # (n, s, s, 3) float32
    has_context: np.ndarray | None = None

    def __len__(self):
        return len(self.labels)


@dataclass
class _Region:
    bbox: tuple


def _jitter_box(bbox, width, height, rng):
    """Perturb a ground-truth box into a proposal-like view: the proposer
    emits inflated, shifted, and fragment boxes, so training crops mimic
    that distribution instead of the exact annotation."""
    x, y, w, h = bbox
    sx = float(rng.uniform(0.7, 1.35))
    sy = float(rng.uniform(0.7, 1.35))
    cx = x + w / 2 + float(rng.uniform(-0.18, 0.18)) * w
    cy = y + h / 2 + float(rng.uniform(-0.18, 0.18)) * h
    nw = max(8, int(round(w * sx)))
    nh = max(8, int(round(h * sy)))
    nx = int(round(cx - nw / 2))
    ny = int(round(cy - nh / 2))
    nx = min(max(nx, 0), width - 1)
    ny = min(max(ny, 0), height - 1)
    nw = min(nw, width - nx)
    nh = min(nh, height - ny)
    return nx, ny, max(1, nw), max(1, nh)


def prepare_training_data(
    manifest: DatasetManifest,
    manifest_path,
    input_size: int = 64,
    blur_sigma: float = 1.0,
    with_crops: bool = True,
) -> TrainingData:
    """Load, normalize, de-noise and downscale every record once.

    The crop view trains the net on the distribution the proposal pipeline
    feeds it at inference: the record's best truth-overlapping proposal from
    the real proposer when one exists, otherwise a jittered cut around a
    ground-truth region.
    """
    from .regions import BoundingBox, ProposerSettings, iou, propose_regions

    proposer = ProposerSettings()
    n = len(manifest)
    whole = np.zeros((n, input_size, input_size, 3), dtype=np.float32)
    crops = np.zeros((n, input_size, input_size, 3), dtype=np.float32)
    has_crop = np.zeros(n, dtype=bool)
    context = np.zeros((n, input_size, input_size, 3), dtype=np.float32)
    has_context = np.zeros(n, dtype=bool)
    labels = np.zeros(n, dtype=np.int64)
    boxes: list = []
    for i, rec in enumerate(manifest.records):
        raster = normalize(load_image(manifest_path, rec))
        if blur_sigma > 0:
            raster = gaussian_blur(raster, blur_sigma)
        whole[i] = resize_to_standard(raster, input_size).pixels
        labels[i] = int(rec.cls)
        scale = input_size / raster.width
        boxes.append(
            [
                (
                    int(r.bbox[0] * scale),
                    int(r.bbox[1] * scale),
                    max(1, int(round(r.bbox[2] * scale))),
                    max(1, int(round(r.bbox[3] * scale))),
                )
                for r in rec.regions
            ]
        )
        if with_crops and rec.regions:
            rng = np.random.default_rng(np.random.PCG64(np.random.SeedSequence([0xC807, i])))
            box = None
            proposals = propose_regions(raster, proposer)
            scored = [
                (max(iou(p.bbox, BoundingBox(*r.bbox)) for r in rec.regions), p)
                for p in proposals
            ]
            if scored:
                best_iou, best = max(scored, key=lambda t: t[0])
                if best_iou >= 0.3:
                    box = (best.bbox.x, best.bbox.y, best.bbox.w, best.bbox.h)
            if box is None:
                region = rec.regions[int(rng.integers(0, len(rec.regions)))]
                box = _jitter_box(region.bbox, raster.width, raster.height, rng)
            x, y, w, h = box
            sub = RasterImage(np.ascontiguousarray(raster.pixels[y : y + h, x : x + w, :]), UNIT)
            crops[i] = resize_to_standard(sub, input_size).pixels
            has_crop[i] = True

            junk = [p for s, p in scored if s < 0.3]
            if junk:
                p = junk[int(rng.integers(0, len(junk)))]
                sub = RasterImage(
                    np.ascontiguousarray(
                        raster.pixels[p.bbox.y : p.bbox.y + p.bbox.h, p.bbox.x : p.bbox.x + p.bbox.w, :]
                    ),
                    UNIT,
                )
                context[i] = resize_to_standard(sub, input_size).pixels
                has_context[i] = True
    return TrainingData(whole, crops, has_crop, labels, boxes, context, has_context)


def _augment_tensor(x32: np.ndarray, spec: AugmentSpec, boxes=()) -> tuple[np.ndarray, list]:
    view = RasterImage(np.ascontiguousarray(x32, dtype=np.float64).clip(0.0, 1.0), UNIT)
    out, kept = augment(view, spec, [_Region(b) for b in boxes])
    return out.pixels.astype(np.float32), kept


def train(spec: NetworkSpec, data, config: TrainConfig, manifest_path=None):
    """Mini-batch gradient descent; deterministic given config.seed.

    `data` is a TrainingData or a DatasetManifest (then manifest_path names
    its file so images can be loaded). Returns (Parameters, history) where
    history rows carry per-epoch mean loss and training accuracy. The
    returned parameters are the mean of the final quarter of epoch-end
    snapshots (tail averaging knocks down the step noise of plain GD); the
    per-batch update rule itself stays w <- w - lr*g.
    """
    spec.validate()
    config.validate()
    if isinstance(data, DatasetManifest):
        if not len(data):
            raise ModelError("training manifest is empty")
        data = prepare_training_data(data, manifest_path, input_size=spec.input_shape[0])
    if len(data) == 0:
        raise ModelError("training set is empty")

    params = init_parameters(spec, config.seed, dtype=np.float32)
    rng = np.random.default_rng(np.random.PCG64(np.random.SeedSequence([config.seed & 0xFFFFFFFFFFFFFFFF, 0x7A41])))
    n = len(data)
    history = []
    tail_start = config.epochs - max(1, config.epochs // 4)
    tail_sum: dict | None = None
    tail_count = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total_loss = 0.0
        correct = 0
        for b_start in range(0, n, config.batch_size):
            idx = order[b_start : b_start + config.batch_size]
            batch = np.empty((len(idx), *spec.input_shape), dtype=np.float32)
            for row, i in enumerate(idx):
                draw = rng.random()
                has_ctx = data.has_context is not None and data.has_context[i]
                if has_ctx and draw < config.context_view_rate:
                    x, whole_view = data.context[i], False
                elif data.has_crop[i] and draw < config.context_view_rate + config.crop_view_rate:
                    x, whole_view = data.crops[i], False
                else:
                    x, whole_view = data.whole[i], True
                if config.augment_online:
                    aug = AugmentSpec(
                        quarter_turns=int(rng.integers(0, 4)),
                        flip_horizontal=bool(rng.integers(0, 2)),
                        flip_vertical=bool(rng.integers(0, 2)),
                        zoom_factor=float(rng.uniform(1.0, config.zoom_max)),
                    )
                    truth = (data.boxes[i] if data.boxes else []) if whole_view else []
                    x, kept = _augment_tensor(x, aug, truth)
                    if truth and not kept:
                        # the zoom cropped every labeled region out of frame:
                        # that view no longer carries its label, so redo the
                        # geometric part without the zoom
                        x, _ = _augment_tensor(
                            data.whole[i], dataclasses.replace(aug, zoom_factor=1.0), []
                        )
                batch[row] = x
            y = data.labels[idx]
            loss, grads, probs = _loss_and_gradients_inner(spec, params, batch, y)
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, b_start // config.batch_size)
            correct += int((probs.argmax(axis=1) == y).sum())
            total_loss += loss * len(idx)
            for layer_idx, (dw, db) in grads.arrays.items():
                w, bias = params.arrays[layer_idx]
                params.arrays[layer_idx] = (w - config.learning_rate * dw, bias - config.learning_rate * db)
        if not params.all_finite():
            raise TrainingDivergedError(epoch, (n - 1) // config.batch_size)
        history.append({"epoch": epoch, "loss": total_loss / n, "accuracy": correct / n})
        if epoch >= tail_start:
            if tail_sum is None:
                tail_sum = {i: (w.astype(np.float64), b.astype(np.float64)) for i, (w, b) in params.arrays.items()}
            else:
                for i, (w, b) in params.arrays.items():
                    tw, tb = tail_sum[i]
                    tail_sum[i] = (tw + w, tb + b)
            tail_count += 1
    averaged = Parameters(
        {
            i: ((tw / tail_count).astype(np.float32), (tb / tail_count).astype(np.float32))
            for i, (tw, tb) in tail_sum.items()
        }
    )
    return averaged, history


def evaluate_whole_images(spec: NetworkSpec, params: Parameters, data: TrainingData) -> float:
    """Accuracy of plain whole-image classification over preprocessed tensors."""
    correct = 0
    bs = 256
    for start in range(0, len(data), bs):
        x = data.whole[start : start + bs]
        probs = forward_batch(spec, params, x)
        correct += int((probs.argmax(axis=1) == data.labels[start : start + bs]).sum())
    return correct / len(data) if len(data) else 0.0


# --- grid search -----------------------------------------------------------------------


def _cell_seed(lr, batch, epochs, base_seed) -> int:
    key = f"{base_seed}|{lr!r}|{batch}|{epochs}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


_GRID_CTX: dict = {}


def _grid_train_cell(args):
    cell_idx, lr, batch, epochs, base_seed, n_workers = args
    spec = _GRID_CTX["spec"]
    train_data = _GRID_CTX["train_data"]
    val_data = _GRID_CTX["val_data"]
    evaluate_fn = _GRID_CTX.get("evaluate_fn")
    config = TrainConfig(lr, batch, epochs, seed=_cell_seed(lr, batch, epochs, base_seed))

    def _run():
        try:
            params, _ = train(spec, train_data, config)
        except TrainingDivergedError as exc:
            return {"learning_rate": lr, "batch_size": batch, "epochs": epochs,
                    "status": "failed", "error": str(exc), "val_accuracy": None}, None
        if evaluate_fn is not None:
            acc = evaluate_fn(spec, params)
        else:
            acc = evaluate_whole_images(spec, params, val_data)
        return {"learning_rate": lr, "batch_size": batch, "epochs": epochs,
                "status": "ok", "val_accuracy": acc}, params

    if n_workers > 1:
        # cells run in parallel processes: avoid BLAS thread oversubscription
        try:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=max(1, (os.cpu_count() or 1) // n_workers)):
                row, params = _run()
                return cell_idx, row, params
        except ImportError:
            pass
    row, params = _run()
    return cell_idx, row, params


@dataclass
class GridResult:
    best: TrainConfig
    table: list
    best_params: Parameters


def grid_search(
    space: GridSpace,
    spec: NetworkSpec,
    train_data,
    val_data,
    base_seed: int = 0,
    n_jobs: int | None = None,
    evaluate_fn=None,
) -> GridResult:
    """Train one model per Cartesian-product cell; pick highest val accuracy.

    Per-cell seeds derive from the cell's own (lr, batch, epochs) so duplicate
    cells reproduce identical results. Ties break toward lower epochs, then
    lower batch, then lower learning rate, then list order. Diverged cells are
    marked failed and excluded. Validation accuracy is whole-image accuracy
    on val_data unless `evaluate_fn(spec, params)` supplies the deployment
    metric (e.g. the ROI-aggregated evaluation).
    """
    space.validate()
    if n_jobs is None:
        n_jobs = min(
            len(space.learning_rates) * len(space.batch_sizes) * len(space.epoch_counts),
            os.cpu_count() or 1,
        )
    cells = [
        (i, lr, b, e, base_seed, n_jobs)
        for i, (lr, b, e) in enumerate(
            (lr, b, e)
            for lr in space.learning_rates
            for b in space.batch_sizes
            for e in space.epoch_counts
        )
    ]
    _GRID_CTX.update(spec=spec, train_data=train_data, val_data=val_data, evaluate_fn=evaluate_fn)
    results = [None] * len(cells)
    if n_jobs > 1 and len(cells) > 1 and hasattr(os, "fork"):
        import multiprocessing as mp

        with mp.get_context("fork").Pool(n_jobs) as pool:
            for cell_idx, row, params in pool.imap_unordered(_grid_train_cell, cells):
                results[cell_idx] = (row, params)
    else:
        for args in cells:
            cell_idx, row, params = _grid_train_cell(args)
            results[cell_idx] = (row, params)
    _GRID_CTX.clear()

    table = [row for row, _ in results]
    viable = [(i, row) for i, (row, _) in enumerate(results) if row["status"] == "ok"]
    if not viable:
        raise NoViableConfigError("every grid cell diverged")
    best_i, best_row = min(
        viable,
        key=lambda item: (
            -item[1]["val_accuracy"],
            item[1]["epochs"],
            item[1]["batch_size"],
            item[1]["learning_rate"],
            item[0],
        ),
    )
    best = TrainConfig(
        best_row["learning_rate"],
        best_row["batch_size"],
        best_row["epochs"],
        seed=_cell_seed(best_row["learning_rate"], best_row["batch_size"], best_row["epochs"], base_seed),
    )
    return GridResult(best=best, table=table, best_params=results[best_i][1])


# --- checkpoints ----------------------------------------------------------------------

_MAGIC = b"CVCK"
_VERSION = 1

_LAYER_KINDS = {"Conv": Conv, "MaxPool": MaxPool, "Flatten": Flatten, "Dense": Dense, "SoftmaxOutput": SoftmaxOutput}


def _spec_to_json(spec: NetworkSpec) -> dict:
    return {
        "input_shape": list(spec.input_shape),
        "layers": [
            {"kind": type(l).__name__, **dataclasses.asdict(l)} for l in spec.layers
        ],
    }


def _spec_from_json(obj: dict) -> NetworkSpec:
    layers = []
    for entry in obj["layers"]:
        entry = dict(entry)
        kind = _LAYER_KINDS[entry.pop("kind")]
        layers.append(kind(**entry))
    return NetworkSpec(tuple(obj["input_shape"]), layers)


def checkpoint_save(spec: NetworkSpec, params: Parameters, path) -> None:
    """Serialize spec+params: magic, version, JSON header, raw little-endian
    arrays, trailing CRC32."""
    spec.validate()
    dtype = next(iter(params.arrays.values()))[0].dtype
    dtype_tag = {np.dtype(np.float32): "f4", np.dtype(np.float64): "f8"}[np.dtype(dtype)]
    entries = []
    payload = bytearray()
    for idx in sorted(params.arrays):
        w, b = params.arrays[idx]
        entries.append({"layer": idx, "w_shape": list(w.shape), "b_shape": list(b.shape)})
        payload += np.ascontiguousarray(w, dtype=f"<{dtype_tag}").tobytes()
        payload += np.ascontiguousarray(b, dtype=f"<{dtype_tag}").tobytes()
    header = json.dumps({"spec": _spec_to_json(spec), "dtype": dtype_tag, "arrays": entries}).encode()
    body = len(header).to_bytes(4, "little") + header + bytes(payload)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    blob = _MAGIC + bytes([_VERSION]) + body + crc.to_bytes(4, "little")
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def checkpoint_load(path):
    """Inverse of checkpoint_save; raises a distinct error per corruption mode."""
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != _MAGIC:
        raise CheckpointMagicError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 5 or data[4] != _VERSION:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {data[4] if len(data) > 4 else '?'}")
    if len(data) < 13:
        raise CheckpointTruncatedError(f"{path}: truncated checkpoint")
    header_len = int.from_bytes(data[5:9], "little")
    if len(data) < 9 + header_len:
        raise CheckpointTruncatedError(f"{path}: truncated header")
    try:
        meta = json.loads(data[9 : 9 + header_len])
    except json.JSONDecodeError as exc:
        raise CheckpointChecksumError(f"{path}: corrupt header: {exc}") from exc
    dtype = np.dtype("<" + meta["dtype"])
    payload_size = sum(
        (int(np.prod(e["w_shape"])) + int(np.prod(e["b_shape"]))) * dtype.itemsize
        for e in meta["arrays"]
    )
    expected = 9 + header_len + payload_size + 4
    if len(data) < expected:
        raise CheckpointTruncatedError(
            f"{path}: truncated checkpoint ({len(data)} bytes, expected {expected})"
        )
    body, stored_crc = data[5:-4], int.from_bytes(data[-4:], "little")
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise CheckpointChecksumError(f"{path}: checksum mismatch")
    spec = _spec_from_json(meta["spec"])
    arrays = {}
    offset = 4 + header_len
    for entry in meta["arrays"]:
        w_n = int(np.prod(entry["w_shape"])) * dtype.itemsize
        b_n = int(np.prod(entry["b_shape"])) * dtype.itemsize
        w = np.frombuffer(body[offset : offset + w_n], dtype=dtype).reshape(entry["w_shape"]).copy()
        offset += w_n
        b = np.frombuffer(body[offset : offset + b_n], dtype=dtype).reshape(entry["b_shape"]).copy()
        offset += b_n
        arrays[entry["layer"]] = (w, b)
    spec.validate()
    return spec, Parameters(arrays)
