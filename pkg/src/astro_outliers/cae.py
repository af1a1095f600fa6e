"""Convolutional autoencoder (optionally CBAM-augmented) and its training loop.

Encoder::

    [conv3x3 -> relu -> (cbam) -> maxpool2] x 4   (64, 32, 16, 8 filters)
    flatten -> dense128 -> dense64 -> dense32 (relu) -> linear embedding

Decoder mirrors it: dense32 -> dense64 -> dense128 (relu), reshape to the
encoder's last feature map, ``[conv -> relu -> upsample2] x 4`` with filters
8, 16, 32, 64, then a 3-filter output conv with a channel softmax or a
sigmoid.
"""

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images
from .attention import CbamBlock
from .exceptions import ConfigError, ShapeError, TrainingDivergedError
from .nn import (
    AdamState,
    ConvLayer,
    DenseLayer,
    Flatten,
    MaxPool2,
    ReLU,
    Reshape,
    Sigmoid,
    SoftmaxChannels,
    Upsample2,
    adam_step,
    backward_pass,
    bce_loss,
    forward_stack,
)

logger = logging.getLogger(__name__)

OUTPUT_HEADS = ("softmax3", "sigmoid")
PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class CaeSpec:
    input_dims: tuple = (64, 64, 3)
    encoder_conv_filters: tuple = (64, 32, 16, 8)
    encoder_dense_units: tuple = (128, 64, 32)
    embedding_dim: int = 20
    output_head: str = "softmax3"
    use_attention: bool = False
    kernel_size: int = 3
    reduction_ratio: int = 8
    attention_kernel: int = 7
    attention_position: str = "after_relu"

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        object.__setattr__(self, "encoder_conv_filters", tuple(int(f) for f in self.encoder_conv_filters))
        object.__setattr__(self, "encoder_dense_units", tuple(int(u) for u in self.encoder_dense_units))
        if len(self.input_dims) != 3 or min(self.input_dims) < 1:
            raise ConfigError(f"input_dims must be (height, width, channels), got {self.input_dims}")
        if self.embedding_dim < 1:
            raise ConfigError("embedding_dim must be >= 1")
        if self.output_head not in OUTPUT_HEADS:
            raise ConfigError(f"output_head must be one of {OUTPUT_HEADS}")
        if not self.encoder_conv_filters or min(self.encoder_conv_filters) < 1:
            raise ConfigError("encoder_conv_filters must be a nonempty list of positive counts")
        if min(self.encoder_dense_units, default=1) < 1:
            raise ConfigError("encoder_dense_units must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd and >= 1")
        if self.attention_kernel < 1 or self.attention_kernel % 2 == 0:
            raise ConfigError("attention_kernel must be odd and >= 1")
        if self.reduction_ratio < 1:
            raise ConfigError("reduction_ratio must be >= 1")
        if self.attention_position not in ("after_relu", "before_relu"):
            raise ConfigError("attention_position must be 'after_relu' or 'before_relu'")
        if self.output_head == "softmax3" and self.input_dims[2] < 2:
            raise ConfigError("softmax head needs at least 2 output channels")
        factor = 2 ** len(self.encoder_conv_filters)
        h, w, _ = self.input_dims
        if h % factor or w % factor:
            raise ConfigError(f"input height/width must be divisible by {factor}, got {h}x{w}")

    @property
    def bottleneck_shape(self):
        factor = 2 ** len(self.encoder_conv_filters)
        h, w, _ = self.input_dims
        return (h // factor, w // factor, self.encoder_conv_filters[-1])

    @property
    def flatten_width(self):
        return int(np.prod(self.bottleneck_shape))

    @property
    def decoder_conv_filters(self):
        return tuple(reversed(self.encoder_conv_filters)) + (self.input_dims[2],)

    @property
    def decoder_dense_units(self):
        return tuple(reversed(self.encoder_dense_units))

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    epochs: int = 100
    learning_rate: float = 1e-3
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {tuple(PRECISIONS)}")


@dataclass
class LossHistory:
    epoch_losses: list = field(default_factory=list)

    def __len__(self):
        return len(self.epoch_losses)


class CaeModel:
    """Encoder and decoder layer stacks plus the spec they were built from."""

    def __init__(self, spec, encoder, decoder, dtype=np.float32):
        self.spec = spec
        self.encoder = list(encoder)
        self.decoder = list(decoder)
        self.dtype = np.dtype(dtype)

    @property
    def layers(self):
        return self.encoder + self.decoder

    def parameters(self):
        """Ordered ``{"layer.param": array}`` view onto the live parameter arrays."""
        out = {}
        for layer in self.layers:
            for pname, arr in layer.params.items():
                out[f"{layer.name}.{pname}"] = arr
        return out

    def n_parameters(self):
        return sum(a.size for a in self.parameters().values())

    def astype(self, dtype):
        """Return a deep copy with all parameters cast to ``dtype``."""
        clone = copy_model(self)
        dtype = np.dtype(dtype)
        _map_params(clone, lambda a: a.astype(dtype))
        clone.dtype = dtype
        return clone

    def encode(self, images, batch_size=256):
        images = self._check_input(images)
        out = [forward_stack(self.encoder, images[i:i + batch_size], record=False)[0]
               for i in range(0, len(images), batch_size)]
        if not out:
            return np.zeros((0, self.spec.embedding_dim), dtype=self.dtype)
        return np.concatenate(out)

    def decode(self, embeddings, batch_size=256):
        z = np.asarray(embeddings, dtype=self.dtype)
        if z.ndim != 2 or z.shape[1] != self.spec.embedding_dim:
            raise ShapeError(f"embeddings must be (n, {self.spec.embedding_dim}), got {z.shape}")
        out = [forward_stack(self.decoder, z[i:i + batch_size], record=False)[0]
               for i in range(0, len(z), batch_size)]
        if not out:
            return np.zeros((0,) + self.spec.input_dims, dtype=self.dtype)
        return np.concatenate(out)

    def reconstruct(self, images):
        return self.decode(self.encode(images))

    def loss_and_grads(self, images):
        """BCE reconstruction loss of a batch and its gradient for every parameter."""
        x = self._check_input(images)
        stack = self.layers
        y, cache = forward_stack(stack, x)
        loss, dy = bce_loss(y, x)
        layer_grads, _ = backward_pass(stack, cache, dy)
        grads = {}
        for layer, g in zip(stack, layer_grads):
            for pname, arr in g.items():
                grads[f"{layer.name}.{pname}"] = arr
        return loss, grads

    def loss(self, images):
        x = self._check_input(images)
        y, _ = forward_stack(self.layers, x, record=False)
        return bce_loss(y, x)[0]

    def _check_input(self, images):
        x = np.asarray(images, dtype=self.dtype)
        if x.ndim != 4 or x.shape[1:] != self.spec.input_dims:
            raise ShapeError(f"expected images of shape (n, {', '.join(map(str, self.spec.input_dims))}), got {x.shape}")
        return x


def _map_params(model, fn):
    for layer in model.layers:
        for target in _param_owners(layer):
            obj, attr = target
            setattr(obj, attr, fn(getattr(obj, attr)))


def _param_owners(layer):
    # (object, attribute) pairs holding each parameter array of a layer
    if isinstance(layer, ConvLayer):
        return [(layer, "kernels"), (layer, "bias")]
    if isinstance(layer, DenseLayer):
        return [(layer, "weight"), (layer, "bias")]
    if isinstance(layer, CbamBlock):
        return [(layer.channel, "mlp_in"), (layer.channel, "mlp_out"),
                (layer.spatial.conv, "kernels"), (layer.spatial.conv, "bias")]
    return []


def copy_model(model):
    import copy

    return copy.deepcopy(model)


def build_cae(spec=None, seed=0, precision="float32"):
    """Construct a freshly initialised :class:`CaeModel` (He-uniform weights, zero biases)."""
    spec = spec or CaeSpec()
    if not isinstance(spec, CaeSpec):
        raise ConfigError("spec must be a CaeSpec")
    if precision not in PRECISIONS:
        raise ConfigError(f"precision must be one of {tuple(PRECISIONS)}")
    dtype = PRECISIONS[precision]
    rng = np.random.default_rng(seed)
    k = spec.kernel_size

    encoder = []
    c_in = spec.input_dims[2]
    for i, filters in enumerate(spec.encoder_conv_filters, start=1):
        encoder.append(ConvLayer.init(rng, c_in, filters, k, dtype, name=f"enc.conv{i}"))
        block = []
        if spec.use_attention:
            block.append(CbamBlock.init(rng, filters, spec.reduction_ratio, spec.attention_kernel,
                                        dtype, name=f"enc.cbam{i}"))
        if spec.attention_position == "after_relu":
            encoder.append(ReLU())
            encoder.extend(block)
        else:
            encoder.extend(block)
            encoder.append(ReLU())
        encoder.append(MaxPool2())
        c_in = filters
    encoder.append(Flatten())
    width = spec.flatten_width
    for i, units in enumerate(spec.encoder_dense_units, start=1):
        encoder.append(DenseLayer.init(rng, width, units, dtype, name=f"enc.dense{i}"))
        encoder.append(ReLU())
        width = units
    encoder.append(DenseLayer.init(rng, width, spec.embedding_dim, dtype, name="enc.embedding"))

    decoder = []
    width = spec.embedding_dim
    for i, units in enumerate(spec.decoder_dense_units, start=1):
        decoder.append(DenseLayer.init(rng, width, units, dtype, name=f"dec.dense{i}"))
        decoder.append(ReLU())
        width = units
    if width != spec.flatten_width:
        # only for non-default input sizes, where the mirrored dense stack
        # does not end at the bottleneck width
        decoder.append(DenseLayer.init(rng, width, spec.flatten_width, dtype, name="dec.to_bottleneck"))
        decoder.append(ReLU())
    decoder.append(Reshape(spec.bottleneck_shape))
    c_in = spec.bottleneck_shape[2]
    for i, filters in enumerate(spec.decoder_conv_filters[:-1], start=1):
        decoder.append(ConvLayer.init(rng, c_in, filters, k, dtype, name=f"dec.conv{i}"))
        decoder.append(ReLU())
        decoder.append(Upsample2())
        c_in = filters
    decoder.append(ConvLayer.init(rng, c_in, spec.decoder_conv_filters[-1], k, dtype, name="dec.output"))
    decoder.append(SoftmaxChannels() if spec.output_head == "softmax3" else Sigmoid())
    return CaeModel(spec, encoder, decoder, dtype)


def analytic_parameter_count(spec):
    """Closed-form parameter count of the architecture built by :func:`build_cae`."""
    from .attention import cbam_param_count

    k2 = spec.kernel_size ** 2
    total = 0
    c_in = spec.input_dims[2]
    for f in spec.encoder_conv_filters:
        total += k2 * c_in * f + f
        if spec.use_attention:
            total += cbam_param_count(f, spec.reduction_ratio, spec.attention_kernel)
        c_in = f
    widths = [spec.flatten_width, *spec.encoder_dense_units, spec.embedding_dim]
    widths += list(spec.decoder_dense_units)
    if widths[-1] != spec.flatten_width:
        widths.append(spec.flatten_width)
    total += sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
    c_in = spec.bottleneck_shape[2]
    for f in spec.decoder_conv_filters:
        total += k2 * c_in * f + f
        c_in = f
    return total


def encode(model, batch):
    return model.encode(batch)


def decode(model, embeddings):
    return model.decode(embeddings)


def train_cae(model, dataset, config=None):
    """Fit ``model`` in place with Adam on the BCE reconstruction loss.

    Returns ``(model, LossHistory)``.  Each epoch visits the data in a
    permutation drawn from ``default_rng([seed, epoch])``.
    """
    config = config or TrainConfig()
    x = check_images(dataset, model.spec.input_dims, dtype=model.dtype)
    if len(x) == 0:
        raise ConfigError("training dataset is empty")
    history = LossHistory()
    state = AdamState(learning_rate=config.learning_rate)
    params = model.parameters()
    n = len(x)
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = model.loss_and_grads(x[idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch)
            adam_step(params, grads, state)
            total += loss * len(idx)
        epoch_loss = total / n
        if not math.isfinite(epoch_loss):
            raise TrainingDivergedError(epoch)
        history.epoch_losses.append(epoch_loss)
        logger.info("epoch %d/%d loss %.6f", epoch + 1, config.epochs, epoch_loss)
    return model, history


def sweep_embedding_dim(dims, images, labels, trials=3, train_config=None, knn_config=None,
                        use_attention=False, output_head="softmax3", fraction=0.1,
                        split_ratio=0.7, seed=0):
    """Mean/std test AUC of the embed+k-NN pipeline for each embedding width.

    Every (dim, trial) pair trains an independent model from scratch; trial
    ``t`` uses seed ``seed + t``.  Returns a list of
    ``(dim, mean_auc, std_auc)`` tuples in request order.
    """
    from .datasets import stratified_split_indices
    from .knn import KnnConfig, detect
    from .metrics import roc_auc

    if trials < 1:
        raise ConfigError("trials must be >= 1")
    labels = np.asarray(labels).astype(bool)
    train_idx, test_idx = stratified_split_indices(labels, split_ratio, seed)
    train_config = train_config or TrainConfig()
    knn_config = knn_config or KnnConfig()
    results = []
    for dim in dims:
        spec = CaeSpec(input_dims=tuple(images.shape[1:]), embedding_dim=dim,
                       use_attention=use_attention, output_head=output_head)
        aucs = []
        for t in range(trials):
            cfg = TrainConfig(train_config.batch_size, train_config.epochs, train_config.learning_rate,
                              seed + t, train_config.precision)
            model = build_cae(spec, seed + t, cfg.precision)
            try:
                train_cae(model, images[train_idx], cfg)
            except TrainingDivergedError as e:
                err = TrainingDivergedError(e.epoch, f"{e} (embedding_dim={dim}, trial={t})")
                err.embedding_dim = dim
                raise err from e
            emb = model.encode(images[test_idx])
            result = detect(emb, knn_config, fraction)
            aucs.append(roc_auc(result.scores, labels[test_idx]).auc)
        results.append((dim, float(np.mean(aucs)), float(np.std(aucs))))
    return results


class CaeEmbedder(TransformerMixin, BaseEstimator):
    """scikit-learn transformer mapping images to autoencoder embeddings.

    Parameters
    ----------
    embedding_dim : int
        Width of the linear embedding layer.
    use_attention : bool
        Insert a CBAM block after every encoder convolution.
    output_head : {"softmax3", "sigmoid"}
        Activation of the decoder's output convolution.
    batch_size, epochs, learning_rate : training hyper-parameters.
    random_state : int
        Seeds both weight initialisation and epoch shuffling.
    precision : {"float32", "float64"}
    """

    def __init__(self, embedding_dim=20, use_attention=False, output_head="softmax3",
                 batch_size=128, epochs=100, learning_rate=1e-3, random_state=0,
                 precision="float32"):
        self.embedding_dim = embedding_dim
        self.use_attention = use_attention
        self.output_head = output_head
        self.batch_size = batch_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.random_state = random_state
        self.precision = precision

    def fit(self, X, y=None):
        X = check_images(X)
        spec = CaeSpec(input_dims=X.shape[1:], embedding_dim=self.embedding_dim,
                       use_attention=self.use_attention, output_head=self.output_head)
        config = TrainConfig(self.batch_size, self.epochs, self.learning_rate,
                             self.random_state, self.precision)
        self.model_ = build_cae(spec, self.random_state, self.precision)
        _, history = train_cae(self.model_, X, config)
        self.loss_history_ = history
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return self.model_.encode(check_images(X, self.model_.spec.input_dims))

    def inverse_transform(self, X):
        check_is_fitted(self, "model_")
        return self.model_.decode(X)
