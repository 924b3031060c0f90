"""
Dense multilayer networks with exact gradients on 64-bit floats.

The parameters of a network live in one flat vector. The layout is fixed so that
checkpoints are portable: layer by layer, the weight matrix (out x in, row-major)
followed by the bias vector.
"""

import numpy as np
import sciris as sc
from scipy import special
import reprise as rp

__all__ = [
    "MlpSpec",
    "Model",
    "LossKind",
    "param_layout",
    "init_model",
    "as_inputs",
    "forward",
    "predict",
    "per_sample_losses",
    "loss_and_grad",
    "sgd_step",
    "accuracy",
    "check_gradients",
    "save_checkpoint",
    "load_checkpoint",
]

ACTIVATIONS = ["relu", "tanh"]
LOSS_NAMES = ["cross_entropy", "squared_error", "distillation_mse"]
DEFAULT_DER_ALPHA = 0.3


class MlpSpec(sc.prettyobj):
    """
    Architecture of a feed-forward network: layer sizes plus the hidden activation.

    The final layer is always linear (it produces logits).

    Args:
        layer_sizes (list): input size, hidden sizes..., output size
        activation (str): "relu" or "tanh"

    **Example**::

        spec = rp.MlpSpec([2, 8, 2], activation="tanh")
        spec.n_params # 42
    """

    def __init__(self, layer_sizes, activation="relu"):
        self.layer_sizes = [int(size) for size in sc.tolist(layer_sizes)]
        self.activation = activation
        if len(self.layer_sizes) < 2:
            errormsg = f"An MLP needs at least an input and an output layer, not {self.layer_sizes}"
            raise rp.ContractError(errormsg)
        if any(size <= 0 for size in self.layer_sizes):
            errormsg = f"Layer sizes must be positive, not {self.layer_sizes}"
            raise rp.ContractError(errormsg)
        if activation not in ACTIVATIONS:
            errormsg = f"Activation must be one of {ACTIVATIONS}, not {activation!r}"
            raise rp.ContractError(errormsg)
        return

    @property
    def n_inputs(self):
        return self.layer_sizes[0]

    @property
    def n_outputs(self):
        return self.layer_sizes[-1]

    @property
    def n_params(self):
        return sum(
            n_out * n_in + n_out
            for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:])
        )

    def __eq__(self, other):
        return (
            isinstance(other, MlpSpec)
            and self.layer_sizes == other.layer_sizes
            and self.activation == other.activation
        )

    def to_header(self):
        """Checkpoint header line"""
        sizes = ",".join(str(size) for size in self.layer_sizes)
        return f"mlpspec {sizes} {self.activation}"


def param_layout(spec):
    """
    Describe where each weight matrix and bias vector lives in the flat vector.

    Returns:
        list of objdicts with name, shape and offset
    """
    layout = []
    offset = 0
    for layer, (n_in, n_out) in enumerate(zip(spec.layer_sizes[:-1], spec.layer_sizes[1:])):
        layout.append(sc.objdict(name=f"W{layer}", shape=(n_out, n_in), offset=offset))
        offset += n_out * n_in
        layout.append(sc.objdict(name=f"b{layer}", shape=(n_out,), offset=offset))
        offset += n_out
    return layout


class Model(sc.prettyobj):
    """
    An MLP architecture together with its flat parameter vector.

    Args:
        spec (MlpSpec): the architecture
        params (array): flat parameter vector (zeros if not supplied)
    """

    def __init__(self, spec, params=None):
        self.spec = spec
        if params is None:
            params = np.zeros(spec.n_params)
        self.params = np.array(params, dtype=np.float64)
        if self.params.shape != (spec.n_params,):
            errormsg = f"Parameter vector has shape {self.params.shape}, but {spec.layer_sizes} needs ({spec.n_params},)"
            raise rp.ContractError(errormsg)
        return

    def copy(self):
        return Model(self.spec, self.params.copy())

    def with_params(self, params):
        """A new model with the same architecture and different parameters"""
        return Model(self.spec, params)

    def layers(self, params=None):
        """Views (W, b) of each layer into the flat vector"""
        params = self.params if params is None else params
        layers = []
        offset = 0
        for n_in, n_out in zip(self.spec.layer_sizes[:-1], self.spec.layer_sizes[1:]):
            W = params[offset : offset + n_out * n_in].reshape(n_out, n_in)
            offset += n_out * n_in
            b = params[offset : offset + n_out]
            offset += n_out
            layers.append((W, b))
        return layers


def init_model(spec, seed=None):
    """
    Glorot-uniform initialization: weights ~ U(-s, s) with s = sqrt(6/(fan_in+fan_out)), zero biases.
    """
    rng = rp.make_rng(seed)
    params = []
    for n_in, n_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        bound = np.sqrt(6.0 / (n_in + n_out))
        params.append(rng.uniform(-bound, bound, size=n_out * n_in))
        params.append(np.zeros(n_out))
    return Model(spec, np.concatenate(params))


def as_inputs(inputs):
    """Stack a list of samples (or pass through an array) into an (n, d) float64 matrix"""
    if isinstance(inputs, np.ndarray):
        inputs = np.asarray(inputs, dtype=np.float64)
        return inputs.reshape(1, -1) if inputs.ndim == 1 else inputs
    inputs = list(inputs)
    if not len(inputs):
        return np.zeros((0, 0))
    return np.vstack([sample.features for sample in inputs]).astype(np.float64)


def _activate(spec, z):
    if spec.activation == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activation_grad(spec, z, h):
    if spec.activation == "relu":
        return (z > 0).astype(np.float64)
    return 1.0 - h**2


def _forward(model, X, check=False):
    """Forward pass keeping the pre-activations and activations of every layer"""
    if X.ndim != 2 or X.shape[1] != model.spec.n_inputs:
        errormsg = f"Expected inputs of shape (n, {model.spec.n_inputs}), got {X.shape}"
        raise rp.ContractError(errormsg)
    layers = model.layers()
    acts = [X]
    pres = []
    h = X
    for layer, (W, b) in enumerate(layers):
        z = h @ W.T + b
        if check and not np.all(np.isfinite(z)):
            errormsg = f"Non-finite value in the output of layer {layer}"
            raise rp.NumericError(errormsg)
        h = z if layer == len(layers) - 1 else _activate(model.spec, z)
        pres.append(z)
        acts.append(h)
    return acts, pres


def forward(model, inputs):
    """
    Evaluate the logits of a batch of inputs (one row per sample).

    Args:
        model (Model): the network
        inputs (array/list): (n, d) matrix or a list of samples
    """
    X = as_inputs(inputs)
    acts, _ = _forward(model, X)
    return acts[-1]


def predict(model, inputs):
    """Predicted class ids"""
    return np.argmax(forward(model, inputs), axis=1)


class LossKind(sc.prettyobj):
    """
    Which loss to evaluate on a batch.

    Args:
        name (str): "cross_entropy", "squared_error" or "distillation_mse"
        alpha (float): weight of the distillation term, in [0, 1] (distillation_mse only)
    """

    def __init__(self, name="cross_entropy", alpha=None):
        if name not in LOSS_NAMES:
            errormsg = f"Loss must be one of {LOSS_NAMES}, not {name!r}"
            raise rp.ContractError(errormsg)
        self.name = name
        self.alpha = None
        if name == "distillation_mse":
            self.alpha = float(sc.ifelse(alpha, DEFAULT_DER_ALPHA))
            if not 0.0 <= self.alpha <= 1.0:
                errormsg = f"Distillation weight alpha must be in [0, 1], not {self.alpha}"
                raise rp.ContractError(errormsg)
        return

    @classmethod
    def cross_entropy(cls):
        return cls("cross_entropy")

    @classmethod
    def squared_error(cls):
        return cls("squared_error")

    @classmethod
    def distillation_mse(cls, alpha=None):
        return cls("distillation_mse", alpha=alpha)

    def __eq__(self, other):
        return isinstance(other, LossKind) and (self.name, self.alpha) == (other.name, other.alpha)


def _loss_terms(kind, logits, batch):
    """Per-sample losses and the derivative of each per-sample loss with respect to its logits"""
    n, n_classes = logits.shape
    labels = np.array([sample.label for sample in batch], dtype=int)
    if np.any(labels < 0) or np.any(labels >= n_classes):
        errormsg = f"Labels must lie in [0, {n_classes}), got {sorted(set(labels.tolist()))}"
        raise rp.ContractError(errormsg)
    rows = np.arange(n)

    if kind.name == "cross_entropy":
        losses = special.logsumexp(logits, axis=1) - logits[rows, labels]
        dlogits = special.softmax(logits, axis=1)
        dlogits[rows, labels] -= 1.0

    elif kind.name == "squared_error":
        targets = np.zeros_like(logits)
        for i, sample in enumerate(batch):
            if getattr(sample, "target", None) is not None:
                targets[i] = sample.target
            else:
                targets[i, sample.label] = 1.0
        diff = logits - targets
        losses = np.sum(diff**2, axis=1)
        dlogits = 2.0 * diff

    else:
        missing = [i for i, sample in enumerate(batch) if getattr(sample, "stored_logits", None) is None]
        if missing:
            errormsg = f"Distillation needs stored logits, but samples {missing} have none"
            raise rp.ContractError(errormsg)
        stored = np.vstack([sample.stored_logits for sample in batch])
        if stored.shape != logits.shape:
            errormsg = f"Stored logits have shape {stored.shape}, current logits {logits.shape}"
            raise rp.ContractError(errormsg)
        diff = logits - stored
        losses = kind.alpha * np.mean(diff**2, axis=1)
        dlogits = 2.0 * kind.alpha * diff / n_classes

    return losses, dlogits


def per_sample_losses(model, batch, kind=None):
    """Loss of each sample in the batch (no gradient)"""
    kind = sc.ifelse(kind, LossKind())
    batch = list(batch)
    if not len(batch):
        return np.zeros(0)
    logits = forward(model, batch)
    losses, _ = _loss_terms(kind, logits, batch)
    return losses


def loss_and_grad(model, batch, kind=None):
    """
    Mean loss over a batch and its exact gradient with respect to the flat parameters.

    Args:
        model (Model): the network
        batch (list): nonempty list of samples
        kind (LossKind): the loss (default cross-entropy)

    Returns:
        (loss, grad): scalar mean loss and a gradient vector of the same length as the parameters
    """
    kind = sc.ifelse(kind, LossKind())
    batch = list(batch)
    if not len(batch):
        raise rp.ContractError("Cannot compute a loss on an empty batch")

    X = as_inputs(batch)
    acts, pres = _forward(model, X, check=True)
    losses, delta = _loss_terms(kind, acts[-1], batch)
    loss = float(np.mean(losses))
    if not np.isfinite(loss):
        errormsg = f"Non-finite loss in the output of layer {len(pres) - 1}"
        raise rp.NumericError(errormsg)
    delta = delta / len(batch)

    layers = model.layers()
    grads = [None] * len(layers)
    for layer in reversed(range(len(layers))):
        W, _ = layers[layer]
        grads[layer] = np.concatenate([(delta.T @ acts[layer]).ravel(), delta.sum(axis=0)])
        if layer > 0:
            delta = (delta @ W) * _activation_grad(model.spec, pres[layer - 1], acts[layer])
    return loss, np.concatenate(grads)


def sgd_step(params, grad, lr):
    """
    One plain gradient step: params - lr*grad.
    """
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        errormsg = f"Parameter vector {params.shape} and gradient {grad.shape} differ in length"
        raise rp.ContractError(errormsg)
    if not lr > 0:
        errormsg = f"Learning rate must be positive, not {lr}"
        raise rp.ContractError(errormsg)
    return params - lr * grad


def accuracy(model, samples):
    """Fraction of samples whose predicted class equals the label (nan for no samples)"""
    samples = list(samples)
    if not len(samples):
        return np.nan
    labels = np.array([sample.label for sample in samples])
    return float(np.mean(predict(model, samples) == labels))


def check_gradients(model, batch, kind=None, eps=1e-6):
    """
    Compare loss_and_grad with central finite differences of the mean loss.

    Returns:
        max absolute difference divided by the largest gradient magnitude of the two
    """
    kind = sc.ifelse(kind, LossKind())
    _, grad = loss_and_grad(model, batch, kind)
    numeric = np.zeros_like(grad)
    for i in range(len(grad)):
        shifted = model.params.copy()
        shifted[i] += eps
        plus = np.mean(per_sample_losses(model.with_params(shifted), batch, kind))
        shifted[i] -= 2 * eps
        minus = np.mean(per_sample_losses(model.with_params(shifted), batch, kind))
        numeric[i] = (plus - minus) / (2 * eps)
    scale = max(np.abs(grad).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(grad - numeric).max() / scale)


def save_checkpoint(model, path):
    """
    Write a model as a header line followed by one parameter per line.

    Parameters use the shortest decimal that round-trips, so reading the file
    back reproduces the parameters bitwise.
    """
    lines = [model.spec.to_header()] + [rp.fmt_float(value) for value in model.params]
    path = sc.makefilepath(path, makedirs=True)
    sc.savetext(path, "\n".join(lines) + "\n")
    return path


def load_checkpoint(path):
    """Read a model written by save_checkpoint"""
    lines = sc.loadtext(path).splitlines()
    if not lines:
        raise rp.FormatError(f"Checkpoint {path} is empty (line 1)")
    header = lines[0].split()
    if len(header) != 3 or header[0] != "mlpspec":
        errormsg = f"Checkpoint {path} line 1: expected 'mlpspec <sizes> <activation>', got {lines[0]!r}"
        raise rp.FormatError(errormsg)
    try:
        spec = MlpSpec([int(size) for size in header[1].split(",")], activation=header[2])
    except (ValueError, rp.ContractError) as E:
        errormsg = f"Checkpoint {path} line 1: invalid architecture ({E})"
        raise rp.FormatError(errormsg) from E

    values = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            values.append(float(line))
        except ValueError as E:
            errormsg = f"Checkpoint {path} line {lineno}: not a float ({line!r})"
            raise rp.FormatError(errormsg) from E
    if len(values) != spec.n_params:
        errormsg = f"Checkpoint {path} has {len(values)} parameters, but the header implies {spec.n_params}"
        raise rp.FormatError(errormsg)
    return Model(spec, np.array(values))
