"""Differentiable classifier abstraction and small reference architectures.

A :class:`Classifier` exposes a differentiable ``probs`` mapping from inputs
to class probabilities. :class:`TorchClassifier` wraps a torch module that
produces logits; subclasses may override ``probs`` directly for models whose
outputs are already probabilities (useful in tests and tabular settings).

Two architectures are provided: ``small-cnn`` (two conv blocks of 16 and 32
channels plus one 128-unit hidden dense layer) and ``resnet18-class`` (a
standard residual network with a 3x3 stem sized for 32x32 inputs).
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, DivergenceError, NumericalError

PROB_FLOOR = 1e-12

ARCHITECTURES = ("small-cnn", "resnet18-class")

# Running tally of numerical interventions (e.g. probability floor clamps in
# the cross-entropy). Inspect/reset via the helpers below.
_COUNTERS = {"prob_floor_clamps": 0}


def numerics_counters():
    return dict(_COUNTERS)


def reset_numerics_counters():
    for key in _COUNTERS:
        _COUNTERS[key] = 0


@dataclass
class LabeledBatch:
    """Inputs in [0, 1] paired with integer class labels.

    ``inputs`` is float, shape (n, channels, height, width) for images or
    (n, d) for tabular data. ``labels`` is int64, shape (n,).
    """

    inputs: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self):
        if not torch.is_tensor(self.inputs):
            self.inputs = torch.as_tensor(np.asarray(self.inputs), dtype=torch.float32)
        if not torch.is_tensor(self.labels):
            self.labels = torch.as_tensor(np.asarray(self.labels), dtype=torch.int64)
        if self.labels.dtype != torch.int64:
            self.labels = self.labels.to(torch.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ConfigurationError(
                f"inputs ({self.inputs.shape[0]}) and labels ({self.labels.shape[0]}) disagree on n"
            )
        with torch.no_grad():
            lo = float(self.inputs.min()) if self.inputs.numel() else 0.0
            hi = float(self.inputs.max()) if self.inputs.numel() else 0.0
        if lo < -1e-6 or hi > 1.0 + 1e-6:
            raise ConfigurationError(f"input values outside [0,1]: min={lo:g} max={hi:g}")

    def __len__(self):
        return int(self.inputs.shape[0])

    def subset(self, idx) -> "LabeledBatch":
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.int64)
        return LabeledBatch(self.inputs[idx], self.labels[idx])


def iter_batches(data: LabeledBatch, batch_size: int, shuffle=False, rng=None):
    """Yield mini-batches in a reproducible order.

    With ``shuffle=True`` the permutation is drawn from ``rng`` (a numpy
    Generator), so a fixed seed gives a fixed batch order.
    """
    n = len(data)
    if shuffle:
        if rng is None:
            rng = np.random.default_rng(0)
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        yield data.subset(order[start : start + batch_size])


class Classifier:
    """Minimal differentiable classifier interface.

    Subclasses implement ``probs``: a differentiable map from an input tensor
    to per-class probabilities (rows non-negative, summing to 1).
    """

    architecture = "custom"

    def __init__(self, num_classes: int, input_shape):
        if num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        self.num_classes = int(num_classes)
        self.input_shape = tuple(int(s) for s in input_shape)

    def probs(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def parameters(self):
        return []

    def train_mode(self):
        pass

    def eval_mode(self):
        pass

    def is_training(self) -> bool:
        return False


class TorchClassifier(Classifier):
    """Classifier backed by a torch module that outputs logits."""

    def __init__(self, net: nn.Module, architecture: str, num_classes: int, input_shape):
        super().__init__(num_classes, input_shape)
        self.architecture = architecture
        self.net = net
        self.net.eval()

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    def probs(self, x: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.logits(x), dim=1)

    def parameters(self):
        return list(self.net.parameters())

    def train_mode(self):
        self.net.train()

    def eval_mode(self):
        self.net.eval()

    def is_training(self) -> bool:
        return self.net.training

    def state_arrays(self):
        """Parameter/buffer arrays keyed by state-dict name (numpy copies)."""
        return {k: v.detach().cpu().numpy().copy() for k, v in self.net.state_dict().items()}

    def load_state_arrays(self, arrays):
        state = {k: torch.as_tensor(v) for k, v in arrays.items()}
        self.net.load_state_dict(state)


class _SmallCNN(nn.Module):
    def __init__(self, num_classes, in_channels, height, width):
        super().__init__()
        if height % 4 or width % 4:
            raise ConfigurationError("small-cnn needs height/width divisible by 4")
        self.conv1 = nn.Conv2d(in_channels, 16, 3, padding=1)
        self.conv2 = nn.Conv2d(16, 32, 3, padding=1)
        self.pool = nn.MaxPool2d(2)
        self.fc1 = nn.Linear(32 * (height // 4) * (width // 4), 128)
        self.fc2 = nn.Linear(128, num_classes)

    def forward(self, x):
        x = self.pool(F.relu(self.conv1(x)))
        x = self.pool(F.relu(self.conv2(x)))
        x = torch.flatten(x, 1)
        x = F.relu(self.fc1(x))
        return self.fc2(x)


class _BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class _ResNet18(nn.Module):
    """ResNet-18 with a 3x3 stem, sized for small (e.g. 32x32) images."""

    def __init__(self, num_classes, in_channels):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, 64, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(64)
        self.layer1 = self._stage(64, 64, 1)
        self.layer2 = self._stage(64, 128, 2)
        self.layer3 = self._stage(128, 256, 2)
        self.layer4 = self._stage(256, 512, 2)
        self.avgpool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(512, num_classes)

    @staticmethod
    def _stage(in_ch, out_ch, stride):
        return nn.Sequential(_BasicBlock(in_ch, out_ch, stride), _BasicBlock(out_ch, out_ch))

    def forward(self, x):
        x = F.relu(self.bn1(self.conv1(x)))
        x = self.layer4(self.layer3(self.layer2(self.layer1(x))))
        x = torch.flatten(self.avgpool(x), 1)
        return self.fc(x)


def create_model(architecture: str, num_classes: int, input_shape, seed: int = 0) -> TorchClassifier:
    """Build one of the named architectures with seeded initialization."""
    input_shape = tuple(int(s) for s in input_shape)
    if len(input_shape) != 3:
        raise ConfigurationError(f"expected (channels, height, width), got {input_shape}")
    c, h, w = input_shape
    torch.manual_seed(seed)
    if architecture == "small-cnn":
        net = _SmallCNN(num_classes, c, h, w)
    elif architecture == "resnet18-class":
        net = _ResNet18(num_classes, c)
    else:
        raise ConfigurationError(f"unknown architecture {architecture!r}; choose from {ARCHITECTURES}")
    return TorchClassifier(net, architecture, num_classes, input_shape)


def _check_batch_shape(model: Classifier, batch: LabeledBatch):
    if tuple(batch.inputs.shape[1:]) != model.input_shape:
        raise ConfigurationError(
            f"batch shape {tuple(batch.inputs.shape[1:])} does not match model input shape {model.input_shape}"
        )


@contextmanager
def eval_scope(model: Classifier):
    """Run the body in evaluation mode, restoring the previous mode after."""
    was_training = model.is_training()
    model.eval_mode()
    try:
        yield
    finally:
        if was_training:
            model.train_mode()


def forward(model: Classifier, batch: LabeledBatch) -> torch.Tensor:
    """Class probabilities for a batch, shape (n, k). Evaluation mode, no grad."""
    _check_batch_shape(model, batch)
    with eval_scope(model), torch.no_grad():
        probs = model.probs(batch.inputs)
    if probs.shape != (len(batch), model.num_classes):
        raise ConfigurationError(f"model produced shape {tuple(probs.shape)}")
    if not torch.isfinite(probs).all():
        raise NumericalError("non-finite probabilities in forward pass")
    return probs


def _cross_entropy(model: Classifier, inputs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    probs = model.probs(inputs)
    picked = probs[torch.arange(probs.shape[0]), labels]
    with torch.no_grad():
        clamped = int((picked < PROB_FLOOR).sum())
    if clamped:
        _COUNTERS["prob_floor_clamps"] += clamped
    return -torch.log(picked.clamp_min(PROB_FLOOR)).mean()


def task_loss(model: Classifier, batch: LabeledBatch) -> torch.Tensor:
    """Mean cross-entropy -(1/n) sum_i log p(y_i | x_i).

    Predicted probabilities are floored at ``PROB_FLOOR`` before the log;
    each clamp increments the ``prob_floor_clamps`` numerics counter.
    """
    if batch.labels.numel() and (batch.labels.min() < 0 or batch.labels.max() >= model.num_classes):
        raise ConfigurationError("labels outside [0, num_classes)")
    return _cross_entropy(model, batch.inputs, batch.labels)


def input_gradient(model: Classifier, batch: LabeledBatch) -> torch.Tensor:
    """Gradient of the task loss with respect to each input element.

    Returned detached, same shape as ``batch.inputs``. At kinks (ReLU, max
    pooling) autograd's subgradient is returned.
    """
    _check_batch_shape(model, batch)
    with eval_scope(model):
        x = batch.inputs.detach().clone().requires_grad_(True)
        loss = _cross_entropy(model, x, batch.labels)
        (grad,) = torch.autograd.grad(loss, x)
    if not torch.isfinite(grad).all():
        raise NumericalError("non-finite input gradient")
    return grad.detach()


@dataclass
class OptimizerConfig:
    name: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 64

    def build(self, params):
        if self.name == "adam":
            return torch.optim.Adam(params, lr=self.lr, weight_decay=self.weight_decay)
        if self.name == "sgd":
            return torch.optim.SGD(
                params, lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay
            )
        raise ConfigurationError(f"unknown optimizer {self.name!r}")

    def to_dict(self):
        return {
            "name": self.name,
            "lr": self.lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
        }


@dataclass
class TrainingStats:
    """Per-epoch mean loss and end-of-epoch training accuracy."""

    losses: list = field(default_factory=list)
    accuracies: list = field(default_factory=list)


def _train_accuracy(model: Classifier, data: LabeledBatch, batch_size=512) -> float:
    correct = 0
    for chunk in iter_batches(data, batch_size):
        probs = forward(model, chunk)
        correct += int((probs.argmax(dim=1) == chunk.labels).sum())
    return correct / len(data)


def train_epochs(
    model: Classifier,
    data: LabeledBatch,
    loss_fn=None,
    optimizer_config: OptimizerConfig | None = None,
    epochs: int = 1,
    seed: int = 0,
) -> TrainingStats:
    """Train in place for ``epochs`` passes over ``data``.

    ``loss_fn(model, batch)`` must return a finite scalar; it defaults to
    ``task_loss``. A fixed seed fixes the shuffling order, so identical
    (seed, config, data) produce an identical parameter trajectory on the
    same platform. A non-finite loss aborts with :class:`DivergenceError`.
    """
    if epochs < 1:
        raise ConfigurationError("epochs must be >= 1")
    if loss_fn is None:
        loss_fn = task_loss
    if optimizer_config is None:
        optimizer_config = OptimizerConfig()
    params = model.parameters()
    if not params:
        raise ConfigurationError("model has no trainable parameters")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    opt = optimizer_config.build(params)
    stats = TrainingStats()
    for epoch in range(epochs):
        model.train_mode()
        losses = []
        for batch in iter_batches(data, optimizer_config.batch_size, shuffle=True, rng=rng):
            opt.zero_grad()
            loss = loss_fn(model, batch)
            if not torch.isfinite(loss):
                raise DivergenceError(f"loss diverged at epoch {epoch}", epoch=epoch)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        for p in params:
            if not torch.isfinite(p).all():
                raise DivergenceError(f"non-finite parameters at epoch {epoch}", epoch=epoch)
        stats.losses.append(float(np.mean(losses)))
        stats.accuracies.append(_train_accuracy(model, data))
    model.eval_mode()
    return stats
