import numpy as np
import pytest
import torch

import limeguard as lg


class ConstantModel(lg.Classifier):
    """Outputs a fixed probability vector regardless of the input."""

    def __init__(self, probs_row, input_shape):
        super().__init__(len(probs_row), input_shape)
        self.row = torch.as_tensor(np.asarray(probs_row, dtype=np.float32))

    def probs(self, x):
        # keep the graph connected to x so gradient calls return exact zeros
        pad = (x.reshape(x.shape[0], -1) * 0.0).sum(dim=1, keepdim=True)
        return self.row[None, :].expand(x.shape[0], -1) + pad


class LinearProbModel(lg.Classifier):
    """Two-class model whose class-0 probability is literally w . x."""

    def __init__(self, w):
        w = np.asarray(w, dtype=np.float32)
        super().__init__(2, (len(w),))
        self.w = torch.as_tensor(w)

    def probs(self, x):
        p = x @ self.w
        return torch.stack([p, 1.0 - p], dim=1)


class FixedClassModel(lg.Classifier):
    """Always predicts class ``c`` with probability ~1."""

    def __init__(self, c, num_classes, input_shape):
        super().__init__(num_classes, input_shape)
        row = np.full(num_classes, 1e-6, dtype=np.float32)
        row[c] = 1.0 - 1e-6 * (num_classes - 1)
        self.row = torch.as_tensor(row)

    def probs(self, x):
        pad = (x.reshape(x.shape[0], -1) * 0.0).sum(dim=1, keepdim=True)
        return self.row[None, :].expand(x.shape[0], -1) + pad


class SegmentIndicatorModel(lg.Classifier):
    """Gives one extra logit to class 1 when a target segment is 'present'.

    Presence is read as the mean value over the segment's pixels exceeding
    half its value on the reference input (so a zero baseline removes it).
    """

    def __init__(self, seg: lg.Segmentation, target: int, reference, input_shape):
        super().__init__(2, input_shape)
        ref = torch.as_tensor(np.asarray(reference, dtype=np.float32))
        mask = torch.as_tensor(
            np.broadcast_to(seg.member_mask(target), ref.shape).copy()
        ).float()
        self.mask = mask
        self.half_level = float((ref * mask).sum() / mask.sum()) / 2.0

    def probs(self, x):
        level = (x * self.mask).sum(dim=tuple(range(1, x.ndim))) / self.mask.sum()
        logit1 = (level > self.half_level).float()
        logits = torch.stack([torch.zeros_like(logit1), logit1], dim=1)
        return torch.softmax(logits, dim=1)


def make_batch(n=8, shape=(3, 16, 16), k=4, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.random((n, *shape)).astype(np.float32)
    y = rng.integers(0, k, n)
    return lg.LabeledBatch(x, y)


def make_toy_separable(n=600, margin=0.08, seed=0):
    rng = np.random.default_rng(seed)
    xs = []
    while len(xs) < n:
        p = rng.random(2)
        if abs(p[0] - p[1]) > margin:
            xs.append(p)
    xs = np.array(xs, dtype=np.float32)
    ys = (xs[:, 0] > xs[:, 1]).astype(np.int64)
    return lg.LabeledBatch(xs, ys)


def make_mlp_classifier(seed=1, hidden=16):
    torch.manual_seed(seed)
    net = torch.nn.Sequential(torch.nn.Linear(2, hidden), torch.nn.ReLU(), torch.nn.Linear(hidden, 2))
    return lg.TorchClassifier(net, "custom", 2, (2,))


@pytest.fixture(scope="session")
def small_model():
    return lg.create_model("small-cnn", 4, (3, 16, 16), seed=0)


@pytest.fixture(scope="session")
def image_batch():
    return make_batch()


@pytest.fixture(scope="session")
def trained_synthetic(tmp_path_factory):
    """Small trained model on planted-watermark data, shared across tests."""
    spec = lg.SyntheticSpuriousSpec(
        image_size=16, cell_size=4, num_classes=4, n_train=1500, n_test=500, n_ood=500,
        noise_level=0.5, signal_blend=0.35, seed=5,
    )
    ds = lg.generate_synthetic_spurious(spec)
    model = lg.create_model("small-cnn", spec.num_classes, (3, 16, 16), seed=5)
    lg.train_epochs(model, ds.train, epochs=4, seed=5)
    return spec, ds, model
