"""The three classifier architectures used as attack targets and
black-box substitutes, at full width or desk-scaled (filters / 4,
dense widths / 2) for fast CPU runs."""

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Adam,
    Conv2d,
    Dense,
    Dropout,
    Flatten,
    ReLU,
    Sequential,
    Softmax,
    Tensor,
    grad,
    log_softmax,
    mul,
    no_grad,
    tsum,
)


@dataclass
class ClassifierSpec:
    architecture: str  # A, B, or C
    input_shape: tuple = (1, 28, 28)
    n_classes: int = 10
    scale: str = "desk"  # desk (reduced width) or full

    def __post_init__(self):
        if self.architecture not in ("A", "B", "C"):
            raise ValueError(f"unknown architecture '{self.architecture}'")
        if self.scale not in ("desk", "full"):
            raise ValueError(f"unknown scale '{self.scale}'")


class Classifier:
    """Feature stack producing logits, plus a softmax output layer."""

    def __init__(self, spec, features, seed):
        self.spec = spec
        self.features = features
        self.softmax = Softmax()
        self.seed = seed

    def params(self):
        return self.features.params()

    def logits(self, x, train=False, rng=None):
        x = x if isinstance(x, Tensor) else Tensor(x)
        return self.features(x, train=train, rng=rng)

    def __call__(self, x, train=False, rng=None):
        return self.softmax(self.logits(x, train=train, rng=rng))

    def predict(self, x, batch_size=512):
        x = np.asarray(x, dtype=np.float64)
        out = []
        with no_grad():
            for s in range(0, len(x), batch_size):
                out.append(np.argmax(self.logits(Tensor(x[s : s + batch_size])).data, axis=1))
        return np.concatenate(out)


def build_classifier(spec, seed=0):
    rng = np.random.default_rng(seed)
    c, h, w = spec.input_shape
    desk = spec.scale == "desk"
    fdiv, ddiv = (4, 2) if desk else (1, 1)
    a = spec.architecture

    if a == "A":
        f, fc = 64 // fdiv, 128 // ddiv
        layers = [
            Conv2d(c, f, 5, 1, rng=rng, name="A_c1"), ReLU(),
            Conv2d(f, f, 5, 2, rng=rng, name="A_c2"), ReLU(),
            Dropout(0.25), Flatten(),
            Dense(f * (h // 2) * (w // 2), fc, rng=rng, name="A_fc1"), ReLU(),
            Dropout(0.5),
            Dense(fc, spec.n_classes, rng=rng, name="A_out"),
        ]
    elif a == "B":
        f1, f2 = 64 // fdiv, 128 // fdiv
        layers = [
            Dropout(0.2),
            Conv2d(c, f1, 8, 2, rng=rng, name="B_c1"), ReLU(),
            Conv2d(f1, f2, 6, 2, rng=rng, name="B_c2"), ReLU(),
            Conv2d(f2, f2, 5, 1, rng=rng, name="B_c3"), ReLU(),
            Dropout(0.5), Flatten(),
            Dense(f2 * (h // 4) * (w // 4), spec.n_classes, rng=rng, name="B_out"),
        ]
    else:  # C
        fc = 200 // ddiv
        d = c * h * w
        layers = [
            Flatten(),
            Dense(d, fc, rng=rng, name="C_fc1"), ReLU(),
            Dropout(0.5),
            Dense(fc, fc, rng=rng, name="C_fc2"), ReLU(),
            Dense(fc, spec.n_classes, rng=rng, name="C_out"),
        ]
    return Classifier(spec, Sequential(layers), seed)


def cross_entropy(logits, labels):
    """Mean cross-entropy from logits against integer labels."""
    n = logits.shape[0]
    lsm = log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(n), np.asarray(labels)] = 1.0
    return -tsum(mul(lsm, Tensor(onehot))) * (1.0 / n)


def train_classifier(model, dataset, epochs=10, lr=1e-3, batch_size=128, seed=0,
                     log_every=0):
    """Adam + cross-entropy; returns the model and per-epoch accuracy."""
    if len(dataset) == 0:
        raise ValueError("empty training dataset")
    rng = np.random.default_rng(seed)
    opt = Adam(model.params(), lr=lr, beta1=0.9, beta2=0.99)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        correct = 0
        for s in range(0, len(dataset), batch_size):
            idx = order[s : s + batch_size]
            xb = Tensor(dataset.images[idx])
            yb = dataset.labels[idx]
            logits = model.logits(xb, train=True, rng=rng)
            loss = cross_entropy(logits, yb)
            grads = grad(loss, model.params())
            opt.step(grads)
            correct += int((np.argmax(logits.data, axis=1) == yb).sum())
        history.append({"epoch": epoch, "train_accuracy": correct / len(dataset)})
        if log_every and (epoch + 1) % log_every == 0:
            print(f"epoch {epoch + 1}/{epochs}  acc={history[-1]['train_accuracy']:.4f}")
    return model, history


def evaluate_accuracy(model, dataset, preprocess=None, batch_size=512):
    """Argmax accuracy, optionally after a defense preprocessing pass."""
    images = dataset.images
    if preprocess is not None:
        images = preprocess(images)
    preds = model.predict(images, batch_size=batch_size)
    return float((preds == dataset.labels).mean())
