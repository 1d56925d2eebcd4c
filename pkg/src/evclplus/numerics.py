"""Dense float64 kernels and deterministic seeded randomness.

Everything downstream (network, losses, benchmark loop) builds on the
primitives here, so they are deliberately small: matrix multiply with shape
checking, a reproducible normal sampler, and numerically stable softmax
pieces.
"""

import numpy as np

Array = np.ndarray


class SeededRng:
    """Deterministic random stream: same seed, same sequence, any machine.

    Backed by numpy's Philox 4x64 counter-based bit generator.  Normal
    variates come from the generator's ziggurat sampler, which is fixed for
    a given numpy release; pin numpy to keep streams bit-identical across
    platforms.  ``spawn()`` derives an independent child stream and is
    itself deterministic as long as spawn calls happen in a fixed order.
    """

    def __init__(self, seed: int, _seq=None):
        self.seed = int(seed)
        self._seq = np.random.SeedSequence(self.seed) if _seq is None else _seq
        self._gen = np.random.Generator(np.random.Philox(self._seq))

    def spawn(self) -> "SeededRng":
        """Derive an independent child stream (call order defines it)."""
        child = self._seq.spawn(1)[0]
        return SeededRng(self.seed, _seq=child)

    def standard_normal(self, shape) -> Array:
        return self._gen.standard_normal(shape)

    def permutation(self, n: int) -> Array:
        return self._gen.permutation(n)

    def integers(self, low, high=None, size=None) -> Array:
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int, size: int, replace: bool) -> Array:
        return self._gen.choice(n, size=size, replace=replace)

    def uniform(self, low=0.0, high=1.0, size=None) -> Array:
        return self._gen.uniform(low, high, size)


def sample_standard_normal(rng: SeededRng, n: int) -> Array:
    """n iid N(0,1) draws as a vector, advancing the rng state."""
    if n < 0:
        raise ValueError(f"sample count must be >= 0, got {n}")
    return rng.standard_normal(n)


def gemm(a: Array, b: Array) -> Array:
    """Matrix product of two 2-D arrays with an explicit shape check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"gemm expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"gemm shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def log_softmax(logits: Array) -> Array:
    """Log of softmax along the last axis, stable under large logits.

    Shift-invariant: log_softmax(v + c) == log_softmax(v).
    """
    v = np.asarray(logits, dtype=np.float64)
    if v.size == 0:
        raise ValueError("log_softmax of empty input")
    shifted = v - v.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: Array) -> Array:
    return np.exp(log_softmax(logits))


def cross_entropy_with_grad(logits: Array, label: int):
    """Negative log-likelihood of `label` plus its gradient in the logits.

    loss = -log_softmax(logits)[label]; dlogits = softmax(logits) - onehot.
    """
    v = np.asarray(logits, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("cross_entropy_with_grad expects a logits vector")
    if not 0 <= label < v.shape[0]:
        raise ValueError(f"label {label} out of range for {v.shape[0]} classes")
    ls = log_softmax(v)
    loss = -ls[label]
    dlogits = np.exp(ls)
    dlogits[label] -= 1.0
    return loss, dlogits


def batch_cross_entropy_with_grad(logits: Array, labels: Array):
    """Mean cross-entropy over rows; gradient already divided by batch size."""
    v = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if v.ndim != 2 or labels.shape != (v.shape[0],):
        raise ValueError(f"bad batch shapes: logits {v.shape}, labels {labels.shape}")
    n = v.shape[0]
    ls = log_softmax(v)
    loss = float(-ls[np.arange(n), labels].mean())
    dlogits = np.exp(ls)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def relu(x: Array) -> Array:
    return np.maximum(x, 0.0)
