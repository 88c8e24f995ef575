"""Minimal dense feed-forward network engine with exact reverse-mode gradients.

All receiver sub-networks (channel estimators, activity/data detectors) are
instances of one MLP shape: affine layers with ReLU hidden activations and an
identity or sigmoid output. Parameters may be a single module (2-D weight
matrices) or a stack of independently parameterized modules (3-D weights with
a leading module axis); forward/backward/Adam treat both uniformly, which is
what makes per-device module evaluation one batched matmul.

Training runs in double precision. Cross-entropy consumers clamp
probabilities to [PROB_FLOOR, 1 - PROB_FLOOR] before taking logs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import seeding

ACT_IDENTITY = "identity"
ACT_SIGMOID = "sigmoid"

PROB_FLOOR = 1e-12
_SIGMOID_LO = 1e-300
_SIGMOID_HI = float(np.nextafter(1.0, 0.0))


def _tune_allocator() -> None:
    # glibc serves the multi-MB activation temporaries of the stage loop via
    # mmap and unmaps them on free, so every training step page-faults the
    # same buffers back in. Routing large blocks through the brk arena and
    # disabling trim lets them recycle (~7x on the training loop). No-op on
    # platforms without glibc mallopt.
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-4, 0)           # M_MMAP_MAX = 0
        libc.mallopt(-1, 2 ** 31 - 1)  # M_TRIM_THRESHOLD: keep the arena
    except (OSError, AttributeError):
        pass


_tune_allocator()


@dataclass(frozen=True)
class MlpSpec:
    """Layer sizes (input, hidden..., output) and the output activation."""

    layer_sizes: tuple[int, ...]
    output_activation: str = ACT_IDENTITY

    def __post_init__(self) -> None:
        if len(self.layer_sizes) < 3:
            raise ValueError("need at least one hidden layer")
        if any(s < 1 for s in self.layer_sizes):
            raise ValueError("all layer sizes must be >= 1")
        if self.output_activation not in (ACT_IDENTITY, ACT_SIGMOID):
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1


@dataclass
class MlpParams:
    """Weights/biases per layer. 2-D weights = one module; 3-D = module stack."""

    spec: MlpSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def stacked(self) -> bool:
        return self.weights[0].ndim == 3

    @property
    def n_modules(self) -> int:
        return self.weights[0].shape[0] if self.stacked else 1

    def tensors(self) -> list[np.ndarray]:
        """All parameter arrays, layer-major, weight before bias."""
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


@dataclass
class MlpGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def tensors(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic, clipped to the open interval (0, 1)."""
    z = np.asarray(z)
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return np.clip(out, _SIGMOID_LO, _SIGMOID_HI)


def _draw_layer(rng: np.random.Generator, fan_in: int, fan_out: int,
                last: bool) -> np.ndarray:
    # He-uniform for ReLU layers, Glorot-uniform for the output layer. Values
    # are snapped to float32 resolution (storage kept float64) so that a
    # freshly initialized model and its checkpoint round trip coincide.
    bound = np.sqrt(6.0 / (fan_in + fan_out)) if last else np.sqrt(6.0 / fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    return w.astype(np.float32).astype(np.float64)


def _init_from_rng(spec: MlpSpec, rng: np.random.Generator) -> tuple[list, list]:
    weights, biases = [], []
    sizes = spec.layer_sizes
    for layer in range(spec.n_layers):
        last = layer == spec.n_layers - 1
        weights.append(_draw_layer(rng, sizes[layer], sizes[layer + 1], last))
        biases.append(np.zeros(sizes[layer + 1]))
    return weights, biases


def init_mlp(spec: MlpSpec, seed: int) -> MlpParams:
    """Initialize one module: He-uniform hidden weights, Glorot-uniform output, zero biases."""
    rng = seeding.substream(seed, seeding.INIT)
    weights, biases = _init_from_rng(spec, rng)
    return MlpParams(spec=spec, weights=weights, biases=biases)


def init_mlp_stack(spec: MlpSpec, n_modules: int, seed: int,
                   path: tuple[int, ...] = ()) -> MlpParams:
    """Initialize ``n_modules`` independent modules stacked along axis 0.

    Module ``m`` draws from substream (seed, INIT, *path, m), so its values do
    not depend on the stack size or on sibling modules.
    """
    if n_modules < 1:
        raise ValueError("n_modules >= 1 required")
    per_module = [_init_from_rng(spec, seeding.substream(seed, seeding.INIT, *path, m))
                  for m in range(n_modules)]
    weights = [np.stack([pm[0][layer] for pm in per_module])
               for layer in range(spec.n_layers)]
    biases = [np.stack([pm[1][layer] for pm in per_module])
              for layer in range(spec.n_layers)]
    return MlpParams(spec=spec, weights=weights, biases=biases)


@dataclass
class MlpCache:
    params: MlpParams
    activations: list[np.ndarray]  # [input, hidden outputs..., final output]
    squeezed: bool


def forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, MlpCache]:
    """Evaluate the network.

    ``x`` is [..., n_in]; a bare vector is promoted to a single-row batch.
    Stacked parameters require a leading module axis on ``x`` ([M, B, n_in]).
    """
    x = np.asarray(x, dtype=np.float64)
    squeezed = x.ndim == 1
    if squeezed:
        x = x[None, :]
    if x.shape[-1] != params.spec.layer_sizes[0]:
        raise ValueError(f"input size {x.shape[-1]} != spec input "
                         f"{params.spec.layer_sizes[0]}")
    if params.stacked and x.ndim < 3:
        raise ValueError("stacked parameters need input shaped [n_modules, batch, n_in]")
    if not np.isfinite(x).all():
        raise ValueError("non-finite network input")

    acts = [x]
    h = x
    n = params.spec.n_layers
    for layer, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = np.matmul(h, w) + b[..., None, :]
        if layer < n - 1:
            h = np.maximum(z, 0.0)
        elif params.spec.output_activation == ACT_SIGMOID:
            h = sigmoid(z)
        else:
            h = z
        acts.append(h)
    out = acts[-1][0] if squeezed else acts[-1]
    return out, MlpCache(params=params, activations=acts, squeezed=squeezed)


def backward(cache: MlpCache, grad_output: np.ndarray) -> tuple[MlpGrads, np.ndarray]:
    """Exact gradients of sum(output * grad_output) w.r.t. parameters and input."""
    params = cache.params
    acts = cache.activations
    g = np.asarray(grad_output, dtype=np.float64)
    if cache.squeezed:
        g = g[None, :]
    if g.shape != acts[-1].shape:
        raise ValueError(f"grad_output shape {g.shape} != output shape {acts[-1].shape}")

    if params.spec.output_activation == ACT_SIGMOID:
        p = acts[-1]
        g = g * p * (1.0 - p)

    grad_w: list[np.ndarray] = [None] * params.spec.n_layers  # type: ignore[list-item]
    grad_b: list[np.ndarray] = [None] * params.spec.n_layers  # type: ignore[list-item]
    grad_in: np.ndarray | None = None
    for layer in range(params.spec.n_layers - 1, -1, -1):
        x = acts[layer]
        w = params.weights[layer]
        gw = np.matmul(x.swapaxes(-1, -2), g)
        gb = g.sum(axis=-2)
        if params.stacked and w.shape[0] == 1 and gw.shape[0] != 1:
            # broadcast (tied) modules: reduce over the module axis
            gw = gw.sum(axis=0, keepdims=True)
            gb = gb.sum(axis=0, keepdims=True)
        grad_w[layer] = gw
        grad_b[layer] = gb
        g_prev = np.matmul(g, w.swapaxes(-1, -2))
        if layer > 0:
            g = g_prev * (acts[layer] > 0.0)
        else:
            grad_in = g_prev
    assert grad_in is not None
    if cache.squeezed:
        grad_in = grad_in[0]
    return MlpGrads(weights=grad_w, biases=grad_b), grad_in


@dataclass
class AdamState:
    """First/second-moment accumulators, one pair per parameter tensor."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def init_adam(params: MlpParams, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps_adam: float = 1e-8) -> AdamState:
    tensors = params.tensors()
    return AdamState(lr=lr, beta1=beta1, beta2=beta2, eps_adam=eps_adam, step=0,
                     m=[np.zeros_like(t) for t in tensors],
                     v=[np.zeros_like(t) for t in tensors])


def adam_step(params: MlpParams, grads: MlpGrads, state: AdamState
              ) -> tuple[MlpParams, AdamState]:
    """One Adam update with bias correction; mutates params/state in place."""
    p_tensors = params.tensors()
    g_tensors = grads.tensors()
    if len(p_tensors) != len(state.m):
        raise ValueError("optimizer state does not match the parameter layout")
    for g in g_tensors:
        if not np.isfinite(g).all():
            raise FloatingPointError("non-finite gradient; aborting training")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(p_tensors, g_tensors, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps_adam)
    return params, state


def clamp_probs(p: np.ndarray) -> np.ndarray:
    return np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)


def bce(p: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Elementwise binary cross-entropy with the probability clamp applied."""
    pc = clamp_probs(p)
    return -(labels * np.log(pc) + (1.0 - labels) * np.log1p(-pc))


def bce_grad(p: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(bce)/dp evaluated at the clamped probability."""
    pc = clamp_probs(p)
    return (pc - labels) / (pc * (1.0 - pc))
