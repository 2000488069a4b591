"""Small numpy MLP substrate: dense layers, Adam, softmax and KL.

Everything here works on float64 arrays.  Networks cache the activations of
their last ``forward`` call so that ``backward`` can be called afterwards with
the upstream gradient, the same way hand-rolled backprop modules usually do.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KL_FLOOR = 1e-6
ACTIVATIONS = ("relu", "identity")


class ShapeError(ValueError):
    """Raised when an array does not have the dimensions an operation expects."""

    def __init__(self, what: str, expected, actual):
        super().__init__(f"{what}: expected {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


class DistributionError(ValueError):
    pass


@dataclass
class Dense:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weight.ndim != 2 or self.weight.shape[1] != self.bias.shape[0]:
            raise ShapeError("dense layer bias", (self.weight.shape[1],), self.bias.shape)

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]


class Mlp:
    """Stack of dense layers.

    >>> net = Mlp.build([2, 2], rng=np.random.default_rng(0), zero=True)
    >>> net.forward([1.0, 1.0]).tolist()
    [0.0, 0.0]
    """

    def __init__(self, layers: list[Dense]):
        if not layers:
            raise ValueError("an Mlp needs at least one layer")
        for i in range(len(layers) - 1):
            if layers[i].fan_out != layers[i + 1].fan_in:
                raise ShapeError(f"layer {i + 1} input", layers[i].fan_out, layers[i + 1].fan_in)
        self.layers = layers
        self._cache: list[np.ndarray] | None = None

    @classmethod
    def build(cls, sizes, rng: np.random.Generator, hidden="relu", output="identity",
              zero: bool = False) -> "Mlp":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation from ``rng``."""
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            act = output if i == len(sizes) - 2 else hidden
            if zero:
                w = np.zeros((n_in, n_out))
                b = np.zeros(n_out)
            else:
                bound = 1.0 / np.sqrt(n_in)
                w = rng.uniform(-bound, bound, size=(n_in, n_out))
                b = rng.uniform(-bound, bound, size=n_out)
            layers.append(Dense(w, b, act))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def output_dim(self) -> int:
        return self.layers[-1].fan_out

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim] + [layer.fan_out for layer in self.layers]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def set_params(self, values) -> None:
        values = list(values)
        for i, layer in enumerate(self.layers):
            w, b = values[2 * i], values[2 * i + 1]
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise ShapeError(f"layer {i} parameters", layer.weight.shape, w.shape)
            layer.weight = np.array(w, dtype=np.float64)
            layer.bias = np.array(b, dtype=np.float64)

    def copy(self) -> "Mlp":
        return Mlp([Dense(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[-1] != self.input_dim:
            raise ShapeError("network input", self.input_dim, x.shape[-1])
        if not np.all(np.isfinite(x)):
            raise ValueError("network input contains non-finite values")
        cache = [x]
        h = x
        for layer in self.layers:
            h = h @ layer.weight + layer.bias
            if layer.activation == "relu":
                h = np.maximum(h, 0.0)
            cache.append(h)
        self._cache = cache
        self._single = single
        return h[0] if single else h

    def backward(self, upstream) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients of the last forward pass.

        Returns ``(param_grads, input_grad)`` where ``param_grads`` is ordered
        like :meth:`params`.
        """
        if self._cache is None:
            raise RuntimeError("backward called without a cached forward pass")
        g = np.asarray(upstream, dtype=np.float64)
        if self._single:
            g = g.reshape(1, -1)
        out = self._cache[-1]
        if g.shape != out.shape:
            raise ShapeError("upstream gradient", out.shape, g.shape)
        grads: list[np.ndarray] = [None] * (2 * len(self.layers))
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if layer.activation == "relu":
                g = g * (self._cache[i + 1] > 0.0)
            inp = self._cache[i]
            grads[2 * i] = inp.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ layer.weight.T
        return grads, (g[0] if self._single else g)


def forward(net: Mlp, x) -> np.ndarray:
    return net.forward(x)


def backward(net: Mlp, upstream):
    return net.backward(upstream)


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax of non-finite logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. logits given dL/dprobs (works row-wise)."""
    inner = (grad_probs * probs).sum(axis=-1, keepdims=True)
    return probs * (grad_probs - inner)


def floor_distribution(p, floor: float = KL_FLOOR) -> np.ndarray:
    p = np.maximum(np.asarray(p, dtype=np.float64), floor)
    return p / p.sum(axis=-1, keepdims=True)


def _check_distribution(p: np.ndarray, name: str) -> None:
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise DistributionError(f"{name} has negative or non-finite entries")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-9):
        raise DistributionError(f"{name} does not sum to 1")


def kl_divergence(p, q, floor: float | None = KL_FLOOR) -> tuple[float, np.ndarray]:
    """KL(p || q) and its gradient with respect to ``q``.

    Both arguments are clamped to ``floor`` and renormalised first; the
    returned gradient is taken through that clamp/renormalise step so that it
    is exact for the value returned.  With ``floor=None`` no flooring happens
    and a zero in ``q`` where ``p`` has mass is an error.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ShapeError("kl_divergence operands", p.shape, q.shape)
    _check_distribution(p, "p")
    _check_distribution(q, "q")
    if floor is None:
        if np.any((q == 0) & (p > 0)):
            raise DistributionError("q has a zero entry where p has mass; floor it first")
        mask = p > 0
        value = float(np.sum(p[mask] * np.log(p[mask] / q[mask])))
        grad = np.zeros_like(q)
        grad[mask] = -p[mask] / q[mask]
        return max(value, 0.0), grad
    pf = floor_distribution(p, floor)
    qc = np.maximum(q, floor)
    total = qc.sum()
    qf = qc / total
    if np.array_equal(pf, qf):
        return 0.0, _kl_grad(pf, qf, qc, q, total, floor)
    value = float(np.sum(pf * (np.log(pf) - np.log(qf))))
    return max(value, 0.0), _kl_grad(pf, qf, qc, q, total, floor)


def _kl_grad(pf, qf, qc, q, total, floor):
    g_qf = -pf / qf
    g_qc = (g_qf - np.dot(g_qf, qf)) / total
    return np.where(q > floor, g_qc, 0.0)


def kl_to_softmax(target, logits, floor: float = KL_FLOOR) -> tuple[float, np.ndarray]:
    """KL(target || softmax(logits)) and its gradient w.r.t. the logits."""
    probs = softmax(logits)
    value, g_q = kl_divergence(target, probs, floor)
    return value, softmax_backward(probs, g_q)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_num: float = 1e-8
    timestep: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **hyper) -> "AdamState":
        return cls(first_moment=[np.zeros_like(p) for p in params],
                   second_moment=[np.zeros_like(p) for p in params], **hyper)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> None:
    """In-place bias-corrected Adam update of ``params``."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeError("adam parameter list", len(params), len(grads))
    state.timestep += 1
    t = state.timestep
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape or m.shape != p.shape:
            raise ShapeError("adam gradient", p.shape, g.shape)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps_num)


def clip_grads(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm <= 0 or norm <= max_norm:
        return grads
    scale = max_norm / norm
    return [g * scale for g in grads]


def soft_sync(online: Mlp, target: Mlp, tau: float | None = None) -> Mlp:
    """Copy ``online`` into ``target`` (``tau=None``) or Polyak-average it in."""
    if online.sizes != target.sizes:
        raise ShapeError("target architecture", online.sizes, target.sizes)
    for src, dst in zip(online.layers, target.layers):
        if tau is None or tau == 1.0:
            dst.weight = src.weight.copy()
            dst.bias = src.bias.copy()
        else:
            dst.weight = tau * src.weight + (1.0 - tau) * dst.weight
            dst.bias = tau * src.bias + (1.0 - tau) * dst.bias
    return target


# -- checkpoint helpers ----------------------------------------------------

def mlp_to_dict(net: Mlp) -> dict:
    return {
        "sizes": net.sizes,
        "layers": [
            {"activation": l.activation, "weight": l.weight.ravel().tolist(),
             "bias": l.bias.tolist()}
            for l in net.layers
        ],
    }


def mlp_from_dict(blob: dict) -> Mlp:
    sizes = blob["sizes"]
    layers = []
    for (n_in, n_out), lb in zip(zip(sizes[:-1], sizes[1:]), blob["layers"]):
        w = np.array(lb["weight"], dtype=np.float64).reshape(n_in, n_out)
        layers.append(Dense(w, np.array(lb["bias"], dtype=np.float64), lb["activation"]))
    return Mlp(layers)


def adam_to_dict(state: AdamState) -> dict:
    return {
        "lr": state.lr, "beta1": state.beta1, "beta2": state.beta2,
        "eps_num": state.eps_num, "timestep": state.timestep,
        "first_moment": [m.ravel().tolist() for m in state.first_moment],
        "second_moment": [v.ravel().tolist() for v in state.second_moment],
        "shapes": [list(m.shape) for m in state.first_moment],
    }


def adam_from_dict(blob: dict) -> AdamState:
    shapes = [tuple(s) for s in blob["shapes"]]
    return AdamState(
        lr=blob["lr"], beta1=blob["beta1"], beta2=blob["beta2"], eps_num=blob["eps_num"],
        timestep=blob["timestep"],
        first_moment=[np.array(m, dtype=np.float64).reshape(s) for m, s in zip(blob["first_moment"], shapes)],
        second_moment=[np.array(v, dtype=np.float64).reshape(s) for v, s in zip(blob["second_moment"], shapes)],
    )
