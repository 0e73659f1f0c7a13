"""Zero-bias Lipschitz-controlled nonlinear estimator.

The network is a stack of layers, each a bias-free linear map (circular 1-D
convolution or dense matrix) optionally followed by a channel-wise
soft-shrinkage. Soft-shrinkage is 1-Lipschitz and maps 0 to 0, so the
product of the linear maps' operator norms bounds the network's Lipschitz
constant and ``R(0) = 0`` holds exactly.

Inputs are rows of length ``width`` (a single vector or a ``(B, width)``
batch). Reverse-mode products are written out per layer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .core import ValidationError

CONV, DENSE = "conv", "dense"


def _unfold(x, K):
    """Channel-last im2col: ``(B, n, c) -> (B, n, K*c)``, block ``k`` is ``x[:, i + k - K//2]``."""
    if K == 1:
        return x
    pad = K // 2
    return np.concatenate([np.roll(x, -(k - pad), axis=1) for k in range(K)], axis=-1)


def _fold_adjoint(g, K, c):
    """Adjoint of :func:`_unfold`."""
    if K == 1:
        return g
    pad = K // 2
    out = np.zeros(g.shape[:-1] + (c,))
    for k in range(K):
        out += np.roll(g[..., k * c : (k + 1) * c], k - pad, axis=1)
    return out


def _kernel_matrix(W):
    # (c_out, c_in, K) -> (K*c_in, c_out), row index k*c_in + c
    c_out, c_in, K = W.shape
    return W.transpose(2, 1, 0).reshape(K * c_in, c_out)


def soft_shrink(x, lam):
    return np.sign(x) * np.maximum(np.abs(x) - lam, 0.0)


@dataclass
class Layer:
    """One linear map plus optional soft-shrink.

    ``weight`` has shape ``(c_out, c_in, K)`` for convolutions and
    ``(n_out, n_in)`` for dense layers. ``threshold`` holds one non-negative
    shrinkage level per output channel, or is ``None`` for no nonlinearity.
    ``bias`` (per output channel, or per output entry for dense layers) is
    ``None`` in the zero-response configuration.
    """

    kind: str
    weight: np.ndarray
    threshold: np.ndarray | None = None
    power_state: np.ndarray | None = field(default=None, repr=False)
    bias: np.ndarray | None = None

    def copy(self) -> "Layer":
        return Layer(
            self.kind,
            self.weight.copy(),
            None if self.threshold is None else self.threshold.copy(),
            None if self.power_state is None else self.power_state.copy(),
            None if self.bias is None else self.bias.copy(),
        )

    def affine(self, x):
        z = self.linear(x)
        if self.bias is None:
            return z
        return z + (self.bias if self.kind == CONV else self.bias[:, None])

    def trainable(self) -> list:
        out = [self.weight]
        if self.threshold is not None:
            out.append(self.threshold)
        if self.bias is not None:
            out.append(self.bias)
        return out

    @property
    def c_out(self):
        return self.weight.shape[0] if self.kind == CONV else 1

    @property
    def c_in(self):
        return self.weight.shape[1] if self.kind == CONV else 1

    def linear(self, x):
        # activations are channel-last, shape (B, n, c)
        if self.kind == CONV:
            return _unfold(x, self.weight.shape[2]) @ _kernel_matrix(self.weight)
        return (x[..., 0] @ self.weight.T)[..., None]

    def linear_adjoint(self, y):
        if self.kind == CONV:
            K = self.weight.shape[2]
            return _fold_adjoint(y @ _kernel_matrix(self.weight).T, K, self.c_in)
        return (y[..., 0] @ self.weight)[..., None]

    def weight_grad(self, x, gy):
        if self.kind == CONV:
            c_out, c_in, K = self.weight.shape
            X = _unfold(x, K).reshape(-1, K * c_in)
            G = X.T @ gy.reshape(-1, c_out)
            return G.reshape(K, c_in, c_out).transpose(2, 1, 0)
        return gy[..., 0].T @ x[..., 0]

    def operator_norm(self, width: int) -> float:
        """Exact spectral norm of the linear map acting on length-``width`` signals."""
        if self.kind == DENSE:
            return float(np.linalg.norm(self.weight, 2))
        symbols, _ = self._symbols(width)
        return float(np.max(np.linalg.svd(symbols, compute_uv=False)))

    def _symbols(self, width):
        K = self.weight.shape[2]
        phase = np.exp(1j * np.outer(2 * np.pi * np.arange(width) / width, np.arange(K) - K // 2))
        return np.einsum("ock,wk->woc", self.weight, phase), phase

    def norm_gradient(self, width: int) -> np.ndarray:
        """Derivative of the exact operator norm with respect to ``weight``."""
        if self.kind == DENSE:
            U, _, Vt = np.linalg.svd(self.weight)
            return np.outer(U[:, 0], Vt[0])
        symbols, phase = self._symbols(width)
        U, S, Vh = np.linalg.svd(symbols)
        j = int(np.argmax(S[:, 0]))
        a, b = U[j, :, 0], Vh[j, 0, :].conj()
        return np.real(np.einsum("o,c,k->ock", a.conj(), b, phase[j]))

    def power_iterate(self, width: int, iters: int, rng=None) -> float:
        """Refresh the singular-vector estimate and return the norm estimate."""
        if self.power_state is None:
            rng = np.random.default_rng(0) if rng is None else rng
            n_in = self.weight.shape[1] if self.kind == DENSE else width
            v = rng.standard_normal((1, n_in, self.c_in))
            self.power_state = v / np.linalg.norm(v)
        v = self.power_state
        for _ in range(iters):
            v = self.linear_adjoint(self.linear(v))
            nv = np.linalg.norm(v)
            if nv == 0:
                return 0.0
            v = v / nv
        self.power_state = v
        return float(np.linalg.norm(self.linear(v)))


@dataclass
class NleParams:
    layers: list[Layer]
    lip_target: float = 0.9
    width: int = 0

    def __post_init__(self):
        if not 0 < self.lip_target < 1:
            raise ValidationError("lip_target must lie in (0, 1)")

    def copy(self) -> "NleParams":
        return NleParams([l.copy() for l in self.layers], self.lip_target, self.width)

    def arrays(self) -> list[np.ndarray]:
        """Trainable arrays (weight, threshold, bias per layer); live references."""
        return [a for l in self.layers for a in l.trainable()]

    def weight_slots(self) -> list[int]:
        """Positions of the weight arrays within :meth:`arrays`."""
        slots, pos = [], 0
        for l in self.layers:
            slots.append(pos)
            pos += len(l.trainable())
        return slots

    @property
    def has_bias(self) -> bool:
        return any(l.bias is not None for l in self.layers)

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def set_flat(self, vec) -> None:
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.n_params:
            raise ValidationError("flat parameter vector has the wrong length")
        i = 0
        for a in self.arrays():
            a[...] = vec[i : i + a.size].reshape(a.shape)
            i += a.size

    def forward(self, x):
        return nle_forward(self, x)

    def vjp(self, x, cotangent, *, with_input=True):
        return nle_vjp(self, x, cotangent, with_input=with_input)

    def jvp(self, x, tangent):
        return nle_jvp(self, x, tangent)

    def clip_thresholds(self) -> None:
        for l in self.layers:
            if l.threshold is not None:
                np.maximum(l.threshold, 0.0, out=l.threshold)


def init_nle(
    width: int,
    channels=(1, 16, 16, 1),
    kernel: int = 3,
    lip_target: float = 0.9,
    init_threshold: float = 1e-3,
    rng=None,
    bias: bool = False,
) -> NleParams:
    """Convolutional NLE initialised near a scaled identity map.

    The centre taps form an orthogonal chain (unit vector, orthogonal matrix,
    matching unit row), the outer taps are small Gaussians, and each layer is
    rescaled to spectral norm ``lip_target ** (1 / n_layers)``. With ``bias``
    each layer also gets a zero-initialised per-channel offset, which breaks
    the zero-response property once trained.
    """
    rng = np.random.default_rng(rng)
    n_layers = len(channels) - 1
    q = rng.standard_normal(channels[1])
    q /= np.linalg.norm(q)
    chain = q[:, None]
    layers = []
    for i in range(n_layers):
        c_in, c_out = channels[i], channels[i + 1]
        W = rng.standard_normal((c_out, c_in, kernel)) * (0.05 / np.sqrt(c_in * kernel))
        if c_in == 1:
            centre = np.resize(q, c_out)[:, None] if c_out != len(q) else q[:, None]
        elif c_out == 1:
            centre = chain.T
        else:
            Q, R = np.linalg.qr(rng.standard_normal((c_out, c_in)))
            centre = Q * np.sign(np.diag(R))
        if centre.shape == (c_out, c_in):
            W[:, :, kernel // 2] += centre
        if c_in != 1 and c_out != 1:
            chain = centre @ chain
        layers.append(Layer(CONV, W, np.full(c_out, init_threshold), bias=np.zeros(c_out) if bias else None))
    p = NleParams(layers, lip_target, width)
    per_layer = lip_target ** (1.0 / n_layers)
    for l in p.layers:
        l.weight *= per_layer / l.operator_norm(width)
        l.power_iterate(width, 20, rng)
    return p


def _as_batch(p: NleParams, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :, None] if single else x[:, :, None]
    if p.width and xb.shape[1] != p.width:
        raise ValidationError(f"input length {xb.shape[1]} != NLE width {p.width}")
    return xb, single


def _forward_cache(p: NleParams, xb):
    cache = []
    a = xb
    for l in p.layers:
        z = l.affine(a)
        cache.append((a, z))
        a = z if l.threshold is None else soft_shrink(z, l.threshold)
    return a, cache


def nle_forward(p: NleParams, x) -> np.ndarray:
    """Evaluate ``R(x)`` on a vector or a batch of rows."""
    xb, single = _as_batch(p, x)
    out, _ = _forward_cache(p, xb)
    out = out[:, :, 0]
    return out[0] if single else out


def nle_vjp(p: NleParams, x, cotangent, *, with_input=True):
    """Reverse-mode products at ``x``.

    Returns ``(grad_params, grad_input)`` where ``grad_params`` is a list aligned
    with :meth:`NleParams.arrays` (summed over the batch) and ``grad_input`` has
    the shape of ``x``.
    """
    xb, single = _as_batch(p, x)
    g = np.asarray(cotangent, dtype=float)
    g = g[None, :, None] if single else g[:, :, None]
    if g.shape != xb.shape:
        raise ValidationError("cotangent shape does not match input")
    _, cache = _forward_cache(p, xb)
    grads = []
    for l, (a, z) in zip(reversed(p.layers), reversed(cache)):
        layer_grads = []
        if l.threshold is not None:
            active = np.abs(z) > l.threshold
            gz = g * active
            layer_grads.append(-np.sum(gz * np.sign(z), axis=(0, 1)))
        else:
            gz = g
        layer_grads.insert(0, l.weight_grad(a, gz))
        if l.bias is not None:
            layer_grads.append(np.sum(gz, axis=(0, 1)) if l.kind == CONV else np.sum(gz[..., 0], axis=0))
        grads = layer_grads + grads
        if with_input or l is not p.layers[0]:
            g = l.linear_adjoint(gz)
    grad_input = None
    if with_input:
        grad_input = g[0, :, 0] if single else g[:, :, 0]
    return grads, grad_input


def nle_jvp(p: NleParams, x, tangent) -> np.ndarray:
    """Forward-mode product ``(dR/dx) v`` at ``x``."""
    xb, single = _as_batch(p, x)
    t = np.asarray(tangent, dtype=float)
    t = t[None, :, None] if single else t[:, :, None]
    a = xb
    for l in p.layers:
        z = l.affine(a)
        t = l.linear(t)
        if l.threshold is not None:
            thr = l.threshold
            t = t * (np.abs(z) > thr)
            a = soft_shrink(z, thr)
        else:
            a = z
    return t[0, :, 0] if single else t[:, :, 0]


def lipschitz_upper_bound(p: NleParams) -> float:
    """Product of the exact per-layer operator norms."""
    width = p.width
    return float(np.prod([l.operator_norm(width) for l in p.layers]))


def spectral_normalize(p: NleParams, iters: int = 1, *, exact: bool = False) -> NleParams:
    """Rescale all layers by a common factor so the norm product equals ``lip_target``.

    Norms come from ``iters`` warm-started power iterations per layer, or from
    the exact Fourier-domain computation when ``exact`` is set.
    """
    q = p.copy()
    if exact:
        norms = [l.operator_norm(q.width) for l in q.layers]
    else:
        norms = [l.power_iterate(q.width, iters) for l in q.layers]
    prod = float(np.prod(norms))
    if prod == 0:
        return q
    factor = (q.lip_target / prod) ** (1.0 / len(q.layers))
    for l in q.layers:
        l.weight *= factor
    return q


def normalization_vjp(p: NleParams, grads) -> list[np.ndarray]:
    """Pull gradients back through the uniform rescaling to ``lip_target``.

    ``grads`` are gradients with respect to the effective weights of a
    normalized network (aligned with :meth:`NleParams.arrays`). The result is
    the gradient of the loss composed with normalization, evaluated at the
    current weights; it is orthogonal to a joint rescaling of all layers.
    """
    n = len(p.layers)
    out = list(grads)
    slots = p.weight_slots()
    total = sum(float(np.sum(grads[i] * l.weight)) for i, l in zip(slots, p.layers))
    for i, l in zip(slots, p.layers):
        sigma = l.operator_norm(p.width)
        if sigma > 0:
            out[i] = grads[i] - (total / n) * l.norm_gradient(p.width) / sigma
    return out


# --- checkpoints ----------------------------------------------------------

NLE_MAGIC = b"GNLE"
NLE_VERSION = 1
_KIND_TAG = {CONV: 0, DENSE: 1}
_SHRINK_BIT = 2
_BIAS_BIT = 4


class CheckpointError(ValidationError):
    pass


def dump_nle(p: NleParams) -> bytes:
    """Serialise parameters: magic, version, lip_target, layer count, width, layers."""
    parts = [struct.pack("<4sIdII", NLE_MAGIC, NLE_VERSION, p.lip_target, len(p.layers), p.width)]
    for l in p.layers:
        tag = _KIND_TAG[l.kind] | (_SHRINK_BIT if l.threshold is not None else 0)
        tag |= _BIAS_BIT if l.bias is not None else 0
        W = l.weight if l.kind == CONV else l.weight[:, :, None]
        parts.append(struct.pack("<BIII", tag, *W.shape))
        parts.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        if l.threshold is not None:
            parts.append(np.ascontiguousarray(l.threshold, dtype="<f8").tobytes())
        if l.bias is not None:
            parts.append(np.ascontiguousarray(l.bias, dtype="<f8").tobytes())
    return b"".join(parts)


def parse_nle(data: bytes, offset: int = 0):
    """Inverse of :func:`dump_nle`; returns ``(params, end_offset)``."""
    head = struct.Struct("<4sIdII")
    try:
        magic, version, lip, count, width = head.unpack_from(data, offset)
        if magic != NLE_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}")
        if version != NLE_VERSION:
            raise CheckpointError(f"unsupported version {version}")
        off = offset + head.size
        layers = []
        lh = struct.Struct("<BIII")
        for _ in range(count):
            tag, c_out, c_in, K = lh.unpack_from(data, off)
            off += lh.size
            n = c_out * c_in * K
            W = np.frombuffer(data, "<f8", n, off).reshape(c_out, c_in, K).astype(float)
            off += 8 * n
            kind = DENSE if tag & 1 else CONV
            thr = None
            if tag & _SHRINK_BIT:
                n_thr = c_out if kind == CONV else 1
                thr = np.frombuffer(data, "<f8", n_thr, off).astype(float)
                off += 8 * n_thr
            b = None
            if tag & _BIAS_BIT:
                b = np.frombuffer(data, "<f8", c_out, off).astype(float)
                off += 8 * c_out
            layers.append(Layer(kind, W if kind == CONV else W[:, :, 0].copy(), thr, bias=b))
    except (struct.error, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from exc
    return NleParams(layers, lip, width), off


def save_nle(path, p: NleParams) -> None:
    with open(path, "wb") as f:
        f.write(dump_nle(p))


def load_nle(path) -> NleParams:
    with open(path, "rb") as f:
        data = f.read()
    p, _ = parse_nle(data)
    return p


def linear_nle(W, lip_target: float = 0.9) -> NleParams:
    """Single dense layer ``R(x) = W x`` without nonlinearity."""
    W = np.array(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValidationError("linear NLE needs a square matrix")
    return NleParams([Layer(DENSE, W)], lip_target, W.shape[0])
