"""Time-dependent MLP vector field with exact, hand-derived derivatives.

The field is a tanh MLP with 0, 1 or 2 hidden layers, optionally taking the
time t as an extra input column ("concat" conditioning).  Everything the
flow ODEs consume is provided here in closed form, batched over samples:

* ``forward``                      f(z, t)
* ``vjp_state``                    a^T df/dz
* ``vjp_params``                   a^T df/dtheta    (flat layout)
* ``jacobian_trace``               tr(df/dz)
* ``grad_state_jacobian_trace``    d/dz  tr(df/dz)
* ``grad_params_jacobian_trace``   d/dtheta tr(df/dz)
* ``hutchinson_trace``             stochastic trace estimate (Rademacher)

With J = W_out D_H W_H ... D_1 W_1z (D_k = diag(tanh'(h_k)), W_1z the state
columns of the first weight matrix), the trace and its gradients follow by
cyclic invariance and the product rule; only the D_k carry z-dependence,
via tanh'' = -2 tanh tanh'.  Depth is capped at two hidden layers because
that is as far as the closed forms are derived.

Parameters live in one flat float64 vector: layer-1 weights row-major,
layer-1 bias, layer-2 weights, layer-2 bias, ...  ``flatten``/``unflatten``
are exact mutual inverses.

Hot loops (the ODE right-hand sides in the cnf module) should call
``prepare`` once per parameter vector and ``activations`` once per (z, t),
then use the ``*_from`` functions, which share one forward pass and the
parameter-only trace coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import RngStream

__all__ = [
    "DynamicsConfig",
    "layer_shapes",
    "param_count",
    "flatten",
    "unflatten",
    "init_params",
    "random_params",
    "prepare",
    "activations",
    "forward",
    "vjp_state",
    "vjp_params",
    "jacobian_trace",
    "grad_state_jacobian_trace",
    "grad_params_jacobian_trace",
    "hutchinson_trace",
]


@dataclass(frozen=True)
class DynamicsConfig:
    """Architecture of the vector field.

    hidden_widths () means a pure affine field f(z,t) = A z + b (test mode);
    time_mode "concat" appends t as an extra input, "none" is autonomous.
    Activation is fixed to tanh: Theorem-style trace gradients need its
    second derivative, and one canonical choice keeps the tests canonical.
    """

    state_dim: int
    hidden_widths: tuple = ()
    time_mode: str = "concat"

    def __post_init__(self):
        if self.state_dim < 1:
            raise ValueError(f"state_dim must be >= 1, got {self.state_dim}")
        if len(self.hidden_widths) > 2:
            raise ValueError("at most two hidden layers are supported")
        if any(w < 1 for w in self.hidden_widths):
            raise ValueError("hidden widths must be >= 1")
        if self.time_mode not in ("concat", "none"):
            raise ValueError(f"unknown time_mode {self.time_mode!r}")
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))

    @property
    def input_dim(self) -> int:
        return self.state_dim + (1 if self.time_mode == "concat" else 0)


def layer_shapes(cfg: DynamicsConfig) -> list:
    """[(out_dim, in_dim), ...] for each weight layer, input to output."""
    dims = [cfg.input_dim, *cfg.hidden_widths, cfg.state_dim]
    return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]


def param_count(cfg: DynamicsConfig) -> int:
    return sum(o * i + o for (o, i) in layer_shapes(cfg))


def unflatten(cfg: DynamicsConfig, theta: np.ndarray) -> list:
    """Flat vector -> [(W, b), ...].  The arrays are views into theta."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (param_count(cfg),):
        raise ValueError(
            f"parameter vector has shape {theta.shape}, expected ({param_count(cfg)},)"
        )
    layers = []
    pos = 0
    for (o, i) in layer_shapes(cfg):
        W = theta[pos : pos + o * i].reshape(o, i)
        pos += o * i
        b = theta[pos : pos + o]
        pos += o
        layers.append((W, b))
    return layers


def flatten(cfg: DynamicsConfig, layers: list) -> np.ndarray:
    """[(W, b), ...] -> flat vector; exact inverse of ``unflatten``."""
    shapes = layer_shapes(cfg)
    if len(layers) != len(shapes):
        raise ValueError(f"expected {len(shapes)} layers, got {len(layers)}")
    parts = []
    for (W, b), (o, i) in zip(layers, shapes):
        W = np.asarray(W, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if W.shape != (o, i) or b.shape != (o,):
            raise ValueError(f"layer shape mismatch: {W.shape}/{b.shape} vs ({o},{i})")
        parts.append(W.ravel())
        parts.append(b)
    return np.concatenate(parts)


def init_params(cfg: DynamicsConfig, rng: RngStream) -> np.ndarray:
    """Default initialization: zero final layer (the flow starts at the
    identity, log-det 0), earlier layers uniform in +-1/sqrt(fan_in)."""
    shapes = layer_shapes(cfg)
    parts = []
    for k, (o, i) in enumerate(shapes):
        if k == len(shapes) - 1:
            parts.append(np.zeros(o * i + o))
        else:
            bound = 1.0 / np.sqrt(i)
            parts.append(rng.uniform(-bound, bound, o * i + o))
    return np.concatenate(parts)


def random_params(cfg: DynamicsConfig, rng: RngStream, scale: float = 1.0) -> np.ndarray:
    """Fully random parameters (nonzero output layer), uniform in
    +-scale/sqrt(fan_in) per layer.  Used by derivative checks that need a
    generic non-identity field."""
    parts = []
    for (o, i) in layer_shapes(cfg):
        bound = scale / np.sqrt(i)
        parts.append(rng.uniform(-bound, bound, o * i + o))
    return np.concatenate(parts)


class _Prepared:
    """Parameter-dependent constants shared by every evaluation.

    For the trace formulas, with W1z the state columns of W1:
      depth 1:  tr = sum_k d1_k c_k,            c_k = (W1z W2)_kk
      depth 2:  tr = sum_kl d2_k B_kl d1_l,     B = W2 * (W1z W3)^T
    c, M, B depend only on theta and are hoisted out of the ODE time loop.
    """

    __slots__ = ("cfg", "Ws", "bs", "W1z", "w1t", "tr_const", "c", "M", "B")

    def __init__(self, cfg: DynamicsConfig, theta: np.ndarray):
        self.cfg = cfg
        layers = unflatten(cfg, theta)
        self.Ws = [W for (W, _) in layers]
        self.bs = [b for (_, b) in layers]
        d = cfg.state_dim
        self.W1z = self.Ws[0][:, :d]
        # time enters layer 1 as a constant column; folding it into the bias
        # avoids materializing [z, t] in the hot loops
        self.w1t = self.Ws[0][:, d] if cfg.time_mode == "concat" else None
        depth = len(cfg.hidden_widths)
        self.tr_const = None
        self.c = None
        self.M = None
        self.B = None
        if depth == 0:
            self.tr_const = float(np.trace(self.W1z))
        elif depth == 1:
            self.c = np.einsum("ki,ik->k", self.W1z, self.Ws[1])
        else:
            self.M = self.W1z @ self.Ws[2]          # (H1, H2)
            self.B = self.Ws[1] * self.M.T          # (H2, H1)


def prepare(cfg: DynamicsConfig, theta: np.ndarray) -> _Prepared:
    return _Prepared(cfg, theta)


class _Cache:
    """One shared forward pass: state, pre-activations, activations and
    tanh' factors for a batch of states at a common time."""

    __slots__ = ("Z", "t", "concat_time", "_u", "hs", "acts", "ds", "f")

    def __init__(self, Z, t, concat_time, hs, acts, ds, f):
        self.Z = Z        # (N, d)
        self.t = t
        self.concat_time = concat_time
        self._u = None
        self.hs = hs      # list of (N, H_k) pre-activations
        self.acts = acts  # list of (N, H_k) tanh(h_k)
        self.ds = ds      # list of (N, H_k) tanh'(h_k)
        self.f = f        # (N, d)

    @property
    def u(self) -> np.ndarray:
        # full layer-1 input [z, t]; only parameter-gradient code needs it
        if self._u is None:
            if self.concat_time:
                self._u = np.concatenate(
                    [self.Z, np.full((self.Z.shape[0], 1), float(self.t))], axis=1
                )
            else:
                self._u = self.Z
        return self._u


def _as_batch(z: np.ndarray, d: int, name: str = "z"):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        if z.shape[0] != d:
            raise ValueError(f"{name} has length {z.shape[0]}, expected {d}")
        return z[None, :], True
    if z.ndim == 2:
        if z.shape[1] != d:
            raise ValueError(f"{name} has row length {z.shape[1]}, expected {d}")
        return z, False
    raise ValueError(f"{name} must be 1-D or 2-D, got shape {z.shape}")


def activations(prep: _Prepared, Z: np.ndarray, t: float) -> _Cache:
    """Forward pass for a (N, d) batch; Z must already be 2-D float64."""
    concat = prep.cfg.time_mode == "concat"
    if len(prep.Ws) == 1:
        b = prep.bs[0] + t * prep.w1t if concat else prep.bs[0]
        return _Cache(Z, t, concat, [], [], [], Z @ prep.W1z.T + b)
    b1 = prep.bs[0] + t * prep.w1t if concat else prep.bs[0]
    h = Z @ prep.W1z.T + b1
    a = np.tanh(h)
    hs, acts, ds = [h], [a], [1.0 - a * a]
    x = a
    for k in range(1, len(prep.Ws) - 1):
        h = x @ prep.Ws[k].T + prep.bs[k]
        a = np.tanh(h)
        hs.append(h)
        acts.append(a)
        ds.append(1.0 - a * a)
        x = a
    f = x @ prep.Ws[-1].T + prep.bs[-1]
    return _Cache(Z, t, concat, hs, acts, ds, f)


# ---------------------------------------------------------------------------
# cache-based operations (hot path)
# ---------------------------------------------------------------------------

def state_vjp_from(prep: _Prepared, cache: _Cache, A: np.ndarray) -> np.ndarray:
    """a^T df/dz for a batch of cotangents A (N, d)."""
    delta = A
    for k in range(len(prep.Ws) - 1, 0, -1):
        delta = (delta @ prep.Ws[k]) * cache.ds[k - 1]
    return delta @ prep.W1z


def params_vjp_from(prep: _Prepared, cache: _Cache, A: np.ndarray) -> np.ndarray:
    """a^T df/dtheta, flat layout, shape (N, P)."""
    n = A.shape[0]
    L = len(prep.Ws)
    grads = [None] * L
    delta = A
    for k in range(L - 1, -1, -1):
        inp = cache.acts[k - 1] if k > 0 else cache.u
        gW = np.einsum("no,ni->noi", delta, inp)
        grads[k] = (gW, delta)
        if k > 0:
            delta = (delta @ prep.Ws[k]) * cache.ds[k - 1]
    parts = []
    for gW, gb in grads:
        parts.append(gW.reshape(n, -1))
        parts.append(gb)
    return np.concatenate(parts, axis=1)


def trace_from(prep: _Prepared, cache: _Cache) -> np.ndarray:
    """tr(df/dz) per sample, shape (N,)."""
    depth = len(prep.cfg.hidden_widths)
    if depth == 0:
        return np.full(cache.u.shape[0], prep.tr_const)
    if depth == 1:
        return cache.ds[0] @ prep.c
    v = cache.ds[0] @ prep.B.T                 # (N, H2)
    return np.einsum("nk,nk->n", cache.ds[1], v)


def trace_state_grad_from(prep: _Prepared, cache: _Cache) -> np.ndarray:
    """d/dz tr(df/dz), shape (N, d)."""
    depth = len(prep.cfg.hidden_widths)
    N = cache.u.shape[0]
    if depth == 0:
        return np.zeros((N, prep.cfg.state_dim))
    d1 = cache.ds[0]
    dd1 = -2.0 * cache.acts[0] * d1
    if depth == 1:
        return (dd1 * prep.c) @ prep.W1z
    d2 = cache.ds[1]
    dd2 = -2.0 * cache.acts[1] * d2
    v = d1 @ prep.B.T                          # (N, H2)
    w = d2 @ prep.B                            # (N, H1)
    r2 = dd2 * v                               # trace adjoint on h2
    h1bar = dd1 * w + (r2 @ prep.Ws[1]) * d1   # trace adjoint on h1
    return h1bar @ prep.W1z


def trace_params_grad_from(prep: _Prepared, cache: _Cache) -> np.ndarray:
    """d/dtheta tr(df/dz), flat layout, shape (N, P)."""
    cfg = prep.cfg
    depth = len(cfg.hidden_widths)
    N = cache.u.shape[0]
    d = cfg.state_dim
    din = cfg.input_dim
    if depth == 0:
        gW = np.zeros((N, d, din))
        gW[:, :, :d] = np.eye(d)
        gb = np.zeros((N, d))
        return np.concatenate([gW.reshape(N, -1), gb], axis=1)
    u = cache.u
    d1 = cache.ds[0]
    dd1 = -2.0 * cache.acts[0] * d1
    if depth == 1:
        W2 = prep.Ws[1]
        h1bar = dd1 * prep.c
        gW2 = np.einsum("nk,ki->nik", d1, prep.W1z)
        gb2 = np.zeros((N, d))
        gW1 = h1bar[:, :, None] * u[:, None, :]
        gW1[:, :, :d] += d1[:, :, None] * W2.T[None, :, :]
        gb1 = h1bar
        return np.concatenate(
            [gW1.reshape(N, -1), gb1, gW2.reshape(N, -1), gb2], axis=1
        )
    W2, W3 = prep.Ws[1], prep.Ws[2]
    a1, d2 = cache.acts[0], cache.ds[1]
    dd2 = -2.0 * cache.acts[1] * d2
    v = d1 @ prep.B.T                          # (N, H2)
    w = d2 @ prep.B                            # (N, H1)
    r2 = dd2 * v
    h1bar = dd1 * w + (r2 @ W2) * d1
    # truncated chain P2 = W2 D1 W1z and Q = W2^T D2 W3^T, per sample
    P2 = np.einsum("kl,nli->nki", W2, d1[:, :, None] * prep.W1z[None, :, :])
    Q = np.einsum("kl,nkj->nlj", W2, d2[:, :, None] * W3.T[None, :, :])
    gW3 = np.einsum("nk,nki->nik", d2, P2)
    gb3 = np.zeros((N, d))
    gW2 = np.einsum("nk,nl,lk->nkl", d2, d1, prep.M) + r2[:, :, None] * a1[:, None, :]
    gb2 = r2
    gW1 = h1bar[:, :, None] * u[:, None, :]
    gW1[:, :, :d] += d1[:, :, None] * Q
    gb1 = h1bar
    return np.concatenate(
        [gW1.reshape(N, -1), gb1, gW2.reshape(N, -1), gb2, gW3.reshape(N, -1), gb3],
        axis=1,
    )


# ---------------------------------------------------------------------------
# fused products for the flow ODE right-hand sides
# ---------------------------------------------------------------------------
# The augmented forward pass and the adjoint pass both contract the same
# backprop chains; sharing them here (and reducing parameter gradients over
# the batch where only the batch mean is wanted) keeps every operation a
# small GEMM instead of an (N, P) tensor per stage.


def aug_products(prep: _Prepared, cache: _Cache, alpha: np.ndarray):
    """(tr(df/dz), d alpha/dt) for the augmented forward state, where
    d alpha/dt = -alpha^T df/dz - d/dz tr(df/dz); the two terms share the
    final contraction with W1z."""
    depth = len(prep.cfg.hidden_widths)
    if depth == 0:
        tr = np.full(cache.u.shape[0], prep.tr_const)
        return tr, -(alpha @ prep.W1z)
    d1 = cache.ds[0]
    dd1 = -2.0 * cache.acts[0] * d1
    if depth == 1:
        delta1 = (alpha @ prep.Ws[1]) * d1
        tr = d1 @ prep.c
        return tr, -((delta1 + dd1 * prep.c) @ prep.W1z)
    d2 = cache.ds[1]
    dd2 = -2.0 * cache.acts[1] * d2
    delta2 = (alpha @ prep.Ws[2]) * d2
    delta1 = (delta2 @ prep.Ws[1]) * d1
    v = d1 @ prep.B.T
    w = d2 @ prep.B
    r2 = dd2 * v
    h1bar = dd1 * w + (r2 @ prep.Ws[1]) * d1
    tr = np.einsum("nk,nk->n", d2, v)
    return tr, -((delta1 + h1bar) @ prep.W1z)


def _layer1_grad_sum(prep: _Prepared, cache: _Cache, hbar, zblock_extra=None):
    """Sum over the batch of hbar (x) u for layer 1, assembled without
    materializing u = [z, t]; returns (gW1 flat-ready, gb1)."""
    gb1 = hbar.sum(axis=0)
    zblock = hbar.T @ cache.Z
    if zblock_extra is not None:
        zblock += zblock_extra
    if prep.w1t is None:
        return zblock, gb1
    gW1 = np.empty((zblock.shape[0], prep.cfg.input_dim))
    gW1[:, : prep.cfg.state_dim] = zblock
    gW1[:, prep.cfg.state_dim] = cache.t * gb1
    return gW1, gb1


def backward_products_sum(prep: _Prepared, cache: _Cache, A: np.ndarray, a_l: float):
    """Adjoint-pass derivatives with the parameter channel reduced over the
    batch: returns (dA, dpg_sum) with

        dA      = -(A^T df/dz + a_l * d/dz tr)           per sample (N, d)
        dpg_sum = -sum_n (A^T df/dth + a_l * d/dth tr)   flat (P,)

    The trace terms are evaluated for every a_l (including 0), so the same
    code path serves the total-derivative and the pure-VJP adjoint.
    """
    cfg = prep.cfg
    depth = len(cfg.hidden_widths)
    d = cfg.state_dim
    n = A.shape[0]
    if depth == 0:
        dA = -(A @ prep.W1z)
        gW1, gb1 = _layer1_grad_sum(prep, cache, A, (a_l * n) * np.eye(d))
        return dA, -np.concatenate([gW1.ravel(), gb1])
    d1 = cache.ds[0]
    dd1 = -2.0 * cache.acts[0] * d1
    if depth == 1:
        W2 = prep.Ws[1]
        comb1 = (A @ W2) * d1 + a_l * (dd1 * prep.c)
        dA = -(comb1 @ prep.W1z)
        d1s = d1.sum(axis=0)
        gW1, gb1 = _layer1_grad_sum(prep, cache, comb1, a_l * (d1s[:, None] * W2.T))
        gW2 = A.T @ cache.acts[0]
        gW2 += a_l * (d1s[:, None] * prep.W1z).T
        return dA, -np.concatenate([gW1.ravel(), gb1, gW2.ravel(), A.sum(axis=0)])
    W2, W3 = prep.Ws[1], prep.Ws[2]
    a1, d2 = cache.acts[0], cache.ds[1]
    dd2 = -2.0 * cache.acts[1] * d2
    delta2 = (A @ W3) * d2
    v = d1 @ prep.B.T
    w = d2 @ prep.B
    r2 = dd2 * v
    h1bar_tr = dd1 * w + (r2 @ W2) * d1
    comb2 = delta2 + a_l * r2
    comb1 = (delta2 @ W2) * d1 + a_l * h1bar_tr
    dA = -(comb1 @ prep.W1z)
    C = d2.T @ d1                               # (H2, H1) batch reduction
    WC = W2 * C
    gW1, gb1 = _layer1_grad_sum(prep, cache, comb1, a_l * (WC.T @ W3.T))
    gW2 = comb2.T @ a1 + a_l * (C * prep.M.T)
    gW3 = A.T @ cache.acts[1] + a_l * (WC @ prep.W1z).T
    return dA, -np.concatenate(
        [gW1.ravel(), gb1, gW2.ravel(), comb2.sum(axis=0), gW3.ravel(), A.sum(axis=0)]
    )


# ---------------------------------------------------------------------------
# public, spec-facing operations
# ---------------------------------------------------------------------------

def forward(cfg: DynamicsConfig, theta: np.ndarray, z: np.ndarray, t: float) -> np.ndarray:
    """Evaluate f(z, t)."""
    Z, single = _as_batch(z, cfg.state_dim)
    f = activations(prepare(cfg, theta), Z, t).f
    return f[0] if single else f


def vjp_state(cfg, theta, z, t, a) -> np.ndarray:
    """Exact a^T (df/dz)."""
    Z, single = _as_batch(z, cfg.state_dim)
    A, asingle = _as_batch(a, cfg.state_dim, name="a")
    if single != asingle or A.shape[0] != Z.shape[0]:
        raise ValueError("z and a must have matching batch shapes")
    prep = prepare(cfg, theta)
    out = state_vjp_from(prep, activations(prep, Z, t), A)
    return out[0] if single else out


def vjp_params(cfg, theta, z, t, a) -> np.ndarray:
    """Exact a^T (df/dtheta) in the flat parameter layout."""
    Z, single = _as_batch(z, cfg.state_dim)
    A, asingle = _as_batch(a, cfg.state_dim, name="a")
    if single != asingle or A.shape[0] != Z.shape[0]:
        raise ValueError("z and a must have matching batch shapes")
    prep = prepare(cfg, theta)
    out = params_vjp_from(prep, activations(prep, Z, t), A)
    return out[0] if single else out


def jacobian_trace(cfg, theta, z, t) -> float:
    """Exact tr(df/dz) from the layered Jacobian chain."""
    Z, single = _as_batch(z, cfg.state_dim)
    prep = prepare(cfg, theta)
    out = trace_from(prep, activations(prep, Z, t))
    return float(out[0]) if single else out


def grad_state_jacobian_trace(cfg, theta, z, t) -> np.ndarray:
    """Exact d/dz tr(df/dz)."""
    Z, single = _as_batch(z, cfg.state_dim)
    prep = prepare(cfg, theta)
    out = trace_state_grad_from(prep, activations(prep, Z, t))
    return out[0] if single else out


def grad_params_jacobian_trace(cfg, theta, z, t) -> np.ndarray:
    """Exact d/dtheta tr(df/dz), flat layout."""
    Z, single = _as_batch(z, cfg.state_dim)
    prep = prepare(cfg, theta)
    out = trace_params_grad_from(prep, activations(prep, Z, t))
    return out[0] if single else out


def hutchinson_trace(cfg, theta, z, t, rng: RngStream, n_probes: int) -> float:
    """Unbiased stochastic trace (1/n) sum_j eps_j^T (df/dz) eps_j with
    Rademacher probes, each product via one state VJP."""
    if n_probes < 1:
        raise ValueError(f"n_probes must be >= 1, got {n_probes}")
    Z, single = _as_batch(z, cfg.state_dim)
    if not single:
        raise ValueError("hutchinson_trace expects a single state vector")
    prep = prepare(cfg, theta)
    cache = activations(prep, Z, t)
    total = 0.0
    for _ in range(n_probes):
        eps = rng.rademacher(cfg.state_dim)
        total += float(state_vjp_from(prep, cache, eps[None, :])[0] @ eps)
    return total / n_probes
