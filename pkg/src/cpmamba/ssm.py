"""Selective state-space machinery: exact ZOH discretization, the
input-dependent parameter projections, the sequential selective scan and
the gated Mamba block.

The scan is built from tape primitives, so gradients flow through the
whole recurrence without a hand-written backward pass, and it stays
linear in sequence length (one Python step per frame).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, NumericError, ShapeError
from .numerics import Tensor, ops
from .numerics import kernels
from .numerics.tensor import accumulate_grad

ZOH_SERIES_THRESHOLD = kernels.ZOH_EPS


def discretize(a, b, dt):
    """Zero-order-hold discretization of diagonal continuous dynamics.

    a_bar = exp(dt a); b_bar = (dt a)^-1 (exp(dt a) - 1) dt b, evaluated
    entrywise. For |dt a| below the series threshold the limit form
    dt b (1 + dt a / 2) is used instead.

    Accepts scalars or broadcastable arrays; returns plain ndarrays.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dt = np.asarray(dt, dtype=np.float64)
    if np.any(dt <= 0):
        raise DomainError("discretize: step dt must be strictly positive")
    da = dt * a
    a_bar = np.exp(da)
    big = np.abs(da) >= ZOH_SERIES_THRESHOLD
    safe = np.where(big, da, 1.0)
    # expm1 realizes exp(da) - 1 without cancellation for small |da|
    ratio = np.where(big, np.expm1(da) / safe, 1.0 + da / 2.0)
    return a_bar, ratio * dt * b


@dataclass
class SsmParams:
    """Learnable selective-SSM parameters for one block.

    The state matrix is diagonal and strictly negative, stored as
    log(-A) [E, N]. Projections map the E-dimensional input to per-step
    B, C in R^N (shared across channels) and a scalar dt offset that is
    broadcast to all E channels before the softplus.
    """

    a_log: Tensor  # [E, N]
    dt_bias: Tensor  # [E]
    b_w: Tensor  # [E, N]
    c_w: Tensor  # [E, N]
    dt_w: Tensor  # [E, 1]
    d_skip: Tensor | None  # [E] direct feedthrough, or None to disable

    @property
    def e_channels(self) -> int:
        return self.a_log.shape[0]

    @property
    def d_state(self) -> int:
        return self.a_log.shape[1]

    def a(self) -> Tensor:
        """A = -exp(a_log) < 0."""
        return ops.neg(ops.exp(self.a_log))


@dataclass
class ScanInputs:
    """Per-step scan drive: x [b,L,E], dt [b,L,E] (> 0), b/c [b,L,N]."""

    x: Tensor
    dt: Tensor
    b: Tensor
    c: Tensor


def selective_project(s: Tensor, params: SsmParams) -> ScanInputs:
    """Input-dependent projections: B = Lin_N(s), C = Lin_N(s),
    dt = softplus(dt_bias + broadcast(Lin_1(s))).
    """
    if s.shape[-1] != params.e_channels:
        raise ShapeError(f"selective_project: input {s.shape} vs E={params.e_channels}")
    b_t = ops.linear(s, params.b_w)
    c_t = ops.linear(s, params.c_w)
    dt = ops.softplus(ops.add(ops.linear(s, params.dt_w), params.dt_bias))
    return ScanInputs(s, dt, b_t, c_t)


def _discretize_pair(dt: Tensor, a: Tensor, b: Tensor, x: Tensor, euler_b: bool):
    """Fused per-step discretization: (a_bar, b_bar * x), both [L, b, E, N].

    Time-major layout so each scan step slices a contiguous view. Exact
    ZOH uses ratio(u) = expm1(u)/u with the series 1 + u/2 below the
    threshold (a_bar = expm1(u) + 1 shares the transcendental); the Euler
    variant drops the ratio factor. One recorded node per output.
    """
    dtv = np.ascontiguousarray(dt.data.transpose(1, 0, 2))[..., None]  # [L,b,E,1]
    bv = b.data.transpose(1, 0, 2)[:, :, None, :]  # [L,b,1,N]
    xv = x.data.transpose(1, 0, 2)[..., None]  # [L,b,E,1]
    u = dtv * a.data  # [L,b,E,N]
    em = np.expm1(u)
    a_bar = em + 1.0
    if not np.all(np.isfinite(a_bar)):
        raise NumericError("exp(dt * a) overflowed")
    m = (dtv * bv) * xv

    def bwd_a():
        def fn(g):
            common = g * a_bar
            accumulate_grad(dt, (common * a.data).sum(axis=-1).transpose(1, 0, 2), fresh=True)
            accumulate_grad(a, (common * dtv).sum(axis=(0, 1)), fresh=True)

        return fn

    a_bar_t = ops.custom(a_bar, (dt, a), bwd_a)

    if euler_b:
        def bwd_m():
            def fn(g):
                accumulate_grad(dt, (g * bv * xv).sum(axis=-1).transpose(1, 0, 2), fresh=True)
                accumulate_grad(b, (g * (dtv * xv)).sum(axis=2).transpose(1, 0, 2), fresh=True)
                accumulate_grad(x, (g * (dtv * bv)).sum(axis=-1).transpose(1, 0, 2), fresh=True)

            return fn

        return a_bar_t, ops.custom(m, (dt, b, x), bwd_m)

    big = np.abs(u) >= ZOH_SERIES_THRESHOLD
    safe = np.where(big, u, 1.0)
    ratio = np.where(big, em / safe, 1.0 + 0.5 * u)
    bx = ratio * m

    def bwd_b():
        def fn(g):
            gm = g * ratio
            # d ratio/du = (u e^u - expm1(u)) / u^2, limit 1/2 at u -> 0
            dr = np.where(big, (u * a_bar - em) / (safe * safe), 0.5)
            gu = (g * m) * dr
            accumulate_grad(
                dt, (gm * bv * xv + gu * a.data).sum(axis=-1).transpose(1, 0, 2), fresh=True
            )
            accumulate_grad(a, (gu * dtv).sum(axis=(0, 1)), fresh=True)
            accumulate_grad(b, (gm * (dtv * xv)).sum(axis=2).transpose(1, 0, 2), fresh=True)
            accumulate_grad(x, (gm * (dtv * bv)).sum(axis=-1).transpose(1, 0, 2), fresh=True)

        return fn

    return a_bar_t, ops.custom(bx, (dt, a, b, x), bwd_b)


def _scan_fused(dt: Tensor, a: Tensor, b_in: Tensor, c_in: Tensor, x: Tensor, euler_b: bool) -> Tensor:
    """One recorded node around the compiled recurrence kernels."""
    batch, seq_len, e = x.shape
    n = a.shape[1]

    def tmaj(arr):
        return np.ascontiguousarray(arr.transpose(1, 0, 2))

    dt_t, b_t, c_t, x_t = tmaj(dt.data), tmaj(b_in.data), tmaj(c_in.data), tmaj(x.data)
    h_hist = np.empty((seq_len, batch, e, n))
    y_t = np.empty((seq_len, batch, e))
    bad = kernels.scan_forward(dt_t, a.data, b_t, c_t, x_t, euler_b, h_hist, y_t)
    if bad >= 0:
        raise NumericError(f"selective_scan: non-finite state at step {bad}")

    def bwd():
        def fn(g):
            gy_t = np.ascontiguousarray(g.transpose(1, 0, 2))
            g_dt = np.zeros_like(dt_t)
            g_a = np.zeros_like(a.data)
            g_b = np.zeros_like(b_t)
            g_c = np.zeros_like(c_t)
            g_x = np.zeros_like(x_t)
            kernels.scan_backward(
                gy_t, dt_t, a.data, b_t, c_t, x_t, euler_b, h_hist, g_dt, g_a, g_b, g_c, g_x
            )
            accumulate_grad(dt, np.ascontiguousarray(g_dt.transpose(1, 0, 2)), fresh=True)
            accumulate_grad(a, g_a, fresh=True)
            accumulate_grad(b_in, np.ascontiguousarray(g_b.transpose(1, 0, 2)), fresh=True)
            accumulate_grad(c_in, np.ascontiguousarray(g_c.transpose(1, 0, 2)), fresh=True)
            accumulate_grad(x, np.ascontiguousarray(g_x.transpose(1, 0, 2)), fresh=True)

        return fn

    return ops.custom(np.ascontiguousarray(y_t.transpose(1, 0, 2)), (dt, a, b_in, c_in, x), bwd)


def selective_scan(
    inputs: ScanInputs,
    params: SsmParams,
    lagged_input: bool = False,
    euler_b: bool = False,
    fused: bool = True,
) -> Tensor:
    """Evaluate the discrete selective recurrence over a sequence.

    h_t = a_bar_t * h_{t-1} + (b_bar x)_t ; y_t = <c_t, h_t> + d_skip * x_t
    with (a_bar, b_bar) the exact ZOH pair for each step's dt. With
    `lagged_input` the state drive is shifted one step (h_t integrates
    x_{t-1}); the default drives the state with the current input.
    `euler_b` switches to the simplified b_bar = dt * b for comparison.

    The default path runs one compiled forward/backward kernel pair; the
    per-step tape construction (`fused=False`, also taken by the lagged
    variant) computes the same recurrence and gradients and stays around
    as a cross-check.
    """
    x, dt, b_in, c_in = inputs.x, inputs.dt, inputs.b, inputs.c
    batch, seq_len, e = x.shape
    n = b_in.shape[-1]
    if dt.shape != x.shape:
        raise ShapeError(f"selective_scan: dt {dt.shape} vs x {x.shape}")
    if np.any(dt.data <= 0):
        raise DomainError("selective_scan: dt must be strictly positive")

    a = params.a()  # [E, N]

    if fused and not lagged_input:
        y = _scan_fused(dt, a, b_in, c_in, x, euler_b)
        if params.d_skip is not None:
            y = ops.add(y, ops.mul(x, params.d_skip))
        return y

    a_bar, bx = _discretize_pair(dt, a, b_in, x, euler_b)  # [L, b, E, N] each

    h = Tensor(np.zeros((batch, e, n)))
    outputs = []
    for t in range(seq_len):
        a_t = ops.select(a_bar, t, axis=0)
        if lagged_input:
            drive = ops.select(bx, t - 1, axis=0) if t > 0 else Tensor(np.zeros((batch, e, n)))
        else:
            drive = ops.select(bx, t, axis=0)
        h = ops.add(ops.mul(a_t, h), drive)
        if not np.all(np.isfinite(h.data)):
            raise NumericError(f"selective_scan: non-finite state at step {t}")
        c_t = ops.reshape(ops.select(c_in, t, axis=1), (batch, 1, n))
        outputs.append(ops.sum_(ops.mul(h, c_t), axis=-1))  # [b, E]
    y = ops.stack(outputs, axis=1)  # [b, L, E]
    if params.d_skip is not None:
        y = ops.add(y, ops.mul(x, params.d_skip))
    return y


@dataclass
class MambaWeights:
    """All learnables of one Mamba block."""

    in_s_w: Tensor  # [d_model, E]
    in_s_b: Tensor  # [E]
    in_z_w: Tensor  # [d_model, E]
    in_z_b: Tensor  # [E]
    conv_k: Tensor  # [E, d_conv]
    ssm: SsmParams
    out_w: Tensor  # [E, d_model]
    out_b: Tensor  # [d_model]


def uniform_init(rng, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros_init(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_ssm_params(
    e: int,
    n: int,
    rng,
    dt_min: float = 1e-3,
    dt_max: float = 1e-1,
    use_d_skip: bool = True,
) -> SsmParams:
    """S4D-real style init: A_n = -(n+1) replicated over channels;
    softplus(dt_bias) log-uniform in [dt_min, dt_max].
    """
    a_log = Tensor(np.tile(np.log(np.arange(1, n + 1, dtype=np.float64)), (e, 1)), requires_grad=True)
    dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=e))
    dt_bias = Tensor(np.log(np.expm1(dt)), requires_grad=True)  # inverse softplus
    return SsmParams(
        a_log=a_log,
        dt_bias=dt_bias,
        b_w=uniform_init(rng, (e, n), e),
        c_w=uniform_init(rng, (e, n), e),
        dt_w=uniform_init(rng, (e, 1), e),
        d_skip=zeros_init(e) if use_d_skip else None,
    )


def init_mamba_weights(d_model: int, d_state: int, d_conv: int, expand: int, rng, use_d_skip: bool = True) -> MambaWeights:
    if d_conv < 1:
        raise ConfigError(f"d_conv must be >= 1, got {d_conv}")
    e = d_model * expand
    return MambaWeights(
        in_s_w=uniform_init(rng, (d_model, e), d_model),
        in_s_b=zeros_init(e),
        in_z_w=uniform_init(rng, (d_model, e), d_model),
        in_z_b=zeros_init(e),
        conv_k=uniform_init(rng, (e, d_conv), d_conv),
        ssm=init_ssm_params(e, d_state, rng, use_d_skip=use_d_skip),
        out_w=uniform_init(rng, (e, d_model), e),
        out_b=zeros_init(d_model),
    )


def mamba_block(x: Tensor, w: MambaWeights, lagged_input: bool = False, euler_b: bool = False) -> Tensor:
    """Gated selective-SSM block: [b, L, d_model] -> [b, L, d_model].

    Dual branch: s goes through causal conv + SiLU + selective scan,
    z gates the scan output via SiLU before the output projection.
    """
    if x.shape[-1] != w.in_s_w.shape[0]:
        raise ShapeError(f"mamba_block: input {x.shape} vs d_model {w.in_s_w.shape[0]}")
    s = ops.linear(x, w.in_s_w, w.in_s_b)
    z = ops.linear(x, w.in_z_w, w.in_z_b)
    s = ops.silu(ops.causal_conv1d(s, w.conv_k))
    y_ssm = selective_scan(
        selective_project(s, w.ssm), w.ssm, lagged_input=lagged_input, euler_b=euler_b
    )
    gated = ops.mul(ops.silu(z), y_ssm)
    return ops.linear(gated, w.out_w, w.out_b)
