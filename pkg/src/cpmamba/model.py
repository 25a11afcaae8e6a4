"""The full prediction network.

Pipeline (eval and train share the same path):
    normalize -> patch embedding -> SE-ResNet over the (re, im) planes ->
    feature embedding -> residual Mamba stack (or attention backbone
    ablation) -> feature/time prediction head -> denormalize.

The antenna dimension is merged into the batch before the network sees
the data; complex CSI rides as concatenated real and imaginary halves of
the feature axis (D = 2K).
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, ConfigError, ShapeError
from .numerics import Tensor, ops, stream
from .ssm import MambaWeights, SsmParams, init_mamba_weights, mamba_block, uniform_init, zeros_init

ABLATIONS = ("none", "no_se", "no_patch", "attention_backbone")

_CKPT_MAGIC = b"CPMB"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Every architecture hyperparameter, desk-scale by default."""

    history_len: int = 16  # L
    horizon: int = 4  # P
    k_sub: int = 8  # subcarriers per link direction; feature width D = 2K
    n_patch: int = 4
    conv_channels: int = 16  # C
    n_res: int = 2
    se_reduction: int = 4  # r
    d_model: int = 64
    n_mamba: int = 2
    d_state: int = 4
    d_conv: int = 4
    expand: int = 2
    dropout_p: float = 0.1
    ablation: str = "none"
    n_heads: int = 4  # attention ablation only
    use_d_skip: bool = True
    lagged_scan_input: bool = False
    euler_discretization: bool = False  # simplified b_bar = dt * b instead of exact ZOH

    def __post_init__(self):
        ints = {
            "history_len": self.history_len,
            "horizon": self.horizon,
            "k_sub": self.k_sub,
            "n_patch": self.n_patch,
            "conv_channels": self.conv_channels,
            "n_res": self.n_res,
            "se_reduction": self.se_reduction,
            "d_model": self.d_model,
            "n_mamba": self.n_mamba,
            "d_state": self.d_state,
            "d_conv": self.d_conv,
            "expand": self.expand,
        }
        for name, v in ints.items():
            if v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        if self.conv_channels % self.se_reduction:
            raise ConfigError(
                f"conv_channels ({self.conv_channels}) must be divisible by "
                f"se_reduction ({self.se_reduction})"
            )
        if self.ablation == "attention_backbone" and self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )

    @property
    def feature_dim(self) -> int:
        return 2 * self.k_sub

    @property
    def e_inner(self) -> int:
        return self.d_model * self.expand

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(ModelConfig)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return ModelConfig(**d)

    @staticmethod
    def desk() -> "ModelConfig":
        return ModelConfig()

    @staticmethod
    def paper() -> "ModelConfig":
        """Full-scale preset: not exercised by the test suite, kept runnable."""
        return ModelConfig(
            k_sub=48,
            conv_channels=64,
            n_res=4,
            se_reduction=16,
            d_model=768,
            n_mamba=6,
        )


@dataclass
class NormStats:
    """Whole-tensor normalization statistics of one forward call."""

    mu: float
    sigma: float  # population std clamped at 1e-8


@dataclass
class SeBlockWeights:
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor


@dataclass
class ResBlockWeights:
    conv1_k: Tensor
    conv1_b: Tensor
    conv2_k: Tensor
    conv2_b: Tensor
    gate: SeBlockWeights


@dataclass
class SeResNetWeights:
    conv_in_k: Tensor
    conv_in_b: Tensor
    blocks: list
    conv_out_k: Tensor
    conv_out_b: Tensor


@dataclass
class RMambaBlockWeights:
    norm_g: Tensor
    norm_b: Tensor
    mamba: MambaWeights


@dataclass
class AttentionBlockWeights:
    norm1_g: Tensor
    norm1_b: Tensor
    q_w: Tensor
    q_b: Tensor
    k_w: Tensor
    k_b: Tensor
    v_w: Tensor
    v_b: Tensor
    o_w: Tensor
    o_b: Tensor
    norm2_g: Tensor
    norm2_b: Tensor
    ff1_w: Tensor
    ff1_b: Tensor
    ff2_w: Tensor
    ff2_b: Tensor


@dataclass
class ModelState:
    """Learnable tensors plus the config that shaped them."""

    config: ModelConfig
    patch_w: Tensor | None
    patch_b: Tensor | None
    se: SeResNetWeights | None
    embed_w: Tensor
    embed_b: Tensor
    blocks: list  # RMambaBlockWeights or AttentionBlockWeights
    head_f_w: Tensor
    head_f_b: Tensor
    head_t_w: Tensor
    head_t_b: Tensor
    step: int = 0

    def parameters(self) -> dict:
        """Stable path -> Tensor map; the key set depends only on config."""
        out: dict = {}
        if self.patch_w is not None:
            out["patch/w"] = self.patch_w
            out["patch/b"] = self.patch_b
        if self.se is not None:
            out["se/in/k"] = self.se.conv_in_k
            out["se/in/b"] = self.se.conv_in_b
            for i, blk in enumerate(self.se.blocks):
                p = f"se/res{i}"
                out[f"{p}/conv1/k"] = blk.conv1_k
                out[f"{p}/conv1/b"] = blk.conv1_b
                out[f"{p}/conv2/k"] = blk.conv2_k
                out[f"{p}/conv2/b"] = blk.conv2_b
                out[f"{p}/gate/fc1/w"] = blk.gate.fc1_w
                out[f"{p}/gate/fc1/b"] = blk.gate.fc1_b
                out[f"{p}/gate/fc2/w"] = blk.gate.fc2_w
                out[f"{p}/gate/fc2/b"] = blk.gate.fc2_b
            out["se/out/k"] = self.se.conv_out_k
            out["se/out/b"] = self.se.conv_out_b
        out["embed/w"] = self.embed_w
        out["embed/b"] = self.embed_b
        for i, blk in enumerate(self.blocks):
            if isinstance(blk, RMambaBlockWeights):
                p = f"mamba{i}"
                out[f"{p}/norm/g"] = blk.norm_g
                out[f"{p}/norm/b"] = blk.norm_b
                m = blk.mamba
                out[f"{p}/in_s/w"] = m.in_s_w
                out[f"{p}/in_s/b"] = m.in_s_b
                out[f"{p}/in_z/w"] = m.in_z_w
                out[f"{p}/in_z/b"] = m.in_z_b
                out[f"{p}/conv/k"] = m.conv_k
                out[f"{p}/ssm/a_log"] = m.ssm.a_log
                out[f"{p}/ssm/dt_bias"] = m.ssm.dt_bias
                out[f"{p}/ssm/b_w"] = m.ssm.b_w
                out[f"{p}/ssm/c_w"] = m.ssm.c_w
                out[f"{p}/ssm/dt_w"] = m.ssm.dt_w
                if m.ssm.d_skip is not None:
                    out[f"{p}/ssm/d_skip"] = m.ssm.d_skip
                out[f"{p}/out/w"] = m.out_w
                out[f"{p}/out/b"] = m.out_b
            else:
                p = f"attn{i}"
                for name in (
                    "norm1_g", "norm1_b", "q_w", "q_b", "k_w", "k_b", "v_w", "v_b",
                    "o_w", "o_b", "norm2_g", "norm2_b", "ff1_w", "ff1_b", "ff2_w", "ff2_b",
                ):
                    out[f"{p}/{name}"] = getattr(blk, name)
        out["head/feature/w"] = self.head_f_w
        out["head/feature/b"] = self.head_f_b
        out["head/time/w"] = self.head_t_w
        out["head/time/b"] = self.head_t_b
        return out

    def n_parameters(self) -> int:
        return sum(t.size for t in self.parameters().values())

    def copy(self) -> "ModelState":
        dup = init_model(self.config, seed=0)
        for key, tensor in self.parameters().items():
            dup.parameters()[key].data[:] = tensor.data
        dup.step = self.step
        return dup


def _ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def _init_se_block(c: int, r: int, rng) -> SeBlockWeights:
    hidden = c // r
    return SeBlockWeights(
        fc1_w=uniform_init(rng, (c, hidden), c),
        fc1_b=zeros_init(hidden),
        fc2_w=uniform_init(rng, (hidden, c), hidden),
        fc2_b=zeros_init(c),
    )


def _init_se_resnet(cfg: ModelConfig, rng) -> SeResNetWeights:
    c = cfg.conv_channels
    blocks = [
        ResBlockWeights(
            conv1_k=uniform_init(rng, (c, c, 3, 3), c * 9),
            conv1_b=zeros_init(c),
            conv2_k=uniform_init(rng, (c, c, 3, 3), c * 9),
            conv2_b=zeros_init(c),
            gate=_init_se_block(c, cfg.se_reduction, rng),
        )
        for _ in range(cfg.n_res)
    ]
    return SeResNetWeights(
        conv_in_k=uniform_init(rng, (c, 2, 3, 3), 2 * 9),
        conv_in_b=zeros_init(c),
        blocks=blocks,
        conv_out_k=uniform_init(rng, (2, c, 3, 3), c * 9),
        conv_out_b=zeros_init(2),
    )


def _init_attention_block(cfg: ModelConfig, rng) -> AttentionBlockWeights:
    d = cfg.d_model
    hidden = cfg.expand * d
    return AttentionBlockWeights(
        norm1_g=_ones_param(d),
        norm1_b=zeros_init(d),
        q_w=uniform_init(rng, (d, d), d),
        q_b=zeros_init(d),
        k_w=uniform_init(rng, (d, d), d),
        k_b=zeros_init(d),
        v_w=uniform_init(rng, (d, d), d),
        v_b=zeros_init(d),
        o_w=uniform_init(rng, (d, d), d),
        o_b=zeros_init(d),
        norm2_g=_ones_param(d),
        norm2_b=zeros_init(d),
        ff1_w=uniform_init(rng, (d, hidden), d),
        ff1_b=zeros_init(hidden),
        ff2_w=uniform_init(rng, (hidden, d), hidden),
        ff2_b=zeros_init(d),
    )


def init_model(cfg: ModelConfig, seed: int) -> ModelState:
    """Fresh parameters from the init stream of `seed`."""
    rng = stream(seed, 0)
    d_feat = cfg.feature_dim
    if cfg.ablation == "no_patch":
        patch_w = patch_b = None
    else:
        patch_w = uniform_init(rng, (cfg.n_patch, cfg.n_patch), cfg.n_patch)
        patch_b = zeros_init(cfg.n_patch)
    se = None if cfg.ablation == "no_se" else _init_se_resnet(cfg, rng)
    if cfg.ablation == "attention_backbone":
        blocks = [_init_attention_block(cfg, rng) for _ in range(cfg.n_mamba)]
    else:
        blocks = [
            RMambaBlockWeights(
                norm_g=_ones_param(cfg.d_model),
                norm_b=zeros_init(cfg.d_model),
                mamba=init_mamba_weights(
                    cfg.d_model, cfg.d_state, cfg.d_conv, cfg.expand, rng, use_d_skip=cfg.use_d_skip
                ),
            )
            for _ in range(cfg.n_mamba)
        ]
    return ModelState(
        config=cfg,
        patch_w=patch_w,
        patch_b=patch_b,
        se=se,
        embed_w=uniform_init(rng, (d_feat, cfg.d_model), d_feat),
        embed_b=zeros_init(cfg.d_model),
        blocks=blocks,
        head_f_w=uniform_init(rng, (cfg.d_model, d_feat), cfg.d_model),
        head_f_b=zeros_init(d_feat),
        head_t_w=uniform_init(rng, (cfg.history_len, cfg.horizon), cfg.history_len),
        head_t_b=zeros_init(cfg.horizon),
        step=0,
    )


# ---------------------------------------------------------------------------
# input layout


def reshape_input(frames: np.ndarray) -> np.ndarray:
    """Complex [S, L, N_t, K] -> real [S*N_t, L, 2K].

    Antennas merge into the batch (antenna index varies fastest); features
    are [re(k=0..K-1), im(k=0..K-1)].
    """
    s, seq_len, n_t, k = frames.shape
    x = frames.transpose(0, 2, 1, 3).reshape(s * n_t, seq_len, k)
    return np.concatenate([x.real, x.imag], axis=-1)


def restore_output(y: np.ndarray, n_t: int) -> np.ndarray:
    """Inverse of reshape_input for predictions: [S*N_t, P, 2K] -> complex [S, P, N_t, K]."""
    b, horizon, d = y.shape
    if b % n_t or d % 2:
        raise ShapeError(f"restore_output: batch {b} not divisible by n_t={n_t} or odd D={d}")
    k = d // 2
    z = y[..., :k] + 1j * y[..., k:]
    return z.reshape(b // n_t, n_t, horizon, k).transpose(0, 2, 1, 3)


# ---------------------------------------------------------------------------
# stages


def normalize(x: Tensor) -> tuple[Tensor, NormStats]:
    """Whole-tensor standardization; the stats are constants of this call."""
    mu = float(x.data.mean())
    sigma = max(float(x.data.std()), 1e-8)
    return ops.mul(ops.sub(x, mu), 1.0 / sigma), NormStats(mu, sigma)


def denormalize(x: Tensor, stats: NormStats) -> Tensor:
    return ops.add(ops.mul(x, stats.sigma), stats.mu)


def patch_embed(x: Tensor, w: Tensor, b: Tensor, n_patch: int) -> Tensor:
    """Shared affine map over non-overlapping time patches, shape preserving.

    The tail is zero-padded up to a whole patch and dropped again after the
    inverse rearrangement.
    """
    bsz, seq_len, d = x.shape
    n_p = math.ceil(seq_len / n_patch)
    pad = n_p * n_patch - seq_len
    xp = ops.pad_axis(x, 1, pad)
    xp = ops.reshape(xp, (bsz, n_p, n_patch, d))
    xp = ops.permute(xp, (0, 1, 3, 2))
    xp = ops.linear(xp, w, b)
    xp = ops.permute(xp, (0, 1, 3, 2))
    xp = ops.reshape(xp, (bsz, n_p * n_patch, d))
    return ops.slice_axis(xp, 1, 0, seq_len) if pad else xp


def to_planes(x: Tensor, k_sub: int) -> Tensor:
    """[B, L, 2K] -> [B, 2, L, K]: real/imag halves become conv channels."""
    bsz, seq_len, d = x.shape
    if d != 2 * k_sub:
        raise ShapeError(f"to_planes: feature dim {d} != 2*{k_sub}")
    return ops.permute(ops.reshape(x, (bsz, seq_len, 2, k_sub)), (0, 2, 1, 3))


def from_planes(x: Tensor) -> Tensor:
    bsz, two, seq_len, k_sub = x.shape
    return ops.reshape(ops.permute(x, (0, 2, 1, 3)), (bsz, seq_len, two * k_sub))


def se_block(x: Tensor, w: SeBlockWeights) -> Tensor:
    """Channel gates from pooled statistics, shared MLP over both pools."""
    bsz, c = x.shape[0], x.shape[1]

    def excite(pooled):
        v = ops.reshape(pooled, (bsz, c))
        return ops.linear(ops.relu(ops.linear(v, w.fc1_w, w.fc1_b)), w.fc2_w, w.fc2_b)

    gate = ops.sigmoid(
        ops.add(excite(ops.pool_global(x, "avg")), excite(ops.pool_global(x, "max")))
    )
    return ops.mul(x, ops.reshape(gate, (bsz, c, 1, 1)))


def se_resnet(x: Tensor, w: SeResNetWeights) -> Tensor:
    """conv(2->C) -> N_res x [conv -> ReLU -> conv -> SE -> skip add] -> conv(C->2)."""
    f = ops.conv2d_3x3(x, w.conv_in_k, w.conv_in_b)
    for blk in w.blocks:
        y = ops.relu(ops.conv2d_3x3(f, blk.conv1_k, blk.conv1_b))
        y = ops.conv2d_3x3(y, blk.conv2_k, blk.conv2_b)
        f = ops.add(f, se_block(y, blk.gate))
    return ops.conv2d_3x3(f, w.conv_out_k, w.conv_out_b)


def rmamba_stack(x: Tensor, blocks, cfg: ModelConfig, training: bool, rng) -> Tensor:
    for blk in blocks:
        y = mamba_block(
            ops.layer_norm(x, blk.norm_g, blk.norm_b),
            blk.mamba,
            lagged_input=cfg.lagged_scan_input,
            euler_b=cfg.euler_discretization,
        )
        x = ops.add(x, ops.dropout(y, cfg.dropout_p, training, rng))
    return x


def attention_backbone(x: Tensor, blocks, cfg: ModelConfig, training: bool, rng) -> Tensor:
    """Pre-norm transformer blocks with the same residual interface."""
    bsz, seq_len, d = x.shape
    heads = cfg.n_heads
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)

    def split_heads(v):
        return ops.permute(ops.reshape(v, (bsz, seq_len, heads, dh)), (0, 2, 1, 3))

    for blk in blocks:
        h = ops.layer_norm(x, blk.norm1_g, blk.norm1_b)
        q = split_heads(ops.linear(h, blk.q_w, blk.q_b))
        k = split_heads(ops.linear(h, blk.k_w, blk.k_b))
        v = split_heads(ops.linear(h, blk.v_w, blk.v_b))
        scores = ops.mul(ops.matmul(q, ops.permute(k, (0, 1, 3, 2))), scale)
        ctx = ops.matmul(ops.softmax_last(scores), v)
        ctx = ops.reshape(ops.permute(ctx, (0, 2, 1, 3)), (bsz, seq_len, d))
        x = ops.add(x, ops.dropout(ops.linear(ctx, blk.o_w, blk.o_b), cfg.dropout_p, training, rng))
        h2 = ops.layer_norm(x, blk.norm2_g, blk.norm2_b)
        ff = ops.linear(ops.relu(ops.linear(h2, blk.ff1_w, blk.ff1_b)), blk.ff2_w, blk.ff2_b)
        x = ops.add(x, ops.dropout(ff, cfg.dropout_p, training, rng))
    return x


def prediction_head(x: Tensor, stats: NormStats, state: ModelState) -> Tensor:
    """Feature FC (d_model -> D), time FC (L -> P) on the transposed axis,
    then the denormalization back to CSI scale."""
    xfe = ops.linear(x, state.head_f_w, state.head_f_b)
    xt = ops.permute(xfe, (0, 2, 1))
    xt = ops.linear(xt, state.head_t_w, state.head_t_b)
    xre = ops.permute(xt, (0, 2, 1))
    return denormalize(xre, stats)


def forward(x: Tensor, state: ModelState, training: bool = False, dropout_rng=None) -> Tensor:
    """[B, L, D] history -> [B, P, D] prediction."""
    cfg = state.config
    if x.ndim != 3 or x.shape[1] != cfg.history_len or x.shape[2] != cfg.feature_dim:
        raise ShapeError(
            f"forward: expected [*, {cfg.history_len}, {cfg.feature_dim}], got {tuple(x.shape)}"
        )
    if training and cfg.dropout_p > 0 and dropout_rng is None:
        raise ConfigError("training forward needs an explicit dropout rng")
    xn, stats = normalize(x)
    if state.patch_w is not None:
        xn = patch_embed(xn, state.patch_w, state.patch_b, cfg.n_patch)
    if state.se is not None:
        xn = from_planes(se_resnet(to_planes(xn, cfg.k_sub), state.se))
    xe = ops.linear(xn, state.embed_w, state.embed_b)
    if cfg.ablation == "attention_backbone":
        xm = attention_backbone(xe, state.blocks, cfg, training, dropout_rng)
    else:
        xm = rmamba_stack(xe, state.blocks, cfg, training, dropout_rng)
    return prediction_head(xm, stats, state)


# ---------------------------------------------------------------------------
# checkpoint io


def save_state(state: ModelState, path) -> None:
    """CPMB v1: magic, version, JSON header, named f64 arrays, CRC32 trailer."""
    params = state.parameters()
    header = json.dumps(
        {"config": state.config.to_dict(), "step": state.step},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    chunks = [_CKPT_MAGIC, struct.pack("<2I", _CKPT_VERSION, len(header)), header]
    chunks.append(struct.pack("<I", len(params)))
    for name in sorted(params):
        arr = params[name].data
        enc = name.encode()
        chunks.append(struct.pack("<I", len(enc)))
        chunks.append(enc)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    body = b"".join(chunks)
    try:
        with open(path, "wb") as fh:
            fh.write(body)
            fh.write(struct.pack("<I", zlib.crc32(body)))
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint to {path}: {e}") from e


def load_state(path, expected_config: ModelConfig | None = None) -> ModelState:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint from {path}: {e}") from e
    if len(raw) < 16 or raw[:4] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a CPMB checkpoint")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    version, hlen = struct.unpack_from("<2I", raw, 4)
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    meta = json.loads(raw[off : off + hlen].decode())
    off += hlen
    cfg = ModelConfig.from_dict(meta["config"])
    if expected_config is not None and cfg != expected_config:
        raise CheckpointError(
            f"{path}: checkpoint config does not match the expected config "
            f"(stored {cfg.to_dict()}, expected {expected_config.to_dict()})"
        )
    (n_arrays,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays = {}
    for _ in range(n_arrays):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
    state = init_model(cfg, seed=0)
    params = state.parameters()
    if set(arrays) != set(params):
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        raise CheckpointError(f"{path}: parameter keys disagree (missing {missing}, extra {extra})")
    for name, arr in arrays.items():
        if params[name].data.shape != arr.shape:
            raise CheckpointError(
                f"{path}: shape of {name} is {arr.shape}, expected {params[name].data.shape}"
            )
        params[name].data[:] = arr
    state.step = int(meta["step"])
    return state
