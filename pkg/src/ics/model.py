"""U-shaped window-attention reconstruction network with measurement projection.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names
(``enc0.blk1.attn.wq``, ``tail.conv2.w`` ...). The shared sampling matrix and
its linear mapper are the ``phi`` and ``psi`` entries. Feature maps are
N×C×H×W; transformer blocks work on N×H×W×C tokens.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .autodiff import (
    DimensionError,
    Tensor,
    concat,
    conv2d,
    gelu,
    layer_norm,
    pixel_shuffle,
    pixel_unshuffle,
    roll,
    softmax,
    take,
)
from .projection import McpParams, as_padded, mcp_forward
from .sampling import (
    DEFAULT_BLOCK,
    MeasurementMatrix,
    MeasurementSet,
    PaddedMeasurements,
    image_from_block_rows,
    phi_prefix,
    random_measurement_matrix,
)

LEVELS = 4
MASK_VALUE = -1e4


@dataclass
class ModelConfig:
    C0: int = 32
    depths: tuple = (4, 4, 6, 6)
    heads: tuple = (1, 2, 4, 8)
    windows: tuple = (8, 8, 4, 4)
    ffn_ratio: int = 4
    B: int = DEFAULT_BLOCK
    matrix_mode: str = "gaussian"

    def __post_init__(self):
        self.depths, self.heads, self.windows = tuple(self.depths), tuple(self.heads), tuple(self.windows)
        for name in ("depths", "heads", "windows"):
            if len(getattr(self, name)) != LEVELS:
                raise ValueError(f"{name} needs {LEVELS} entries")
        if any(d % 2 for d in self.depths):
            raise ValueError("depths must be even so W-MSA and SW-MSA layers pair up")
        for i in range(LEVELS):
            c = self.channels(i)
            if c % 4**i:
                raise ValueError(f"level {i}: {c} channels not divisible by {4**i}")
            if c % self.heads[i]:
                raise ValueError(f"level {i}: {c} channels not divisible by {self.heads[i]} heads")
        if self.C0 % 2:
            raise ValueError("C0 must be even")

    @classmethod
    def toy(cls, **kw) -> "ModelConfig":
        base = dict(C0=8, depths=(2, 2, 2, 2), heads=(1, 1, 2, 2), windows=(4, 4, 2, 2))
        base.update(kw)
        return cls(**base)

    def channels(self, level: int) -> int:
        return 2**level * self.C0

    def check_resolution(self, H: int, W: int) -> None:
        if H % 32 or W % 32:
            raise DimensionError(f"resolution {H}×{W} must be a multiple of 32")
        if H % self.B or W % self.B:
            raise DimensionError(f"resolution {H}×{W} not divisible by block size {self.B}")
        for i, win in enumerate(self.windows):
            if (H >> i) % win or (W >> i) % win:
                raise DimensionError(f"level {i} resolution not divisible by window {win}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


# parameters -----------------------------------------------------------------


def _conv(params, rng, name, cin, cout, k=3):
    params[f"{name}.w"] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(cin * k * k), (cout, cin, k, k)), True)
    params[f"{name}.b"] = Tensor(np.zeros(cout), True)


def _linear(params, rng, name, din, dout):
    params[f"{name}.w"] = Tensor(rng.normal(0.0, 0.02, (din, dout)), True)
    params[f"{name}.b"] = Tensor(np.zeros(dout), True)


def _ln(params, name, d):
    params[f"{name}.g"] = Tensor(np.ones(d), True)
    params[f"{name}.b"] = Tensor(np.zeros(d), True)


def _resblock(params, rng, name, c):
    _conv(params, rng, f"{name}.conv1", c, c)
    _conv(params, rng, f"{name}.conv2", c, c)


def _ptb(params, rng, name, cfg: ModelConfig, level: int):
    d, win = cfg.channels(level), cfg.windows[level]
    for k in range(cfg.depths[level]):
        blk = f"{name}.blk{k}"
        _ln(params, f"{blk}.ln1", d)
        for proj in ("wq", "wk", "wv"):
            params[f"{blk}.attn.{proj}"] = Tensor(rng.normal(0.0, 0.02, (d, d)), True)
        params[f"{blk}.attn.bias"] = Tensor(rng.normal(0.0, 0.02, (cfg.heads[level], (2 * win - 1) ** 2)), True)
        _ln(params, f"{blk}.ln2", d)
        _linear(params, rng, f"{blk}.ffn1", d, cfg.ffn_ratio * d)
        _linear(params, rng, f"{blk}.ffn2", cfg.ffn_ratio * d, d)
    _ln(params, f"{name}.ln", d)
    params[f"{name}.alpha"] = Tensor(np.zeros(d // 4**level), True)


def init_params(cfg: ModelConfig, seed: int = 0, mm: Optional[MeasurementMatrix] = None) -> dict[str, Tensor]:
    """Fresh parameters; ``phi``/``psi`` come from ``mm`` or a seeded draw."""
    rng = np.random.default_rng(seed)
    if mm is None:
        mm = random_measurement_matrix(cfg.B, seed=seed, mode=cfg.matrix_mode)
    params: dict[str, Tensor] = {
        "phi": Tensor(mm.phi.copy(), True),
        "psi": Tensor(mm.psi.copy(), True),
    }
    C0 = cfg.C0
    _conv(params, rng, "head.conv1", 1, C0 // 2)
    _conv(params, rng, "head.conv2", C0 // 2, C0)
    _resblock(params, rng, "head.res", C0)
    for i in range(LEVELS):
        _ptb(params, rng, f"enc{i}", cfg, i)
        if i < LEVELS - 1:
            c = cfg.channels(i)
            _conv(params, rng, f"down{i}", c, c // 2)
    for i in reversed(range(LEVELS - 1)):
        c = cfg.channels(i)
        _conv(params, rng, f"up{i}", 2 * c, 4 * c)
        _conv(params, rng, f"fuse{i}.conv", 2 * c, c, k=1)
        _resblock(params, rng, f"fuse{i}.res", c)
        _ptb(params, rng, f"dec{i}", cfg, i)
    _resblock(params, rng, "tail.res", C0)
    _conv(params, rng, "tail.conv1", C0, C0 // 2)
    _conv(params, rng, "tail.conv2", C0 // 2, 1)
    return params


def parameter_count(params: dict[str, Tensor]) -> int:
    return sum(p.size for p in params.values())


# building blocks ------------------------------------------------------------


def _apply_conv(x, params, name):
    return conv2d(x, params[f"{name}.w"], params[f"{name}.b"])


def residual_block(x: Tensor, params, name: str) -> Tensor:
    return x + _apply_conv(gelu(_apply_conv(x, params, f"{name}.conv1")), params, f"{name}.conv2")


def head_forward(x0: Tensor, params, name: str = "head") -> Tensor:
    """conv(1→C0/2) → GELU → conv(C0/2→C0) → residual conv block."""
    h = gelu(_apply_conv(x0, params, f"{name}.conv1"))
    h = _apply_conv(h, params, f"{name}.conv2")
    return residual_block(h, params, f"{name}.res")


def tail_forward(xu: Tensor, x0: Tensor, params, name: str = "tail") -> Tensor:
    """residual conv block → conv(C0→C0/2) → GELU → conv(C0/2→1), plus the initialization."""
    t = residual_block(xu, params, f"{name}.res")
    t = gelu(_apply_conv(t, params, f"{name}.conv1"))
    return _apply_conv(t, params, f"{name}.conv2") + x0


def downsample(f: Tensor, params, name: str) -> Tensor:
    if f.shape[-1] % 2 or f.shape[-2] % 2:
        raise DimensionError(f"downsample needs even resolution, got {f.shape[-2:]}")
    return pixel_unshuffle(_apply_conv(f, params, name), 2)


def upsample(f: Tensor, params, name: str) -> Tensor:
    if f.shape[-3] % 2:
        raise DimensionError(f"upsample needs an even channel count, got {f.shape[-3]}")
    return pixel_shuffle(_apply_conv(f, params, name), 2)


def feature_fusion(dec: Tensor, enc: Tensor, params, name: str) -> Tensor:
    if dec.shape != enc.shape:
        raise DimensionError(f"cannot fuse {dec.shape} with {enc.shape}")
    axis = dec.ndim - 3
    c = _apply_conv(concat([dec, enc], axis=axis), params, f"{name}.conv")
    return residual_block(c, params, f"{name}.res")


# window attention -----------------------------------------------------------


@dataclass
class WindowAttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    bias: Tensor  # heads × (2W-1)²
    heads: int
    window: int

    @classmethod
    def from_params(cls, params, name: str, heads: int, window: int) -> "WindowAttentionParams":
        return cls(params[f"{name}.wq"], params[f"{name}.wk"], params[f"{name}.wv"], params[f"{name}.bias"], heads, window)


@lru_cache(maxsize=None)
def relative_position_index(window: int) -> np.ndarray:
    """T×T index into the (2W-1)² bias table, T = W², depending only on (Δrow, Δcol)."""
    rows, cols = np.divmod(np.arange(window * window), window)
    dr = rows[:, None] - rows[None, :] + window - 1
    dc = cols[:, None] - cols[None, :] + window - 1
    return dr * (2 * window - 1) + dc


@lru_cache(maxsize=None)
def shift_mask(H: int, W: int, window: int) -> np.ndarray:
    """nW×T×T additive mask that blocks attention between wrapped-around regions."""
    s = window // 2
    labels = np.zeros((H, W), dtype=np.int64)
    cuts_h = (slice(0, H - window), slice(H - window, H - s), slice(H - s, H))
    cuts_w = (slice(0, W - window), slice(W - window, W - s), slice(W - s, W))
    label = 0
    for sh in cuts_h:
        for sw in cuts_w:
            labels[sh, sw] = label
            label += 1
    win = labels.reshape(H // window, window, W // window, window).transpose(0, 2, 1, 3).reshape(-1, window * window)
    return np.where(win[:, :, None] != win[:, None, :], MASK_VALUE, 0.0)


def _attend(z: Tensor, p: WindowAttentionParams, shifted: bool) -> Tensor:
    n, H, W, d = z.shape
    ws, heads = p.window, p.heads
    if H % ws or W % ws:
        raise DimensionError(f"resolution {H}×{W} not divisible by window {ws}")
    s = ws // 2 if shifted else 0
    if s:
        z = roll(z, (-s, -s), (1, 2))
    nh, nw, T, dh = H // ws, W // ws, ws * ws, d // heads
    nb = n * nh * nw
    x = z.reshape(n, nh, ws, nw, ws, d).transpose(0, 1, 3, 2, 4, 5).reshape(nb, T, d)

    def split(t):
        return t.reshape(nb, T, heads, dh).transpose(0, 2, 1, 3)

    q, k, v = split(x @ p.wq), split(x @ p.wk), split(x @ p.wv)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    scores = scores + take(p.bias, relative_position_index(ws), axis=1)
    if s:
        mask = shift_mask(H, W, ws)[None, :, None]
        scores = (scores.reshape(n, nh * nw, heads, T, T) + mask).reshape(nb, heads, T, T)
    o = softmax(scores) @ v
    o = o.transpose(0, 2, 1, 3).reshape(n, nh, nw, ws, ws, d).transpose(0, 1, 3, 2, 4, 5).reshape(n, H, W, d)
    if s:
        o = roll(o, (s, s), (1, 2))
    return o


def window_attention(f: Tensor, p: WindowAttentionParams, shifted: bool = False) -> Tensor:
    """Multi-head self-attention inside W×W windows of a d×H×W (or N×d×H×W) feature.

    The shifted variant rolls the map by -W//2 along both axes, masks pairs
    that came from different wrapped regions, and rolls back.
    """
    squeeze = f.ndim == 3
    if squeeze:
        f = f.reshape((1,) + f.shape)
    out = _attend(f.transpose(0, 2, 3, 1), p, shifted).transpose(0, 3, 1, 2)
    return out.reshape(out.shape[1:]) if squeeze else out


def _ln_apply(z, params, name):
    return layer_norm(z, params[f"{name}.g"], params[f"{name}.b"])


def transformer_block(z: Tensor, params, name: str, heads: int, window: int, shifted: bool) -> Tensor:
    """Pre-norm attention and feed-forward sublayers, each with a residual path.

    ``z`` holds N×H×W×d tokens.
    """
    attn = WindowAttentionParams.from_params(params, f"{name}.attn", heads, window)
    t = z + _attend(_ln_apply(z, params, f"{name}.ln1"), attn, shifted)
    u = _ln_apply(t, params, f"{name}.ln2")
    u = gelu(u @ params[f"{name}.ffn1.w"] + params[f"{name}.ffn1.b"])
    return t + (u @ params[f"{name}.ffn2.w"] + params[f"{name}.ffn2.b"])


def projection_transformer_block(
    f: Tensor, Y, params, cfg: ModelConfig, level: int, name: str, depth: Optional[int] = None
) -> Tensor:
    """Alternating W-MSA/SW-MSA transformer blocks, then MCP of the layer-normed result."""
    depth = cfg.depths[level] if depth is None else depth
    z = f.transpose(0, 2, 3, 1)
    for k in range(depth):
        z = transformer_block(z, params, f"{name}.blk{k}", cfg.heads[level], cfg.windows[level], shifted=k % 2 == 1)
    z = _ln_apply(z, params, f"{name}.ln").transpose(0, 3, 1, 2)
    mcp = McpParams(cfg.channels(level) // 4**level, level, params[f"{name}.alpha"])
    return mcp_forward(z, Y, params["phi"], mcp)


# full model -----------------------------------------------------------------


def initialize_tensor(Y: PaddedMeasurements, psi: Tensor) -> Tensor:
    """N×1×H×W initialization: each block is ``psi[:, :m_ij] @ y_ij``, tiled by pixel shuffle."""
    h, w = Y.grid
    rows = Y.y @ phi_prefix(psi.T, Y.width)
    return image_from_block_rows(rows, h, w, Y.B)


def initialize_image(Y: MeasurementSet, mm: MeasurementMatrix) -> np.ndarray:
    """Linear-mapping initialization of a single measurement set as an H×W array."""
    h, w = Y.grid
    B = Y.config.B
    vecs = np.stack([mm.psi[:, : len(yk)] @ yk for yk in Y.y])
    return vecs.reshape(h, w, B, B).transpose(0, 2, 1, 3).reshape(h * B, w * B)


def uformer_forward(Y, params, cfg: ModelConfig, return_init: bool = False):
    """Reconstruct an N×1×H×W batch from its (padded) measurements."""
    Y = as_padded(Y)
    cfg.check_resolution(*Y.image_shape)
    x0 = initialize_tensor(Y, params["psi"])
    x = head_forward(x0, params)
    skips = []
    for i in range(LEVELS):
        x = projection_transformer_block(x, Y, params, cfg, i, f"enc{i}")
        skips.append(x)
        if i < LEVELS - 1:
            x = downsample(x, params, f"down{i}")
    for i in reversed(range(LEVELS - 1)):
        x = upsample(x, params, f"up{i}")
        x = feature_fusion(x, skips[i], params, f"fuse{i}")
        x = projection_transformer_block(x, Y, params, cfg, i, f"dec{i}")
    out = tail_forward(x, x0, params)
    return (out, x0) if return_init else out


@dataclass
class UformerICS:
    """Config plus parameters, with conveniences for end-to-end reconstruction."""

    cfg: ModelConfig = field(default_factory=ModelConfig)
    params: dict = None
    seed: int = 0

    def __post_init__(self):
        if self.params is None:
            self.params = init_params(self.cfg, self.seed)

    @property
    def matrix(self) -> MeasurementMatrix:
        return MeasurementMatrix(phi=self.params["phi"].data, psi=self.params["psi"].data)

    def forward(self, Y) -> Tensor:
        return uformer_forward(Y, self.params, self.cfg)

    def reconstruct(self, Y: MeasurementSet | Sequence[MeasurementSet]) -> np.ndarray:
        """Reconstruction(s) as plain arrays: H×W for one set, N×H×W for a sequence."""
        single = isinstance(Y, MeasurementSet)
        out = self.forward(Y).data[:, 0]
        return out[0] if single else out
