"""Object-feature extractor with hand-rolled forward and reverse passes.

Small convolutional trunk (three stride-2 stages), global average pool,
optional harmonic goal embedding concatenated after the trunk, then a
two-layer head producing the m-dimensional object feature.  Everything
is plain float64 numpy so gradients can be verified against finite
differences to tight tolerances.

Weight initialization draws from numpy's PCG64 generator (He fan-in
scaling, zero biases), so parameters are reproducible from a seed on
any platform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GOAL_DIM = 3
GOAL_EMBED_DIM = 15  # passthrough + sin/cos at two octaves

_TENSOR_ORDER = (
    "conv1_w", "conv1_b",
    "conv2_w", "conv2_b",
    "conv3_w", "conv3_b",
    "fc1_w", "fc1_b",
    "fc2_w", "fc2_b",
)


class StaleCacheError(RuntimeError):
    """Cache was produced by a different parameter version."""


@dataclass(frozen=True)
class FeatNetArch:
    """Shape descriptor for the feature extractor.

    image_side must be divisible by 8 so the three stride-2 stages
    produce whole spatial sizes.
    """

    in_channels: int
    image_side: int = 32
    conv_channels: tuple[int, int, int] = (16, 32, 32)
    hidden: int = 64
    feature_dim: int = 8
    use_goal: bool = False

    def __post_init__(self):
        if self.image_side % 8 != 0:
            raise ValueError("image_side must be divisible by 8")
        if self.in_channels < 1 or self.feature_dim < 1:
            raise ValueError("in_channels and feature_dim must be >= 1")

    @property
    def head_in(self) -> int:
        return self.conv_channels[2] + (GOAL_EMBED_DIM if self.use_goal else 0)


@dataclass
class FeatNetParams:
    arch: FeatNetArch
    tensors: dict[str, np.ndarray]
    version: int = 0


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


@dataclass
class ForwardCache:
    """Everything the reverse pass reads, plus the input for replay."""

    stack: np.ndarray
    goal: np.ndarray | None
    cols: tuple[np.ndarray, ...]   # im2col matrices per conv stage
    pre: tuple[np.ndarray, ...]    # conv pre-activations z1..z3
    head_in: np.ndarray            # pooled (+ goal embedding) vector
    fc1_pre: np.ndarray
    fc1_act: np.ndarray
    feature: np.ndarray
    params_version: int = 0


def _tensor_shapes(arch: FeatNetArch) -> dict[str, tuple[int, ...]]:
    c1, c2, c3 = arch.conv_channels
    return {
        "conv1_w": (c1, arch.in_channels, 3, 3),
        "conv1_b": (c1,),
        "conv2_w": (c2, c1, 3, 3),
        "conv2_b": (c2,),
        "conv3_w": (c3, c2, 3, 3),
        "conv3_b": (c3,),
        "fc1_w": (arch.hidden, arch.head_in),
        "fc1_b": (arch.hidden,),
        "fc2_w": (arch.feature_dim, arch.hidden),
        "fc2_b": (arch.feature_dim,),
    }


def init_params(seed: int, arch: FeatNetArch) -> FeatNetParams:
    """He fan-in scaled weights, zero biases, deterministic per seed."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name in _TENSOR_ORDER:
        shape = _tensor_shapes(arch)[name]
        if name.endswith("_b"):
            tensors[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            tensors[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return FeatNetParams(arch=arch, tensors=tensors, version=0)


def harmonic_embed(v: np.ndarray) -> np.ndarray:
    """[v, sin(pi v), sin(2 pi v), cos(pi v), cos(2 pi v)] -> 15 entries."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (GOAL_DIM,):
        raise ValueError(f"goal vector must have length {GOAL_DIM}")
    return np.concatenate(
        [v, np.sin(np.pi * v), np.sin(2 * np.pi * v), np.cos(np.pi * v), np.cos(2 * np.pi * v)]
    )


# ---------------------------------------------------------------------------
# Conv plumbing (3x3 kernel, stride 2, zero padding 1)
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray) -> np.ndarray:
    cin, h, w = x.shape
    ho, wo = h // 2, w // 2
    padded = np.zeros((cin, h + 2, w + 2))
    padded[:, 1:-1, 1:-1] = x
    patches = np.empty((cin, 3, 3, ho, wo))
    for di in range(3):
        for dj in range(3):
            patches[:, di, dj] = padded[:, di : di + 2 * ho - 1 : 2, dj : dj + 2 * wo - 1 : 2]
    return patches.reshape(cin * 9, ho * wo)


def _col2im(dcols: np.ndarray, cin: int, h: int, w: int) -> np.ndarray:
    ho, wo = h // 2, w // 2
    dpatches = dcols.reshape(cin, 3, 3, ho, wo)
    dpadded = np.zeros((cin, h + 2, w + 2))
    for di in range(3):
        for dj in range(3):
            dpadded[:, di : di + 2 * ho - 1 : 2, dj : dj + 2 * wo - 1 : 2] += dpatches[:, di, dj]
    return dpadded[:, 1:-1, 1:-1]


def _conv_forward(x, w, b):
    cout = w.shape[0]
    cols = _im2col(x)
    z = (w.reshape(cout, -1) @ cols + b[:, None]).reshape(cout, x.shape[1] // 2, x.shape[2] // 2)
    return z, cols


def forward(
    params: FeatNetParams,
    stack: np.ndarray,
    goal: np.ndarray | None = None,
) -> tuple[np.ndarray, ForwardCache]:
    """Extract the object feature from an input stack.

    stack is (C, H, W) float; goal is a length-3 vector, required iff
    the architecture was built with use_goal.
    """
    arch = params.arch
    stack = np.asarray(stack, dtype=np.float64)
    if stack.shape != (arch.in_channels, arch.image_side, arch.image_side):
        raise ValueError(
            f"input stack shape {stack.shape} does not match architecture "
            f"({arch.in_channels}, {arch.image_side}, {arch.image_side})"
        )
    if arch.use_goal != (goal is not None):
        raise ValueError("goal vector must be supplied exactly when use_goal is set")

    t = params.tensors
    x = stack
    cols, pre = [], []
    for i in (1, 2, 3):
        z, c = _conv_forward(x, t[f"conv{i}_w"], t[f"conv{i}_b"])
        cols.append(c)
        pre.append(z)
        x = np.maximum(z, 0.0)

    pooled = x.mean(axis=(1, 2))
    if arch.use_goal:
        head_in = np.concatenate([pooled, harmonic_embed(goal)])
    else:
        head_in = pooled
    fc1_pre = t["fc1_w"] @ head_in + t["fc1_b"]
    fc1_act = np.maximum(fc1_pre, 0.0)
    feature = t["fc2_w"] @ fc1_act + t["fc2_b"]

    cache = ForwardCache(
        stack=stack,
        goal=None if goal is None else np.asarray(goal, dtype=np.float64),
        cols=tuple(cols),
        pre=tuple(pre),
        head_in=head_in,
        fc1_pre=fc1_pre,
        fc1_act=fc1_act,
        feature=feature,
        params_version=params.version,
    )
    return feature, cache


def backward(
    params: FeatNetParams,
    cache: ForwardCache,
    d_feature: np.ndarray,
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of feature . d_feature w.r.t. parameters and input pixels."""
    if cache.params_version != params.version:
        raise StaleCacheError(
            f"cache built at parameter version {cache.params_version}, "
            f"params are at {params.version}"
        )
    arch = params.arch
    t = params.tensors
    d_feature = np.asarray(d_feature, dtype=np.float64)
    if d_feature.shape != (arch.feature_dim,):
        raise ValueError("d_feature length must equal the feature dimension")

    grads: dict[str, np.ndarray] = {}
    grads["fc2_w"] = np.outer(d_feature, cache.fc1_act)
    grads["fc2_b"] = d_feature.copy()
    d_fc1 = (t["fc2_w"].T @ d_feature) * (cache.fc1_pre > 0.0)
    grads["fc1_w"] = np.outer(d_fc1, cache.head_in)
    grads["fc1_b"] = d_fc1
    d_head = t["fc1_w"].T @ d_fc1

    c3 = arch.conv_channels[2]
    side3 = arch.image_side // 8
    # Average pool spreads each channel gradient uniformly.
    d_act = np.broadcast_to(
        (d_head[:c3] / (side3 * side3))[:, None, None], (c3, side3, side3)
    )

    in_side = {3: arch.image_side // 4, 2: arch.image_side // 2, 1: arch.image_side}
    in_ch = {3: arch.conv_channels[1], 2: arch.conv_channels[0], 1: arch.in_channels}
    for i in (3, 2, 1):
        z = cache.pre[i - 1]
        dz = (d_act * (z > 0.0)).reshape(z.shape[0], -1)
        grads[f"conv{i}_w"] = (dz @ cache.cols[i - 1].T).reshape(t[f"conv{i}_w"].shape)
        grads[f"conv{i}_b"] = dz.sum(axis=1)
        dcols = t[f"conv{i}_w"].reshape(z.shape[0], -1).T @ dz
        d_act = _col2im(dcols, in_ch[i], in_side[i], in_side[i])

    return grads, d_act


def init_adam(params: FeatNetParams) -> AdamState:
    zeros = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    return AdamState(
        m=zeros, v={k: np.zeros_like(v) for k, v in params.tensors.items()}, t=0
    )


def adam_step(
    params: FeatNetParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[FeatNetParams, AdamState]:
    """Bias-corrected Adam update; returns fresh params and state."""
    b1, b2 = betas
    t_next = state.t + 1
    new_tensors, new_m, new_v = {}, {}, {}
    for name in _TENSOR_ORDER:
        g = grads[name]
        if g.shape != params.tensors[name].shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t_next)
        v_hat = v / (1.0 - b2**t_next)
        new_tensors[name] = params.tensors[name] - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    new_params = FeatNetParams(
        arch=params.arch, tensors=new_tensors, version=params.version + 1
    )
    return new_params, AdamState(m=new_m, v=new_v, t=t_next)


def _bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = img.shape
    ys = (np.arange(out_h) + 0.5) * in_h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * in_w / out_w - 0.5
    y0f, x0f = np.floor(ys), np.floor(xs)
    wy, wx = ys - y0f, xs - x0f
    y0 = np.clip(y0f.astype(int), 0, in_h - 1)
    y1 = np.clip(y0f.astype(int) + 1, 0, in_h - 1)
    x0 = np.clip(x0f.astype(int), 0, in_w - 1)
    x1 = np.clip(x0f.astype(int) + 1, 0, in_w - 1)
    top = img[np.ix_(y0, x0)] * (1 - wx) + img[np.ix_(y0, x1)] * wx
    bot = img[np.ix_(y1, x0)] * (1 - wx) + img[np.ix_(y1, x1)] * wx
    return top * (1 - wy[:, None]) + bot * wy[:, None]


def activation_heatmap(cache: ForwardCache) -> np.ndarray:
    """Energy of the last conv stage, upsampled and min-max normalized.

    Not class activation mapping (there is no classification head);
    this is the per-location sum of squared activations, which shows
    where the trunk spends its representation capacity.
    """
    act = np.maximum(cache.pre[2], 0.0)
    energy = np.sum(act * act, axis=0)
    side = cache.stack.shape[1]
    up = _bilinear_resize(energy, side, side)
    lo, hi = up.min(), up.max()
    if hi - lo < 1e-300:
        return np.zeros_like(up)
    return (up - lo) / (hi - lo)
