"""The model: stride-8 backbone, dilated feature combination, prediction heads.

Three heads share one combined exemplar/search response map: a regression
tower that outputs per-cell boundary distances, a regular classification
tower, and an object-aware classification conv whose sampling taps follow
the boxes predicted by the regression branch.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .align import aligned_conv, compute_offsets
from .errors import ArtifactError, ConfigError, ShapeError
from .geometry import GridSpec, decode_boxes
from .tensor import Tensor

TOTAL_STRIDE = 8

# Raw regression outputs pass through exp(.)*stride; this clamp keeps the
# exponential finite for any finite activation.
RAW_DISTANCE_CLAMP = 10.0

CLS_BIAS_INIT = -2.0

# Input pixels map to roughly +-8 and the correlation map is amplified; both
# gains counter the per-layer shrink of the uniform fan-in init (hidden biases
# start at zero, so the forward pass is positively homogeneous and a fixed
# rescale is exactly equivalent to a hotter init).
INPUT_SCALE = 16.0 / 255.0
INPUT_OFFSET = 127.5
XCORR_GAIN = 8.0
TOWER_GAIN = 6.0 ** 0.5


def preprocess(crop) -> np.ndarray:
    """Map raw 0..255 pixels to the network's input range."""
    return (np.asarray(crop, dtype=np.float64) - INPUT_OFFSET) * INPUT_SCALE


@dataclass(frozen=True)
class NetConfig:
    """Shapes and hyperparameters of the model.

    The backbone is a stack of conv+relu stages whose strides multiply to 8;
    the final stage trades its stride for dilation 2 so the last feature map
    keeps stride-8 geometry while widening the receptive field.  Defaults are
    the desk scale (64/128 inputs, 32 channels); the full scale (127/255,
    256 channels) is expressible through the same fields.
    """

    stage_channels: tuple[int, ...] = (16, 32, 32, 32)
    stage_strides: tuple[int, ...] = (2, 2, 2, 1)
    stage_dilations: tuple[int, ...] = (1, 1, 1, 2)
    combined_channels: int = 32
    kernel_size: int = 3
    tower_depth: int = 4
    dilation_set: tuple[tuple[int, int], ...] = ((1, 1), (1, 2), (2, 1))
    exemplar_size: int = 64
    search_size: int = 128
    couple_offsets: bool = False

    def __post_init__(self):
        n = len(self.stage_channels)
        if n == 0 or len(self.stage_strides) != n or len(self.stage_dilations) != n:
            raise ConfigError("stage channel/stride/dilation lists must have equal nonzero length")
        if any(c < 1 for c in self.stage_channels):
            raise ConfigError("stage channels must be positive")
        prod = 1
        for s in self.stage_strides:
            prod *= s
        if prod != TOTAL_STRIDE:
            raise ConfigError(f"backbone strides must multiply to {TOTAL_STRIDE}, got {prod}")
        if self.stage_strides[-1] != 1 or self.stage_dilations[-1] != 2:
            raise ConfigError("last backbone stage must use stride 1 with dilation 2")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {self.kernel_size}")
        if self.combined_channels < 1:
            raise ConfigError("combined_channels must be positive")
        if self.tower_depth < 0:
            raise ConfigError("tower_depth must be nonnegative")
        if not self.dilation_set or any(a < 1 or b < 1 for a, b in self.dilation_set):
            raise ConfigError("dilation_set must be nonempty pairs of positive ints")
        if len(set(self.dilation_set)) != len(self.dilation_set):
            raise ConfigError("dilation_set entries must be unique")
        if not (0 < self.exemplar_size < self.search_size):
            raise ConfigError("need 0 < exemplar_size < search_size")
        if self.score_size < 1:
            raise ConfigError("config yields an empty score map")

    def feature_size(self, image_size: int) -> int:
        """Spatial side of the backbone output for a square input."""
        n = image_size
        for s in self.stage_strides:
            # 3x3 conv with padding == dilation keeps the -1 // stride + 1 form.
            n = (n - 1) // s + 1
        return n

    @property
    def exemplar_feature_size(self) -> int:
        return self.feature_size(self.exemplar_size)

    @property
    def search_feature_size(self) -> int:
        return self.feature_size(self.search_size)

    @property
    def score_size(self) -> int:
        return self.search_feature_size - self.exemplar_feature_size + 1

    def grid(self) -> GridSpec:
        """Score-map cell to search-crop pixel mapping."""
        return GridSpec.centered(self.search_size, self.score_size, TOTAL_STRIDE)

    def branch_tag(self, a: int, b: int) -> str:
        return f"branch.{a}{b}"


class ModelParams:
    """Named parameter tensors, ordered, with the config that fixes them."""

    def __init__(self, cfg: NetConfig, tensors: "OrderedDict[str, Tensor]"):
        self.cfg = cfg
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self):
        return list(self.tensors.keys())

    def items(self):
        return self.tensors.items()

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def num_params(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data) for k, v in self.tensors.items())

    def copy(self) -> "ModelParams":
        out = OrderedDict()
        for k, v in self.tensors.items():
            out[k] = T.parameter(v.data.copy())
        return ModelParams(self.cfg, out)


def _conv_shapes(cfg: NetConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Every parameter name with its shape, in serialization order."""
    k = cfg.kernel_size
    shapes: "OrderedDict[str, tuple[int, ...]]" = OrderedDict()
    c_in = 3
    for i, c_out in enumerate(cfg.stage_channels):
        shapes[f"backbone.{i}.w"] = (c_out, c_in, k, k)
        shapes[f"backbone.{i}.b"] = (c_out,)
        c_in = c_out
    feat_ch = cfg.stage_channels[-1]
    cc = cfg.combined_channels
    for a, b in cfg.dilation_set:
        tag = cfg.branch_tag(a, b)
        for side in ("exemplar", "search"):
            shapes[f"{tag}.{side}.w"] = (cc, feat_ch, k, k)
            shapes[f"{tag}.{side}.b"] = (cc,)
    for head in ("reg", "cls"):
        for i in range(cfg.tower_depth):
            shapes[f"{head}.tower.{i}.w"] = (cc, cc, k, k)
            shapes[f"{head}.tower.{i}.b"] = (cc,)
    shapes["reg.head.w"] = (4, cc, k, k)
    shapes["reg.head.b"] = (4,)
    shapes["cls.head.w"] = (1, cc, k, k)
    shapes["cls.head.b"] = (1,)
    shapes["oa.w"] = (1, cc, k, k)
    shapes["oa.b"] = (1,)
    return shapes


def init_params(cfg: NetConfig, seed: int = 0) -> ModelParams:
    """Fan-in-scaled uniform weights, zero biases.

    Classification output biases start at -2 so the initial foreground
    probability sits near 0.12 instead of 0.5, which keeps the early
    cross-entropy of the mostly-negative score map small.
    """
    rng = np.random.default_rng(seed)
    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, shape in _conv_shapes(cfg).items():
        if name.endswith(".b"):
            data = np.zeros(shape, dtype=np.float64)
            if name in ("cls.head.b", "oa.b"):
                data[:] = CLS_BIAS_INIT
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = T.parameter(data)
    return ModelParams(cfg, tensors)


def backbone_forward(image: Tensor, params: ModelParams) -> Tensor:
    """Stride-8 feature map of a (3, H, W) image."""
    cfg = params.cfg
    if image.data.ndim != 3 or image.data.shape[0] != 3:
        raise ShapeError(f"backbone expects a (3,H,W) image, got {image.data.shape}")
    x = image
    for i, (s, d) in enumerate(zip(cfg.stage_strides, cfg.stage_dilations)):
        x = T.conv2d(
            x,
            params[f"backbone.{i}.w"],
            params[f"backbone.{i}.b"],
            dilation=(d, d),
            padding=(d, d),
            stride=s,
        )
        x = T.relu(x)
    return x


def combine_features(f_e: Tensor, f_s: Tensor, params: ModelParams) -> Tensor:
    """Sum over dilated branches of depthwise correlation.

    Each branch applies one dilated conv per side and correlates the results;
    the (a, b) pair dilates horizontally by a and vertically by b, so the
    three default branches probe square, wide, and tall context.
    """
    cfg = params.cfg
    if (
        f_e.data.shape[1] > f_s.data.shape[1]
        or f_e.data.shape[2] > f_s.data.shape[2]
    ):
        raise ShapeError(
            f"exemplar feature {f_e.data.shape} larger than search {f_s.data.shape}"
        )
    out = None
    for a, b in cfg.dilation_set:
        tag = cfg.branch_tag(a, b)
        dil = (b, a)  # conv dilation is (rows, cols)
        ke = T.conv2d(
            f_e, params[f"{tag}.exemplar.w"], params[f"{tag}.exemplar.b"],
            dilation=dil, padding=dil,
        )
        ks = T.conv2d(
            f_s, params[f"{tag}.search.w"], params[f"{tag}.search.b"],
            dilation=dil, padding=dil,
        )
        r = T.depthwise_xcorr(ks, ke)
        out = r if out is None else T.add(out, r)
    # Branch mean times a fixed gain.  The uniform fan-in init shrinks
    # activations at every layer, so the raw correlation comes out tiny;
    # the gain puts head logits in the sigmoid's linear range at init.
    return T.scale(out, XCORR_GAIN / len(cfg.dilation_set))


def _tower(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    cfg = params.cfg
    p = cfg.kernel_size // 2
    for i in range(cfg.tower_depth):
        x = T.conv2d(
            x, params[f"{prefix}.{i}.w"], params[f"{prefix}.{i}.b"], padding=(p, p)
        )
        # Same story as XCORR_GAIN: the uniform fan-in init loses a factor
        # sqrt(3) per conv and relu another sqrt(2); sqrt(6) restores unit
        # variance so the heads keep usable gradients at depth 4.
        x = T.relu(T.scale(x, TOWER_GAIN))
    return x


def regression_head(S: Tensor, params: ModelParams) -> Tensor:
    """Per-cell nonnegative boundary distances (4, H, W), in crop pixels."""
    cfg = params.cfg
    p = cfg.kernel_size // 2
    t = _tower(S, params, "reg.tower")
    raw = T.conv2d(t, params["reg.head.w"], params["reg.head.b"], padding=(p, p))
    raw = T.clamp(raw, -RAW_DISTANCE_CLAMP, RAW_DISTANCE_CLAMP)
    return T.scale(T.exp(raw), float(TOTAL_STRIDE))


def _boxes_to_grid_units(boxes, grid: GridSpec):
    """Corner-form pixel boxes -> center-form boxes in grid units."""
    inv = 1.0 / grid.stride
    if isinstance(boxes, Tensor):
        x0, y0 = T.channel(boxes, 0), T.channel(boxes, 1)
        x1, y1 = T.channel(boxes, 2), T.channel(boxes, 3)
        cx = T.scale(T.add(x0, x1), 0.5)
        cy = T.scale(T.add(y0, y1), 0.5)
        return T.stack([
            T.scale(T.shift(cx, -grid.offset), inv),
            T.scale(T.shift(cy, -grid.offset), inv),
            T.scale(T.sub(x1, x0), inv),
            T.scale(T.sub(y1, y0), inv),
        ])
    x0, y0, x1, y1 = boxes
    return np.stack([
        ((x0 + x1) * 0.5 - grid.offset) * inv,
        ((y0 + y1) * 0.5 - grid.offset) * inv,
        (x1 - x0) * inv,
        (y1 - y0) * inv,
    ])


def classification_heads(
    S: Tensor, reg_pred: Tensor, params: ModelParams
) -> tuple[Tensor, Tensor]:
    """Regular and object-aware foreground probabilities, each (H, W).

    The object-aware head is a single conv whose taps are moved to the box
    each cell predicts; by default the boxes enter as plain values so no
    gradient flows from this head back through the regression branch
    (couple_offsets=True keeps that path differentiable instead).
    """
    cfg = params.cfg
    p = cfg.kernel_size // 2
    grid = cfg.grid()
    if S.data.shape[1:] != (grid.height, grid.width):
        raise ShapeError(
            f"combined map {S.data.shape} does not match the {grid.height}x{grid.width} score grid"
        )

    t = _tower(S, params, "cls.tower")
    raw_r = T.conv2d(t, params["cls.head.w"], params["cls.head.b"], padding=(p, p))
    p_r = T.sigmoid(T.channel(raw_r, 0))

    if cfg.couple_offsets:
        boxes = decode_boxes(reg_pred, grid)
    else:
        boxes = decode_boxes(reg_pred.data, grid)
    offsets = compute_offsets(_boxes_to_grid_units(boxes, grid), cfg.kernel_size)
    raw_o = aligned_conv(S, params["oa.w"], offsets)
    raw_o = T.bias_add(raw_o, params["oa.b"])
    p_o = T.sigmoid(T.channel(raw_o, 0))
    return p_r, p_o


@dataclass
class NetOutput:
    """One forward pass: combined map, distances (px), and the two scores."""

    S: Tensor
    reg: Tensor
    p_r: Tensor
    p_o: Tensor


def forward_pair(params: ModelParams, exemplar: Tensor, search: Tensor) -> NetOutput:
    """Full forward pass on one exemplar/search pair."""
    f_e = backbone_forward(exemplar, params)
    f_s = backbone_forward(search, params)
    S = combine_features(f_e, f_s, params)
    reg = regression_head(S, params)
    p_r, p_o = classification_heads(S, reg, params)
    return NetOutput(S=S, reg=reg, p_r=p_r, p_o=p_o)


# ---------------------------------------------------------------------------
# Weight file format.
#
# Little-endian throughout: magic "OCWT", u32 version, u32 record count,
# then per record u32 name length, utf-8 name bytes, u32 rank, u32 dims,
# and the float64 payload.  Round trips are bit-exact.

MAGIC = b"OCWT"
VERSION = 1


def save_weights(path, params) -> None:
    if isinstance(params, ModelParams):
        records = params.state_arrays()
    else:
        records = OrderedDict(params)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(records)))
        for name, arr in records.items():
            nb = name.encode("utf-8")
            a = np.ascontiguousarray(arr, dtype="<f8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
            f.write(a.tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ArtifactError(f"weight file truncated while reading {what}")
    return buf


def load_weights(path) -> "OrderedDict[str, np.ndarray]":
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise ArtifactError(f"{path}: not a weight file (bad magic)")
        version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != VERSION:
            raise ArtifactError(f"{path}: unsupported weight file version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
            name = _read_exact(f, nlen, "name").decode("utf-8")
            if name in out:
                raise ArtifactError(f"{path}: duplicate record {name!r}")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
            dims = struct.unpack(
                f"<{rank}I", _read_exact(f, 4 * rank, "dims")
            )
            size = 1
            for d in dims:
                size *= d
            payload = _read_exact(f, 8 * size, f"payload of {name!r}")
            out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
        if f.read(1):
            raise ArtifactError(f"{path}: trailing bytes after last record")
    return out


def load_into(params: ModelParams, path) -> None:
    """Fill an initialized parameter set from a weight file, strictly."""
    arrays = load_weights(path)
    want = set(params.names())
    got = set(arrays.keys())
    if want != got:
        missing = sorted(want - got)
        extra = sorted(got - want)
        raise ArtifactError(
            f"{path}: parameter names do not match (missing {missing}, unexpected {extra})"
        )
    for name, arr in arrays.items():
        t = params[name]
        if arr.shape != t.data.shape:
            raise ArtifactError(
                f"{path}: {name!r} has shape {arr.shape}, expected {t.data.shape}"
            )
        t.data = arr.astype(t.data.dtype)


def load_params(cfg: NetConfig, path) -> ModelParams:
    params = init_params(cfg, seed=0)
    load_into(params, path)
    return params
