"""Multi-exit 1-D CNN with late-input blocks.

The trunk is a stack of ``conv -> maxpool -> ReLU`` stages. Early-exit heads hang
off selected trunk stages and see only the first slice(s) of the window. When an
exit declines to answer, the next raw slice is pushed through a late-input block
(``conv -> maxpool -> ReLU``) and appended along the time axis to the trunk map
before the following stage runs. The terminal head always sees the whole
window.

Slice ``n`` covers samples ``[floor(c_{n-1} L), floor(c_n L))`` with ``c_0 = 0``
and ``c_N = 1``, so every length below is known when the model is assembled.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kernels as K
from .errors import ConfigurationError, ShapeError, UsageError

FORMAT_NAME = "see-cnn"
FORMAT_VERSION = 1
MAX_EARLY_EXITS = 2
BYTES_PER_PARAM = 8


def prefix_length(fraction: float, length: int) -> int:
    """``floor(fraction * length)``, tolerant of binary rounding (0.29 * 100 -> 29)."""
    return int(math.floor(fraction * length + 1e-9))


@dataclass(frozen=True)
class ExitSpec:
    attach_after_layer: int
    data_fraction: float
    entropy_threshold: float | None = None
    loss_weight: float = 1.0


@dataclass(frozen=True)
class ArchitectureSpec:
    """Layer graph of a SEE CNN.

    ``exits`` lists the early exits followed by the terminal exit, which must sit
    after the last trunk layer with ``data_fraction == 1.0`` and no threshold.
    """

    channels: int
    segment_length: int
    num_classes: int
    exits: tuple[ExitSpec, ...]
    trunk_channels: tuple[int, ...] = (8, 16, 16, 32, 32)
    kernel_width: int = 3
    pool_width: int = 2
    pool_stride: int = 2
    fc_hidden: int = 32
    head_filters: int = 8
    head_kernel_width: int = 3
    head_pool_width: int = 2
    late_kernel_width: int = 3

    @classmethod
    def build(
        cls,
        channels: int,
        segment_length: int,
        num_classes: int,
        exit_layers=(),
        fractions=(),
        thresholds=None,
        loss_weights=None,
        **kwargs,
    ) -> "ArchitectureSpec":
        """Convenience constructor from parallel lists describing the early exits.

        ``fractions`` are cumulative data fractions in (0, 1); ``loss_weights`` has
        one entry per exit including the terminal one and defaults to the
        decreasing ``[2.0, 1.5, 1.0]`` truncated to the exit count.
        """
        exit_layers = tuple(int(a) for a in exit_layers)
        fractions = tuple(float(c) for c in fractions)
        if len(exit_layers) != len(fractions):
            raise ConfigurationError(
                f"{len(exit_layers)} exit layers but {len(fractions)} data fractions"
            )
        n_exits = len(exit_layers) + 1
        if thresholds is None:
            thresholds = [0.5] * len(exit_layers)
        if loss_weights is None:
            loss_weights = default_loss_weights(n_exits)
        if len(thresholds) != len(exit_layers) or len(loss_weights) != n_exits:
            raise ConfigurationError("thresholds/loss_weights do not match the number of exits")
        n_layers = len(kwargs.get("trunk_channels", cls.trunk_channels))
        exits = tuple(
            ExitSpec(a, c, float(t), float(w))
            for a, c, t, w in zip(exit_layers, fractions, thresholds, loss_weights)
        ) + (ExitSpec(n_layers, 1.0, None, float(loss_weights[-1])),)
        return cls(channels, segment_length, num_classes, exits, **kwargs)

    @property
    def num_trunk_layers(self) -> int:
        return len(self.trunk_channels)

    @property
    def num_exits(self) -> int:
        return len(self.exits)

    @property
    def early_exits(self) -> tuple[ExitSpec, ...]:
        return self.exits[:-1]

    @property
    def fractions(self) -> tuple[float, ...]:
        return tuple(e.data_fraction for e in self.exits)

    @property
    def thresholds(self) -> tuple[float, ...]:
        return tuple(e.entropy_threshold for e in self.early_exits)

    @property
    def loss_weights(self) -> tuple[float, ...]:
        return tuple(e.loss_weight for e in self.exits)

    def slice_bounds(self) -> list[int]:
        """Cumulative sample counts ``[b_1, ..., b_N]`` with ``b_N == L``."""
        return [prefix_length(e.data_fraction, self.segment_length) for e in self.exits]

    def validate(self) -> None:
        for name in ("channels", "segment_length", "num_classes", "kernel_width", "pool_width",
                     "pool_stride", "fc_hidden", "head_filters", "head_kernel_width",
                     "head_pool_width", "late_kernel_width"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if not self.trunk_channels or min(self.trunk_channels) < 1:
            raise ConfigurationError(f"invalid trunk channels {self.trunk_channels}")
        if not self.exits:
            raise ConfigurationError("at least the terminal exit is required")
        term = self.exits[-1]
        if term.attach_after_layer != self.num_trunk_layers or term.data_fraction != 1.0:
            raise ConfigurationError("terminal exit must follow the last trunk layer with fraction 1.0")
        if term.entropy_threshold is not None:
            raise ConfigurationError("terminal exit takes no threshold")
        if len(self.early_exits) > MAX_EARLY_EXITS:
            raise ConfigurationError(
                f"{len(self.early_exits)} early exits requested; at most {MAX_EARLY_EXITS} supported"
            )
        layers = [e.attach_after_layer for e in self.exits]
        if any(b <= a for a, b in zip(layers, layers[1:])) or layers[0] < 1:
            raise ConfigurationError(f"exit attachment layers must be strictly increasing from 1: {layers}")
        fr = self.fractions
        if any(not (0.0 < c <= 1.0) for c in fr) or any(b <= a for a, b in zip(fr, fr[1:])):
            raise ConfigurationError(f"data fractions must be strictly increasing in (0, 1]: {fr}")
        for e in self.early_exits:
            if e.entropy_threshold is None or not math.isfinite(e.entropy_threshold) or e.entropy_threshold < 0:
                raise ConfigurationError(f"early exit threshold must be finite and >= 0: {e}")
        for e in self.exits:
            if not e.loss_weight > 0:
                raise ConfigurationError(f"loss weight must be > 0: {e}")
        bounds = self.slice_bounds()
        prev = 0
        for n, b in enumerate(bounds, 1):
            if b <= prev:
                raise ShapeError(f"slice {n} is empty (fraction {fr[n - 1]} of length {self.segment_length})")
            prev = b

    def to_dict(self) -> dict:
        d = asdict(self)
        d["exits"] = [asdict(e) for e in self.exits]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        d = dict(d)
        d["exits"] = tuple(ExitSpec(**e) for e in d["exits"])
        d["trunk_channels"] = tuple(d["trunk_channels"])
        return cls(**d)


def default_loss_weights(n_exits: int) -> list[float]:
    """Decreasing weights ``[2.0, 1.5, 1.0]`` truncated to ``n_exits``."""
    if n_exits <= 3:
        return [2.0, 1.5, 1.0][:n_exits]
    return [float(w) for w in np.linspace(2.0, 1.0, n_exits)]


@dataclass
class Shapes:
    """Statically resolved lengths for one architecture."""

    slice_lengths: list[int]
    # per trunk layer: (input length, conv output length, pool output length)
    trunk: list[tuple[int, int, int]]
    # per early exit: late block (slice length, conv length, pool length, pool width)
    late: list[tuple[int, int, int, int]]
    # per exit: (input length, conv length, pool length, flat dim, kernel width, pool width);
    # the terminal head has no conv/pool
    heads: list[tuple[int, int, int, int, int, int]]


def resolve_shapes(spec: ArchitectureSpec) -> Shapes:
    spec.validate()
    bounds = spec.slice_bounds()
    slice_lengths = [b - a for a, b in zip([0] + bounds[:-1], bounds)]
    trunk, late, heads = [], [], []
    attach = {e.attach_after_layer: n for n, e in enumerate(spec.early_exits)}
    length = slice_lengths[0]
    downsample = 1
    for i in range(spec.num_trunk_layers):
        layer = i + 1
        try:
            conv_len = K.conv_output_length(length, spec.kernel_width)
            pool_len = K.conv_output_length(conv_len, spec.pool_width, spec.pool_stride)
        except ShapeError as exc:
            raise ShapeError(f"trunk layer {layer}: {exc}") from None
        trunk.append((length, conv_len, pool_len))
        downsample *= spec.pool_stride
        length = pool_len
        if layer in attach:
            n = attach[layer]
            # head windows shrink to fit short maps deep in the trunk
            hk = min(spec.head_kernel_width, length)
            hc = length - hk + 1
            hw = min(spec.head_pool_width, hc)
            hp = hc // hw
            heads.append((length, hc, hp, hp * spec.head_filters, hk, hw))
            s_len = slice_lengths[n + 1]
            try:
                lc = K.conv_output_length(s_len, spec.late_kernel_width)
                lp = K.conv_output_length(lc, downsample, downsample)
            except ShapeError as exc:
                raise ShapeError(f"late-input block {n + 1} after layer {layer}: {exc}") from None
            late.append((s_len, lc, lp, downsample))
            length += lp
    heads.append((length, length, length, length * spec.trunk_channels[-1], 0, 0))
    return Shapes(slice_lengths, trunk, late, heads)


@dataclass
class ExitHead:
    conv: K.ConvLayerParams | None  # None for the terminal head
    fc1: K.DenseLayerParams
    fc2: K.DenseLayerParams
    pool_width: int = 2


@dataclass
class LateInputBlock:
    conv: K.ConvLayerParams
    pool_width: int


@dataclass
class SeeCnnModel:
    spec: ArchitectureSpec
    trunk: list[K.ConvLayerParams]
    heads: list[ExitHead]
    late: list[LateInputBlock]
    shapes: Shapes
    input_mean: np.ndarray = field(default=None)
    input_std: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.input_mean is None:
            self.input_mean = np.zeros(self.spec.channels)
        if self.input_std is None:
            self.input_std = np.ones(self.spec.channels)

    @property
    def num_exits(self) -> int:
        return self.spec.num_exits

    @property
    def fractions(self) -> tuple[float, ...]:
        return self.spec.fractions

    @property
    def thresholds(self) -> tuple[float, ...]:
        return self.spec.thresholds

    def stage_runner(self) -> "StagedForward":
        return StagedForward(self)

    def parameters(self) -> dict[str, np.ndarray]:
        """Named views of every trainable array (updates through them are in place)."""
        out: dict[str, np.ndarray] = {}
        for i, p in enumerate(self.trunk):
            out[f"trunk.{i}.w"], out[f"trunk.{i}.b"] = p.weights, p.bias
        for n, h in enumerate(self.heads):
            if h.conv is not None:
                out[f"exit.{n}.conv.w"], out[f"exit.{n}.conv.b"] = h.conv.weights, h.conv.bias
            out[f"exit.{n}.fc1.w"], out[f"exit.{n}.fc1.b"] = h.fc1.weights, h.fc1.bias
            out[f"exit.{n}.fc2.w"], out[f"exit.{n}.fc2.b"] = h.fc2.weights, h.fc2.bias
        for n, b in enumerate(self.late):
            out[f"late.{n}.conv.w"], out[f"late.{n}.conv.b"] = b.conv.weights, b.conv.bias
        return out

    def copy(self) -> "SeeCnnModel":
        return from_dict(to_dict(self))


def assemble(spec: ArchitectureSpec, seed: int = 0) -> SeeCnnModel:
    """Resolve all shapes and draw seeded uniform(+-sqrt(1/fan_in)) parameters."""
    shapes = resolve_shapes(spec)
    rng = np.random.default_rng(seed)
    trunk = []
    cin = spec.channels
    for cout in spec.trunk_channels:
        trunk.append(K.ConvLayerParams.init(rng, cin, cout, spec.kernel_width))
        cin = cout
    heads = []
    for n, e in enumerate(spec.early_exits):
        c_at = spec.trunk_channels[e.attach_after_layer - 1]
        _, _, _, flat, hk, hw = shapes.heads[n]
        conv = K.ConvLayerParams.init(rng, c_at, spec.head_filters, hk)
        heads.append(ExitHead(conv, K.DenseLayerParams.init(rng, flat, spec.fc_hidden),
                              K.DenseLayerParams.init(rng, spec.fc_hidden, spec.num_classes), hw))
    flat = shapes.heads[-1][3]
    heads.append(ExitHead(None, K.DenseLayerParams.init(rng, flat, spec.fc_hidden),
                          K.DenseLayerParams.init(rng, spec.fc_hidden, spec.num_classes)))
    late = []
    for n, e in enumerate(spec.early_exits):
        c_at = spec.trunk_channels[e.attach_after_layer - 1]
        late.append(LateInputBlock(K.ConvLayerParams.init(rng, spec.channels, c_at, spec.late_kernel_width),
                                   shapes.late[n][3]))
    return SeeCnnModel(spec, trunk, heads, late, shapes)


# ---------------------------------------------------------------------------
# forward / backward


def split_segment(spec: ArchitectureSpec, segment: np.ndarray) -> list[np.ndarray]:
    """Cut a full ``(C, L)`` or ``(B, C, L)`` window into the per-exit slices."""
    segment = np.asarray(segment, dtype=np.float64)
    if segment.shape[-2:] != (spec.channels, spec.segment_length):
        raise ShapeError(
            f"segment shape {segment.shape[-2:]} != ({spec.channels}, {spec.segment_length})"
        )
    bounds = spec.slice_bounds()
    return [segment[..., a:b] for a, b in zip([0] + bounds[:-1], bounds)]


def _trunk_layer(h, p: K.ConvLayerParams, spec: ArchitectureSpec, tape):
    c = K.conv1d_forward(h, p)
    pooled, arg = K.maxpool1d_forward(c, spec.pool_width, spec.pool_stride)
    out = K.relu_forward(pooled)
    if tape is not None:
        tape.append((h, c, arg, pooled))
    return out


def _head(h, head: ExitHead, tape):
    cache = {"in": h}
    if head.conv is not None:
        c = K.conv1d_forward(h, head.conv)
        pooled, arg = K.maxpool1d_forward(c, head.pool_width, head.pool_width)
        feat = K.relu_forward(pooled)
        cache.update(conv_out=c, arg=arg, pooled=pooled)
    else:
        feat = h
    flat = feat.reshape(feat.shape[:-2] + (-1,))
    a1 = K.dense_forward(flat, head.fc1)
    r1 = K.relu_forward(a1)
    z = K.dense_forward(r1, head.fc2)
    if tape is not None:
        cache.update(feat_shape=feat.shape, flat=flat, a1=a1, r1=r1)
        tape.append(cache)
    return z


def _late(x, block: LateInputBlock, tape):
    c = K.conv1d_forward(x, block.conv)
    pooled, arg = K.maxpool1d_forward(c, block.pool_width, block.pool_width)
    out = K.relu_forward(pooled)
    if tape is not None:
        tape.append((x, c, arg, pooled))
    return out


class StagedForward:
    """Runs a model one exit at a time, keeping the trunk state between slices.

    ``advance(slice)`` consumes the next raw slice and returns that exit's logits.
    Full-window forwards use the same object, so staged and one-shot execution go
    through identical arithmetic.
    """

    def __init__(self, model: SeeCnnModel, record: bool = False):
        self.model = model
        self.next_exit = 0
        self.h = None
        self.tape = {"stages": []} if record else None

    def _normalise(self, x):
        m = self.model
        return (x - m.input_mean[:, None]) / m.input_std[:, None]

    def advance(self, raw_slice: np.ndarray) -> np.ndarray:
        m, spec = self.model, self.model.spec
        n = self.next_exit
        if n >= spec.num_exits:
            raise UsageError("all exits already evaluated")
        raw_slice = np.asarray(raw_slice, dtype=np.float64)
        want = (spec.channels, m.shapes.slice_lengths[n])
        if raw_slice.shape[-2:] != want:
            raise ShapeError(f"slice {n + 1} has shape {raw_slice.shape[-2:]}, expected {want}")
        x = self._normalise(raw_slice)
        stage = None
        if self.tape is not None:
            stage = {"layers": [], "late": [], "head": [], "concat": None}
            self.tape["stages"].append(stage)
        if n == 0:
            h = x
            first = 0
        else:
            late = _late(x, m.late[n - 1], stage["late"] if stage else None)
            if stage is not None:
                stage["concat"] = (self.h.shape[-1], late.shape[-1])
            h = np.concatenate([self.h, late], axis=-1)
            first = spec.exits[n - 1].attach_after_layer
        last = spec.exits[n].attach_after_layer
        for i in range(first, last):
            h = _trunk_layer(h, m.trunk[i], spec, stage["layers"] if stage else None)
        self.h = h
        self.next_exit = n + 1
        return _head(h, m.heads[n], stage["head"] if stage else None)

    def step(self, raw_slice: np.ndarray) -> np.ndarray:
        """Class probabilities of the next exit."""
        return K.softmax(self.advance(raw_slice))


def forward_to_exit(model: SeeCnnModel, partial_inputs, n: int) -> np.ndarray:
    """Logits of exit ``n`` (1-based) given the raw slices ``1..n``."""
    if not 1 <= n <= model.num_exits:
        raise UsageError(f"exit index {n} outside 1..{model.num_exits}")
    if len(partial_inputs) < n:
        raise UsageError(f"exit {n} needs {n} slices, got {len(partial_inputs)}")
    run = StagedForward(model)
    for k in range(n):
        z = run.advance(partial_inputs[k])
    return z


def forward_all_exits(model: SeeCnnModel, segment: np.ndarray, record: bool = False):
    """Logits for every exit on a full window.

    With ``record=True`` returns ``(logits, tape)`` for :func:`backward`.
    """
    run = StagedForward(model, record=record)
    logits = [run.advance(s) for s in split_segment(model.spec, segment)]
    return (logits, run.tape) if record else logits


def _head_backward(dz, head: ExitHead, cache, grads, prefix):
    dr1, grads[f"{prefix}.fc2.w"], grads[f"{prefix}.fc2.b"] = K.dense_backward(dz, cache["r1"], head.fc2)
    da1 = K.relu_backward(dr1, cache["a1"])
    dflat, grads[f"{prefix}.fc1.w"], grads[f"{prefix}.fc1.b"] = K.dense_backward(da1, cache["flat"], head.fc1)
    dfeat = dflat.reshape(cache["feat_shape"])
    if head.conv is None:
        return dfeat
    dpooled = K.relu_backward(dfeat, cache["pooled"])
    dc = K.maxpool1d_backward(dpooled, cache["arg"], cache["conv_out"].shape[-1])
    dh, grads[f"{prefix}.conv.w"], grads[f"{prefix}.conv.b"] = K.conv1d_backward(dc, cache["in"], head.conv)
    return dh


def _block_backward(dout, params, cache):
    x, c, arg, pooled = cache
    dpooled = K.relu_backward(dout, pooled)
    dc = K.maxpool1d_backward(dpooled, arg, c.shape[-1])
    return K.conv1d_backward(dc, x, params)


def backward(model: SeeCnnModel, tape, dlogits) -> dict[str, np.ndarray]:
    """Gradients of ``sum_n <dlogits[n], z_n>`` w.r.t. every parameter block."""
    if not tape or not tape.get("stages"):
        raise UsageError("backward called before a recorded forward pass")
    stages = tape["stages"]
    if len(dlogits) != len(stages):
        raise UsageError(f"{len(dlogits)} upstream gradients for {len(stages)} recorded exits")
    spec = model.spec
    grads: dict[str, np.ndarray] = {}
    dh = None
    for n in range(len(stages) - 1, -1, -1):
        stage = stages[n]
        g = _head_backward(np.asarray(dlogits[n], dtype=np.float64), model.heads[n],
                           stage["head"][0], grads, f"exit.{n}")
        dh = g if dh is None else dh + g
        first = 0 if n == 0 else spec.exits[n - 1].attach_after_layer
        for j, i in reversed(list(enumerate(range(first, spec.exits[n].attach_after_layer)))):
            dh, grads[f"trunk.{i}.w"], grads[f"trunk.{i}.b"] = _block_backward(
                dh, model.trunk[i], stage["layers"][j]
            )
        if n > 0:
            trunk_len, _ = stage["concat"]
            dlate = dh[..., trunk_len:]
            dh = dh[..., :trunk_len]
            _, dw, db = _block_backward(dlate, model.late[n - 1].conv, stage["late"][0])
            grads[f"late.{n - 1}.conv.w"], grads[f"late.{n - 1}.conv.b"] = dw, db
    # blocks never written (e.g. trunk layers past an unevaluated exit) get zeros
    for name, p in model.parameters().items():
        grads.setdefault(name, np.zeros_like(p))
    return grads


# ---------------------------------------------------------------------------
# accounting


def parameter_breakdown(model: SeeCnnModel) -> dict[str, int]:
    trunk = sum(p.size for p in model.trunk)
    terminal = model.heads[-1].fc1.size + model.heads[-1].fc2.size
    exits = sum(h.conv.size + h.fc1.size + h.fc2.size for h in model.heads[:-1])
    late = sum(b.conv.size for b in model.late)
    return {"baseline": trunk + terminal, "see_additions": exits + late, "total": trunk + terminal + exits + late}


def parameter_count(model: SeeCnnModel) -> int:
    return parameter_breakdown(model)["total"]


def memory_kb(model: SeeCnnModel) -> float:
    return parameter_count(model) * BYTES_PER_PARAM / 1024


def exit_macs(model: SeeCnnModel) -> list[int]:
    """Cumulative multiply-accumulate count needed to reach each exit.

    Includes the heads of earlier exits that were evaluated and declined.
    """
    spec, sh = model.spec, model.shapes
    out, total = [], 0
    layer = 0
    for n, e in enumerate(spec.exits):
        if n > 0:
            s_len, lc, lp, _ = sh.late[n - 1]
            total += lc * model.late[n - 1].conv.weights.size
        while layer < e.attach_after_layer:
            total += sh.trunk[layer][1] * model.trunk[layer].weights.size
            layer += 1
        head = model.heads[n]
        if head.conv is not None:
            total += sh.heads[n][1] * head.conv.weights.size
        total += head.fc1.weights.size + head.fc2.weights.size
        out.append(total)
    return out


# ---------------------------------------------------------------------------
# serialization


def _array(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": np.asarray(a, dtype=np.float64).ravel().tolist()}


def _unarray(d: dict) -> np.ndarray:
    return np.asarray(d["data"], dtype=np.float64).reshape(d["shape"])


def to_dict(model: SeeCnnModel) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "input_mean": model.input_mean.tolist(),
        "input_std": model.input_std.tolist(),
        "params": {k: _array(v) for k, v in model.parameters().items()},
    }


def from_dict(d: dict) -> SeeCnnModel:
    if d.get("format") != FORMAT_NAME:
        raise ConfigurationError(f"not a {FORMAT_NAME} model file (format={d.get('format')!r})")
    if d.get("version") != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported model version {d.get('version')!r}")
    spec = ArchitectureSpec.from_dict(d["spec"])
    model = assemble(spec, seed=0)
    params = model.parameters()
    if set(params) != set(d["params"]):
        raise ConfigurationError("parameter blocks in file do not match the architecture")
    for name, arr in params.items():
        val = _unarray(d["params"][name])
        if val.shape != arr.shape:
            raise ShapeError(f"{name}: stored shape {val.shape} != expected {arr.shape}")
        arr[...] = val
    model.input_mean = np.asarray(d["input_mean"], dtype=np.float64)
    model.input_std = np.asarray(d["input_std"], dtype=np.float64)
    return model


def save_model(model: SeeCnnModel, path) -> None:
    Path(path).write_text(json.dumps(to_dict(model), sort_keys=True) + "\n", encoding="utf-8")


def load_model(path) -> SeeCnnModel:
    return from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def without_early_exits(spec: ArchitectureSpec) -> ArchitectureSpec:
    """The baseline architecture: same trunk, terminal exit only."""
    return replace(spec, exits=(replace(spec.exits[-1], loss_weight=1.0),))
