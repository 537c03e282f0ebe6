"""Shared-trunk models with lesion and stain heads, MC-dropout prediction and checkpoints."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError, UsageError
from .layers import (
    DISABLED,
    STOCHASTIC,
    ConvBlock,
    DenseLayer,
    DropoutLayer,
    Flatten,
    ReLU,
    init_params,
    stack_forward,
    stack_parameters,
)
from .tensor import Tensor

LESION = "lesion"
STAIN = "stain"
N_CLASSES = {LESION: 2, STAIN: 4}


@dataclass
class TrunkConfig:
    kind: str = "conv"
    widths: list = field(default_factory=lambda: [8, 16])
    input_shape: list = field(default_factory=lambda: [3, 16, 16])
    feature_dim: int = 32
    head_hidden: int = 16
    dropout_rate: float = 0.2
    # "zero" starts each head's output layer at exactly uniform predictions;
    # "glorot" draws it like every other layer
    head_output_init: str = "zero"
    # overrides head_output_init for the stain head only; None keeps it
    stain_output_init: Optional[str] = None
    # per-channel standardization of inputs, fitted on the training split
    input_norm: bool = True

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        self.input_shape = [int(d) for d in self.input_shape]
        if self.kind not in ("conv", "dense"):
            raise ConfigError(f"trunk kind must be 'conv' or 'dense', got {self.kind!r}")
        if len(self.input_shape) != 3 or min(self.input_shape) <= 0:
            raise ConfigError(f"input_shape must be [C, H, W], got {self.input_shape}")
        if self.feature_dim <= 0 or self.head_hidden <= 0 or any(w <= 0 for w in self.widths):
            raise ConfigError("layer sizes must be positive")
        if self.kind == "conv":
            c, h, w = self.input_shape
            k = 2 ** len(self.widths)
            if h % k or w % k:
                raise ConfigError(f"input {h}x{w} is not divisible by {k} for {len(self.widths)} conv blocks")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        for key in ("head_output_init", "stain_output_init"):
            value = getattr(self, key)
            if value not in ("glorot", "zero") and not (key == "stain_output_init" and value is None):
                raise ConfigError(f"{key} must be 'glorot' or 'zero', got {value!r}")

    def output_init(self, head: str) -> str:
        if head == STAIN and self.stain_output_init is not None:
            return self.stain_output_init
        return self.head_output_init

    def flat_size(self) -> int:
        c, h, w = self.input_shape
        if self.kind == "dense":
            return c * h * w
        k = 2 ** len(self.widths)
        return self.widths[-1] * (h // k) * (w // k)


def _build_trunk(cfg: TrunkConfig) -> list:
    layers = []
    if cfg.kind == "conv":
        c = cfg.input_shape[0]
        for f in cfg.widths:
            layers.append(ConvBlock(c, f))
            c = f
        layers.append(Flatten())
        layers += [DenseLayer(cfg.flat_size(), cfg.feature_dim), ReLU()]
    else:
        layers.append(Flatten())
        n = cfg.flat_size()
        for width in cfg.widths:
            layers += [DenseLayer(n, width), ReLU()]
            n = width
        layers += [DenseLayer(n, cfg.feature_dim), ReLU()]
    return layers


def _build_head(cfg: TrunkConfig, n_out: int) -> list:
    return [
        DenseLayer(cfg.feature_dim, cfg.head_hidden),
        ReLU(),
        DropoutLayer(cfg.dropout_rate),
        DenseLayer(cfg.head_hidden, n_out),
    ]


@dataclass
class MCPrediction:
    """Per-sample MC-dropout summary for one head.

    ``mean_probs``/``var_probs`` are [N, K]; ``uncertainty`` is [N] and equals
    the class-mean of ``var_probs`` (population variance over T passes).
    """

    mean_probs: np.ndarray
    var_probs: np.ndarray
    uncertainty: np.ndarray
    T: int

    @property
    def mean_uncertainty(self) -> float:
        return float(self.uncertainty.mean())


class DualHeadModel:
    """Trunk f(x) -> dropout -> {lesion head, stain head}.

    ``heads`` selects which heads exist; the stain-only variant used for the
    stain-recognition experiment has ``heads=("stain",)``.
    """

    def __init__(self, config: TrunkConfig, seed: int = 0, heads=(LESION, STAIN)):
        for h in heads:
            if h not in N_CLASSES:
                raise ConfigError(f"unknown head {h!r}")
        self.config = config
        self.seed = int(seed)
        self.head_names = tuple(heads)
        self.trunk = _build_trunk(config)
        self.trunk_dropout = DropoutLayer(config.dropout_rate)
        self.heads = {name: _build_head(config, N_CLASSES[name]) for name in self.head_names}
        c = config.input_shape[0]
        self.input_shift = np.zeros(c)
        self.input_scale = np.ones(c)
        self._init(seed)

    def _init(self, seed):
        # one seed stream per block so the trunk is identical whichever heads exist
        trunk_ss, lesion_ss, stain_ss = np.random.SeedSequence([int(seed), 0]).spawn(3)
        for layer, ss in zip(self.trunk, trunk_ss.spawn(len(self.trunk))):
            init_params(layer, ss)
        head_ss = {LESION: lesion_ss, STAIN: stain_ss}
        for name, layers in self.heads.items():
            for layer, ss in zip(layers, head_ss[name].spawn(len(layers))):
                init_params(layer, ss)
            if self.config.output_init(name) == "zero":
                layers[-1].weight.data[...] = 0.0
        self.reseed_dropout(seed)

    def fit_input_norm(self, x: np.ndarray):
        """Set per-channel shift/scale from ``x`` [N, C, H, W]; a no-op when input_norm is off."""
        if not self.config.input_norm:
            return
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1] != self.config.input_shape[0]:
            raise ShapeError(f"fit_input_norm expects [N, {self.config.input_shape[0]}, H, W], got {x.shape}")
        sd = x.std(axis=(0, 2, 3), dtype=np.float64)
        self.input_shift = x.mean(axis=(0, 2, 3), dtype=np.float64)
        self.input_scale = np.where(sd > 1e-8, 1.0 / np.maximum(sd, 1e-8), 1.0)

    # ----------------------------------------------------------- structure

    def dropout_layers(self) -> list:
        out = [self.trunk_dropout]
        for name in self.head_names:
            out += [layer for layer in self.heads[name] if isinstance(layer, DropoutLayer)]
        return out

    def reseed_dropout(self, *key):
        for i, layer in enumerate(self.dropout_layers()):
            layer.reseed(np.random.SeedSequence([*map(int, key), 1000 + i]))

    def set_dropout(self, mode: str):
        for layer in self.dropout_layers():
            layer.mode = mode

    def named_parameters(self) -> list:
        params = stack_parameters(self.trunk, "trunk.")
        for name in self.head_names:
            params += stack_parameters(self.heads[name], f"{name}_head.")
        return params

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def head_parameters(self, name) -> list:
        return [p for _, p in stack_parameters(self.heads[name])]

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def buffers(self) -> list:
        """Non-trainable arrays that are part of the model state."""
        return [("input.shift", self.input_shift), ("input.scale", self.input_scale)]

    def state_dict(self) -> dict:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.buffers()})
        return state

    def load_state_dict(self, state: dict):
        for name, p in self.named_parameters():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = arr.copy()
        for name, b in self.buffers():
            if name in state:
                arr = np.asarray(state[name], dtype=np.float64)
                if arr.shape != b.shape:
                    raise ShapeError(f"{name}: checkpoint shape {arr.shape} != {b.shape}")
                b[...] = arr

    # ------------------------------------------------------------- forward

    def _check_input(self, x: Tensor):
        expected = tuple(self.config.input_shape)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"model expects [N, {', '.join(map(str, expected))}], got {x.shape}")

    def trunk_features(self, x: Tensor) -> Tensor:
        """Deterministic trunk output, before the feature dropout."""
        self._check_input(x)
        return stack_forward(self.trunk, T.channel_affine(x, self.input_shift, self.input_scale))

    def extract_features(self, x: Tensor) -> Tensor:
        """z = dropout(f(x)), the tensor both heads consume."""
        return self.trunk_dropout(self.trunk_features(x))

    def head_logits(self, name: str, z: Tensor) -> Tensor:
        return stack_forward(self.heads[name], z)

    def outputs(self, x: Tensor) -> dict:
        z = self.extract_features(x)
        return {name: self.head_logits(name, z) for name in self.head_names}

    def forward(self, x: Tensor):
        out = self.outputs(x)
        if self.head_names == (LESION, STAIN):
            return out[LESION], out[STAIN]
        if len(self.head_names) == 1:
            return out[self.head_names[0]]
        return tuple(out[n] for n in self.head_names)

    __call__ = forward


def make_dual_head_model(config: TrunkConfig, seed: int = 0) -> DualHeadModel:
    return DualHeadModel(config, seed, heads=(LESION, STAIN))


def make_stain_only_model(config: TrunkConfig, seed: int = 0) -> DualHeadModel:
    return DualHeadModel(config, seed, heads=(STAIN,))


def forward(model: DualHeadModel, x: Tensor):
    return model.forward(x)


def trunk_features_np(model: DualHeadModel, x: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Trunk features for a whole array, evaluated in chunks without a tape."""
    parts = [model.trunk_features(Tensor(x[i:i + chunk])).data for i in range(0, len(x), chunk)]
    return np.concatenate(parts, axis=0)


def predict_probs(model: DualHeadModel, x: np.ndarray, features: Optional[np.ndarray] = None) -> dict:
    """Deterministic (dropout disabled) softmax outputs per head."""
    h = trunk_features_np(model, x) if features is None else features
    modes = [layer.mode for layer in model.dropout_layers()]
    model.set_dropout(DISABLED)
    try:
        z = Tensor(h)
        return {name: T.softmax_np(model.head_logits(name, z).data) for name in model.head_names}
    finally:
        for layer, m in zip(model.dropout_layers(), modes):
            layer.mode = m


def mc_predict(model: DualHeadModel, x: np.ndarray, T_passes: int = 50, seed: int = 0,
               features: Optional[np.ndarray] = None):
    """MC-dropout prediction: ``T_passes`` stochastic passes with all dropout layers active.

    The trunk up to its feature dropout is deterministic, so it is evaluated
    once and only dropout + heads are resampled. Pass ``t`` draws its masks
    from the substream ``(seed, t, layer)``. Returns ``(lesion, stain)``
    MCPredictions for a dual-head model, or a single MCPrediction otherwise.
    """
    if int(T_passes) < 1:
        raise UsageError(f"T must be a positive integer, got {T_passes}")
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    h = trunk_features_np(model, x) if features is None else features
    layers = model.dropout_layers()
    saved = [(layer.mode, layer.rng) for layer in layers]
    # moments of p_t - p_0: identical passes give exactly zero variance
    first, sums, sq = {}, {}, {}
    try:
        for t in range(int(T_passes)):
            for i, layer in enumerate(layers):
                layer.mode = STOCHASTIC
                layer.reseed(np.random.SeedSequence([int(seed), t, i]))
            z = model.trunk_dropout(Tensor(h))
            for name in model.head_names:
                p = T.softmax_np(model.head_logits(name, z).data)
                if t == 0:
                    first[name] = p
                    sums[name] = np.zeros_like(p)
                    sq[name] = np.zeros_like(p)
                d = p - first[name]
                sums[name] += d
                sq[name] += d * d
    finally:
        for layer, (mode, rng) in zip(layers, saved):
            layer.mode, layer.rng = mode, rng
    preds = {}
    for name in model.head_names:
        shift = sums[name] / T_passes
        mean_p = first[name] + shift
        var_p = np.maximum(sq[name] / T_passes - shift * shift, 0.0)
        preds[name] = MCPrediction(mean_p, var_p, var_p.mean(axis=1), int(T_passes))
    if model.head_names == (LESION, STAIN):
        return preds[LESION], preds[STAIN]
    if len(model.head_names) == 1:
        return preds[model.head_names[0]]
    return tuple(preds[n] for n in model.head_names)


# ------------------------------------------------------------- checkpoints
#
# Layout (all integers little-endian):
#   b"SPCK" | uint32 header_len | header_len bytes of UTF-8 JSON | float64 LE data
# The JSON header holds {"format", "config", "heads", "seed", "tensors"}, where
# each tensor entry is {"name", "shape", "offset"} and offset counts bytes
# from the start of the data section.

CKPT_MAGIC = b"SPCK"


def save_checkpoint(model: DualHeadModel, path) -> None:
    entries, blobs, offset = [], [], 0
    arrays = [(name, p.data) for name, p in model.named_parameters()] + model.buffers()
    for name, arr in arrays:
        raw = np.asarray(arr).astype("<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({
        "format": 1,
        "config": asdict(model.config),
        "heads": list(model.head_names),
        "seed": model.seed,
        "tensors": entries,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> DualHeadModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {blob[:4]!r})")
    (hlen,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    data = blob[8 + hlen:]
    model = DualHeadModel(TrunkConfig(**header["config"]), header["seed"], heads=tuple(header["heads"]))
    state = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"]))
        start = e["offset"]
        if start + 8 * n > len(data):
            raise ValueError(f"{path}: truncated tensor {e['name']}")
        state[e["name"]] = np.frombuffer(data, dtype="<f8", count=n, offset=start).reshape(e["shape"])
    model.load_state_dict(state)
    return model
