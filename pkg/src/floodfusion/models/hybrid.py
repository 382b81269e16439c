"""CNN-RNN hybrid assembly.

The rainfall encoding is reshaped to the CNN bottleneck geometry, concatenated
channel-wise with the bottleneck, squeezed back to the bottleneck width by a
1x1 conv, and decoded by the unchanged CNN decoder. A head then maps the
decoder output to one depth value per pixel.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from ..autodiff import functional as F
from ..autodiff.checkpoint import load_checkpoint, save_checkpoint
from ..autodiff.tensor import ShapeError, Tensor, as_tensor
from .cnn import CNN_KINDS, DOWNSAMPLING, build_cnn
from .layers import Conv2d, Linear, Module
from .rnn import DEFAULT_DROPOUT, RNN_KINDS, build_rnn

HEAD_KINDS = ("gap_fc", "conv1x1")


class ModelSpecError(ValueError):
    pass


class AssemblyError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    cnn_kind: str
    rnn_kind: str
    in_channels: int
    height: int
    width: int
    base_width: int = 16
    rnn_hidden: int = 64
    rnn_layers: int = 2
    fusion_channels: int = 16
    head_kind: str = "gap_fc"
    dropout: float = DEFAULT_DROPOUT

    def __post_init__(self):
        if self.cnn_kind not in CNN_KINDS:
            raise ModelSpecError(f"cnn_kind must be one of {CNN_KINDS}, got {self.cnn_kind!r}")
        if self.rnn_kind not in RNN_KINDS:
            raise ModelSpecError(f"rnn_kind must be one of {RNN_KINDS}, got {self.rnn_kind!r}")
        if self.head_kind not in HEAD_KINDS:
            raise ModelSpecError(f"head_kind must be one of {HEAD_KINDS}, got {self.head_kind!r}")
        if self.in_channels < 1:
            raise ModelSpecError("in_channels must be >= 1")
        if self.base_width < 4:
            raise ModelSpecError("base_width must be >= 4")
        if self.rnn_hidden < 1 or self.fusion_channels < 1 or self.rnn_layers < 1:
            raise ModelSpecError("rnn_hidden, rnn_layers and fusion_channels must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ModelSpecError("dropout must lie in [0, 1)")
        for name in ("height", "width"):
            v = getattr(self, name)
            if v < DOWNSAMPLING or v % DOWNSAMPLING:
                raise ShapeError(f"{name}={v} is not a positive multiple of {DOWNSAMPLING}")

    @property
    def bottleneck_hw(self) -> tuple[int, int]:
        return self.height // DOWNSAMPLING, self.width // DOWNSAMPLING

    @property
    def combo(self) -> str:
        return f"{self.rnn_kind}+{self.cnn_kind}"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ModelSpecError(f"unknown model spec keys: {sorted(unknown)}")
        return cls(**d)


class HybridModel(Module):
    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        self.cnn = self.child("cnn", build_cnn(spec.cnn_kind, spec.in_channels, spec.base_width, rng))
        hb, wb = spec.bottleneck_hw
        self.rnn = self.child("rnn", build_rnn(spec.rnn_kind, spec.rnn_hidden, spec.fusion_channels,
                                               hb, wb, rng, spec.dropout, spec.rnn_layers))
        bc = self.cnn.bottleneck_channels
        self.fuse = self.child("fuse", Conv2d(bc + spec.fusion_channels, bc, 1, rng))
        w = self.cnn.out_channels
        if spec.head_kind == "gap_fc":
            self.head = self.child("head", Linear(w, spec.height * spec.width, rng))
        else:
            self.head = self.child("head", Conv2d(w, 1, 1, rng))

    def fused_bottleneck(self, x: Tensor, rain, lengths=None, rng=None):
        b, ctx = self.cnn.encode(x)
        r = self.rnn(rain, lengths, rng)
        if r.shape[0] != b.shape[0] or r.shape[2:] != b.shape[2:]:
            raise AssemblyError(f"rainfall map {r.shape} does not match bottleneck {b.shape}")
        return self.fuse(F.concat_channels([b, r])), ctx

    def apply_head(self, y: Tensor) -> Tensor:
        n = y.shape[0]
        h, w = self.spec.height, self.spec.width
        if self.spec.head_kind == "gap_fc":
            return self.head(F.global_avg_pool(y)).reshape(n, h, w)
        return self.head(y).reshape(n, h, w)

    def __call__(self, x, rain, lengths=None, rng: np.random.Generator | None = None) -> Tensor:
        """Predict depth maps.

        Args:
            x: (N, C, H, W) feature stacks.
            rain: (N, T) rainfall, left-padded when ``lengths`` differ.
            lengths: per-sample rainfall length.
            rng: dropout generator (training mode only).

        Returns:
            (N, H, W) tensor.
        """
        x = as_tensor(x)
        s = self.spec
        if x.ndim != 4 or x.shape[1:] != (s.in_channels, s.height, s.width):
            raise ShapeError(f"input {x.shape} does not match ({s.in_channels}, {s.height}, {s.width})")
        b, ctx = self.fused_bottleneck(x, rain, lengths, rng)
        return self.apply_head(self.cnn.decode(b, ctx))

    forward = __call__

    def predict(self, x, rain, lengths=None) -> np.ndarray:
        """Eval-mode forward without a graph; restores the previous mode."""
        was = self.training
        self.eval()
        try:
            return self(Tensor(np.asarray(x, dtype=np.float64)), Tensor(np.asarray(rain, dtype=np.float64)),
                        lengths).data
        finally:
            self.train(was)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param.{k}": p.data for k, p in self.named_parameters()}
        out.update({f"buffer.{k}": b for k, b in self.named_buffers()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        own = self.state_arrays()
        if set(own) != set(arrays):
            missing, extra = set(own) - set(arrays), set(arrays) - set(own)
            raise AssemblyError(f"state mismatch: missing {sorted(missing)[:5]}, extra {sorted(extra)[:5]}")
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        for key, arr in arrays.items():
            kind, name = key.split(".", 1)
            target = params[name].data if kind == "param" else buffers[name]
            if target.shape != arr.shape:
                raise AssemblyError(f"{key}: shape {arr.shape} != {target.shape}")
            target[...] = arr


def assemble_hybrid(spec: ModelSpec, seed: int) -> HybridModel:
    return HybridModel(spec, np.random.default_rng(seed))


def save_model(model: HybridModel, path, extra_meta: dict | None = None):
    meta = {"spec": model.spec.to_dict()}
    meta.update(extra_meta or {})
    save_checkpoint(path, model.state_arrays(), meta)


def load_model(path) -> tuple[HybridModel, dict]:
    arrays, meta = load_checkpoint(path)
    if "spec" not in meta:
        raise AssemblyError(f"{path}: checkpoint carries no model spec")
    model = assemble_hybrid(ModelSpec.from_dict(meta["spec"]), 0)
    model.load_state_arrays(arrays)
    return model, meta
