"""Image encoders producing the feature fed to the decoder before the first word.

Three kinds share one interface:

* ``plain_conv``: conv3×3 + relu + maxpool stages, no skips.
* ``residual_conv``: a stem conv + maxpool, then residual blocks
  ``out = branch(x) + x``, then average pooling to a small grid.
* ``passthrough``: the "image" already is a D-dimensional feature.

No classifier head is ever built: the flattened trunk output goes straight
into a linear projection to the embedding size.  With ``finetune_top_only``
the conv weights are frozen and only the projection learns.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import numcore as nc
from .errors import DimensionError, PreconditionError
from .numcore import Tensor

KINDS = ("plain_conv", "residual_conv", "passthrough")


@dataclass(frozen=True)
class EncoderSpec:
    kind: str = "plain_conv"
    image_size: int = 32
    embed_size: int = 512
    channels: tuple[int, ...] = (8, 16, 32, 32)  # plain_conv stages
    width: int = 16  # residual_conv stem/block channels
    n_blocks: int = 4
    pool_to: int = 4  # residual_conv pooled grid side
    finetune_top_only: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DimensionError(f"unknown encoder kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "plain_conv" and self.image_size % (2 ** len(self.channels)):
            raise DimensionError(f"image size {self.image_size} cannot be pooled {len(self.channels)} times")
        if self.kind == "residual_conv" and (self.image_size // 2) % self.pool_to:
            raise DimensionError(f"image size {self.image_size} cannot be pooled to {self.pool_to}×{self.pool_to}")

    @property
    def feature_size(self) -> int:
        """Length F of the flattened trunk output."""
        if self.kind == "passthrough":
            return self.embed_size
        if self.kind == "plain_conv":
            side = self.image_size // 2 ** len(self.channels)
            return side * side * self.channels[-1]
        return self.pool_to * self.pool_to * self.width

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSpec":
        d = dict(d)
        d["channels"] = tuple(d.get("channels", cls.channels))
        return cls(**d)


def _he(rng: np.random.Generator, k: int, cin: int, cout: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / (k * k * cin)), size=(k, k, cin, cout))


def residual_block(params: tuple[Tensor, Tensor, Tensor, Tensor], x: Tensor) -> Tensor:
    """``conv2(relu(conv1(x))) + x``."""
    w1, b1, w2, b2 = params
    branch = nc.conv2d(nc.relu(nc.conv2d(x, w1, b1)), w2, b2)
    if branch.shape != x.shape:
        raise DimensionError(f"residual branch output {branch.shape} does not match input {x.shape}")
    return nc.add(branch, x)


class Encoder:
    def __init__(self, spec: EncoderSpec, seed: int = 0):
        self.spec = spec
        self.calls = 0
        self.params: dict[str, Tensor] = {}
        trunk_grad = not spec.finetune_top_only

        def conv(name, cin, cout, zero=False):
            rng = nc.make_rng(seed, "encoder", name)
            w = np.zeros((3, 3, cin, cout)) if zero else _he(rng, 3, cin, cout)
            self.params[f"encoder.{name}.w"] = Tensor(w, requires_grad=trunk_grad, name=f"encoder.{name}.w")
            self.params[f"encoder.{name}.b"] = Tensor(np.zeros(cout), requires_grad=trunk_grad, name=f"encoder.{name}.b")

        if spec.kind == "plain_conv":
            cin = 3
            for i, c in enumerate(spec.channels):
                conv(f"conv{i}", cin, c)
                cin = c
        elif spec.kind == "residual_conv":
            conv("stem", 3, spec.width)
            for i in range(spec.n_blocks):
                conv(f"block{i}.conv1", spec.width, spec.width)
                conv(f"block{i}.conv2", spec.width, spec.width, zero=True)
        if spec.kind != "passthrough":
            f = spec.feature_size
            rng = nc.make_rng(seed, "encoder", "proj")
            bound = 1.0 / np.sqrt(f)
            self.params["encoder.proj.w"] = Tensor(
                rng.uniform(-bound, bound, size=(f, spec.embed_size)), requires_grad=True, name="encoder.proj.w"
            )
            self.params["encoder.proj.b"] = Tensor(np.zeros(spec.embed_size), requires_grad=True, name="encoder.proj.b")

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.params.items() if t.requires_grad}

    def _check_input(self, image) -> Tensor:
        x = image if isinstance(image, Tensor) else Tensor(image)
        s = self.spec
        if s.kind == "passthrough":
            if x.shape != (s.embed_size,):
                raise DimensionError(f"passthrough encoder expects a feature of shape ({s.embed_size},), got {x.shape}")
        elif x.shape != (s.image_size, s.image_size, 3):
            raise DimensionError(
                f"{s.kind} encoder expects an image of shape ({s.image_size}, {s.image_size}, 3), got {x.shape}"
            )
        return x

    def trunk(self, image) -> Tensor:
        """Flattened conv features (length F) with no projection applied."""
        x = self._check_input(image)
        s, p = self.spec, self.params
        if s.kind == "passthrough":
            return x
        if s.kind == "plain_conv":
            for i in range(len(s.channels)):
                x = nc.maxpool2d(nc.relu(nc.conv2d(x, p[f"encoder.conv{i}.w"], p[f"encoder.conv{i}.b"])))
        else:
            x = nc.maxpool2d(nc.relu(nc.conv2d(x, p["encoder.stem.w"], p["encoder.stem.b"])))
            for i in range(s.n_blocks):
                pre = f"encoder.block{i}"
                x = residual_block((p[f"{pre}.conv1.w"], p[f"{pre}.conv1.b"], p[f"{pre}.conv2.w"], p[f"{pre}.conv2.b"]), x)
            x = nc.avgpool2d(x, s.pool_to)
        return nc.reshape(x, (s.feature_size,))

    def project(self, feats: Tensor) -> Tensor:
        """Map trunk features (F or B×F) to the embedding space."""
        if self.spec.kind == "passthrough":
            return feats
        single = feats.data.ndim == 1
        x = nc.reshape(feats, (1, -1)) if single else feats
        out = nc.add(nc.matmul(x, self.params["encoder.proj.w"]), self.params["encoder.proj.b"])
        return nc.reshape(out, (self.spec.embed_size,)) if single else out

    def encode(self, image) -> Tensor:
        self.calls += 1
        return self.project(self.trunk(image))


def encode_image(encoder: Encoder, image) -> Tensor:
    return encoder.encode(image)


def swap_encoder(model, new_spec: EncoderSpec, seed: int = 0, split=None):
    """Return a copy of ``model`` whose encoder is rebuilt from ``new_spec``.

    The decoder tensors are shared unchanged; the projection is freshly
    initialized.  When ``split`` is given it must carry what the new encoder
    consumes (pixels for the conv kinds).
    """
    if new_spec.embed_size != model.decoder.embed_size:
        raise DimensionError(
            f"new encoder emits {new_spec.embed_size}-d features but the decoder expects {model.decoder.embed_size}"
        )
    if split is not None and new_spec.kind != "passthrough" and not split.has_pixels:
        raise PreconditionError(f"{new_spec.kind} encoder needs pixel images but the split only has features")
    return replace(model, encoder=Encoder(new_spec, seed=seed))
