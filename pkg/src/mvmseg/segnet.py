"""U-Net variants for magnitude / phase myocardium segmentation.

Variants
--------
a  single encoder on the magnitude image (1 channel)
b  single encoder on the three phase images (3 channels)
c  single encoder on magnitude and phase stacked along channels (4 channels)
d  one encoder per input stream, fused at every depth by a multi-channel
   attention block (MMAB) whose output feeds the decoder skip / bottleneck
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

VARIANTS = ("a", "b", "c", "d")
_IN_CHANNELS = {"a": 1, "b": 3, "c": 4}
MAG_CHANNELS = 1
PHASE_CHANNELS = 3
NUM_CLASSES = 2
HEAD_INIT_STD = 0.01


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "d"
    levels: int = 3
    base_channels: int = 8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unsupported variant {self.variant!r}; expected one of {VARIANTS}")
        if not 2 <= self.levels <= 6:
            raise ValueError(f"levels must be in [2, 6], got {self.levels}")
        if not 4 <= self.base_channels <= 128:
            raise ValueError(f"base_channels must be in [4, 128], got {self.base_channels}")

    def width(self, level: int) -> int:
        return self.base_channels * 2**level

    def to_dict(self) -> dict:
        return asdict(self)


class UNetModel:
    """Named parameter set plus the config that fixes its architecture."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: np.array(v.data) for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"parameter {k}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.data.dtype)
            p.zero_grad()

    def describe(self) -> dict:
        """Architecture summary: block counts and parameter shapes."""
        cfg = self.config
        n_enc = 2 * cfg.levels if cfg.variant == "d" else cfg.levels
        return {
            "config": cfg.to_dict(),
            "encoder_blocks": n_enc,
            "mmab_blocks": cfg.levels if cfg.variant == "d" else 0,
            "decoder_stages": cfg.levels - 1,
            "param_count": self.param_count(),
            "shapes": {k: list(v.shape) for k, v in self.params.items()},
        }


# ---------------------------------------------------------------------------
# construction


def _param_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list; the order also fixes the init draw order."""
    specs: list[tuple[str, tuple[int, ...]]] = []

    def conv(name, cin, cout, k=3):
        specs.append((f"{name}.w", (cout, cin, k, k)))
        specs.append((f"{name}.b", (cout,)))

    def block(name, cin, cout):
        conv(f"{name}.conv1", cin, cout)
        conv(f"{name}.conv2", cout, cout)

    L = cfg.levels
    if cfg.variant == "d":
        streams = {"enc_mag": MAG_CHANNELS, "enc_ph": PHASE_CHANNELS}
    else:
        streams = {"enc": _IN_CHANNELS[cfg.variant]}
    for stream, cin in streams.items():
        for lvl in range(L):
            block(f"{stream}{lvl}", cin, cfg.width(lvl))
            cin = cfg.width(lvl)
    if cfg.variant == "d":
        for lvl in range(L):
            c = cfg.width(lvl)
            hidden = max(c // 2, 1)
            block(f"mmab{lvl}.fuse", 2 * c, c)
            conv(f"mmab{lvl}.att1", c, hidden, k=1)
            conv(f"mmab{lvl}.att2", hidden, 1, k=1)
    for lvl in range(L - 2, -1, -1):
        c = cfg.width(lvl)
        conv(f"dec{lvl}.up", cfg.width(lvl + 1), c)
        block(f"dec{lvl}", 2 * c, c)
    conv("head", cfg.width(0), NUM_CLASSES, k=1)
    return specs


def build_model(cfg: ModelConfig) -> UNetModel:
    """He-normal weights from a generator seeded by ``cfg.seed``; zero biases.

    The output head is drawn with a small std so untrained logits sit near zero
    and the initial loss is close to ln 2.
    """
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, Tensor] = {}
    for name, shape in _param_specs(cfg):
        if name.endswith(".w"):
            fan_in = shape[1] * shape[2] * shape[3]
            std = HEAD_INIT_STD if name == "head.w" else np.sqrt(2.0 / fan_in)
            arr = rng.standard_normal(shape) * std
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return UNetModel(cfg, params)


# ---------------------------------------------------------------------------
# forward


def _conv(x: Tensor, model: UNetModel, name: str) -> Tensor:
    return ad.conv2d(x, model[f"{name}.w"], model[f"{name}.b"])


def encoder_block(x: Tensor, model: UNetModel, name: str) -> Tensor:
    """Two conv3x3 -> ReLU stages; spatial size preserved."""
    h = ad.relu(_conv(x, model, f"{name}.conv1"))
    return ad.relu(_conv(h, model, f"{name}.conv2"))


def attention_map(f: Tensor, model: UNetModel, name: str) -> Tensor:
    """Spatial gate in (0, 1): sigmoid(conv1x1(relu(conv1x1(f)))), one channel."""
    h = ad.relu(_conv(f, model, f"{name}.att1"))
    return ad.sigmoid(_conv(h, model, f"{name}.att2"))


def mmab(f_mag: Tensor, f_ph: Tensor, model: UNetModel, name: str) -> Tensor:
    """Fuse two same-shape encoder outputs: concat -> conv block (2C->C) -> attention gate."""
    if f_mag.shape != f_ph.shape:
        raise ad.ShapeError(f"mmab: stream shapes differ: {f_mag.shape} vs {f_ph.shape}")
    fused = encoder_block(ad.concat_channels(f_mag, f_ph), model, f"{name}.fuse")
    return ad.mul(fused, attention_map(fused, model, name))


def _encode(x: Tensor, model: UNetModel, stream: str) -> list[Tensor]:
    feats = []
    h = x
    for lvl in range(model.config.levels):
        if lvl:
            h = ad.maxpool2(h)
        h = encoder_block(h, model, f"{stream}{lvl}")
        feats.append(h)
    return feats


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def model_input(variant: str, mag, ph):
    """Select / stack the inputs a variant consumes."""
    if variant == "a":
        return mag
    if variant == "b":
        return ph
    if variant == "c":
        return np.concatenate([np.asarray(mag), np.asarray(ph)], axis=1)
    raise ValueError(f"variant {variant!r} takes two inputs")


def forward(model: UNetModel, mag, ph) -> Tensor:
    """Logits ``[B, 2, H, W]`` from magnitude ``[B,1,H,W]`` and phase ``[B,3,H,W]``.

    Variants a-c ignore the input they do not use (it may be ``None``).
    """
    cfg = model.config
    ref = mag if mag is not None else ph
    if ref is None:
        raise ValueError("forward needs at least one input")
    B, _, H, W = np.shape(ref.data if isinstance(ref, Tensor) else ref)
    div = 2 ** (cfg.levels - 1)
    if H % div or W % div:
        raise ad.ShapeError(
            f"forward: H={H}, W={W} must both be divisible by 2^(levels-1) = {div} for levels={cfg.levels}"
        )

    if cfg.variant == "d":
        if mag is None or ph is None:
            raise ValueError("variant d needs both magnitude and phase inputs")
        mag_t, ph_t = _as_tensor(mag), _as_tensor(ph)
        if mag_t.shape[1] != MAG_CHANNELS or ph_t.shape[1] != PHASE_CHANNELS:
            raise ad.ShapeError(f"variant d: expected 1+3 channels, got {mag_t.shape[1]}+{ph_t.shape[1]}")
        fm = _encode(mag_t, model, "enc_mag")
        fp = _encode(ph_t, model, "enc_ph")
        skips = [mmab(a, b, model, f"mmab{lvl}") for lvl, (a, b) in enumerate(zip(fm, fp))]
    else:
        x = model_input(cfg.variant, None if mag is None else _raw(mag), None if ph is None else _raw(ph))
        if x is None:
            raise ValueError(f"variant {cfg.variant} is missing its input")
        x = _as_tensor(x)
        want = _IN_CHANNELS[cfg.variant]
        if x.shape[1] != want:
            raise ad.ShapeError(f"variant {cfg.variant}: input has {x.shape[1]} channels (dim 1), expected {want}")
        skips = _encode(x, model, "enc")

    h = skips[-1]
    for lvl in range(cfg.levels - 2, -1, -1):
        up = ad.relu(_conv(ad.upsample_nn2(h), model, f"dec{lvl}.up"))
        h = encoder_block(ad.concat_channels(up, skips[lvl]), model, f"dec{lvl}")
    return _conv(h, model, "head")


def _raw(x):
    return x.data if isinstance(x, Tensor) else x


def predict_mask(logits) -> np.ndarray:
    """Per-pixel argmax of 2-class logits; exact ties go to background (0)."""
    z = np.asarray(_raw(logits))
    return (z[:, 1] > z[:, 0]).astype(np.uint8)
