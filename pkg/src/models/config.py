"""
Model Configuration

Encoder and model configuration for the tri-encoder vision-language model,
the named presets, and the canonical parameter-name grammar.

Parameter names follow `{scope}.{slot}.{sublayer}.{matrix}`:
- scope: `vision`, `text`, `fusion` or `head`
- slot: a 1-based layer number, `embed`, `final`, or a task head name
- sublayer: `attn`, `xattn` (fusion only), `ffn`, `ln1`, `lnx`, `ln2`, ...
- matrix: `wq`, `bq`, `wk`, `bk`, `wv`, `bv`, `wo`, `bo`, `w1`, `b1`, `w2`, `b2`,
  `gamma`, `beta`, `weight`, `bias`, ...

Examples: `vision.3.attn.wq`, `fusion.1.xattn.wo`, `text.embed.token.weight`,
`head.itm.out.bias`.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from typing import Dict, Optional, Tuple

from ..errors import ConfigError

ENCODERS = ("vision", "text", "fusion")

ATTENTION_MATRICES = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")
FFN_MATRICES = ("w1", "b1", "w2", "b2")

# Matrices whose size scales with the number of retained heads / neurons
GATED_ATTENTION_MATRICES = ("wq", "bq", "wk", "bk", "wv", "bv", "wo")
GATED_FFN_MATRICES = ("w1", "b1", "w2")


@dataclass(frozen=True)
class EncoderConfig:
    """
    Shape of one transformer encoder stack.

    The per-layer tuples are only set on structurally pruned models; they hold
    the number of retained self-attention heads, cross-attention heads and FFN
    neurons for each layer. The head width stays model_dim / num_heads.
    """

    num_layers: int
    num_heads: int
    model_dim: int
    ffn_dim: int
    is_cross_modal: bool = False
    layer_heads: Optional[Tuple[int, ...]] = None
    layer_cross_heads: Optional[Tuple[int, ...]] = None
    layer_ffn: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.num_heads <= 0 or self.model_dim % self.num_heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}"
            )
        if self.num_layers < 0 or self.ffn_dim <= 0:
            raise ConfigError(f"invalid encoder depth/width: {self.num_layers}/{self.ffn_dim}")
        for label in ("layer_heads", "layer_cross_heads", "layer_ffn"):
            values = getattr(self, label)
            if values is not None:
                object.__setattr__(self, label, tuple(int(v) for v in values))
                if len(values) != self.num_layers:
                    raise ConfigError(f"{label} has {len(values)} entries for {self.num_layers} layers")
        if self.layer_cross_heads is not None and not self.is_cross_modal:
            raise ConfigError("layer_cross_heads set on an encoder without cross-attention")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    def heads(self, layer: int) -> int:
        """Self-attention heads of a 1-based layer."""
        return self.layer_heads[layer - 1] if self.layer_heads else self.num_heads

    def cross_heads(self, layer: int) -> int:
        return self.layer_cross_heads[layer - 1] if self.layer_cross_heads else self.num_heads

    def ffn(self, layer: int) -> int:
        return self.layer_ffn[layer - 1] if self.layer_ffn else self.ffn_dim

    def unpruned(self) -> "EncoderConfig":
        return replace(self, layer_heads=None, layer_cross_heads=None, layer_ffn=None)

    def to_dict(self) -> dict:
        data = asdict(self)
        for label in ("layer_heads", "layer_cross_heads", "layer_ffn"):
            if data[label] is not None:
                data[label] = list(data[label])
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "EncoderConfig":
        return cls(**data)


@dataclass(frozen=True)
class VlmConfig:
    """
    Full model configuration.

    Attributes:
        vision / text / fusion: Encoder stacks (fusion cross-attends into vision)
        patch_grid: Image patches per side
        patch_size: Pixels per patch side
        image_channels: Colour channels per pixel
        vocab_size: Token vocabulary size
        max_text_len: Longest caption in tokens (including the [cls] token)
        embed_dim: Width of the contrastive projection space
        num_classes: Output classes of the classification head
    """

    vision: EncoderConfig
    text: EncoderConfig
    fusion: EncoderConfig
    patch_grid: int
    patch_size: int
    image_channels: int
    vocab_size: int
    max_text_len: int
    embed_dim: int
    num_classes: int = 3

    def __post_init__(self):
        dims = {enc.model_dim for enc in (self.vision, self.text, self.fusion)}
        if len(dims) != 1:
            raise ConfigError(f"all encoders must share model_dim, got {sorted(dims)}")
        if not self.fusion.is_cross_modal:
            raise ConfigError("fusion encoder must be cross-modal")
        if self.vision.is_cross_modal or self.text.is_cross_modal:
            raise ConfigError("only the fusion encoder may carry cross-attention")

    @property
    def model_dim(self) -> int:
        return self.vision.model_dim

    @property
    def num_patches(self) -> int:
        return self.patch_grid * self.patch_grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.image_channels

    @property
    def image_size(self) -> int:
        return self.patch_grid * self.patch_size

    @property
    def layer_counts(self) -> Tuple[int, int, int]:
        return (self.vision.num_layers, self.text.num_layers, self.fusion.num_layers)

    def encoder(self, name: str) -> EncoderConfig:
        if name not in ENCODERS:
            raise ConfigError(f"unknown encoder '{name}'")
        return getattr(self, name)

    def with_encoders(self, **encoders: EncoderConfig) -> "VlmConfig":
        return replace(self, **encoders)

    def unpruned(self) -> "VlmConfig":
        return replace(
            self,
            vision=self.vision.unpruned(),
            text=self.text.unpruned(),
            fusion=self.fusion.unpruned(),
        )

    def to_dict(self) -> dict:
        data = {name: getattr(self, name).to_dict() for name in ENCODERS}
        for key in ("patch_grid", "patch_size", "image_channels", "vocab_size",
                    "max_text_len", "embed_dim", "num_classes"):
            data[key] = getattr(self, key)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "VlmConfig":
        data = dict(data)
        for name in ENCODERS:
            data[name] = EncoderConfig.from_dict(data[name])
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


# ===== PRESETS =====

_PRESETS = {
    # name: (d, h, ffn, teacher layers, patch_grid, patch_size, vocab, max_len, embed)
    "tiny": (8, 2, 16, (4, 2, 2), 2, 4, 32, 12, 8),
    "desk": (64, 4, 128, (12, 6, 6), 4, 4, 64, 12, 32),
}

PRESET_NAMES = tuple(_PRESETS)


def preset_config(preset: str, role: str = "teacher") -> VlmConfig:
    """
    Build a named preset.

    Args:
        preset: 'tiny' or 'desk'
        role: 'teacher' (full depth) or 'student' (every encoder at half depth)

    Returns:
        VlmConfig
    """
    if preset not in _PRESETS:
        raise ConfigError(f"unknown preset '{preset}' (choose from {', '.join(PRESET_NAMES)})")
    if role not in ("teacher", "student"):
        raise ConfigError(f"unknown role '{role}'")
    d, h, ffn, layers, grid, patch, vocab, max_len, embed = _PRESETS[preset]
    if role == "student":
        layers = tuple(n // 2 for n in layers)
    vision, text, fusion = layers
    return VlmConfig(
        vision=EncoderConfig(vision, h, d, ffn),
        text=EncoderConfig(text, h, d, ffn),
        fusion=EncoderConfig(fusion, h, d, ffn, is_cross_modal=True),
        patch_grid=grid,
        patch_size=patch,
        image_channels=3,
        vocab_size=vocab,
        max_text_len=max_len,
        embed_dim=embed,
    )


def halve_depth(config: VlmConfig) -> VlmConfig:
    """
    Student layout for a teacher: every encoder keeps its even-numbered layers.

    Raises:
        ConfigError: If any encoder has an odd number of layers
    """
    encoders = {}
    for name in ENCODERS:
        enc = config.encoder(name)
        if enc.num_layers % 2 != 0 or enc.num_layers == 0:
            raise ConfigError(f"{name} encoder has odd depth {enc.num_layers}; cannot halve")
        kept = range(2, enc.num_layers + 1, 2)
        encoders[name] = replace(
            enc,
            num_layers=enc.num_layers // 2,
            layer_heads=tuple(enc.heads(i) for i in kept) if enc.layer_heads else None,
            layer_cross_heads=(
                tuple(enc.cross_heads(i) for i in kept) if enc.layer_cross_heads else None
            ),
            layer_ffn=tuple(enc.ffn(i) for i in kept) if enc.layer_ffn else None,
        )
    return config.with_encoders(**encoders)


def preset_of(config: VlmConfig) -> Optional[Tuple[str, str]]:
    """
    (preset, role) whose unpruned layout matches a config, or None.

    Pruned configs match the preset they were sliced from.
    """
    layout = config.unpruned()
    for preset in PRESET_NAMES:
        for role in ("teacher", "student"):
            if preset_config(preset, role) == layout:
                return preset, role
    return None


# ===== PARAMETER GRAMMAR =====


def _norm_shapes(prefix: str, d: int) -> Dict[str, tuple]:
    return {f"{prefix}.gamma": (d,), f"{prefix}.beta": (d,)}


def _attention_shapes(prefix: str, d: int, width: int) -> Dict[str, tuple]:
    return {
        f"{prefix}.wq": (d, width),
        f"{prefix}.bq": (width,),
        f"{prefix}.wk": (d, width),
        f"{prefix}.bk": (width,),
        f"{prefix}.wv": (d, width),
        f"{prefix}.bv": (width,),
        f"{prefix}.wo": (width, d),
        f"{prefix}.bo": (d,),
    }


def layer_parameter_shapes(name: str, enc: EncoderConfig, layer: int) -> Dict[str, tuple]:
    d, dk = enc.model_dim, enc.head_dim
    prefix = f"{name}.{layer}"
    shapes: Dict[str, tuple] = {}
    shapes.update(_norm_shapes(f"{prefix}.ln1", d))
    shapes.update(_attention_shapes(f"{prefix}.attn", d, enc.heads(layer) * dk))
    if enc.is_cross_modal:
        shapes.update(_norm_shapes(f"{prefix}.lnx", d))
        shapes.update(_attention_shapes(f"{prefix}.xattn", d, enc.cross_heads(layer) * dk))
    shapes.update(_norm_shapes(f"{prefix}.ln2", d))
    f = enc.ffn(layer)
    shapes.update({
        f"{prefix}.ffn.w1": (d, f),
        f"{prefix}.ffn.b1": (f,),
        f"{prefix}.ffn.w2": (f, d),
        f"{prefix}.ffn.b2": (d,),
    })
    return shapes


def parameter_shapes(config: VlmConfig) -> Dict[str, tuple]:
    """
    Every parameter name and shape, in canonical order, derived from config alone.
    """
    d = config.model_dim
    shapes: Dict[str, tuple] = {
        "vision.embed.patch.weight": (config.patch_dim, d),
        "vision.embed.patch.bias": (d,),
        "vision.embed.cls.token": (1, d),
        "vision.embed.position.weight": (config.num_patches + 1, d),
        "text.embed.token.weight": (config.vocab_size, d),
        "text.embed.position.weight": (config.max_text_len, d),
    }
    for name in ENCODERS:
        enc = config.encoder(name)
        for layer in range(1, enc.num_layers + 1):
            shapes.update(layer_parameter_shapes(name, enc, layer))
        shapes.update(_norm_shapes(f"{name}.final.norm", d))
    shapes.update({
        "head.itc.vision.weight": (d, config.embed_dim),
        "head.itc.text.weight": (d, config.embed_dim),
        "head.itc.scale.logit": (),
        "head.itm.out.weight": (d, 2),
        "head.itm.out.bias": (2,),
        "head.mlm.out.weight": (d, config.vocab_size),
        "head.mlm.out.bias": (config.vocab_size,),
        "head.cls.out.weight": (d, config.num_classes),
        "head.cls.out.bias": (config.num_classes,),
    })
    return shapes


def parse_name(name: str) -> Tuple[str, str, str, str]:
    """Split a canonical parameter name into (scope, slot, sublayer, matrix)."""
    parts = name.split(".")
    if len(parts) != 4:
        raise ConfigError(f"parameter name '{name}' does not follow scope.slot.sublayer.matrix")
    return parts[0], parts[1], parts[2], parts[3]


def is_gated(name: str) -> bool:
    """Whether a parameter's size is governed by head or neuron gates."""
    scope, slot, sublayer, matrix = parse_name(name)
    if scope not in ENCODERS or not slot.isdigit():
        return False
    if sublayer in ("attn", "xattn"):
        return matrix in GATED_ATTENTION_MATRICES
    if sublayer == "ffn":
        return matrix in GATED_FFN_MATRICES
    return False
