"""
Tri-Encoder Vision-Language Model

A vision encoder over patch embeddings, a text encoder over token embeddings,
and a fusion encoder that self-attends over text states and cross-attends into
the final vision states at every layer. Teacher and student share this code;
they differ only in configuration.

Layers are pre-norm:
    x = x + SelfAttn(LN1(x))
    x = x + CrossAttn(LNx(x), vision)      (fusion only)
    x = x + FFN(LN2(x))

Optional gate values (one per attention head and per FFN neuron) multiply each
head's context and each FFN activation; the layout of that vector comes from
the GateSet bound to the model.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Optional, Tuple

import numpy as np

from ..errors import ShapeError
from ..numcore import tensor as tc
from ..numcore.rng import Rng
from ..numcore.tensor import Tensor, no_grad
from .config import ENCODERS, VlmConfig, parameter_shapes

if TYPE_CHECKING:
    from ..training.l0prune import GateSet

logger = logging.getLogger(__name__)

MASK_BIAS = -1e9


@dataclass
class ForwardTrace:
    """
    Everything a forward pass exposes to the losses.

    Attributes:
        attentions: encoder -> per-layer self-attention maps, each (batch, heads, l, l)
        cross_attentions: per fusion layer cross-attention maps (batch, heads, l, patches)
        hidden: encoder -> per-layer output states (batch, seq, d)
        logits: head name -> logits ('itc' image-to-text similarities, 'itm', 'cls', 'mlm')
        image_embed / text_embed: normalized contrastive embeddings (batch, embed_dim)
        fusion_pooled: fusion output at the [cls] position (batch, d)
        itm_negative_logits: match logits of hard in-batch negative pairs, if built
        head_norms: encoder (and 'fusion.cross') -> per-layer mean L2 norm of each head's context
    """

    attentions: Dict[str, List[Tensor]] = field(default_factory=dict)
    cross_attentions: List[Tensor] = field(default_factory=list)
    hidden: Dict[str, List[Tensor]] = field(default_factory=dict)
    logits: Dict[str, Tensor] = field(default_factory=dict)
    image_embed: Optional[Tensor] = None
    text_embed: Optional[Tensor] = None
    fusion_pooled: Optional[Tensor] = None
    itm_negative_logits: Optional[Tensor] = None
    head_norms: Dict[str, List[np.ndarray]] = field(default_factory=dict)

    def depth(self, encoder: str) -> int:
        return len(self.hidden.get(encoder, []))


class VlmModel:
    """
    Tri-encoder model: configuration plus a flat name -> Tensor parameter map.

    Attributes:
        config: VlmConfig the parameter shapes derive from
        params: Canonical name -> parameter Tensor
        gates: Optional GateSet whose layout indexes gate value vectors
        projection: Optional student -> teacher hidden projection (identity when None)
    """

    def __init__(
        self,
        config: VlmConfig,
        params: Dict[str, Tensor],
        gates: Optional["GateSet"] = None,
        projection: Optional[Tensor] = None,
    ):
        expected = parameter_shapes(config)
        missing = [name for name in expected if name not in params]
        if missing:
            raise ShapeError(f"missing parameters: {missing[:5]}")
        for name, shape in expected.items():
            if params[name].shape != tuple(shape):
                raise ShapeError(
                    f"parameter {name} has shape {params[name].shape}, config implies {tuple(shape)}"
                )
        self.config = config
        self.params = {name: params[name] for name in expected}
        self.gates = gates
        self.projection = projection

    @classmethod
    def initialize(cls, config: VlmConfig, rng: Rng) -> "VlmModel":
        """
        Fresh model with deterministic initial weights.

        Matrices are drawn N(0, 1/fan_in), embeddings N(0, 0.02^2), biases are
        zero and norm gains one.
        """
        params = {}
        for name, shape in parameter_shapes(config).items():
            matrix = name.rsplit(".", 1)[1]
            if matrix == "gamma":
                data = np.ones(shape)
            elif matrix == "logit":
                data = np.full(shape, np.log(10.0))
            elif name.startswith(("vision.embed.cls", "vision.embed.position", "text.embed")):
                data = rng.normal(shape, 0.02)
            elif len(shape) == 2:
                data = rng.normal(shape, 1.0 / np.sqrt(shape[0]))
            else:
                data = np.zeros(shape)
            params[name] = tc.parameter(data, name)
        return cls(config, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __repr__(self) -> str:
        v, t, f = self.config.layer_counts
        return f"VlmModel(layers={v}/{t}/{f}, params={self.parameter_count():,})"

    def parameter_count(self, scope: Optional[str] = None) -> int:
        return int(sum(
            p.size for name, p in self.params.items()
            if scope is None or name.split(".", 1)[0] == scope
        ))

    def copy(self) -> "VlmModel":
        """Deep copy of parameters; gates are shared."""
        params = {name: tc.parameter(p.data.copy(), name) for name, p in self.params.items()}
        return VlmModel(self.config, params, self.gates, self.projection)

    def with_gates(self, gates: Optional["GateSet"]) -> "VlmModel":
        """Same parameter tensors, different gate binding."""
        return VlmModel(self.config, self.params, gates, self.projection)

    def state(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}


# ===== ATTENTION =====


def _swap_last(x: Tensor) -> Tensor:
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return tc.transpose(x, axes)


def attention(
    Q: Tensor,
    K: Tensor,
    V: Tensor,
    head_gates: Optional[Tensor] = None,
    key_bias: Optional[np.ndarray] = None,
) -> Tuple[Tensor, Tensor]:
    """
    Scaled dot-product attention, A = softmax(Q K^T / sqrt(d_k)), context = A V.

    Args:
        Q: (..., heads, l, d_k) queries (a plain (l, d_k) matrix is one head)
        K: (..., heads, p, d_k) keys
        V: (..., heads, p, d_v) values
        head_gates: Optional (heads,) multipliers applied to each head's context
        key_bias: Optional additive bias broadcast onto the scores (padding mask)

    Returns:
        (context, A)

    Raises:
        ShapeError: If Q and K disagree on d_k
    """
    if Q.shape[-1] != K.shape[-1]:
        raise ShapeError(f"attention d_k mismatch: Q {Q.shape} vs K {K.shape}")
    d_k = Q.shape[-1]
    scores = tc.matmul(Q, _swap_last(K)) / float(np.sqrt(d_k))
    if key_bias is not None:
        scores = scores + Tensor(key_bias)
    A = tc.softmax_rows(scores)
    context = tc.matmul(A, V)
    if head_gates is not None:
        shape = (head_gates.size, 1, 1) if context.ndim >= 3 else (1, 1)
        context = context * tc.reshape(head_gates, shape)
    return context, A


def _split_heads(x: Tensor, n_heads: int, head_dim: int) -> Tensor:
    batch, length, _ = x.shape
    return tc.transpose(tc.reshape(x, (batch, length, n_heads, head_dim)), (0, 2, 1, 3))


def _multi_head(
    model: VlmModel,
    prefix: str,
    x_q: Tensor,
    x_kv: Tensor,
    n_heads: int,
    head_dim: int,
    gates: Optional[Tensor],
    key_bias: Optional[np.ndarray],
) -> Tuple[Tensor, Tensor, np.ndarray]:
    p = model.params
    q = _split_heads(x_q @ p[f"{prefix}.wq"] + p[f"{prefix}.bq"], n_heads, head_dim)
    k = _split_heads(x_kv @ p[f"{prefix}.wk"] + p[f"{prefix}.bk"], n_heads, head_dim)
    v = _split_heads(x_kv @ p[f"{prefix}.wv"] + p[f"{prefix}.bv"], n_heads, head_dim)
    context, A = attention(q, k, v, head_gates=gates, key_bias=key_bias)
    head_norm = np.linalg.norm(context.data, axis=-1).mean(axis=(0, 2))
    batch, _, length, _ = context.shape
    merged = tc.reshape(tc.transpose(context, (0, 2, 1, 3)), (batch, length, n_heads * head_dim))
    return merged @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"], A, head_norm


def _norm(model: VlmModel, prefix: str, x: Tensor) -> Tensor:
    return tc.layer_norm(x, model.params[f"{prefix}.gamma"], model.params[f"{prefix}.beta"])


def _gate_slice(model: VlmModel, gate_values: Optional[Tensor], encoder: str, layer: int,
                sublayer: str) -> Optional[Tensor]:
    if gate_values is None:
        return None
    start, stop = model.gates.slot(encoder, layer, sublayer)
    return tc.getitem(gate_values, slice(start, stop))


def _layer(
    model: VlmModel,
    encoder: str,
    layer: int,
    x: Tensor,
    key_bias: Optional[np.ndarray],
    vision: Optional[Tensor],
    gate_values: Optional[Tensor],
    trace: Optional[ForwardTrace],
) -> Tensor:
    enc = model.config.encoder(encoder)
    prefix = f"{encoder}.{layer}"
    dk = enc.head_dim

    h = _norm(model, f"{prefix}.ln1", x)
    out, A, norms = _multi_head(
        model, f"{prefix}.attn", h, h, enc.heads(layer), dk,
        _gate_slice(model, gate_values, encoder, layer, "attn"), key_bias,
    )
    x = x + out
    if trace is not None:
        trace.attentions.setdefault(encoder, []).append(A)
        trace.head_norms.setdefault(encoder, []).append(norms)

    if enc.is_cross_modal:
        h = _norm(model, f"{prefix}.lnx", x)
        out, A, norms = _multi_head(
            model, f"{prefix}.xattn", h, vision, enc.cross_heads(layer), dk,
            _gate_slice(model, gate_values, encoder, layer, "xattn"), None,
        )
        x = x + out
        if trace is not None:
            trace.cross_attentions.append(A)
            trace.head_norms.setdefault(f"{encoder}.cross", []).append(norms)

    p = model.params
    h = tc.gelu(_norm(model, f"{prefix}.ln2", x) @ p[f"{prefix}.ffn.w1"] + p[f"{prefix}.ffn.b1"])
    ffn_gates = _gate_slice(model, gate_values, encoder, layer, "ffn")
    if ffn_gates is not None:
        h = h * ffn_gates
    x = x + (h @ p[f"{prefix}.ffn.w2"] + p[f"{prefix}.ffn.b2"])
    if trace is not None:
        trace.hidden.setdefault(encoder, []).append(x)
    return x


def _run_layer(model, encoder, layer, x, key_bias, vision, gate_values, trace) -> Tensor:
    try:
        return _layer(model, encoder, layer, x, key_bias, vision, gate_values, trace)
    except ShapeError as exc:
        raise ShapeError(f"{encoder} encoder, layer {layer}: {exc}") from exc


def _key_bias(text_mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(text_mask, dtype=np.float64)
    return ((1.0 - mask) * MASK_BIAS)[:, None, None, :]


def _pooled(x: Tensor) -> Tensor:
    return tc.getitem(x, (slice(None), 0))


# ===== ENCODERS =====


def encode_vision(
    model: VlmModel,
    images: np.ndarray,
    gate_values: Optional[Tensor] = None,
    trace: Optional[ForwardTrace] = None,
) -> Tensor:
    """Patch embeddings -> vision encoder states (batch, patches + 1, d)."""
    cfg = model.config
    p = model.params
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3 or images.shape[1:] != (cfg.num_patches, cfg.patch_dim):
        raise ShapeError(
            f"vision encoder: expected (batch, {cfg.num_patches}, {cfg.patch_dim}) patches, "
            f"got {images.shape}"
        )
    batch, d = images.shape[0], cfg.model_dim
    x = Tensor(images) @ p["vision.embed.patch.weight"] + p["vision.embed.patch.bias"]
    cls = tc.reshape(p["vision.embed.cls.token"], (1, 1, d)) + Tensor(np.zeros((batch, 1, d)))
    x = tc.concat([cls, x], axis=1) + p["vision.embed.position.weight"]
    for layer in range(1, cfg.vision.num_layers + 1):
        x = _run_layer(model, "vision", layer, x, None, None, gate_values, trace)
    return _norm(model, "vision.final.norm", x)


def encode_text(
    model: VlmModel,
    token_ids: np.ndarray,
    text_mask: Optional[np.ndarray] = None,
    gate_values: Optional[Tensor] = None,
    trace: Optional[ForwardTrace] = None,
) -> Tensor:
    """Token ids -> text encoder states (batch, tokens, d)."""
    cfg = model.config
    p = model.params
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 2 or ids.shape[1] > cfg.max_text_len or ids.shape[1] == 0:
        raise ShapeError(
            f"text encoder: expected (batch, <= {cfg.max_text_len}) token ids, got {ids.shape}"
        )
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ShapeError(f"text encoder: token ids outside vocabulary of {cfg.vocab_size}")
    if text_mask is None:
        text_mask = np.ones(ids.shape)
    x = tc.getitem(p["text.embed.token.weight"], ids)
    x = x + tc.getitem(p["text.embed.position.weight"], slice(0, ids.shape[1]))
    bias = _key_bias(text_mask)
    for layer in range(1, cfg.text.num_layers + 1):
        x = _run_layer(model, "text", layer, x, bias, None, gate_values, trace)
    return _norm(model, "text.final.norm", x)


def fuse(
    model: VlmModel,
    text_states: Tensor,
    text_mask: Optional[np.ndarray],
    vision_states: Tensor,
    gate_values: Optional[Tensor] = None,
    trace: Optional[ForwardTrace] = None,
) -> Tensor:
    """Fusion encoder: text states cross-attending into vision states."""
    if text_mask is None:
        text_mask = np.ones(text_states.shape[:2])
    if text_states.shape[0] != vision_states.shape[0]:
        raise ShapeError(
            f"fusion encoder: {text_states.shape[0]} texts vs {vision_states.shape[0]} images"
        )
    bias = _key_bias(text_mask)
    x = text_states
    for layer in range(1, model.config.fusion.num_layers + 1):
        x = _run_layer(model, "fusion", layer, x, bias, vision_states, gate_values, trace)
    return _norm(model, "fusion.final.norm", x)


# ===== FORWARD =====


def forward(
    model: VlmModel,
    batch,
    mode: str = "trace",
    gate_values: Optional[Tensor] = None,
) -> ForwardTrace:
    """
    Run all three encoders and the task heads on a batch of aligned pairs.

    Args:
        model: Model to run
        batch: Batch with images, token_ids, text_mask and optional MLM inputs
        mode: 'trace' records attention maps and hidden states; 'plain' only logits
        gate_values: Optional per-unit gate vector laid out by model.gates

    Returns:
        ForwardTrace

    Raises:
        ShapeError: If the batch does not match the configuration (names the encoder)
    """
    if mode not in ("trace", "plain"):
        raise ShapeError(f"unknown forward mode '{mode}'")
    if gate_values is not None and model.gates is None:
        raise ShapeError("gate values supplied but the model has no GateSet bound")
    if gate_values is not None and gate_values.size != len(model.gates):
        raise ShapeError(f"{gate_values.size} gate values for {len(model.gates)} gated units")

    trace = ForwardTrace()
    record = trace if mode == "trace" else None
    text_mask = getattr(batch, "text_mask", None)

    vision = encode_vision(model, batch.images, gate_values, record)
    text = encode_text(model, batch.token_ids, text_mask, gate_values, record)
    fused = fuse(model, text, text_mask, vision, gate_values, record)

    p = model.params
    trace.image_embed = tc.l2_normalize(_pooled(vision) @ p["head.itc.vision.weight"])
    trace.text_embed = tc.l2_normalize(_pooled(text) @ p["head.itc.text.weight"])
    scale = tc.clip(tc.exp(p["head.itc.scale.logit"]), 0.0, 100.0)
    trace.logits["itc"] = tc.matmul(trace.image_embed, tc.transpose(trace.text_embed)) * scale

    trace.fusion_pooled = _pooled(fused)
    trace.logits["itm"] = trace.fusion_pooled @ p["head.itm.out.weight"] + p["head.itm.out.bias"]
    trace.logits["cls"] = trace.fusion_pooled @ p["head.cls.out.weight"] + p["head.cls.out.bias"]

    positions = getattr(batch, "mlm_positions", None)
    if positions is not None and np.any(positions):
        masked_text = encode_text(model, batch.mlm_input_ids, text_mask, gate_values)
        masked_fused = fuse(model, masked_text, text_mask, vision, gate_values)
        rows, cols = np.nonzero(positions)
        states = tc.getitem(masked_fused, (rows, cols))
        trace.logits["mlm"] = states @ p["head.mlm.out.weight"] + p["head.mlm.out.bias"]

    if getattr(batch, "in_batch_negatives", False) and len(batch.images) >= 2:
        trace.itm_negative_logits = _hard_negative_logits(
            model, batch, trace, vision, text, text_mask, gate_values
        )
    return trace


def _hard_negative_logits(model, batch, trace, vision, text, text_mask, gate_values):
    """
    Match logits for the hardest in-batch negatives: for each image the most
    similar non-matching caption, and for each caption the most similar
    non-matching image. Captions identical to the positive are never negatives.
    """
    ids = np.asarray(batch.token_ids)
    same = (ids[:, None, :] == ids[None, :, :]).all(axis=-1)
    sim = np.where(same, -np.inf, trace.logits["itc"].data)

    has_text = np.isfinite(sim).any(axis=1)
    has_image = np.isfinite(sim).any(axis=0)
    image_rows = np.concatenate([np.nonzero(has_text)[0], np.argmax(sim, axis=0)[has_image]])
    text_rows = np.concatenate([np.argmax(sim, axis=1)[has_text], np.nonzero(has_image)[0]])
    if image_rows.size == 0:
        return None

    mask = np.asarray(text_mask if text_mask is not None else np.ones(ids.shape))[text_rows]
    fused = fuse(model, tc.getitem(text, text_rows), mask, tc.getitem(vision, image_rows), gate_values)
    p = model.params
    return _pooled(fused) @ p["head.itm.out.weight"] + p["head.itm.out.bias"]


def encode_teacher(model: VlmModel, batch, mode: str = "trace") -> ForwardTrace:
    """Forward pass that records nothing into the active graph."""
    with no_grad():
        return forward(model, batch, mode=mode)


def trace_checksum(trace: ForwardTrace) -> str:
    """SHA-256 over every traced tensor's little-endian bytes, in canonical order."""
    digest = hashlib.sha256()

    def feed(t: Optional[Tensor]):
        if t is not None:
            digest.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())

    for encoder in ENCODERS:
        for t in trace.attentions.get(encoder, []):
            feed(t)
        for t in trace.hidden.get(encoder, []):
            feed(t)
    for t in trace.cross_attentions:
        feed(t)
    for key in sorted(trace.logits):
        feed(trace.logits[key])
    return digest.hexdigest()
