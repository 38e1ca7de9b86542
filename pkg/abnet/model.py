"""
Model module for abnet.

This module holds the AB-Net computation graph:
- ModelConfig: architecture hyperparameters and adapter placement
- ParameterStore: named tensors partitioned into FROZEN and TRAINABLE sets
- BERT layer stacks for the source (encoder) and target (decoder) sides
- Encoder adapters (LN -> W1 -> ReLU -> W2, residual)
- Decoder adapters (cross-attention + FFN, post-LN)
- Length head over the [LENGTH] position and a tied output head
- An autoregressive Transformer decoder for the encoder-only variant

Forward functions are written against a ParameterStore rather than module
objects so a checkpoint, a gradient check and the optimizer all see the same
flat name -> tensor map.
"""

import hashlib
import logging
import math
import zlib
from dataclasses import asdict, dataclass, fields
from enum import Enum
from typing import Dict, Iterator, List, Mapping, Optional, Tuple, Union

import torch

from abnet import numerics
from abnet.errors import ConfigurationError, ContractError, DataError, LengthError
from abnet.tokenizer import LENGTH_ID, NUM_SPECIAL, PAD_ID

logger = logging.getLogger(__name__)

DECODER_MASKS = ("bidirectional", "causal")
DECODER_KINDS = ("adapter-bert", "transformer-ar")
SIDES = ("source", "target")

LayerSpec = Union[str, List[int], None]


def parse_layer_set(spec: LayerSpec, n_layers: int) -> List[int]:
    """
    Resolve an adapter placement to sorted 1-based layer indices.

    Accepts a list of indices, "all", "none" or "top-K" (clamped to the
    stack depth).
    """
    if spec is None or spec == "all":
        return list(range(1, n_layers + 1))
    if spec == "none":
        return []
    if isinstance(spec, str):
        if spec.startswith("top-") and spec[4:].isdigit():
            k = min(int(spec[4:]), n_layers)
            return list(range(n_layers - k + 1, n_layers + 1))
        raise ConfigurationError(f"unrecognised adapter placement {spec!r}")
    indices = sorted({int(i) for i in spec})
    for i in indices:
        if not 1 <= i <= n_layers:
            raise ConfigurationError(
                f"adapter layer {i} outside 1..{n_layers}"
            )
    return indices


@dataclass
class ModelConfig:
    """
    Architecture of one AB-Net assembly.

    Vocabulary sizes are filled in from the built vocabularies; the remaining
    fields come from the experiment config. Adapter layer sets are 1-based.
    """

    src_vocab_size: int = 0
    tgt_vocab_size: int = 0
    d_hidden: int = 64
    n_heads: int = 4
    encoder_layers: int = 4
    decoder_layers: int = 4
    d_ffn: int = 128
    d_adapter: int = 32
    d_adapter_ffn: Optional[int] = None
    encoder_adapter_layers: LayerSpec = None
    decoder_adapter_layers: LayerSpec = "top-2"
    max_source_length: int = 24
    max_target_length: int = 24
    decoder_mask: str = "bidirectional"
    decoder_kind: str = "adapter-bert"
    dropout: float = 0.0
    dtype: str = "float32"
    seed: int = 1

    def __post_init__(self):
        if self.d_adapter_ffn is None:
            self.d_adapter_ffn = self.d_ffn
        self.validate()
        self.encoder_adapter_layers = parse_layer_set(
            self.encoder_adapter_layers, self.encoder_layers
        )
        self.decoder_adapter_layers = parse_layer_set(
            self.decoder_adapter_layers, self.decoder_layers
        )

    def validate(self):
        for name in ("d_hidden", "n_heads", "encoder_layers", "decoder_layers",
                     "d_ffn", "d_adapter", "d_adapter_ffn",
                     "max_source_length", "max_target_length"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be at least 1")
        if self.d_hidden % self.n_heads:
            raise ConfigurationError(
                f"d_hidden {self.d_hidden} is not divisible by n_heads {self.n_heads}"
            )
        if self.decoder_mask not in DECODER_MASKS:
            raise ConfigurationError(f"decoder_mask must be one of {DECODER_MASKS}")
        if self.decoder_kind not in DECODER_KINDS:
            raise ConfigurationError(f"decoder_kind must be one of {DECODER_KINDS}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must lie in [0, 1)")
        numerics.resolve_dtype(self.dtype)

    @property
    def d_adapter_decoder(self) -> int:
        """Decoder-adapter attention width; equal to the backbone width."""
        return self.d_hidden

    @property
    def parallel(self) -> bool:
        """True when the model decodes with Mask-Predict (length head present)."""
        return self.decoder_kind == "adapter-bert" and self.decoder_mask == "bidirectional"

    @property
    def torch_dtype(self) -> torch.dtype:
        return numerics.resolve_dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigurationError(f"unknown model config key {key!r}")
        return cls(**dict(data))


class Partition(str, Enum):
    FROZEN = "frozen"
    TRAINABLE = "trainable"


class ParameterStore:
    """
    Ordered map of parameter name -> tensor with a FROZEN/TRAINABLE label.

    The label drives `requires_grad`, so frozen tensors never accumulate a
    gradient and the optimizer only ever sees `trainable()`.
    """

    def __init__(self):
        self._tensors: Dict[str, torch.Tensor] = {}
        self._partitions: Dict[str, Partition] = {}

    def add(self, name: str, tensor: torch.Tensor, partition: Partition = Partition.FROZEN):
        if name in self._tensors:
            raise ConfigurationError(f"parameter {name!r} already exists")
        self._tensors[name] = tensor
        self.set_partition(name, partition)

    def __getitem__(self, name: str) -> torch.Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise ContractError(f"missing parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def partition_of(self, name: str) -> Partition:
        return self._partitions[name]

    def set_partition(self, name: str, partition: Partition):
        partition = Partition(partition)
        self._partitions[name] = partition
        self._tensors[name].requires_grad_(partition is Partition.TRAINABLE)

    def trainable(self) -> List[Tuple[str, torch.Tensor]]:
        return [(n, t) for n, t in self._tensors.items()
                if self._partitions[n] is Partition.TRAINABLE]

    def frozen(self) -> List[Tuple[str, torch.Tensor]]:
        return [(n, t) for n, t in self._tensors.items()
                if self._partitions[n] is Partition.FROZEN]

    def scope(self, prefix: str) -> Dict[str, torch.Tensor]:
        """Tensors under `prefix.` keyed by the remainder of their name."""
        head = prefix + "."
        return {n[len(head):]: t for n, t in self._tensors.items() if n.startswith(head)}

    def numel(self, partition: Optional[Partition] = None) -> int:
        return sum(
            t.numel() for n, t in self._tensors.items()
            if partition is None or self._partitions[n] is partition
        )

    def checksum(self, name: str) -> str:
        data = self._tensors[name].detach().contiguous().cpu().numpy().tobytes()
        return hashlib.sha256(data).hexdigest()

    def with_overrides(self, overrides: Mapping[str, torch.Tensor]) -> "ParameterStore":
        """Shallow copy with some tensors swapped; partitions are kept."""
        store = ParameterStore()
        for name, tensor in self._tensors.items():
            store._tensors[name] = overrides.get(name, tensor)
            store._partitions[name] = self._partitions[name]
        return store


def subscope(mapping: Mapping[str, torch.Tensor], prefix: str) -> Dict[str, torch.Tensor]:
    head = prefix + "."
    return {n[len(head):]: t for n, t in mapping.items() if n.startswith(head)}


# Shapes and initialization

def _attention_shapes(prefix: str, d: int) -> Dict[str, Tuple[int, ...]]:
    shapes = {}
    for proj in ("q", "k", "v", "o"):
        shapes[f"{prefix}.{proj}.weight"] = (d, d)
        shapes[f"{prefix}.{proj}.bias"] = (d,)
    return shapes


def _ln_shapes(prefix: str, d: int) -> Dict[str, Tuple[int, ...]]:
    return {f"{prefix}.gain": (d,), f"{prefix}.bias": (d,)}


def _ffn_shapes(prefix: str, d: int, width: int) -> Dict[str, Tuple[int, ...]]:
    return {
        f"{prefix}.w1": (d, width),
        f"{prefix}.b1": (width,),
        f"{prefix}.w2": (width, d),
        f"{prefix}.b2": (d,),
    }


def _embedding_shapes(prefix: str, vocab: int, positions: int, d: int):
    shapes = {
        f"{prefix}.embeddings.token": (vocab, d),
        f"{prefix}.embeddings.position": (positions, d),
    }
    shapes.update(_ln_shapes(f"{prefix}.embeddings.ln", d))
    return shapes


def side_prefix(side: str) -> str:
    if side not in SIDES:
        raise ConfigurationError(f"side must be one of {SIDES}, got {side!r}")
    return "encoder" if side == "source" else "decoder"


def backbone_shapes(config: ModelConfig, side: str) -> Dict[str, Tuple[int, ...]]:
    """Shapes of one BERT stack (embeddings + layers), named for its side."""
    prefix = side_prefix(side)
    d = config.d_hidden
    if side == "source":
        vocab, positions, layers = (
            config.src_vocab_size, config.max_source_length + 1, config.encoder_layers
        )
    else:
        vocab, positions, layers = (
            config.tgt_vocab_size, config.max_target_length, config.decoder_layers
        )
    if vocab <= NUM_SPECIAL:
        raise ConfigurationError(f"{side} vocabulary size {vocab} is not set")
    shapes = _embedding_shapes(prefix, vocab, positions, d)
    for i in range(1, layers + 1):
        layer = f"{prefix}.layers.{i}"
        shapes.update(_attention_shapes(f"{layer}.attn", d))
        shapes.update(_ln_shapes(f"{layer}.attn_ln", d))
        shapes.update(_ffn_shapes(f"{layer}.ffn", d, config.d_ffn))
        shapes.update(_ln_shapes(f"{layer}.ffn_ln", d))
    return shapes


def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Every tensor of the assembled model described by `config`, in a fixed order."""
    d = config.d_hidden
    shapes = backbone_shapes(config, "source")
    shapes["encoder.embeddings.length_token"] = (d,)
    for i in config.encoder_adapter_layers:
        adapter = f"encoder.adapters.{i}"
        shapes.update(_ln_shapes(f"{adapter}.ln", d))
        shapes.update(_ffn_shapes(adapter, d, config.d_adapter))
    if config.parallel:
        shapes["encoder.length_head.weight"] = (d, config.max_target_length)
        shapes["encoder.length_head.bias"] = (config.max_target_length,)

    if config.decoder_kind == "adapter-bert":
        shapes.update(backbone_shapes(config, "target"))
        for i in config.decoder_adapter_layers:
            adapter = f"decoder.adapters.{i}"
            shapes.update(_attention_shapes(f"{adapter}.attn", config.d_adapter_decoder))
            shapes.update(_ln_shapes(f"{adapter}.attn_ln", d))
            shapes.update(_ffn_shapes(f"{adapter}.ffn", d, config.d_adapter_ffn))
            shapes.update(_ln_shapes(f"{adapter}.ffn_ln", d))
    else:
        if config.tgt_vocab_size <= NUM_SPECIAL:
            raise ConfigurationError("target vocabulary size is not set")
        shapes.update(_embedding_shapes(
            "ar_decoder", config.tgt_vocab_size, config.max_target_length, d
        ))
        for i in range(1, config.decoder_layers + 1):
            layer = f"ar_decoder.layers.{i}"
            shapes.update(_attention_shapes(f"{layer}.self_attn", d))
            shapes.update(_ln_shapes(f"{layer}.self_ln", d))
            shapes.update(_attention_shapes(f"{layer}.cross_attn", d))
            shapes.update(_ln_shapes(f"{layer}.cross_ln", d))
            shapes.update(_ffn_shapes(f"{layer}.ffn", d, config.d_ffn))
            shapes.update(_ln_shapes(f"{layer}.ffn_ln", d))
    return shapes


def is_adapter_parameter(name: str) -> bool:
    """Adapters, the length head and the [LENGTH] embedding row."""
    return (
        ".adapters." in name
        or name.startswith("encoder.length_head.")
        or name == "encoder.embeddings.length_token"
    )


def _zero_initialized(name: str) -> bool:
    # Adapter output projections start at zero so adapters begin as pass-through.
    if name.startswith("encoder.adapters.") and name.endswith(".w2"):
        return True
    if name.startswith("decoder.adapters."):
        return name.endswith(".attn.o.weight") or name.endswith(".ffn.w2")
    return False


def _init_tensor(name: str, shape: Tuple[int, ...], config: ModelConfig) -> torch.Tensor:
    dtype = config.torch_dtype
    if name.endswith(".gain"):
        return torch.ones(shape, dtype=dtype)
    if len(shape) == 1 and not name.endswith("length_token"):
        return torch.zeros(shape, dtype=dtype)
    if _zero_initialized(name):
        return torch.zeros(shape, dtype=dtype)
    # Per-name seed keeps a tensor's init independent of which others exist.
    generator = torch.Generator().manual_seed(
        (config.seed * 1_000_003 + zlib.crc32(name.encode("utf-8"))) % (2 ** 63)
    )
    fan_in = shape[-1] if ".embeddings." in name else shape[0]
    bound = 1.0 / math.sqrt(fan_in)
    tensor = torch.empty(shape, dtype=torch.float64)
    tensor.uniform_(-bound, bound, generator=generator)
    return tensor.to(dtype)


def init_parameters(
    config: ModelConfig,
    shapes: Optional[Mapping[str, Tuple[int, ...]]] = None,
    partition: Partition = Partition.FROZEN,
) -> ParameterStore:
    """Freshly initialized tensors for `shapes` (default: the whole model)."""
    shapes = parameter_shapes(config) if shapes is None else shapes
    store = ParameterStore()
    for name, shape in shapes.items():
        store.add(name, _init_tensor(name, shape, config), partition)
    return store


def init_backbone(config: ModelConfig, side: str) -> ParameterStore:
    """A randomly initialized, fully trainable BERT stack for one side."""
    return init_parameters(config, backbone_shapes(config, side), Partition.TRAINABLE)


def assemble_abnet(
    config: ModelConfig,
    source_backbone: Optional[ParameterStore] = None,
    target_backbone: Optional[ParameterStore] = None,
) -> ParameterStore:
    """
    Build the AB-Net parameter set from pre-trained backbones.

    Backbone tensors are copied in by name; everything else (adapters,
    length head, [LENGTH] row, AR decoder) is freshly initialized. Missing
    backbones leave the random init in place. All tensors start FROZEN; the
    training mode assigns the partition.
    """
    store = init_parameters(config)
    sources = [source_backbone]
    if config.decoder_kind == "adapter-bert":
        sources.append(target_backbone)
    for backbone in sources:
        if backbone is None:
            continue
        for name, tensor in backbone.items():
            if name not in store:
                raise ConfigurationError(f"backbone tensor {name!r} has no slot in the model")
            if tuple(tensor.shape) != tuple(store[name].shape):
                raise ConfigurationError(
                    f"backbone tensor {name!r} has shape {tuple(tensor.shape)}, "
                    f"model expects {tuple(store[name].shape)}"
                )
            store[name].data.copy_(tensor.detach().to(config.torch_dtype))
    return store


# Masks

def padding_mask(ids: torch.Tensor, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Additive key mask (batch, 1, len): -inf on [PAD] positions."""
    mask = torch.zeros(ids.shape, dtype=dtype)
    mask = mask.masked_fill(ids == PAD_ID, float("-inf"))
    return mask.unsqueeze(1)


def causal_mask(length: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Additive (len, len) mask with -inf strictly above the diagonal."""
    return torch.triu(torch.full((length, length), float("-inf"), dtype=dtype), diagonal=1)


# Building blocks

def _as_batch(x: torch.Tensor, rank: int) -> Tuple[torch.Tensor, bool]:
    if x.dim() == rank - 1:
        return x.unsqueeze(0), True
    return x, False


def multi_head_attention(
    query: torch.Tensor,
    key_value: torch.Tensor,
    attn_mask: Optional[torch.Tensor],
    p: Mapping[str, torch.Tensor],
    n_heads: int,
) -> torch.Tensor:
    """
    softmax(QK^T / sqrt(d_k)) V over `n_heads` heads, then the output projection.

    query: (B, Lq, d); key_value: (B, Lk, d); attn_mask additive, broadcastable
    to (B, Lq, Lk).
    """
    batch, len_q, d = query.shape
    len_k = key_value.shape[1]
    d_k = d // n_heads

    def heads(x, length):
        return x.reshape(batch, length, n_heads, d_k).transpose(1, 2).reshape(
            batch * n_heads, length, d_k
        )

    q = heads(numerics.linear(query, p["q.weight"], p["q.bias"]), len_q)
    k = heads(numerics.linear(key_value, p["k.weight"], p["k.bias"]), len_k)
    v = heads(numerics.linear(key_value, p["v.weight"], p["v.bias"]), len_k)
    scores = numerics.matmul(q, k.transpose(1, 2)) / math.sqrt(d_k)
    if attn_mask is not None:
        mask = attn_mask.expand(batch, len_q, len_k)
        mask = mask.unsqueeze(1).expand(batch, n_heads, len_q, len_k)
        scores = scores + mask.reshape(batch * n_heads, len_q, len_k)
    weights = numerics.softmax(scores, axis=-1)
    context = numerics.matmul(weights, v)
    context = context.reshape(batch, n_heads, len_q, d_k).transpose(1, 2).reshape(
        batch, len_q, d
    )
    return numerics.linear(context, p["o.weight"], p["o.bias"])


def feed_forward(h: torch.Tensor, p: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """ReLU(H W1 + b1) W2 + b2."""
    hidden = numerics.relu(numerics.linear(h, p["w1"], p["b1"]))
    return numerics.linear(hidden, p["w2"], p["b2"])


def _ln(h: torch.Tensor, p: Mapping[str, torch.Tensor], prefix: str) -> torch.Tensor:
    return numerics.layer_norm(h, p[f"{prefix}.gain"], p[f"{prefix}.bias"])


def _embed(ids: torch.Tensor, prefix: str, params: ParameterStore, config: ModelConfig,
           training: bool = False) -> torch.Tensor:
    token_table = params[f"{prefix}.embeddings.token"]
    position_table = params[f"{prefix}.embeddings.position"]
    length = ids.shape[-1]
    if length > position_table.shape[0]:
        raise LengthError(
            f"{prefix}: sequence of length {length} exceeds the maximum "
            f"{position_table.shape[0]}"
        )
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= token_table.shape[0]):
        raise DataError(f"{prefix}: token id outside vocabulary of {token_table.shape[0]}")
    tokens = token_table[ids]
    length_name = f"{prefix}.embeddings.length_token"
    if length_name in params:
        tokens = torch.where(
            (ids == LENGTH_ID).unsqueeze(-1), params[length_name], tokens
        )
    h = tokens + position_table[:length]
    h = numerics.layer_norm(
        h, params[f"{prefix}.embeddings.ln.gain"], params[f"{prefix}.embeddings.ln.bias"]
    )
    return numerics.dropout(h, config.dropout, training)


def embed(ids: torch.Tensor, side: str, params: ParameterStore, config: ModelConfig,
          training: bool = False) -> torch.Tensor:
    """
    Token embedding + learned absolute position embedding, then layer norm.

    ids of shape (len,) give (len, d_hidden); (batch, len) give (batch, len, d_hidden).
    """
    prefix = side_prefix(side)
    if side == "target" and config.decoder_kind == "transformer-ar":
        prefix = "ar_decoder"
    return _embed(ids, prefix, params, config, training)


def bert_layer(
    h: torch.Tensor,
    attn_mask: Optional[torch.Tensor],
    layer_params: Mapping[str, torch.Tensor],
    config: ModelConfig,
    training: bool = False,
) -> torch.Tensor:
    """
    Post-LN BERT layer.

    S = LN(h + MultiHeadAttn(h, h, h, mask)); out = LN(S + FFN(S)).
    """
    h, single = _as_batch(h, 3)
    attn = multi_head_attention(
        h, h, attn_mask, subscope(layer_params, "attn"), config.n_heads
    )
    s = _ln(h + numerics.dropout(attn, config.dropout, training), layer_params, "attn_ln")
    ffn = feed_forward(s, subscope(layer_params, "ffn"))
    out = _ln(s + numerics.dropout(ffn, config.dropout, training), layer_params, "ffn_ln")
    return out.squeeze(0) if single else out


def encoder_adapter(h: torch.Tensor, adapter_params: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """H + W2 ReLU(W1 LN(H) + b1) + b2."""
    z = numerics.linear(_ln(h, adapter_params, "ln"), adapter_params["w1"], adapter_params["b1"])
    return h + numerics.linear(numerics.relu(z), adapter_params["w2"], adapter_params["b2"])


def decoder_adapter(
    y_hidden: torch.Tensor,
    enc_out: torch.Tensor,
    enc_pad_mask: Optional[torch.Tensor],
    adapter_params: Mapping[str, torch.Tensor],
    config: ModelConfig,
    training: bool = False,
) -> torch.Tensor:
    """
    Cross-attention adapter.

    Z = LN(Attn(Y, H_E, H_E) + Y); out = LN(FFN(Z) + Z).
    """
    y_hidden, single = _as_batch(y_hidden, 3)
    enc_out, _ = _as_batch(enc_out, 3)
    attn = multi_head_attention(
        y_hidden, enc_out, enc_pad_mask, subscope(adapter_params, "attn"), config.n_heads
    )
    z = _ln(numerics.dropout(attn, config.dropout, training) + y_hidden, adapter_params, "attn_ln")
    ffn = feed_forward(z, subscope(adapter_params, "ffn"))
    out = _ln(numerics.dropout(ffn, config.dropout, training) + z, adapter_params, "ffn_ln")
    return out.squeeze(0) if single else out


def backbone_forward(
    ids: torch.Tensor, side: str, params: ParameterStore, config: ModelConfig,
    training: bool = False,
) -> torch.Tensor:
    """Plain BERT stack without adapters (MLM pre-training)."""
    ids, single = _as_batch(ids, 2)
    prefix = side_prefix(side)
    n_layers = config.encoder_layers if side == "source" else config.decoder_layers
    h = _embed(ids, prefix, params, config, training)
    mask = padding_mask(ids, h.dtype)
    for i in range(1, n_layers + 1):
        h = bert_layer(h, mask, params.scope(f"{prefix}.layers.{i}"), config, training)
    return h.squeeze(0) if single else h


def tied_logits(h: torch.Tensor, token_table: torch.Tensor) -> torch.Tensor:
    """Output head sharing the token embedding matrix: H E^T."""
    return numerics.matmul(h, token_table.t())


def mlm_logits(ids: torch.Tensor, side: str, params: ParameterStore, config: ModelConfig,
               training: bool = False) -> torch.Tensor:
    h = backbone_forward(ids, side, params, config, training)
    return tied_logits(h, params[f"{side_prefix(side)}.embeddings.token"])


def encoder_forward(
    src_ids: torch.Tensor, params: ParameterStore, config: ModelConfig,
    training: bool = False,
) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
    """
    Source BERT stack with encoder adapters after the indexed layers.

    Args:
        src_ids: (len,) or (batch, len) ids starting with [LENGTH].

    Returns:
        (H_E, length_logits); length_logits is None when the model has no
        length head (autoregressive variants).
    """
    src_ids, single = _as_batch(src_ids, 2)
    if src_ids.shape[-1] == 0 or bool((src_ids[:, 0] != LENGTH_ID).any()):
        raise ContractError("encoder_forward: source ids must start with [LENGTH]")
    h = _embed(src_ids, "encoder", params, config, training)
    mask = padding_mask(src_ids, h.dtype)
    adapted = set(config.encoder_adapter_layers)
    for i in range(1, config.encoder_layers + 1):
        h = bert_layer(h, mask, params.scope(f"encoder.layers.{i}"), config, training)
        if i in adapted:
            h = encoder_adapter(h, params.scope(f"encoder.adapters.{i}"))
    length_logits = None
    if "encoder.length_head.weight" in params:
        length_logits = numerics.linear(
            h[:, 0], params["encoder.length_head.weight"], params["encoder.length_head.bias"]
        )
    if single:
        return h.squeeze(0), None if length_logits is None else length_logits.squeeze(0)
    return h, length_logits


def _self_attention_mask(tgt_ids: torch.Tensor, causal: bool, dtype: torch.dtype) -> torch.Tensor:
    mask = padding_mask(tgt_ids, dtype)
    if causal:
        mask = mask + causal_mask(tgt_ids.shape[-1], dtype)
    return mask


def decoder_forward(
    tgt_ids: torch.Tensor,
    enc_out: torch.Tensor,
    params: ParameterStore,
    config: ModelConfig,
    enc_pad_mask: Optional[torch.Tensor] = None,
    training: bool = False,
) -> torch.Tensor:
    """
    Target BERT stack with decoder adapters after the indexed layers.

    Self-attention is bidirectional or causal per `config.decoder_mask`.
    Logits use the frozen target token embedding as output matrix.
    """
    if config.decoder_kind != "adapter-bert":
        raise ContractError("decoder_forward needs decoder_kind 'adapter-bert'")
    tgt_ids, single = _as_batch(tgt_ids, 2)
    enc_out, _ = _as_batch(enc_out, 3)
    if tgt_ids.shape[-1] > config.max_target_length:
        raise LengthError(
            f"target length {tgt_ids.shape[-1]} exceeds {config.max_target_length}"
        )
    h = _embed(tgt_ids, "decoder", params, config, training)
    mask = _self_attention_mask(tgt_ids, config.decoder_mask == "causal", h.dtype)
    adapted = set(config.decoder_adapter_layers)
    for i in range(1, config.decoder_layers + 1):
        h = bert_layer(h, mask, params.scope(f"decoder.layers.{i}"), config, training)
        if i in adapted:
            h = decoder_adapter(
                h, enc_out, enc_pad_mask, params.scope(f"decoder.adapters.{i}"), config, training
            )
    logits = tied_logits(h, params["decoder.embeddings.token"])
    return logits.squeeze(0) if single else logits


def transformer_ar_decoder_forward(
    tgt_ids: torch.Tensor,
    enc_out: torch.Tensor,
    params: ParameterStore,
    config: ModelConfig,
    enc_pad_mask: Optional[torch.Tensor] = None,
    training: bool = False,
) -> torch.Tensor:
    """
    Standard Transformer decoder trained from scratch (encoder-only variant).

    Each layer: causal self-attention, cross-attention on H_E, FFN, all
    post-LN. tgt_ids are shifted right with [BOS].
    """
    if config.decoder_kind != "transformer-ar":
        raise ContractError("transformer_ar_decoder_forward needs decoder_kind 'transformer-ar'")
    tgt_ids, single = _as_batch(tgt_ids, 2)
    enc_out, _ = _as_batch(enc_out, 3)
    if tgt_ids.shape[-1] > config.max_target_length:
        raise LengthError(
            f"target length {tgt_ids.shape[-1]} exceeds {config.max_target_length}"
        )
    h = _embed(tgt_ids, "ar_decoder", params, config, training)
    mask = _self_attention_mask(tgt_ids, True, h.dtype)
    for i in range(1, config.decoder_layers + 1):
        p = params.scope(f"ar_decoder.layers.{i}")
        attn = multi_head_attention(h, h, mask, subscope(p, "self_attn"), config.n_heads)
        h = _ln(h + numerics.dropout(attn, config.dropout, training), p, "self_ln")
        cross = multi_head_attention(h, enc_out, enc_pad_mask, subscope(p, "cross_attn"),
                                     config.n_heads)
        h = _ln(h + numerics.dropout(cross, config.dropout, training), p, "cross_ln")
        ffn = feed_forward(h, subscope(p, "ffn"))
        h = _ln(h + numerics.dropout(ffn, config.dropout, training), p, "ffn_ln")
    logits = tied_logits(h, params["ar_decoder.embeddings.token"])
    return logits.squeeze(0) if single else logits


def target_forward(
    tgt_ids: torch.Tensor,
    enc_out: torch.Tensor,
    params: ParameterStore,
    config: ModelConfig,
    enc_pad_mask: Optional[torch.Tensor] = None,
    training: bool = False,
) -> torch.Tensor:
    """Dispatch to the decoder of `config.decoder_kind`."""
    if config.decoder_kind == "transformer-ar":
        return transformer_ar_decoder_forward(
            tgt_ids, enc_out, params, config, enc_pad_mask, training
        )
    return decoder_forward(tgt_ids, enc_out, params, config, enc_pad_mask, training)
