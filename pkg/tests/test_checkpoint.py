import struct

import pytest
import torch

from abnet import model
from abnet.checkpoint import (
    MAGIC,
    config_text,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from abnet.errors import (
    CheckpointError,
    CheckpointLayoutError,
    CheckpointMagicError,
    CheckpointTruncatedError,
)
from abnet.model import Partition
from abnet.training import apply_partition


def _count_offset(config):
    return len(MAGIC) + 8 + len(config_text(config).encode("utf-8"))


def _trained_like(config):
    params = model.assemble_abnet(config)
    apply_partition(params, "finetune-adapters")
    generator = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for _, tensor in params.trainable():
            tensor.add_(torch.randn(tensor.shape, generator=generator))
    return params


def test_roundtrip_is_bit_identical(tiny_config, tmp_path):
    config = tiny_config()
    params = _trained_like(config)
    path = str(tmp_path / "ckpt" / "abnet.ckpt")
    save_checkpoint(params, config, path)
    loaded, loaded_config = load_checkpoint(path)
    assert loaded_config == config
    assert list(loaded) == list(params)
    for name, tensor in params.items():
        assert torch.equal(loaded[name], tensor), name
        assert loaded.partition_of(name) is params.partition_of(name)
    assert loaded.partition_of("encoder.adapters.1.w1") is Partition.TRAINABLE


def test_save_load_save_gives_same_bytes(tiny_config, tmp_path):
    config = tiny_config(decoder_adapter_layers=[2])
    first = encode_checkpoint(_trained_like(config), config)
    params, loaded_config = decode_checkpoint(first)
    assert encode_checkpoint(params, loaded_config) == first


def test_backbone_checkpoint_loads(tiny_config, tmp_path):
    config = tiny_config()
    backbone = model.init_backbone(config, "target")
    path = str(tmp_path / "backbone-target.ckpt")
    save_checkpoint(backbone, config, path)
    loaded, _ = load_checkpoint(path)
    assert set(loaded) == set(model.backbone_shapes(config, "target"))


def test_bad_magic(tiny_config):
    config = tiny_config()
    data = encode_checkpoint(model.assemble_abnet(config), config)
    with pytest.raises(CheckpointMagicError):
        decode_checkpoint(b"NOTABNET" + data[8:])


def test_truncated_file(tiny_config):
    config = tiny_config()
    data = encode_checkpoint(model.assemble_abnet(config), config)
    for cut in (3, len(MAGIC) + 2, _count_offset(config) + 6, len(data) - 1):
        with pytest.raises(CheckpointTruncatedError):
            decode_checkpoint(data[:cut])


def test_trailing_bytes(tiny_config):
    config = tiny_config()
    data = encode_checkpoint(model.assemble_abnet(config), config)
    with pytest.raises(CheckpointLayoutError):
        decode_checkpoint(data + b"\x00")


def test_altered_tensor_count(tiny_config):
    config = tiny_config()
    params = model.assemble_abnet(config)
    data = bytearray(encode_checkpoint(params, config))
    offset = _count_offset(config)
    assert struct.unpack_from("<I", data, offset)[0] == len(params)
    struct.pack_into("<I", data, offset, len(params) - 1)
    with pytest.raises(CheckpointLayoutError):
        decode_checkpoint(bytes(data))
    struct.pack_into("<I", data, offset, len(params) + 1)
    with pytest.raises(CheckpointTruncatedError):
        decode_checkpoint(bytes(data))


def test_config_disagreeing_with_tensors(tiny_config):
    config = tiny_config()
    params = model.assemble_abnet(config)
    with pytest.raises(CheckpointLayoutError):
        decode_checkpoint(encode_checkpoint(params, tiny_config(d_adapter=4)))


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(str(tmp_path / "nope.ckpt"))


def _u32_offsets(data, config):
    """Byte offsets of every u32 field: header, tensor count, names, ranks and extents."""
    offsets = [len(MAGIC), len(MAGIC) + 4, _count_offset(config)]
    offset = _count_offset(config) + 4
    for _ in range(struct.unpack_from("<I", data, _count_offset(config))[0]):
        offsets.append(offset)
        offset += 4 + struct.unpack_from("<I", data, offset)[0] + 1
        offsets.append(offset)
        rank = struct.unpack_from("<I", data, offset)[0]
        offset += 4
        extents = []
        for _ in range(rank):
            offsets.append(offset)
            extents.append(struct.unpack_from("<I", data, offset)[0])
            offset += 4
        size = 1
        for extent in extents:
            size *= extent
        offset += 4 * size
    assert offset == len(data)
    return offsets


def test_flipped_length_fields_raise_checkpoint_errors(tiny_config):
    config = tiny_config(
        src_vocab_size=8, d_hidden=2, n_heads=1, encoder_layers=1, d_ffn=2,
        max_source_length=2,
    )
    data = encode_checkpoint(model.init_backbone(config, "source"), config)
    offsets = _u32_offsets(data, config)
    assert len(offsets) > 3
    for offset in offsets:
        for bit in range(32):
            corrupted = bytearray(data)
            struct.pack_into(
                "<I", corrupted, offset, struct.unpack_from("<I", data, offset)[0] ^ (1 << bit)
            )
            try:
                decode_checkpoint(bytes(corrupted))
            except CheckpointError:
                pass
