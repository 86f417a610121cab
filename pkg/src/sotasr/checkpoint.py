"""Binary model checkpoints.

Little-endian layout, bit-exact across save/load/save:

    magic          8 bytes  b"SOTASRCK"
    version        uint32
    variant        uint32 length + utf-8 bytes
    config block   uint32 length + utf-8 "key = value" lines (vocabulary
                   included as a space-joined token list)
    n_params       uint32
    per parameter  uint16 name length + utf-8 name,
                   uint8 rank, uint32 dims..., float64 raw values

Tensor byte blobs are also reused by the dataset writer, via
write_tensor/read_tensor.
"""

import io
import struct

import numpy as np

from .labels import Vocabulary
from .models import Model, ModelConfig, SeparatorConfig

MAGIC = b"SOTASRCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_str(fh, text, name_len=False):
    raw = text.encode("utf-8")
    fh.write(struct.pack("<H" if name_len else "<I", len(raw)))
    fh.write(raw)


def _read_str(fh, name_len=False):
    fmt, size = ("<H", 2) if name_len else ("<I", 4)
    (n,) = struct.unpack(fmt, _read_exact(fh, size))
    return _read_exact(fh, n).decode("utf-8")


def _read_exact(fh, n):
    raw = fh.read(n)
    if len(raw) != n:
        raise CheckpointError("truncated checkpoint")
    return raw


def write_tensor(fh, name, data):
    data = np.ascontiguousarray(data, dtype=np.float64)
    _write_str(fh, name, name_len=True)
    fh.write(struct.pack("<B", data.ndim))
    for dim in data.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(data.astype("<f8").tobytes())


def read_tensor(fh):
    name = _read_str(fh, name_len=True)
    (rank,) = struct.unpack("<B", _read_exact(fh, 1))
    dims = [struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(rank)]
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").reshape(dims)
    return name, data.copy()


def _config_block(model):
    cfg = model.config
    sep = cfg.separator
    lines = [
        f"variant = {cfg.variant}",
        f"feature_dim = {cfg.feature_dim}",
        f"enc_hidden = {cfg.enc_hidden}",
        f"enc_layers = {cfg.enc_layers}",
        f"dec_hidden = {cfg.dec_hidden}",
        f"embed_dim = {cfg.embed_dim}",
        f"att_dim = {cfg.att_dim}",
        f"sep_layers = {sep.lstm_layers}",
        f"sep_hidden = {sep.lstm_hidden}",
        f"sep_bidirectional = {int(sep.bidirectional)}",
        f"max_speakers = {sep.max_speakers}",
        f"sc_in_ctc = {int(cfg.sc_in_ctc)}",
        f"vocab = {' '.join(model.vocab.tokens)}",
    ]
    return "\n".join(lines) + "\n"


def _parse_config_block(text):
    kv = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition(" = ")
        kv[key] = value
    try:
        sep = SeparatorConfig(
            lstm_layers=int(kv["sep_layers"]),
            lstm_hidden=int(kv["sep_hidden"]),
            bidirectional=bool(int(kv["sep_bidirectional"])),
            max_speakers=int(kv["max_speakers"]),
        )
        config = ModelConfig(
            variant=kv["variant"],
            feature_dim=int(kv["feature_dim"]),
            enc_hidden=int(kv["enc_hidden"]),
            enc_layers=int(kv["enc_layers"]),
            dec_hidden=int(kv["dec_hidden"]),
            embed_dim=int(kv["embed_dim"]),
            att_dim=int(kv["att_dim"]),
            separator=sep,
            sc_in_ctc=bool(int(kv["sc_in_ctc"])),
        )
        vocab = Vocabulary(tuple(kv["vocab"].split(" ")))
    except KeyError as exc:
        raise CheckpointError(f"config block missing key {exc.args[0]!r}") from None
    return config, vocab


def save(model, path):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        _write_str(fh, model.config.variant)
        _write_str(fh, _config_block(model))
        params = model.parameters()
        fh.write(struct.pack("<I", len(params)))
        for name, p in params.items():
            write_tensor(fh, name, p.data)


def load(path):
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        variant = _read_str(fh)
        config, vocab = _parse_config_block(_read_str(fh))
        if config.variant != variant:
            raise CheckpointError(f"{path}: variant tag mismatch")
        model = Model(config, vocab, seed=None)
        params = model.parameters()
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        seen = set()
        for _ in range(count):
            name, data = read_tensor(fh)
            if name not in params:
                raise CheckpointError(f"{path}: unexpected parameter {name!r}")
            if params[name].data.shape != data.shape:
                raise CheckpointError(
                    f"{path}: parameter {name!r} has shape {data.shape}, "
                    f"expected {params[name].data.shape}")
            params[name].data[:] = data
            seen.add(name)
        missing = set(params) - seen
        if missing:
            raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
    return model


def load_params_into(model, path):
    """Copy every parameter from a checkpoint whose name and shape match
    into an existing model (pretraining hand-off). Returns (loaded, skipped)
    name lists."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        struct.unpack("<I", _read_exact(fh, 4))
        _read_str(fh)
        _parse_config_block(_read_str(fh))
        params = model.parameters()
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        loaded, skipped = [], []
        for _ in range(count):
            name, data = read_tensor(fh)
            if name in params and params[name].data.shape == data.shape:
                params[name].data[:] = data
                loaded.append(name)
            else:
                skipped.append(name)
    return loaded, skipped


def average_checkpoints(paths, out_path):
    """Elementwise average of several checkpoints of one model; metadata is
    taken from the first."""
    if not paths:
        raise ValueError("average_checkpoints: need at least one path")
    base = load(paths[0])
    sums = {name: p.data.copy() for name, p in base.parameters().items()}
    for path in paths[1:]:
        other = load(path)
        other_params = other.parameters()
        if set(other_params) != set(sums):
            raise CheckpointError("checkpoints have different parameter sets")
        for name, p in other_params.items():
            sums[name] += p.data
    params = base.parameters()
    for name in params:
        params[name].data[:] = sums[name] / len(paths)
    save(base, out_path)
    return base
