"""Checkpoint files: a ``key=value`` text header then raw float32 payloads.

Layout::

    DFGR-CHECKPOINT
    version=1
    D=.. H=.. d=.. L=.. P=.. Q=..        (one key per line)
    vocab.item=.. vocab.actions=.. vocab.slot.<name>=.. vocab.profile.<name>=..
    flag.residual=0|1 flag.session_mask=0|1 flag.scale_by_length=0|1
    param.<name>=<e0>x<e1>...            (payload order)
    end_header
    <little-endian float32 values of every param, row-major, in header order>
"""

from __future__ import annotations

import os

import numpy as np

from .hstu import EncoderParams, HstuConfig

MAGIC = "DFGR-CHECKPOINT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def header_lines(enc: EncoderParams) -> list[str]:
    cfg, t = enc.cfg, enc.tables
    lines = [
        MAGIC,
        f"version={VERSION}",
        f"D={cfg.dim}",
        f"H={cfg.heads}",
        f"d={cfg.head_dim}",
        f"L={cfg.layers}",
        f"P={cfg.pos_buckets}",
        f"Q={cfg.time_buckets}",
        f"vocab.item={t.item_vocab}",
        f"vocab.actions={t.num_actions}",
    ]
    lines += [f"vocab.slot.{k}={v}" for k, v in t.slot_vocab.items()]
    lines += [f"vocab.profile.{k}={v}" for k, v in t.profile_vocab.items()]
    lines += [
        f"flag.residual={int(cfg.residual)}",
        f"flag.session_mask={int(cfg.session_mask)}",
        f"flag.scale_by_length={int(cfg.scale_by_length)}",
    ]
    lines += [f"param.{n}={'x'.join(map(str, p.shape))}" for n, p in enc.named_parameters()]
    lines.append("end_header")
    return lines


def to_bytes(enc: EncoderParams) -> bytes:
    head = ("\n".join(header_lines(enc)) + "\n").encode("utf-8")
    payload = b"".join(p.data.astype("<f4").tobytes() for p in enc.parameters())
    return head + payload


def save(enc: EncoderParams, path: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(to_bytes(enc))
    os.replace(tmp, path)


def from_bytes(blob: bytes) -> EncoderParams:
    marker = b"end_header\n"
    cut = blob.find(marker)
    if not blob.startswith(MAGIC.encode()) or cut < 0:
        raise CheckpointError("not a checkpoint file")
    header = blob[:cut].decode("utf-8").splitlines()[1:]
    kv: dict[str, str] = {}
    for line in header:
        key, eq, value = line.partition("=")
        if not eq:
            raise CheckpointError(f"bad header line {line!r}")
        kv[key] = value
    if int(kv.get("version", -1)) != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {kv.get('version')}")
    cfg = HstuConfig(
        dim=int(kv["D"]),
        heads=int(kv["H"]),
        layers=int(kv["L"]),
        pos_buckets=int(kv["P"]),
        time_buckets=int(kv["Q"]),
        residual=kv["flag.residual"] == "1",
        session_mask=kv["flag.session_mask"] == "1",
        scale_by_length=kv["flag.scale_by_length"] == "1",
    )
    slot = {k[len("vocab.slot."):]: int(v) for k, v in kv.items() if k.startswith("vocab.slot.")}
    prof = {k[len("vocab.profile."):]: int(v) for k, v in kv.items() if k.startswith("vocab.profile.")}
    enc = EncoderParams(cfg, int(kv["vocab.item"]), int(kv["vocab.actions"]), slot, prof)
    declared = [k[len("param."):] for k in kv if k.startswith("param.")]
    names = [n for n, _ in enc.named_parameters()]
    if declared != names:
        raise CheckpointError("parameter manifest does not match the model layout")
    payload = np.frombuffer(blob[cut + len(marker):], dtype="<f4")
    offset = 0
    for name, p in enc.named_parameters():
        shape = tuple(int(x) for x in kv[f"param.{name}"].split("x"))
        if shape != p.shape:
            raise CheckpointError(f"{name}: shape {shape} != expected {p.shape}")
        size = int(np.prod(shape))
        if offset + size > payload.size:
            raise CheckpointError("payload truncated")
        p.data = payload[offset:offset + size].reshape(shape).astype(p.data.dtype)
        offset += size
    if offset != payload.size:
        raise CheckpointError("trailing bytes after payload")
    return enc


def load(path: str) -> EncoderParams:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
