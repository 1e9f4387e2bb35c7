from __future__ import annotations

import io
import json
import struct
import zlib
from pathlib import Path
from typing import BinaryIO

import numpy as np

from posefield.core.errors import FieldFormatError, FieldTruncationError, FieldValidationError
from posefield.schemas.fields import FieldSet, FieldTensor
from posefield.services.storage_service import storage_service

MAGIC = b"PFT1"
MAX_NDIM = 8
MAX_NUMEL = 1 << 60
READ_CHUNK_BYTES = 1 << 24

BUNDLE_MEMBERS = ("heatmaps", "pafs", "offsets")
PS_MEMBER = "ps_heatmaps"
SIDECAR_NAME = "fieldset.json"


def encoded_size(ndim: int, numel: int) -> int:
    return 24 + 8 * ndim + 4 * numel


class FieldCodecService:
    """PFT1: magic, u32 ndim, u64 dims, u32 f_d, u32 W, u32 H, u32 crc32(payload), f32 payload (all LE)."""

    def write_tensor(self, tensor: FieldTensor, sink: BinaryIO) -> int:
        data = tensor.data
        if not np.all(np.isfinite(data)):
            raise FieldValidationError("refusing to write a tensor with non-finite values")
        payload = np.ascontiguousarray(data, dtype="<f4").tobytes(order="C")
        width, height = tensor.image_size
        header = (
            MAGIC
            + struct.pack("<I", data.ndim)
            + struct.pack(f"<{data.ndim}Q", *data.shape)
            + struct.pack("<IIII", tensor.f_d, width, height, zlib.crc32(payload))
        )
        try:
            sink.write(header)
            sink.write(payload)
        except OSError as exc:
            exc.add_note(f"while writing a PFT1 tensor of shape {tuple(data.shape)}")
            raise
        return len(header) + len(payload)

    def encode_tensor(self, tensor: FieldTensor) -> bytes:
        buffer = io.BytesIO()
        self.write_tensor(tensor, buffer)
        return buffer.getvalue()

    @staticmethod
    def _read_exact(source: BinaryIO, count: int, offset: int, what: str) -> bytes:
        chunks: list[bytes] = []
        remaining = count
        while remaining > 0:
            chunk = source.read(min(remaining, READ_CHUNK_BYTES))
            if not chunk:
                break
            chunks.append(chunk)
            remaining -= len(chunk)
        if remaining > 0:
            got = count - remaining
            raise FieldTruncationError(f"truncated {what}: expected {count} bytes, got {got}", offset=offset + got)
        return b"".join(chunks)

    def read_tensor(self, source: BinaryIO) -> FieldTensor:
        magic = self._read_exact(source, 4, 0, "magic")
        if magic != MAGIC:
            raise FieldFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)

        (ndim,) = struct.unpack("<I", self._read_exact(source, 4, 4, "ndim"))
        if not 1 <= ndim <= MAX_NDIM:
            raise FieldFormatError(f"ndim {ndim} outside [1, {MAX_NDIM}]", offset=4)

        dims = struct.unpack(f"<{ndim}Q", self._read_exact(source, 8 * ndim, 8, "dims"))
        numel = 1
        for axis, size in enumerate(dims):
            numel *= size
            if numel > MAX_NUMEL:
                raise FieldFormatError(f"dimension overflow at axis {axis}", offset=8 + 8 * axis)

        meta_offset = 8 + 8 * ndim
        f_d, width, height, checksum = struct.unpack("<IIII", self._read_exact(source, 16, meta_offset, "grid metadata"))

        data_offset = meta_offset + 16
        payload = self._read_exact(source, 4 * numel, data_offset, "payload")
        if zlib.crc32(payload) != checksum:
            raise FieldFormatError("payload checksum mismatch", offset=data_offset)

        data = np.frombuffer(payload, dtype="<f4").reshape(dims)
        try:
            return FieldTensor(data=data, f_d=f_d, image_size=(width, height))
        except FieldValidationError as exc:
            raise FieldFormatError(f"invalid tensor contents: {exc}", offset=meta_offset) from exc

    def decode_tensor(self, payload: bytes) -> FieldTensor:
        return self.read_tensor(io.BytesIO(payload))

    def write_fieldset(
        self,
        fields: FieldSet,
        directory: str | Path,
        *,
        sidecar: dict,
        ps_heatmaps: FieldTensor | None = None,
    ) -> int:
        target = Path(directory)
        written = 0
        members = dict(zip(BUNDLE_MEMBERS, (fields.heatmaps, fields.pafs, fields.offsets)))
        if ps_heatmaps is not None:
            members[PS_MEMBER] = ps_heatmaps
        for name, tensor in members.items():
            written += storage_service.atomic_write_bytes(target / f"{name}.pft", self.encode_tensor(tensor))
        written += storage_service.atomic_write_text(
            target / SIDECAR_NAME, json.dumps(sidecar, ensure_ascii=False, indent=1, sort_keys=True)
        )
        return written

    def read_fieldset(self, directory: str | Path) -> tuple[FieldSet, dict, FieldTensor | None]:
        source = Path(directory)
        tensors: dict[str, FieldTensor] = {}
        for name in BUNDLE_MEMBERS:
            with (source / f"{name}.pft").open("rb") as handle:
                tensors[name] = self.read_tensor(handle)
        ps_heatmaps = None
        ps_path = source / f"{PS_MEMBER}.pft"
        if ps_path.exists():
            with ps_path.open("rb") as handle:
                ps_heatmaps = self.read_tensor(handle)
        sidecar_path = source / SIDECAR_NAME
        sidecar = json.loads(sidecar_path.read_text(encoding="utf-8")) if sidecar_path.exists() else {}
        return FieldSet(**tensors), sidecar, ps_heatmaps


field_codec_service = FieldCodecService()
