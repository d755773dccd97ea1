"""Trained-model artifacts and their versioned binary serialization.

Format: magic ``QYM1``, little-endian, a uint32 format version, a uint32
length-prefixed JSON header describing every field and array (explicit
float64 width), the raw arrays in declared order, and a trailing CRC-32 of
everything before it. Unknown header fields are rejected so artifacts from
a newer writer fail loudly instead of loading half-understood.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .features import SelectionMask, Standardizer

MAGIC = b"QYM1"
FORMAT_VERSION = 1

KIND_LINEAR = "builtin_linear"
KIND_MLP = "builtin_mlp"

_HEADER_KEYS = {
    "format",
    "kind",
    "model_id",
    "registry_version",
    "trait_order",
    "feature_count",
    "threshold",
    "activation",
    "dropout",
    "widths",
    "trained_at",
    "training_config",
    "arrays",
}


class ArtifactError(RuntimeError):
    """Artifact bytes are malformed, truncated, corrupted, or from an unknown version."""


@dataclass(frozen=True)
class MlpLayer:
    weights: np.ndarray  # (fan_in, fan_out)
    biases: np.ndarray  # (fan_out,)


@dataclass
class ModelArtifact:
    """Everything needed to reproduce a trained builtin scorer's predictions."""

    model_id: str
    kind: str  # builtin_linear | builtin_mlp
    registry_version: str
    trait_order: tuple[str, ...]
    mask: SelectionMask
    scaler: Standardizer
    # linear heads: one weight row + bias per trait
    weights: np.ndarray | None = None  # (n_traits, n_retained)
    biases: np.ndarray | None = None  # (n_traits,)
    # mlp: shared trunk layers then a (hidden, n_traits) output layer
    layers: tuple[MlpLayer, ...] = ()
    activation: str = "relu"
    dropout: float = 0.0
    trained_at: str = ""
    training_config: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        n_traits = len(self.trait_order)
        if n_traits == 0:
            raise ArtifactError("artifact must declare at least one trait head")
        k = self.mask.n_retained
        if self.kind == KIND_LINEAR:
            if self.weights is None or self.biases is None:
                raise ArtifactError("linear artifact needs weights and biases")
            if self.weights.shape != (n_traits, k):
                raise ArtifactError(
                    f"weights shape {self.weights.shape} inconsistent with "
                    f"{n_traits} traits x {k} retained features"
                )
            if self.biases.shape != (n_traits,):
                raise ArtifactError("biases shape inconsistent with trait count")
        elif self.kind == KIND_MLP:
            if not self.layers:
                raise ArtifactError("mlp artifact needs at least one layer")
            fan_in = k
            for i, layer in enumerate(self.layers):
                if layer.weights.shape[0] != fan_in:
                    raise ArtifactError(f"layer {i} fan-in {layer.weights.shape[0]} != {fan_in}")
                if layer.biases.shape != (layer.weights.shape[1],):
                    raise ArtifactError(f"layer {i} bias shape mismatch")
                fan_in = layer.weights.shape[1]
            if fan_in != n_traits:
                raise ArtifactError(f"mlp output width {fan_in} != trait count {n_traits}")
        else:
            raise ArtifactError(f"unknown artifact kind {self.kind!r}")
        if len(self.scaler.mean) != k:
            raise ArtifactError("standardization stats inconsistent with retained-feature count")

    def trait_index(self, trait: str) -> int:
        try:
            return self.trait_order.index(trait)
        except ValueError:
            raise ArtifactError(f"artifact has no head for trait {trait!r}") from None


def _f64(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(arr, dtype="<f8"))


def serialize_artifact(artifact: ModelArtifact) -> bytes:
    arrays: list[tuple[str, np.ndarray]] = [
        ("mask", np.ascontiguousarray(artifact.mask.retained.astype("<u1"))),
        ("pearson_stats", _f64(artifact.mask.pearson_stats)),
        ("spearman_stats", _f64(artifact.mask.spearman_stats)),
        ("scaler_mean", _f64(artifact.scaler.mean)),
        ("scaler_std", _f64(artifact.scaler.std)),
    ]
    widths: list[int] = []
    if artifact.kind == KIND_LINEAR:
        arrays.append(("weights", _f64(artifact.weights)))
        arrays.append(("biases", _f64(artifact.biases)))
    else:
        for i, layer in enumerate(artifact.layers):
            arrays.append((f"layer{i}_w", _f64(layer.weights)))
            arrays.append((f"layer{i}_b", _f64(layer.biases)))
            widths.append(int(layer.weights.shape[1]))

    header = {
        "format": FORMAT_VERSION,
        "kind": artifact.kind,
        "model_id": artifact.model_id,
        "registry_version": artifact.registry_version,
        "trait_order": list(artifact.trait_order),
        "feature_count": int(len(artifact.mask.retained)),
        "threshold": float(artifact.mask.threshold),
        "activation": artifact.activation,
        "dropout": float(artifact.dropout),
        "widths": widths,
        "trained_at": artifact.trained_at,
        "training_config": artifact.training_config,
        "arrays": [
            {"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape)}
            for name, arr in arrays
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")

    body = bytearray()
    body += MAGIC
    body += struct.pack("<I", FORMAT_VERSION)
    body += struct.pack("<I", len(header_bytes))
    body += header_bytes
    for _, arr in arrays:
        body += arr.tobytes(order="C")
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    return bytes(body)


def deserialize_artifact(data: bytes) -> ModelArtifact:
    if len(data) < 16:
        raise ArtifactError("truncated payload: shorter than the fixed preamble")
    if data[:4] != MAGIC:
        raise ArtifactError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise ArtifactError(f"unsupported artifact format version {version}, reader supports {FORMAT_VERSION}")
    (stored_crc,) = struct.unpack_from("<I", data, len(data) - 4)
    actual_crc = zlib.crc32(data[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise ArtifactError(f"checksum failure: stored {stored_crc:#010x}, computed {actual_crc:#010x}")

    (header_len,) = struct.unpack_from("<I", data, 8)
    header_end = 12 + header_len
    if header_end > len(data) - 4:
        raise ArtifactError("truncated payload: header length exceeds payload")
    try:
        header = json.loads(data[12:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"malformed header: {exc}") from exc

    unknown = set(header) - _HEADER_KEYS
    if unknown:
        raise ArtifactError(
            f"unknown header fields {sorted(unknown)}: artifact written by a newer "
            f"format than version {FORMAT_VERSION}"
        )

    arrays: dict[str, np.ndarray] = {}
    offset = header_end
    for spec in header["arrays"]:
        dtype = np.dtype(spec["dtype"])
        shape = tuple(spec["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape)) if shape else dtype.itemsize
        end = offset + nbytes
        if end > len(data) - 4:
            raise ArtifactError(f"truncated payload while reading array {spec['name']!r}")
        arrays[spec["name"]] = np.frombuffer(data[offset:end], dtype=dtype).reshape(shape).copy()
        offset = end
    if offset != len(data) - 4:
        raise ArtifactError("trailing bytes after declared arrays")

    mask = SelectionMask(
        retained=arrays["mask"].astype(bool),
        threshold=float(header["threshold"]),
        pearson_stats=arrays["pearson_stats"],
        spearman_stats=arrays["spearman_stats"],
    )
    scaler = Standardizer(mean=arrays["scaler_mean"], std=arrays["scaler_std"])
    kind = header["kind"]
    if kind == KIND_LINEAR:
        return ModelArtifact(
            model_id=header["model_id"],
            kind=kind,
            registry_version=header["registry_version"],
            trait_order=tuple(header["trait_order"]),
            mask=mask,
            scaler=scaler,
            weights=arrays["weights"],
            biases=arrays["biases"],
            activation=header["activation"],
            dropout=float(header["dropout"]),
            trained_at=header["trained_at"],
            training_config=header["training_config"],
        )
    layers = []
    for i in range(len(header["widths"])):
        layers.append(MlpLayer(weights=arrays[f"layer{i}_w"], biases=arrays[f"layer{i}_b"]))
    return ModelArtifact(
        model_id=header["model_id"],
        kind=kind,
        registry_version=header["registry_version"],
        trait_order=tuple(header["trait_order"]),
        mask=mask,
        scaler=scaler,
        layers=tuple(layers),
        activation=header["activation"],
        dropout=float(header["dropout"]),
        trained_at=header["trained_at"],
        training_config=header["training_config"],
    )


def load_artifact(path: str) -> ModelArtifact:
    with open(path, "rb") as fh:
        return deserialize_artifact(fh.read())


def save_artifact(artifact: ModelArtifact, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_artifact(artifact))
