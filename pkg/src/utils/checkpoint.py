"""Binary checkpoints of a network and its optimizer.

Layout:
    4 bytes   magic b"IDE1"
    4 bytes   format version (little-endian uint32)
    8 bytes   header length in bytes (little-endian uint64)
    header    UTF-8 JSON: network template (including the init distribution),
              run config, tensor manifest (name, shape, byte offset), counters
              and RNG seed
    payload   little-endian float64 arrays in manifest order
"""

import json
import logging
import os
import struct
from dataclasses import dataclass
from typing import Any

import numpy as np

from src.core.model import (
    ArchitectureTemplate,
    NetworkSpec,
    NeuronKind,
    init_params,
    parse_architecture,
)
from src.core.numerics import RngStream
from src.core.training import OptimizerState
from src.utils.file_exporter import _ensure_directory_exists

MAGIC = b"IDE1"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


@dataclass
class Checkpoint:
    spec: NetworkSpec
    state: OptimizerState
    config: dict[str, Any]
    seed: int


def _template_header(spec: NetworkSpec) -> dict[str, Any]:
    template = spec.template()
    return {
        "architecture": spec.architecture,
        "input_shape": list(template.input_shape),
        "num_classes": template.num_classes,
        "neuron": {"variant": spec.neuron.variant, "lam": spec.neuron.lam},
        "v_th": spec.v_th,
        "clip": template.clip,
        "batch_norm": template.batch_norm,
        "init": template.init,
    }


def _template_from_header(network: dict[str, Any]) -> ArchitectureTemplate:
    layers, feedback = parse_architecture(network["architecture"])
    neuron = network["neuron"]
    return ArchitectureTemplate(
        layers=layers,
        feedback=feedback,
        input_shape=tuple(network["input_shape"]),
        num_classes=int(network["num_classes"]),
        neuron=NeuronKind(neuron["variant"], float(neuron["lam"])),
        v_th=float(network["v_th"]),
        clip=float(network["clip"]),
        batch_norm=bool(network["batch_norm"]),
        init=network.get("init", "uniform"),
    )


def _tensors(spec: NetworkSpec, state: OptimizerState) -> dict[str, np.ndarray]:
    tensors = {f"param/{k}": v for k, v in spec.parameters().items()}
    tensors.update({f"buffer/{k}": v for k, v in spec.buffers().items()})
    tensors.update({f"velocity/{k}": v for k, v in sorted(state.velocities.items())})
    return tensors


def save_checkpoint(
    filename: str,
    spec: NetworkSpec,
    state: OptimizerState,
    config: dict[str, Any] | None = None,
    seed: int = 0,
) -> None:
    """Write a checkpoint file.

    Raises:
        OSError: If the file cannot be written.
    """
    tensors = _tensors(spec, state)
    manifest = []
    offset = 0
    for name, tensor in tensors.items():
        manifest.append({"name": name, "shape": list(tensor.shape), "offset": offset})
        offset += tensor.size * 8
    header = {
        "network": _template_header(spec),
        "config": config or {},
        "manifest": manifest,
        "counters": {
            "epoch": state.epoch,
            "iteration": state.iteration,
            "batch": state.batch,
        },
        "rng": {"seed": seed},
    }
    header_bytes = json.dumps(header).encode("utf-8")
    try:
        _ensure_directory_exists(filename)
        with open(filename, "wb") as f:
            f.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header_bytes)))
            f.write(header_bytes)
            for tensor in tensors.values():
                f.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())
        logging.info(
            f"Checkpoint saved to: {filename} "
            f"(epoch {state.epoch}, iteration {state.iteration})"
        )
    except OSError as e:
        logging.error(f"Failed to save checkpoint '{filename}': {e}")
        raise


def load_checkpoint(filename: str) -> Checkpoint:
    """Read a checkpoint written by `save_checkpoint`.

    Raises:
        FileNotFoundError: If the file does not exist.
        ValueError: If the file is not a valid checkpoint.
    """
    if not os.path.exists(filename):
        msg = f"Checkpoint not found: {filename}"
        logging.error(msg)
        raise FileNotFoundError(msg)
    with open(filename, "rb") as f:
        raw = f.read()
    if len(raw) < _PREFIX.size:
        raise ValueError(f"{filename} is too short to be a checkpoint.")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC or version != FORMAT_VERSION:
        msg = (
            f"{filename} is not a version-{FORMAT_VERSION} checkpoint "
            f"(magic {magic!r}, version {version})."
        )
        logging.error(msg)
        raise ValueError(msg)
    start = _PREFIX.size + header_len
    try:
        header = json.loads(raw[_PREFIX.size : start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        logging.error(f"Corrupt checkpoint header in '{filename}': {e}")
        raise ValueError(f"Corrupt checkpoint header in {filename}") from e

    spec = init_params(_template_from_header(header["network"]), RngStream(0))
    state = OptimizerState(**header["counters"])
    params = spec.parameters()
    buffers = spec.buffers()
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        begin = start + entry["offset"]
        if begin + 8 * count > len(raw):
            msg = f"Truncated tensor '{entry['name']}' in {filename}."
            logging.error(msg)
            raise ValueError(msg)
        values = np.frombuffer(raw, dtype="<f8", count=count, offset=begin)
        values = values.reshape(shape)
        kind, name = entry["name"].split("/", 1)
        if kind == "velocity":
            state.velocities[name] = values.astype(np.float64)
            continue
        target = params.get(name) if kind == "param" else buffers.get(name)
        if target is None and name == "feedback.power_vector":
            spec.feedback.power_vector = values.astype(np.float64)
            continue
        if target is None or target.shape != shape:
            msg = f"Checkpoint tensor '{entry['name']}' does not fit the network."
            logging.error(msg)
            raise ValueError(msg)
        target[...] = values
    logging.info(
        f"Checkpoint loaded from: {filename} "
        f"(epoch {state.epoch}, iteration {state.iteration})"
    )
    return Checkpoint(spec, state, header.get("config", {}), int(header["rng"]["seed"]))
