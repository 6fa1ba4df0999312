"""
Self-describing binary checkpoints.

Layout (little-endian): magic, uint32 format version, uint32 section count, then
per section a uint32 name length, the UTF-8 name, a uint64 payload length and the
payload. Metadata sections hold canonical JSON; array sections hold a dtype code,
the rank, the dimensions and the raw values. Nothing time- or host-dependent is
written, so equal states always produce equal bytes.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from control_gan.data_utils import DatasetDescriptor
from control_gan.loss_utils import AdamState
from control_gan.model_utils import ModelRole, ModelSpec, ParamSet
from control_gan.tensor_utils import Array, Tensor
from control_gan.train_utils import GammaState, TrainCallback, TrainConfig, TrainState

logger = logging.getLogger(__name__)

MAGIC = b"CGCK"
FORMAT_VERSION = 1
CHECKPOINT_PATTERN = "checkpoint-*.ckpt"

_DTYPE_CODES = {"float64": b"d", "float32": b"f"}
_CODE_DTYPES = {code: np.dtype(name).newbyteorder("<") for name, code in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    """Raised when a checkpoint file is malformed, of another format version, or incomplete"""

    pass


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict[ModelRole, ParamSet]
    adam: dict[ModelRole, AdamState] = field(default_factory=dict)
    gamma_state: GammaState | None = None
    rng_state: dict[str, Any] | None = None
    descriptor: DatasetDescriptor | None = None
    iteration: int = 0
    classifier_evaluations: int = 0

    def require(self, role: ModelRole) -> ParamSet:
        if role not in self.params:
            raise CheckpointError(f"Checkpoint has no {role} parameters (contains {sorted(self.params)})")
        return self.params[role]


def _canonical_json(payload: Any) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()


def _pack_array(values: Array) -> bytes:
    code = _DTYPE_CODES.get(str(values.dtype))
    if code is None:
        raise CheckpointError(f"Unsupported array dtype {values.dtype}")
    header = code + struct.pack("<I", values.ndim) + struct.pack(f"<{values.ndim}Q", *values.shape)
    return header + np.ascontiguousarray(values, dtype=_CODE_DTYPES[code]).tobytes()


def _unpack_array(payload: bytes, name: str) -> Array:
    try:
        dtype = _CODE_DTYPES[payload[:1]]
        (ndim,) = struct.unpack_from("<I", payload, 1)
        shape = struct.unpack_from(f"<{ndim}Q", payload, 5)
        values = np.frombuffer(payload, dtype=dtype, offset=5 + 8 * ndim)
        return values.reshape(shape).astype(dtype.newbyteorder("="))
    except (KeyError, struct.error, ValueError) as e:
        raise CheckpointError(f"Array section {name} is corrupt") from e


def _encode_sections(sections: list[tuple[str, bytes]]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(sections))]
    for name, payload in sections:
        encoded = name.encode()
        chunks += [struct.pack("<I", len(encoded)), encoded, struct.pack("<Q", len(payload)), payload]
    return b"".join(chunks)


def _decode_sections(blob: bytes) -> dict[str, bytes]:
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("Not a checkpoint file (bad magic)")
    try:
        version, count = struct.unpack_from("<II", blob, len(MAGIC))
    except struct.error as e:
        raise CheckpointError("Checkpoint header is truncated") from e
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Checkpoint format_version {version} is not supported (expected {FORMAT_VERSION})")
    sections: dict[str, bytes] = {}
    offset = len(MAGIC) + 8
    try:
        for _ in range(count):
            (name_length,) = struct.unpack_from("<I", blob, offset)
            name = blob[offset + 4 : offset + 4 + name_length].decode()
            offset += 4 + name_length
            (payload_length,) = struct.unpack_from("<Q", blob, offset)
            offset += 8
            if offset + payload_length > len(blob):
                raise CheckpointError(f"Section {name} is truncated")
            sections[name] = blob[offset : offset + payload_length]
            offset += payload_length
    except (struct.error, UnicodeDecodeError) as e:
        raise CheckpointError("Checkpoint section table is corrupt") from e
    return sections


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    sections: list[tuple[str, bytes]] = [
        ("config", _canonical_json(checkpoint.config.model_dump(mode="json"))),
        (
            "meta",
            _canonical_json(
                {"iteration": checkpoint.iteration, "classifier_evaluations": checkpoint.classifier_evaluations}
            ),
        ),
    ]
    if checkpoint.descriptor is not None:
        sections.append(("dataset", _canonical_json(checkpoint.descriptor.model_dump(mode="json"))))
    if checkpoint.gamma_state is not None:
        gs = checkpoint.gamma_state
        gamma = {
            "gamma": gs.gamma,
            "r": gs.r,
            "e_target": gs.e_target,
            "history_size": gs.history_size,
            "history": [list(pair) for pair in gs.history],
        }
        sections.append(("gamma", _canonical_json(gamma)))
    if checkpoint.rng_state is not None:
        sections.append(("rng", _canonical_json(checkpoint.rng_state)))

    for role in ModelRole:
        params = checkpoint.params.get(role)
        if params is None:
            continue
        header = {"spec": params.spec.model_dump(mode="json"), "init_seed": params.init_seed, "frozen": params.frozen}
        sections.append((f"spec/{role}", _canonical_json(header)))
        sections += [(f"param/{role}/{name}", _pack_array(tensor.values)) for name, tensor in params.items()]
        adam = checkpoint.adam.get(role)
        if adam is None:
            continue
        hyper = {k: getattr(adam, k) for k in ("lr", "beta1", "beta2", "eps_hat", "step_count")}
        sections.append((f"adam/{role}", _canonical_json(hyper)))
        sections += [(f"adam/{role}/m/{name}", _pack_array(value)) for name, value in adam.first_moment.items()]
        sections += [(f"adam/{role}/v/{name}", _pack_array(value)) for name, value in adam.second_moment.items()]
    return _encode_sections(sections)


def _json_section(sections: dict[str, bytes], name: str) -> Any:
    try:
        return json.loads(sections[name])
    except KeyError as e:
        raise CheckpointError(f"Checkpoint has no {name} section") from e
    except json.JSONDecodeError as e:
        raise CheckpointError(f"Section {name} is not valid JSON") from e


def decode_checkpoint(blob: bytes) -> Checkpoint:
    sections = _decode_sections(blob)
    config = TrainConfig.model_validate(_json_section(sections, "config"))
    meta = _json_section(sections, "meta")

    params: dict[ModelRole, ParamSet] = {}
    adam: dict[ModelRole, AdamState] = {}
    for role in ModelRole:
        if f"spec/{role}" not in sections:
            continue
        header = _json_section(sections, f"spec/{role}")
        spec = ModelSpec.model_validate(header["spec"])
        prefix = f"param/{role}/"
        tensors = {
            name.removeprefix(prefix): Tensor(_unpack_array(payload, name), requires_grad=True, dtype=spec.precision)
            for name, payload in sections.items()
            if name.startswith(prefix)
        }
        params[role] = ParamSet(spec, tensors, init_seed=header["init_seed"], frozen=header["frozen"])
        if f"adam/{role}" in sections:
            hyper = _json_section(sections, f"adam/{role}")
            moments = {
                kind: {
                    name.removeprefix(f"adam/{role}/{kind}/"): _unpack_array(payload, name)
                    for name, payload in sections.items()
                    if name.startswith(f"adam/{role}/{kind}/")
                }
                for kind in ("m", "v")
            }
            adam[role] = AdamState(**hyper, first_moment=moments["m"], second_moment=moments["v"])

    gamma_state = None
    if "gamma" in sections:
        gamma = _json_section(sections, "gamma")
        gamma_state = GammaState(
            gamma=gamma["gamma"],
            r=gamma["r"],
            e_target=gamma["e_target"],
            history_size=gamma["history_size"],
            history=tuple((float(gen), float(real)) for gen, real in gamma["history"]),
        )
    descriptor = None
    if "dataset" in sections:
        descriptor = DatasetDescriptor.model_validate(_json_section(sections, "dataset"))
    return Checkpoint(
        config=config,
        params=params,
        adam=adam,
        gamma_state=gamma_state,
        rng_state=_json_section(sections, "rng") if "rng" in sections else None,
        descriptor=descriptor,
        iteration=meta["iteration"],
        classifier_evaluations=meta["classifier_evaluations"],
    )


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(checkpoint))
    logger.info(f"Saved checkpoint at iteration {checkpoint.iteration} to {path}")
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        return decode_checkpoint(path.read_bytes())
    except CheckpointError as e:
        raise CheckpointError(f"{path}: {e}") from e


def checkpoint_from_state(state: TrainState, descriptor: DatasetDescriptor | None = None) -> Checkpoint:
    params = {ModelRole.GENERATOR: state.params_g, ModelRole.DISCRIMINATOR: state.params_d}
    adam = {ModelRole.GENERATOR: state.adam_g, ModelRole.DISCRIMINATOR: state.adam_d}
    if state.params_c is not None:
        params[ModelRole.CLASSIFIER] = state.params_c
    if state.adam_c is not None:
        adam[ModelRole.CLASSIFIER] = state.adam_c
    return Checkpoint(
        config=state.config,
        params=params,
        adam=adam,
        gamma_state=state.gamma_state,
        rng_state=state.rng.bit_generator.state,
        descriptor=descriptor,
        iteration=state.iteration,
        classifier_evaluations=state.classifier_evaluations,
    )


def state_from_checkpoint(checkpoint: Checkpoint, config: TrainConfig | None = None) -> TrainState:
    """Rebuild a resumable training state; ``config`` may differ from the stored one only in iterations"""
    config = config or checkpoint.config
    stored = checkpoint.config.model_dump(exclude={"iterations"})
    if config.model_dump(exclude={"iterations"}) != stored:
        raise CheckpointError("Checkpoint was written with a different configuration; only iterations may change")
    if checkpoint.rng_state is None or checkpoint.gamma_state is None:
        raise CheckpointError("Checkpoint holds no training state to resume from")
    rng = np.random.default_rng()
    rng.bit_generator.state = checkpoint.rng_state
    return TrainState(
        config=config,
        params_g=checkpoint.require(ModelRole.GENERATOR),
        params_d=checkpoint.require(ModelRole.DISCRIMINATOR),
        params_c=checkpoint.params.get(ModelRole.CLASSIFIER),
        adam_g=checkpoint.adam[ModelRole.GENERATOR],
        adam_d=checkpoint.adam[ModelRole.DISCRIMINATOR],
        adam_c=checkpoint.adam.get(ModelRole.CLASSIFIER),
        gamma_state=checkpoint.gamma_state,
        rng=rng,
        iteration=checkpoint.iteration,
        classifier_evaluations=checkpoint.classifier_evaluations,
    )


def latest_checkpoint(directory: str | Path) -> Path | None:
    candidates = sorted(Path(directory).glob(CHECKPOINT_PATTERN))
    return candidates[-1] if candidates else None


def checkpoint_path(directory: str | Path, iteration: int) -> Path:
    return Path(directory) / f"checkpoint-{iteration:08d}.ckpt"


class CheckpointWriter(TrainCallback):
    """Write periodic checkpoints and an abort checkpoint when training diverges."""

    def __init__(self, directory: str | Path, interval: int, descriptor: DatasetDescriptor | None = None) -> None:
        self.directory = Path(directory)
        self.interval = interval
        self.descriptor = descriptor

    def on_iteration(self, state: TrainState) -> None:
        if state.iteration % self.interval == 0:
            path = checkpoint_path(self.directory, state.iteration)
            save_checkpoint(checkpoint_from_state(state, self.descriptor), path)

    def on_abort(self, state: TrainState, error: Exception) -> None:
        path = self.directory / f"abort-{state.iteration:08d}.ckpt"
        save_checkpoint(checkpoint_from_state(state, self.descriptor), path)
        logger.warning(f"Wrote diagnostic checkpoint {path} after {type(error).__name__}")
