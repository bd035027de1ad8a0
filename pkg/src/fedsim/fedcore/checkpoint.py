"""Checkpoints: ``manifest.txt`` (key=value) plus ``state.bin``.

``state.bin`` is the concatenation of ParamVector blobs in the order
``weights``, ``blended_delta``, then the raw delta history newest first.
Writes go to a temporary file that is renamed into place.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

from fedsim.errors import FormatError
from fedsim.fedcore.server import GlobalState
from fedsim.runlog import atomic_write, format_manifest, parse_manifest
from fedsim.tensor import ParamVector


def state_to_bytes(state: GlobalState) -> bytes:
    vectors = [state.weights, state.blended_delta, *state.history]
    return b"".join(v.to_bytes() for v in vectors)


def state_from_bytes(blob: bytes, round_: int, capacity: int, history_len: int) -> GlobalState:
    vectors = []
    offset = 0
    for _ in range(2 + history_len):
        vector, offset = ParamVector.read_from(blob, offset)
        vectors.append(vector)
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes in checkpoint at offset {offset}")
    return GlobalState(round_, vectors[0], vectors[1], tuple(vectors[2:]), capacity)


def save_checkpoint(directory, state: GlobalState, extra: Mapping[str, object] | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    atomic_write(directory / "state.bin", state_to_bytes(state))
    manifest = {
        "round": state.round,
        "capacity": state.capacity,
        "history": len(state.history),
        "dimension": state.weights.size,
        **(extra or {}),
    }
    atomic_write(directory / "manifest.txt", format_manifest(manifest))


def load_checkpoint(directory) -> tuple[GlobalState, dict[str, str]]:
    directory = Path(directory)
    manifest = parse_manifest((directory / "manifest.txt").read_text())
    try:
        round_, capacity, history = (int(manifest[k]) for k in ("round", "capacity", "history"))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"checkpoint manifest incomplete: {exc}") from None
    state = state_from_bytes((directory / "state.bin").read_bytes(), round_, capacity, history)
    return state, manifest
