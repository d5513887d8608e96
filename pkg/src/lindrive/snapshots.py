"""Parameter and state snapshots.

Parameters serialize to a flat tensor container with named entries
(``W_r``, ``mu_w``, ``lora_w.A``, ...), either binary ``.npz`` or JSON with
nested lists. State snapshots are ``.npz`` only so that resuming a stream is
bit-exact. Loaders validate all shapes before constructing objects.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ShapeError
from .rwkv7 import LoraParams, RecurrentState, RwkvBlockParams

_VECTOR_FIELDS = (
    "mu_r", "mu_w", "mu_k", "mu_v", "mu_a", "mu_g", "mu_ffn",
    "k_k", "k_a", "r_k",
    "ln1_w", "ln1_b", "ln2_w", "ln2_b", "ln_out_w", "ln_out_b",
)
_MATRIX_FIELDS = ("W_r", "W_k", "W_v", "W_o", "W_ffn_k", "W_ffn_v")
_LORA_FIELDS = ("lora_w", "lora_a", "lora_v", "lora_g")


def params_to_dict(params: RwkvBlockParams) -> dict[str, np.ndarray]:
    """Flatten block parameters into named tensors."""
    out: dict[str, np.ndarray] = {}
    for name in _VECTOR_FIELDS + _MATRIX_FIELDS:
        out[name] = getattr(params, name)
    for name in _LORA_FIELDS:
        lora = getattr(params, name)
        out[f"{name}.A"] = lora.A
        out[f"{name}.B"] = lora.B
        out[f"{name}.bias"] = lora.bias
    out["d"] = np.asarray(params.d)
    out["n_heads"] = np.asarray(params.n_heads)
    return out


def params_from_dict(tensors: dict[str, np.ndarray]) -> RwkvBlockParams:
    """Rebuild block parameters, validating every shape."""
    try:
        d = int(tensors["d"])
        n_heads = int(tensors["n_heads"])
    except KeyError as exc:
        raise ShapeError(f"snapshot missing entry {exc}") from None
    kwargs = {"d": d, "n_heads": n_heads}
    for name in _VECTOR_FIELDS + _MATRIX_FIELDS:
        if name not in tensors:
            raise ShapeError(f"snapshot missing entry {name!r}")
        kwargs[name] = np.asarray(tensors[name])
    for name in _LORA_FIELDS:
        parts = {}
        for part in ("A", "B", "bias"):
            key = f"{name}.{part}"
            if key not in tensors:
                raise ShapeError(f"snapshot missing entry {key!r}")
            parts[part] = np.asarray(tensors[key])
        kwargs[name] = LoraParams(**parts)
    params = RwkvBlockParams(**kwargs)
    params.validate()
    return params


def save_params(path: str | Path, params: RwkvBlockParams) -> None:
    """Write one block's parameters; format chosen by suffix (.npz or .json)."""
    path = Path(path)
    tensors = params_to_dict(params)
    if path.suffix == ".json":
        payload = {
            name: {"dims": list(np.shape(t)), "data": np.asarray(t).tolist()}
            for name, t in tensors.items()
        }
        path.write_text(json.dumps(payload))
    else:
        np.savez(path, **tensors)


def load_params(path: str | Path) -> RwkvBlockParams:
    path = Path(path)
    if path.suffix == ".json":
        payload = json.loads(path.read_text())
        tensors = {}
        for name, entry in payload.items():
            arr = np.asarray(entry["data"], dtype=np.float64)
            if list(arr.shape) != entry["dims"]:
                raise ShapeError(
                    f"entry {name!r}: recorded dims {entry['dims']} "
                    f"do not match data shape {list(arr.shape)}"
                )
            tensors[name] = arr
        return params_from_dict(tensors)
    with np.load(path) as data:
        return params_from_dict(dict(data))


def save_state(path: str | Path, state: RecurrentState, **extra_counters) -> None:
    """Serialize a stream state; round-trips bit-exactly.

    Extra integer counters (e.g. a fusion session's frame count) are stored
    alongside and returned by load_state.
    """
    np.savez(
        Path(path),
        S=state.S,
        shift_tm=state.shift_tm,
        shift_cm=state.shift_cm,
        tokens_seen=np.asarray(state.tokens_seen, dtype=np.int64),
        **{k: np.asarray(v, dtype=np.int64) for k, v in extra_counters.items()},
    )


def load_state(path: str | Path) -> tuple[RecurrentState, dict[str, int]]:
    with np.load(Path(path)) as data:
        for key in ("S", "shift_tm", "shift_cm", "tokens_seen"):
            if key not in data:
                raise ShapeError(f"state snapshot missing entry {key!r}")
        S = data["S"]
        shift_tm = data["shift_tm"]
        shift_cm = data["shift_cm"]
        if S.ndim != 4 or shift_tm.shape != shift_cm.shape:
            raise ShapeError("state snapshot arrays have inconsistent shapes")
        n_layers, n_heads, hd, hd2 = S.shape
        if hd != hd2 or shift_tm.shape != (n_layers, n_heads * hd):
            raise ShapeError("state snapshot arrays have inconsistent shapes")
        state = RecurrentState(
            S=S, shift_tm=shift_tm, shift_cm=shift_cm,
            tokens_seen=int(data["tokens_seen"]),
        )
        extras = {
            k: int(data[k])
            for k in data.files
            if k not in ("S", "shift_tm", "shift_cm", "tokens_seen")
        }
    return state, extras
