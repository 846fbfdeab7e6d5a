"""Checkpoint files: a versioned JSON header line followed by raw float64 data.

Layout::

    LRSF <header length in bytes>\\n
    <header JSON, sorted keys>\\n
    <little-endian float64 payload>

Every tensor entry in the header records its name, shape and element offset
into the payload.  Saving the result of a load reproduces the file byte for
byte.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError
from .flow import FlowModel, LULinear
from .train import AdamState, TrainConfig, get_state, model_from_config, set_state

MAGIC = b"LRSF"
FORMAT_VERSION = 1


def _rng_state_to_json(state):
    if state is None:
        return None

    def conv(v):
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        if isinstance(v, np.ndarray):
            return {"__ndarray__": [int(x) for x in v.ravel()], "dtype": str(v.dtype),
                    "shape": list(v.shape)}
        if isinstance(v, np.integer):
            return int(v)
        return v

    return conv(state)


def _rng_state_from_json(state):
    if state is None:
        return None

    def conv(v):
        if isinstance(v, dict):
            if "__ndarray__" in v:
                return np.array(v["__ndarray__"], dtype=v["dtype"]).reshape(v["shape"])
            return {k: conv(x) for k, x in v.items()}
        return v

    return conv(state)


@dataclass
class Checkpoint:
    config: TrainConfig
    topology: dict
    params: dict
    optimizer: AdamState | None = None
    rng_state: dict | None = None
    best_val_nll: float = float("nan")
    data_stats: dict | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: FlowModel, config: TrainConfig, **kw):
        return cls(config=config, topology=model.topology(), params=get_state(model), **kw)

    def to_model(self) -> FlowModel:
        model = model_from_config(self.config, int(self.topology["dim"]))
        layers = self.topology["layers"]
        if len(layers) != len(model.layers):
            raise CheckpointError("checkpoint topology does not match its config")
        for layer, desc in zip(model.layers, layers):
            if desc["kind"] != layer.kind:
                raise CheckpointError(f"layer kind {desc['kind']!r} != {layer.kind!r}")
            if isinstance(layer, LULinear):
                perm = np.asarray(desc["permutation"], dtype=np.intp)
                layer.permutation = perm
                layer.P = np.eye(layer.dim)[perm]
        set_state(model, self.params)
        return model

    def _tensor_list(self):
        items = [(f"param/{k}", v) for k, v in sorted(self.params.items())]
        if self.optimizer is not None:
            names = sorted(self.params)
            for i, k in enumerate(names):
                items.append((f"adam_m/{k}", self.optimizer.m[i]))
                items.append((f"adam_v/{k}", self.optimizer.v[i]))
        return items

    def to_bytes(self) -> bytes:
        entries, chunks, offset = [], [], 0
        for name, arr in self._tensor_list():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            chunks.append(arr.tobytes())
            offset += arr.size
        header = {
            "format": "lrsflow-checkpoint",
            "format_version": FORMAT_VERSION,
            "config": self.config.to_dict(),
            "topology": self.topology,
            "tensors": entries,
            "optimizer": None if self.optimizer is None else {
                "step": self.optimizer.step, "beta1": self.optimizer.beta1,
                "beta2": self.optimizer.beta2, "eps": self.optimizer.eps},
            "rng_state": _rng_state_to_json(self.rng_state),
            "best_val_nll": self.best_val_nll,
            "data_stats": self.data_stats,
            "extra": self.extra,
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + b" " + str(len(head)).encode("ascii") + b"\n" + head + b"\n" + b"".join(chunks)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        nl = buf.find(b"\n")
        if not buf.startswith(MAGIC + b" ") or nl < 0:
            raise CheckpointError("not an lrsflow checkpoint")
        try:
            n = int(buf[len(MAGIC) + 1:nl])
            header = json.loads(buf[nl + 1:nl + 1 + n].decode("utf-8"))
        except (ValueError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {header.get('format_version')!r}, "
                f"expected {FORMAT_VERSION}")
        payload = np.frombuffer(buf[nl + 2 + n:], dtype="<f8")
        tensors = {}
        for e in header["tensors"]:
            size = int(np.prod(e["shape"], dtype=np.int64))
            if e["offset"] + size > payload.size:
                raise CheckpointError(f"truncated payload for {e['name']}")
            tensors[e["name"]] = payload[e["offset"]:e["offset"] + size].reshape(e["shape"]).astype(np.float64)
        params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
        opt = None
        if header["optimizer"] is not None:
            names = sorted(params)
            opt = AdamState([tensors[f"adam_m/{k}"] for k in names],
                            [tensors[f"adam_v/{k}"] for k in names], **header["optimizer"])
        return cls(config=TrainConfig.from_dict(header["config"], require=False),
                   topology=header["topology"], params=params, optimizer=opt,
                   rng_state=_rng_state_from_json(header["rng_state"]),
                   best_val_nll=header["best_val_nll"], data_stats=header["data_stats"],
                   extra=header["extra"])

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            with open(path, "rb") as fh:
                return cls.from_bytes(fh.read())
        except OSError as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
