"""Checkpoint directories: ``manifest.json`` plus one little-endian float64 blob."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT = "hyfusion-checkpoint-1"
INIT_SCHEME = ("conv/linear weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases, norm beta and "
               "relative-position tables 0; norm gamma and path weights 1; reconstruction conv 0 "
               "when zero_init_rec")


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    seed: int = 0
    model_config: dict = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)
    loss_config: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def _blocks(self):
        for group, arrays in (("param", self.params), ("adam_m", self.adam_m), ("adam_v", self.adam_v)):
            for name, arr in arrays.items():
                yield group, name, arr

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries, chunks, offset = [], [], 0
        for group, name, arr in self._blocks():
            flat = np.ascontiguousarray(arr, dtype="<f8").reshape(-1)
            entries.append({"group": group, "name": name, "shape": list(arr.shape),
                            "dtype": str(arr.dtype), "offset": offset, "count": int(flat.size)})
            chunks.append(flat.tobytes())
            offset += flat.nbytes
        manifest = {
            "format": FORMAT, "byteorder": "little", "blob": "blob.f64",
            "entries": entries, "step": self.step, "epoch": self.epoch, "seed": self.seed,
            "model_config": self.model_config, "train_config": self.train_config,
            "loss_config": self.loss_config, "init_scheme": INIT_SCHEME, "info": self.info,
        }
        tmp_blob = directory / "blob.f64.tmp"
        tmp_blob.write_bytes(b"".join(chunks))
        tmp_blob.replace(directory / "blob.f64")
        tmp_man = directory / "manifest.json.tmp"
        tmp_man.write_text(json.dumps(manifest, indent=1, sort_keys=True))
        tmp_man.replace(directory / "manifest.json")
        return directory

    @classmethod
    def load(cls, directory) -> "Checkpoint":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        if manifest.get("format") != FORMAT:
            raise ValueError(f"{directory}: not a {FORMAT} checkpoint")
        blob = (directory / manifest["blob"]).read_bytes()
        groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
        for e in manifest["entries"]:
            end = e["offset"] + 8 * e["count"]
            if end > len(blob):
                raise ValueError(f"{directory}: blob truncated at entry {e['name']}")
            arr = np.frombuffer(blob, dtype="<f8", count=e["count"], offset=e["offset"])
            groups[e["group"]][e["name"]] = arr.astype(e["dtype"]).reshape(e["shape"])
        return cls(groups["param"], groups["adam_m"], groups["adam_v"], manifest["step"],
                   manifest["epoch"], manifest["seed"], manifest["model_config"],
                   manifest["train_config"], manifest["loss_config"], manifest.get("info", {}))
