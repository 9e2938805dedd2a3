"""Named-tensor checkpoint archive (npz) with shape metadata and fingerprints."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import Vocabulary, label_mapping
from .errors import CompatibilityError
from .model import ModelConfig, MultiCheckModel

_META_KEY = "__meta__"


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    model_config: ModelConfig
    vocab_tokens: list[str]
    max_len: int
    image_shape: tuple[int, int, int]
    fingerprint: str
    labels: dict[str, int] = field(default_factory=label_mapping)
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: MultiCheckModel, vocab: Vocabulary, state: dict | None = None, **kw) -> "Checkpoint":
        state = state if state is not None else model.state_dict()
        tensors = {k: v.detach().cpu().to(torch.float32).numpy().copy() for k, v in state.items()}
        return cls(
            tensors=tensors,
            model_config=model.config,
            vocab_tokens=list(vocab.tokens),
            max_len=model.max_len,
            image_shape=model.image_shape,
            fingerprint=model.fingerprint(),
            **kw,
        )

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(list(self.vocab_tokens))

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name], dtype=np.float32)
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        h.update(self.fingerprint.encode())
        return h.hexdigest()

    def build_model(self) -> MultiCheckModel:
        model = MultiCheckModel(self.model_config, len(self.vocab_tokens), self.max_len, self.image_shape)
        if model.fingerprint() != self.fingerprint:
            raise CompatibilityError(
                f"checkpoint fingerprint {self.fingerprint} does not match rebuilt model {model.fingerprint()}"
            )
        expected = model.state_dict()
        for name, ref in expected.items():
            if name not in self.tensors:
                raise CompatibilityError(f"checkpoint is missing tensor {name!r}")
            if tuple(self.tensors[name].shape) != tuple(ref.shape):
                raise CompatibilityError(
                    f"tensor {name!r}: checkpoint shape {self.tensors[name].shape} vs config {tuple(ref.shape)}"
                )
        model.load_state_dict({k: torch.from_numpy(np.asarray(v)) for k, v in self.tensors.items()})
        model.eval()
        return model

    def meta(self) -> dict:
        return {
            "model_config": asdict(self.model_config),
            "vocab_tokens": self.vocab_tokens,
            "max_len": self.max_len,
            "image_shape": list(self.image_shape),
            "fingerprint": self.fingerprint,
            "labels": self.labels,
            "seed": self.seed,
            "shapes": {k: list(v.shape) for k, v in sorted(self.tensors.items())},
            "extra": self.extra,
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = np.frombuffer(json.dumps(self.meta(), sort_keys=True).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **{_META_KEY: meta}, **{k: self.tensors[k] for k in sorted(self.tensors)})
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        with np.load(path, allow_pickle=False) as archive:
            meta = json.loads(archive[_META_KEY].tobytes().decode())
            tensors = {k: archive[k] for k in archive.files if k != _META_KEY}
        for name, shape in meta["shapes"].items():
            if list(tensors[name].shape) != shape:
                raise CompatibilityError(f"{path}: tensor {name!r} has shape {tensors[name].shape}, meta says {shape}")
        return cls(
            tensors=tensors,
            model_config=ModelConfig(**meta["model_config"]),
            vocab_tokens=meta["vocab_tokens"],
            max_len=meta["max_len"],
            image_shape=tuple(meta["image_shape"]),
            fingerprint=meta["fingerprint"],
            labels=meta["labels"],
            seed=meta["seed"],
            extra=meta.get("extra", {}),
        )
