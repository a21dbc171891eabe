"""Full model assembly and checkpoint serialization.

Checkpoints are JSON: a "config" block with the architecture sizes and a
"params" block mapping dotted parameter names to {shape, data} with data
flattened row-major. Floats are serialized via their shortest
round-trip-exact decimal representation, so save/load is bitwise lossless.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adaptation import ClassifierParams, init_classifier
from .diffkernel import Value
from .encoder import EncoderConfig, EncoderParams, init_encoder


@dataclass
class Model:
    encoder: EncoderParams
    classifier: ClassifierParams

    def param_dict(self) -> dict[str, Value]:
        merged = dict(self.encoder.values)
        merged.update(self.classifier.values)
        return merged

    @property
    def n_rois(self) -> int:
        return self.encoder.config.d_model


def build_model(n_rois: int, n_layers: int, n_heads: int, ffn_hidden: int,
                clf_hidden: int, ln_eps: float, seed: int,
                d_head: int | None = None) -> Model:
    """Initialize encoder and classifier with seeds derived from one seed."""
    enc_seed, clf_seed = [int(s.generate_state(1)[0])
                          for s in np.random.SeedSequence(seed).spawn(2)]
    cfg = EncoderConfig(n_layers=n_layers, n_heads=n_heads, d_model=n_rois,
                        d_head=d_head, ffn_hidden=ffn_hidden, ln_eps=ln_eps)
    encoder = init_encoder(cfg, enc_seed)
    classifier = init_classifier(n_rois * n_rois, clf_seed, hidden=clf_hidden)
    return Model(encoder=encoder, classifier=classifier)


def clone_model(model: Model) -> Model:
    """Deep copy: fresh Values with copied data, zeroed grads."""
    enc_values = {k: Value(v.data.copy()) for k, v in model.encoder.values.items()}
    clf_values = {k: Value(v.data.copy()) for k, v in model.classifier.values.items()}
    return Model(
        encoder=EncoderParams(model.encoder.config, enc_values),
        classifier=ClassifierParams(model.classifier.n_inputs,
                                    model.classifier.hidden, clf_values),
    )


def save_checkpoint(model: Model, path) -> None:
    cfg = model.encoder.config
    payload = {
        "config": {
            "n_layers": cfg.n_layers,
            "n_heads": cfg.n_heads,
            "d_model": cfg.d_model,
            "d_head": cfg.d_head,
            "ffn_hidden": cfg.ffn_hidden,
            "ln_eps": cfg.ln_eps,
            "clf_hidden": model.classifier.hidden,
        },
        "params": {
            name: {"shape": list(v.shape), "data": v.data.reshape(-1).tolist()}
            for name, v in model.param_dict().items()
        },
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_checkpoint(path) -> Model:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    c = payload["config"]
    cfg = EncoderConfig(n_layers=int(c["n_layers"]), n_heads=int(c["n_heads"]),
                        d_model=int(c["d_model"]),
                        d_head=None if c.get("d_head") is None else int(c["d_head"]),
                        ffn_hidden=int(c["ffn_hidden"]), ln_eps=float(c["ln_eps"]))
    values: dict[str, Value] = {}
    for name, entry in payload["params"].items():
        arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        values[name] = Value(arr)
    enc_values = {k: v for k, v in values.items() if not k.startswith("clf.")}
    clf_values = {k: v for k, v in values.items() if k.startswith("clf.")}
    n_inputs, hidden = clf_values["clf.W1"].shape
    return Model(
        encoder=EncoderParams(cfg, enc_values),
        classifier=ClassifierParams(n_inputs, hidden, clf_values),
    )
