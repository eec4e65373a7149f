"""Full model: encoder + projection head + linear classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .contrast import (ClassifierParams, ProjectionParams, init_classifier,
                       init_projection)
from .encoder import EncoderConfig, EncoderParams, init_encoder
from .tensorgrad import Tensor


@dataclass
class Model:
    encoder: EncoderParams
    projection: ProjectionParams
    classifier: ClassifierParams
    num_classes: int

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for name, p in self.encoder.named_parameters().items():
            out[f"enc.{name}"] = p
        out.update(self.projection.named_parameters())
        out.update(self.classifier.named_parameters())
        return out

    def state_dict(self) -> dict:
        cfg = self.encoder.config
        return {
            "config": {
                "d_in": cfg.d_in, "emb_dim": cfg.emb_dim, "layers": cfg.layers,
                "backbone": cfg.backbone, "dropout": cfg.dropout,
                "leaky_slope": cfg.leaky_slope, "num_classes": self.num_classes,
            },
            "params": {k: p.data.tolist() for k, p in self.named_parameters().items()},
        }

    @classmethod
    def from_state_dict(cls, d: dict) -> "Model":
        c = d["config"]
        cfg = EncoderConfig(d_in=c["d_in"], emb_dim=c["emb_dim"], layers=c["layers"],
                            backbone=c["backbone"], dropout=c["dropout"],
                            leaky_slope=c["leaky_slope"])
        model = init_model(cfg, c["num_classes"], np.random.default_rng(0))
        for k, p in model.named_parameters().items():
            arr = np.asarray(d["params"][k], dtype=np.float64)
            p.data = arr.reshape(p.data.shape)
        return model


def init_model(config: EncoderConfig, num_classes: int,
               rng: np.random.Generator) -> Model:
    return Model(
        encoder=init_encoder(config, rng),
        projection=init_projection(config.emb_dim, rng),
        classifier=init_classifier(config.emb_dim, num_classes, rng),
        num_classes=num_classes,
    )
