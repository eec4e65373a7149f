"""Training loop: batching, forward pipeline, backward pass, Adam updates,
cosine learning-rate schedule, checkpointing, ablation modes.

One step per batch: encode (message passing, filter, readout), project,
refresh semantic centers, semantic loss, constrained embeddings, hard
negatives, instance loss, prediction loss, weighted total, backward,
clipped Adam update. Centers are re-initialized from the first batch of
every epoch and refreshed each step. Everything is driven by one seeded
generator, so a (config, seed) pair fixes the run bit-for-bit.

Ablation modes: ``R``/``N`` drop both contrastive losses, ``C`` bypasses
the attention filter (scores pinned to 1), ``S`` keeps only the semantic
loss, ``I`` keeps only the instance loss, ``full`` changes nothing.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import tensorgrad as tg
from .contrast import (ContrastConfig, hard_negatives, init_semantics,
                       instance_constraint, instance_loss, prediction_loss,
                       project, sample_positives, semantic_loss,
                       SemanticCenters, total_loss, update_semantics)
from .encoder import BatchPlan, EncoderConfig, encode
from .evaluation import evaluate_split, plan_chunks
from .graphs import DatasetSplit, make_batch
from .model import Model, init_model
from .tensorgrad import NumericError

MODES = ("full", "R", "C", "S", "I", "N")

CSV_COLUMNS = ("epoch", "lr", "loss_total", "loss_pred", "loss_sem", "loss_ins",
               "val_metric", "test_metric", "skipped_instances")


class TrainError(ValueError):
    """Invalid training configuration or mode."""


class TrainingDiverged(RuntimeError):
    """Loss left the finite range; carries the last finite checkpoint."""

    def __init__(self, message: str, checkpoint: dict):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    layers: int = 3
    emb_dim: int = 64
    max_epoch: int = 30
    batch_size: int = 1024
    ini_lr: float = 1e-3
    min_lr: float = 1e-3
    weight_decay: float = 0.0
    lambda_c: float = 0.7
    lambda_s: float = 0.8
    lambda_i: float = 0.2
    tau: float = 0.2
    tau_inst: float = 0.2
    num_hard_negatives: int = 10
    seed: int = 0
    dropout: float = 0.1
    backbone: str = "gin"
    grad_clip: float = 5.0
    clip_enabled: bool = True
    eval_batch_size: int = 256

    def validate(self) -> None:
        if min(self.layers, self.emb_dim, self.max_epoch, self.batch_size) < 1:
            raise TrainError("layers, emb_dim, max_epoch, batch_size must be >= 1")
        if self.ini_lr <= 0 or self.min_lr <= 0:
            raise TrainError("learning rates must be positive")
        if self.min_lr > self.ini_lr:
            raise TrainError(f"min_lr {self.min_lr} > ini_lr {self.ini_lr}")
        if self.weight_decay < 0:
            raise TrainError("weight_decay must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise TrainError("dropout must lie in [0, 1)")
        if self.grad_clip <= 0:
            raise TrainError("grad_clip must be positive")
        self.contrast().validate()

    def contrast(self) -> ContrastConfig:
        return ContrastConfig(tau=self.tau, tau_inst=self.tau_inst,
                              lambda_c=self.lambda_c, lambda_s=self.lambda_s,
                              lambda_i=self.lambda_i,
                              num_hard_negatives=self.num_hard_negatives)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise TrainError(f"unknown train fields: {sorted(unknown)}")
        return cls(**d)


def resolve_mode(config: TrainConfig, mode: str) -> tuple[float, float, bool]:
    """Effective (lambda_s, lambda_i, bypass_filter) for an ablation mode."""
    if mode not in MODES:
        raise TrainError(f"unknown mode {mode!r}, expected one of {MODES}")
    if mode in ("R", "N"):
        return 0.0, 0.0, False
    if mode == "C":
        return config.lambda_s, config.lambda_i, True
    if mode == "S":
        return config.lambda_s, 0.0, False
    if mode == "I":
        return 0.0, config.lambda_i, False
    return config.lambda_s, config.lambda_i, False


def config_hash(config: TrainConfig, mode: str) -> str:
    doc = json.dumps({"config": config.to_dict(), "mode": mode}, sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()


def cosine_lr(config: TrainConfig, epoch: int) -> float:
    """Cosine decay from ini_lr (epoch 0) to min_lr (last epoch)."""
    if config.max_epoch <= 1:
        return config.ini_lr
    t = min(epoch, config.max_epoch - 1) / (config.max_epoch - 1)
    return config.min_lr + 0.5 * (config.ini_lr - config.min_lr) * (1 + math.cos(math.pi * t))


CHECKPOINT_VERSION = 1


class Trainer:
    """Owns one training context: model, optimizer, centers, RNG, history."""

    def __init__(self, split: DatasetSplit, config: TrainConfig,
                 mode: str = "full"):
        config.validate()
        self.split = split
        self.config = config
        self.mode = mode
        self.lambda_s, self.lambda_i, self.bypass_filter = resolve_mode(config, mode)
        if not split.train:
            raise TrainError("empty training split")
        d_in = split.train[0].node_features.shape[1]
        enc_cfg = EncoderConfig(d_in=d_in, emb_dim=config.emb_dim,
                                layers=config.layers, backbone=config.backbone,
                                dropout=config.dropout)
        self.rng = np.random.default_rng(config.seed)
        self.model = init_model(enc_cfg, split.meta.num_classes, self.rng)
        self.params = self.model.named_parameters()
        self.adam = tg.AdamState(self.params)
        self.centers: SemanticCenters | None = None
        self.epoch = 0
        self.history: list[dict] = []
        self.best: dict | None = None
        self.counters = {"semantic_loss_calls": 0, "instance_loss_calls": 0}
        self.epoch_seconds: list[float] = []
        self._eval_plans: dict[str, list] = {}

    @property
    def needs_centers(self) -> bool:
        return self.lambda_s > 0 or self.lambda_i > 0

    # -- one batch ---------------------------------------------------------

    def _step(self, graphs, first_batch: bool) -> tuple[dict, int]:
        labels = np.array([g.label for g in graphs])
        for p in self.params.values():
            p.zero_grad()
        plan = BatchPlan(make_batch(graphs))
        enc = encode(plan, self.model.encoder,
                     rng=self.rng if self.config.dropout > 0 else None,
                     bypass_filter=self.bypass_filter)
        skipped = 0
        zero = tg.constant(np.float64(0.0))
        l_sem = l_ins = zero
        if self.needs_centers:
            z = project(enc.h_graph, self.model.projection)
            if first_batch or self.centers is None:
                self.centers = init_semantics(z.data, labels,
                                              self.split.meta.num_classes)
            else:
                update_semantics(self.centers, z.data, labels)
            if self.lambda_s > 0:
                l_sem, s = semantic_loss(z, labels, self.centers, self.config.tau)
                skipped += s
                self.counters["semantic_loss_calls"] += 1
            if self.lambda_i > 0:
                z_c = instance_constraint(z, labels, self.centers,
                                          self.config.lambda_c)
                negs = hard_negatives(z_c.data, labels, self.centers,
                                      self.config.num_hard_negatives)
                positives = sample_positives(labels, self.rng)
                l_ins, s = instance_loss(z_c, labels, positives, negs,
                                         self.config.tau_inst)
                skipped += s
                self.counters["instance_loss_calls"] += 1
        l_pred = prediction_loss(enc.h_graph, labels, self.model.classifier)
        loss = total_loss(l_pred, l_sem, l_ins, self.lambda_s, self.lambda_i)
        tg.backward(loss)
        if self.config.clip_enabled:
            tg.clip_grad_norm(self.params, self.config.grad_clip)
        tg.adam_step(self.params, self.adam, lr=cosine_lr(self.config, self.epoch),
                     weight_decay=self.config.weight_decay)
        parts = {"loss_total": loss.item(), "loss_pred": l_pred.item(),
                 "loss_sem": l_sem.item(), "loss_ins": l_ins.item()}
        return parts, skipped

    # -- one epoch ---------------------------------------------------------

    def run_epoch(self) -> dict:
        """Train one epoch, evaluate val/test, append a history row."""
        t0 = time.perf_counter()
        order = self.rng.permutation(len(self.split.train))
        bs = self.config.batch_size
        sums = {"loss_total": 0.0, "loss_pred": 0.0, "loss_sem": 0.0,
                "loss_ins": 0.0}
        skipped = 0
        num_batches = 0
        try:
            for lo in range(0, len(order), bs):
                graphs = [self.split.train[i] for i in order[lo:lo + bs]]
                parts, s = self._step(graphs, first_batch=(lo == 0))
                for k in sums:
                    sums[k] += parts[k]
                skipped += s
                num_batches += 1
                if not math.isfinite(parts["loss_total"]):
                    raise NumericError("training loss is not finite")
        except NumericError as exc:
            raise TrainingDiverged(
                f"divergence at epoch {self.epoch}: {exc}", self.checkpoint()
            ) from exc
        row = {"epoch": self.epoch,
               "lr": cosine_lr(self.config, self.epoch),
               **{k: v / max(1, num_batches) for k, v in sums.items()},
               "skipped_instances": skipped}
        val = self._evaluate("val", self.split.val)
        test = self._evaluate("test", self.split.test)
        row["val_metric"] = val.accuracy
        row["test_metric"] = test.accuracy
        self.history.append(row)
        if self.best is None or val.accuracy > self.best["val_metric"]:
            self.best = {"epoch": self.epoch, "val_metric": val.accuracy,
                         "test_metric": test.accuracy,
                         "model": self.model.state_dict()}
        self.epoch += 1
        self.epoch_seconds.append(time.perf_counter() - t0)
        return row

    def _evaluate(self, name: str, graphs):
        if name not in self._eval_plans:
            self._eval_plans[name] = plan_chunks(graphs, self.config.eval_batch_size)
        return evaluate_split(self.model, graphs, self.config.eval_batch_size,
                              self.bypass_filter, plans=self._eval_plans[name])

    def run(self, epochs: int | None = None) -> list[dict]:
        """Run up to ``epochs`` more epochs (default: through max_epoch)."""
        target = self.config.max_epoch if epochs is None else self.epoch + epochs
        while self.epoch < min(target, self.config.max_epoch):
            self.run_epoch()
        return self.history

    # -- persistence -------------------------------------------------------

    def checkpoint(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "mode": self.mode,
            "config": self.config.to_dict(),
            "config_hash": config_hash(self.config, self.mode),
            "epoch": self.epoch,
            "model": self.model.state_dict(),
            "adam": self.adam.state_dict(),
            "centers": None if self.centers is None else self.centers.state_dict(),
            "rng_state": self.rng.bit_generator.state,
            "history": self.history,
            "best": self.best,
            "counters": self.counters,
        }

    @classmethod
    def from_checkpoint(cls, ckpt: dict, split: DatasetSplit) -> "Trainer":
        if ckpt.get("version") != CHECKPOINT_VERSION:
            raise TrainError(f"unsupported checkpoint version {ckpt.get('version')}")
        config = TrainConfig.from_dict(ckpt["config"])
        trainer = cls(split, config, ckpt["mode"])
        trainer.model = Model.from_state_dict(ckpt["model"])
        trainer.params = trainer.model.named_parameters()
        trainer.adam = tg.AdamState.from_state_dict(ckpt["adam"], trainer.params)
        trainer.centers = (None if ckpt["centers"] is None
                           else SemanticCenters.from_state_dict(ckpt["centers"]))
        trainer.rng = np.random.default_rng()
        trainer.rng.bit_generator.state = ckpt["rng_state"]
        trainer.epoch = ckpt["epoch"]
        trainer.history = list(ckpt["history"])
        trainer.best = ckpt["best"]
        trainer.counters = dict(ckpt["counters"])
        return trainer


def save_checkpoint(ckpt: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(ckpt, fh, sort_keys=True, separators=(",", ":"))


def load_checkpoint(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        ckpt = json.load(fh)
    # JSON turns the rng-state ints into ints already; spawn keys stay lists
    return ckpt


def write_metrics_csv(history: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for row in history:
            fh.write(",".join(repr(row[c]) if isinstance(row[c], float)
                              else str(row[c]) for c in CSV_COLUMNS) + "\n")


def train(split: DatasetSplit, config: TrainConfig, mode: str = "full") -> Trainer:
    """Train to max_epoch and return the finished trainer."""
    trainer = Trainer(split, config, mode)
    trainer.run()
    return trainer
