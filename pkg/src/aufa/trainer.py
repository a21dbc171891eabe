"""Two-stage optimization: source-only pretraining, then joint adaptation.

Stage one fits the encoder and classifier on labelled source subjects with
cross-entropy alone. Stage two continues training on the joint objective:
source cross-entropy, batch-mean feature alignment against the unlabelled
target batch, and the confidence-filtered consistency term between clean
and feature-blended target predictions.

All randomness flows through numpy Generators seeded from the run seed, and
the per-step draw order is fixed and independent of the loss weights, so a
run with both weights zero consumes the stream exactly like pure source
training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffkernel as dk
from .adaptation import (LossWeights, classify, confidence_filter, joint_loss,
                         mmd_loss, self_opt_loss)
from .connectome import Dataset
from .diffkernel import ComputationRecord, Value, backward, zero_grads
from .encoder import AugmentInjection, encode
from .model import Model, build_model


@dataclass(frozen=True)
class GammaPolicy:
    """Blend-strength schedule: either a fixed value or uniform(0, value)."""

    kind: str = "uniform"
    value: float = 0.5

    def __post_init__(self):
        if self.kind not in ("fixed", "uniform"):
            raise ValueError(f"unknown gamma policy kind {self.kind!r}")
        if not 0.0 <= self.value <= 1.0:
            raise ValueError("gamma policy value must lie in [0, 1]")

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind == "fixed":
            return self.value
        return float(rng.uniform(0.0, self.value))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "value": self.value}

    @staticmethod
    def from_dict(d: dict) -> "GammaPolicy":
        return GammaPolicy(kind=str(d["kind"]), value=float(d["value"]))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    epochs_pretrain: int = 15
    epochs_adapt: int = 30
    batch_size: int = 32
    lambda1: float = 1.0
    lambda2: float = 1.0
    epsilon: float = 0.8
    gamma_policy: GammaPolicy = field(default_factory=GammaPolicy)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    n_layers: int = 2
    n_heads: int = 4
    ffn_hidden: int = 256
    clf_hidden: int = 4096
    ln_eps: float = 1e-5
    d_head: int | None = None
    log_target_metrics: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if not 0.5 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0.5, 1)")
        if self.epochs_pretrain < 0 or self.epochs_adapt < 0:
            raise ValueError("epoch counts must be nonnegative")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be nonnegative")

    def weights(self) -> LossWeights:
        return LossWeights(lambda1=self.lambda1, lambda2=self.lambda2)

    def to_dict(self) -> dict:
        d = {
            "lr": self.lr, "epochs_pretrain": self.epochs_pretrain,
            "epochs_adapt": self.epochs_adapt, "batch_size": self.batch_size,
            "lambda1": self.lambda1, "lambda2": self.lambda2,
            "epsilon": self.epsilon, "gamma_policy": self.gamma_policy.to_dict(),
            "adam_beta1": self.adam_beta1, "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps, "seed": self.seed,
            "n_layers": self.n_layers, "n_heads": self.n_heads,
            "ffn_hidden": self.ffn_hidden, "clf_hidden": self.clf_hidden,
            "ln_eps": self.ln_eps, "d_head": self.d_head,
            "log_target_metrics": self.log_target_metrics,
        }
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if "gamma_policy" in d and isinstance(d["gamma_policy"], dict):
            d["gamma_policy"] = GammaPolicy.from_dict(d["gamma_policy"])
        known = set(TrainConfig.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return TrainConfig(**d)


@dataclass
class OptimizerState:
    """Adam moment accumulators and step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    _scratch: dict[str, np.ndarray] = field(default_factory=dict, repr=False)


def adam_step(params: dict[str, Value], grads: dict[str, np.ndarray],
              state: OptimizerState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[dict[str, Value], OptimizerState]:
    """Bias-corrected Adam update, in place."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
            state._scratch[name] = np.empty_like(p.data)
        m = state.m[name]
        v = state.v[name]
        tmp = state._scratch[name]
        m *= beta1
        np.multiply(g, 1.0 - beta1, out=tmp)
        m += tmp
        v *= beta2
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - beta2
        v += tmp
        np.divide(v, bc2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += eps
        np.divide(m, tmp, out=tmp)
        tmp *= lr / bc1
        p.data -= tmp
    return params, state


@dataclass
class RunLog:
    records: list[dict] = field(default_factory=list)

    def append(self, record: dict) -> None:
        for key, value in record.items():
            if isinstance(value, float) and not np.isfinite(value):
                raise ValueError(f"non-finite log value for {key!r}")
        self.records.append(record)

    def save(self, path) -> None:
        import json

        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec) + "\n")


@dataclass(frozen=True)
class PairedBatch:
    source_indices: tuple[int, ...]
    target_indices: tuple[int, ...]
    partners: tuple[int, ...]  # within-batch position of each target's partner


class _ClassStreams:
    """Endless class-balanced index streams over the labelled source set."""

    def __init__(self, source: Dataset, rng: np.random.Generator):
        self.pools = [
            [i for i, s in enumerate(source.subjects) if s.label == cls]
            for cls in (0, 1)
        ]
        if not self.pools[0] or not self.pools[1]:
            raise ValueError("source dataset must contain both classes")
        self.rng = rng
        self.queues: list[list[int]] = [[], []]

    def take(self, cls: int, k: int) -> list[int]:
        out = []
        q = self.queues[cls]
        while len(out) < k:
            if not q:
                q.extend(self.rng.permutation(self.pools[cls]).tolist())
            out.append(q.pop(0))
        return out


def _derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    while True:
        perm = rng.permutation(n)
        if not (perm == np.arange(n)).any():
            return perm


def sample_source_batches(source: Dataset, batch_size: int,
                          rng: np.random.Generator) -> list[tuple[int, ...]]:
    """Class-balanced source batches for one epoch (ragged tail dropped)."""
    if len(source) < batch_size:
        raise ValueError(f"source dataset ({len(source)}) smaller than batch ({batch_size})")
    streams = _ClassStreams(source, rng)
    n_steps = len(source) // batch_size
    half = batch_size // 2
    batches = []
    for _ in range(n_steps):
        idx = streams.take(0, half) + streams.take(1, batch_size - half)
        batches.append(tuple(idx))
    return batches


def sample_paired_batches(source: Dataset, target: Dataset, batch_size: int,
                          rng: np.random.Generator) -> list[PairedBatch]:
    """One epoch of paired batches.

    Target subjects are consumed without replacement (ragged tail dropped);
    each batch gets class-balanced source subjects and a fixed-point-free
    random pairing assigning every target subject a distinct partner.
    """
    if len(source) < batch_size:
        raise ValueError(f"source dataset ({len(source)}) smaller than batch ({batch_size})")
    if len(target) < batch_size:
        raise ValueError(f"target dataset ({len(target)}) smaller than batch ({batch_size})")
    streams = _ClassStreams(source, rng)
    target_order = rng.permutation(len(target))
    n_steps = len(target) // batch_size
    half = batch_size // 2
    batches = []
    for step in range(n_steps):
        src = streams.take(0, half) + streams.take(1, batch_size - half)
        tgt = target_order[step * batch_size:(step + 1) * batch_size]
        partners = _derangement(batch_size, rng)
        batches.append(PairedBatch(tuple(src), tuple(int(i) for i in tgt),
                                   tuple(int(i) for i in partners)))
    return batches


def _encode_batch(dataset: Dataset, indices, model: Model,
                  capture_store: list[list[Value]] | None = None) -> Value:
    rows = []
    for i in indices:
        capture: list[Value] | None = [] if capture_store is not None else None
        f, _ = encode(dataset.subjects[i].fcn, model.encoder, capture=capture)
        if capture_store is not None:
            capture_store.append(capture)
        rows.append(f)
    return dk.concat_rows(rows)


def _grad_dict(params: dict[str, Value]) -> dict[str, np.ndarray]:
    # adam_step only reads gradients, so no copies needed
    return {name: p.grad for name, p in params.items()}


def _rng_children(seed: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]


def pretrain(source: Dataset, config: TrainConfig) -> tuple[Model, OptimizerState, RunLog]:
    """Stage one: supervised training on the labelled source domain."""
    for s in source.subjects:
        if s.label is None:
            raise ValueError(f"unlabeled source subject {s.subject_id!r}")
    model = build_model(source.n_rois, config.n_layers, config.n_heads,
                        config.ffn_hidden, config.clf_hidden, config.ln_eps,
                        config.seed, d_head=config.d_head)
    _, _, pretrain_rng, _ = _rng_children(config.seed)
    state = OptimizerState()
    log = RunLog()
    params = model.param_dict()
    for epoch in range(config.epochs_pretrain):
        losses = []
        for batch in sample_source_batches(source, config.batch_size, pretrain_rng):
            labels = [source.subjects[i].label for i in batch]
            zero_grads(params.values())
            with ComputationRecord() as rec:
                feats = _encode_batch(source, batch, model)
                pred = classify(feats, model.classifier)
                loss = dk.cross_entropy(pred.logits, labels)
            backward(loss, rec)
            adam_step(params, _grad_dict(params), state, config.lr,
                      config.adam_beta1, config.adam_beta2, config.adam_eps)
            losses.append(loss.item())
        log.append({
            "stage": "pretrain", "epoch": epoch,
            "loss_c": float(np.mean(losses)), "loss_m": 0.0, "loss_a": 0.0,
            "loss_joint": float(np.mean(losses)), "kept_fraction": 0.0,
            "target_metrics": None,
        })
    return model, state, log


def _adapt_step(model: Model, params: dict[str, Value], source: Dataset,
                target: Dataset, batch: PairedBatch, config: TrainConfig,
                state: OptimizerState, layer: int, gamma: float) -> dict:
    """One joint-loss update; loss terms with zero weight are skipped
    entirely so they contribute neither compute nor gradient."""
    use_mmd = config.lambda1 != 0.0
    use_aug = config.lambda2 != 0.0
    labels = [source.subjects[i].label for i in batch.source_indices]
    zero_grads(params.values())
    with ComputationRecord() as rec:
        src_feats = _encode_batch(source, batch.source_indices, model)
        pred_s = classify(src_feats, model.classifier)
        l_c = dk.cross_entropy(pred_s.logits, labels)
        l_m = dk.scalar(0.0)
        l_a = dk.scalar(0.0)
        kept = 0.0
        if use_mmd or use_aug:
            captures: list[list[Value]] = []
            tgt_feats = _encode_batch(target, batch.target_indices, model, captures)
            pred_t = classify(tgt_feats, model.classifier)
            if use_mmd:
                l_m = mmd_loss(pred_s.fc_features, pred_t.fc_features)
            if use_aug:
                aug_rows = []
                for pos, i in enumerate(batch.target_indices):
                    inj = AugmentInjection(layer, captures[batch.partners[pos]][layer], gamma)
                    f, _ = encode(target.subjects[i].fcn, model.encoder, injection=inj)
                    aug_rows.append(f)
                pred_a = classify(dk.concat_rows(aug_rows), model.classifier)
                mask = confidence_filter(pred_t, pred_a, config.epsilon)
                l_a = self_opt_loss(pred_t, pred_a, mask)
                kept = mask.kept_fraction
        if not use_mmd and not use_aug:
            loss = l_c
        else:
            loss = joint_loss(l_c, l_m, l_a, config.weights())
    backward(loss, rec)
    adam_step(params, _grad_dict(params), state, config.lr,
              config.adam_beta1, config.adam_beta2, config.adam_eps)
    return {"loss_c": l_c.item(), "loss_m": l_m.item(), "loss_a": l_a.item(),
            "loss_joint": loss.item(), "kept_fraction": kept}


def adapt(model: Model, source: Dataset, target: Dataset, config: TrainConfig,
          state: OptimizerState | None = None) -> tuple[Model, RunLog]:
    """Stage two: minimize the joint loss on labelled source plus unlabelled
    target. Target labels, if present, are never read except for optional
    per-epoch evaluation into the run log."""
    if source.n_rois != model.n_rois or target.n_rois != model.n_rois:
        raise ValueError("dataset dimensions do not match the model")
    for s in source.subjects:
        if s.label is None:
            raise ValueError(f"unlabeled source subject {s.subject_id!r}")
    _, _, _, adapt_rng = _rng_children(config.seed)
    state = state if state is not None else OptimizerState()
    params = model.param_dict()
    log = RunLog()
    for epoch in range(config.epochs_adapt):
        stats: list[dict] = []
        for batch in sample_paired_batches(source, target, config.batch_size, adapt_rng):
            # drawn unconditionally so stream use is independent of the weights
            layer = int(adapt_rng.integers(config.n_layers))
            gamma = config.gamma_policy.sample(adapt_rng)
            stats.append(_adapt_step(model, params, source, target, batch,
                                     config, state, layer, gamma))
        record = {
            "stage": "adapt", "epoch": epoch,
            "loss_c": float(np.mean([s["loss_c"] for s in stats])),
            "loss_m": float(np.mean([s["loss_m"] for s in stats])),
            "loss_a": float(np.mean([s["loss_a"] for s in stats])),
            "loss_joint": float(np.mean([s["loss_joint"] for s in stats])),
            "kept_fraction": float(np.mean([s["kept_fraction"] for s in stats])),
            "target_metrics": None,
        }
        if config.log_target_metrics and all(s.label is not None for s in target.subjects):
            from .evalreport import evaluate_model

            record["target_metrics"] = evaluate_model(model, target).to_dict()
        log.append(record)
    return model, log
