"""Training orchestration: encoder pretraining, alternating alignment and
classification, proportion refreshes, and the target-side refinement stages.

One run proceeds as: pretrain the encoder and source head to near-zero source
loss, freeze the encoder, then alternate per epoch between (a) adversarial
alignment of the residual transport map against the critic plus reweighted
classification of the target head, and (b) an optional refinement pass that
sharpens the target head (and, late in training, the encoder anchored by the
frozen source head). Target proportions are refreshed on a two-phase cadence
and smoothed with a cumulative moving average. Inference always scores target
points with the target head on raw encodings; the transport map only ever
touches source samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .data import LabeledDataset
from .errors import DatasetError, InvalidProportionsError, InvalidSpecError
from .evaluation import balanced_accuracy, l1_proportion_error
from .labelshift import CmaState, cma_update, prediction_marginal, soft_confusion, solve_proportions
from .nn import (
    DenseNet,
    GradientSet,
    ResidualAdam,
    ResidualMap,
    adam_init,
    adam_step,
    dense_backward,
    dense_forward,
    init_dense,
    init_residual_map,
    residual_backward,
    residual_forward,
    softmax,
    softmax_cross_entropy,
)
from .ot import critic_wd_loss, gradient_penalty, mean_squared_displacement, transport_cost


@dataclass
class TrainConfig:
    """Hyperparameters of one full run.

    epochs counts alignment epochs; warmup_epochs pretrains the encoder.
    critic_steps = 0 disables the adversarial term entirely (the transport map
    is then driven by the transport cost alone). Stage schedule: alignment
    alone until im_start (the warm phase), alignment plus head-only
    refinement until ssg_start, then alignment plus the encoder-updating
    refinement. im_enabled = False keeps every epoch alignment-only.
    """

    lambda_ot: float = 1e-2
    lambda_gp: float = 10.0
    transport_mode: str = "dynamic"
    epochs: int = 40
    warmup_epochs: int = 10
    batch_size: int = 200
    critic_steps: int = 5
    im_start: int = 10
    ssg_start: int = 20
    refresh_early: int = 2
    refresh_late: int = 5
    refresh_switch: int = 10
    im_enabled: bool = True
    lr_pretrain: float = 1e-3
    lr_map: float = 1e-3
    lr_critic: float = 1e-3
    lr_head: float = 1e-3
    lr_encoder: float = 1e-4
    lr_decay: float = 0.9
    lr_decay_start: int = 15
    latent_dim: int = 2
    encoder_hidden: tuple = (32, 32)
    head_hidden: tuple = (32,)
    critic_hidden: tuple = (64, 64)
    map_blocks: int = 10
    map_hidden: int = 16
    init_gain: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise InvalidSpecError("batch size must be >= 2")
        if self.critic_steps < 0:
            raise InvalidSpecError("critic iteration count must be >= 0")
        if self.lambda_ot < 0:
            raise InvalidSpecError("transport-cost weight must be >= 0")
        if self.ssg_start < 0 or self.epochs < 0:
            raise InvalidSpecError("epoch counts must be >= 0")


@dataclass
class OstarModel:
    """All learned components plus the running proportion estimate."""

    encoder: DenseNet
    source_head: DenseNet
    target_head: DenseNet
    transport: ResidualMap
    critic: DenseNet
    proportions: CmaState
    source_proportions: np.ndarray
    n_classes: int


@dataclass
class RunResult:
    model: OstarModel
    epochs: list
    final: dict


def encode(encoder: DenseNet, x: np.ndarray) -> np.ndarray:
    return dense_forward(encoder, x).output


def predict(model: OstarModel, x: np.ndarray) -> np.ndarray:
    """Inference contract: score through target_head(encoder(x)); the
    transport map is never applied to target samples."""
    return dense_forward(model.target_head, encode(model.encoder, x)).output.argmax(axis=1)


def _batch_streams(n_source: int, n_target: int, batch_size: int, iterations: int, gen):
    """Independent per-domain index batches, epoch-shuffled."""

    def stream_for(n):
        need = iterations * batch_size
        chunks = []
        have = 0
        while have < need:
            chunks.append(gen.permutation(n))
            have += n
        return np.concatenate(chunks)[:need].reshape(iterations, batch_size)

    return stream_for(n_source), stream_for(n_target)


def pretrain_encoder(source: LabeledDataset, config: TrainConfig):
    """Joint encoder / source-head training on cross-entropy.

    Every class must be present in the source sample. Returns the trained
    nets plus the final source training accuracy.
    """
    counts = np.bincount(source.labels, minlength=source.n_classes)
    if (counts == 0).any() or not source.has_labels():
        missing = [int(k) for k in np.nonzero(counts == 0)[0]]
        raise DatasetError(f"every class must appear in the source sample, missing {missing}")

    encoder = init_dense(
        [source.dim, *config.encoder_hidden, config.latent_dim],
        "normal", config.init_gain, rng.stream(config.seed, "init-encoder"), tag="encoder",
    )
    head = init_dense(
        [config.latent_dim, *config.head_hidden, source.n_classes],
        "normal", config.init_gain, rng.stream(config.seed, "init-source-head"),
    )
    enc_state = adam_init(encoder, config.lr_pretrain)
    head_state = adam_init(head, config.lr_pretrain)

    iterations = max(1, -(-source.size // config.batch_size))
    for epoch in range(config.warmup_epochs):
        gen = rng.stream(config.seed, "pretrain-epoch", epoch)
        batches, _ = _batch_streams(source.size, 1, config.batch_size, iterations, gen)
        for idx in batches:
            eacts = dense_forward(encoder, source.features[idx])
            hacts = dense_forward(head, eacts.output)
            _, dlogits = softmax_cross_entropy(hacts.output, source.labels[idx])
            head_grads, dz = dense_backward(head, hacts, dlogits)
            enc_grads, _ = dense_backward(encoder, eacts, dz)
            adam_step(head, head_grads, head_state)
            adam_step(encoder, enc_grads, enc_state)

    logits = dense_forward(head, encode(encoder, source.features)).output
    accuracy = float((logits.argmax(axis=1) == source.labels).mean())
    return encoder, head, accuracy


def build_model(source: LabeledDataset, config: TrainConfig) -> OstarModel:
    """Pretrain the encoder, then assemble the remaining components.

    The target head starts as a copy of the trained source head, so a run
    with zero alignment epochs scores exactly like the source-only model.
    """
    encoder, source_head, _ = pretrain_encoder(source, config)
    transport = init_residual_map(
        config.latent_dim, config.map_hidden, config.map_blocks,
        "orthogonal", config.init_gain, rng.stream(config.seed, "init-map"),
    )
    critic = init_dense(
        [config.latent_dim, *config.critic_hidden, 1],
        "normal", config.init_gain, rng.stream(config.seed, "init-critic"), tag="critic",
    )
    k = source.n_classes
    return OstarModel(
        encoder=encoder,
        source_head=source_head,
        target_head=source_head.copy(),
        transport=transport,
        critic=critic,
        proportions=CmaState(np.full(k, 1.0 / k), 0),
        source_proportions=source.proportions(),
        n_classes=k,
    )


def class_weights(model: OstarModel, labels: np.ndarray) -> np.ndarray:
    p_n = model.proportions.value
    p_s = model.source_proportions
    if (p_s <= 0).any():
        raise InvalidProportionsError("source proportions must be strictly positive")
    return p_n[labels] / p_s[labels]


def classification_loss_target(model: OstarModel, latents: np.ndarray, labels: np.ndarray):
    """Reweighted cross-entropy of the target head on mapped source latents.

    Returns (loss, head grads, transport block grads, latent grads). Gradients
    flow through the transport map; the caller decides which nets to update
    (the encoder is reached only via the returned latent grads).
    """
    weights = class_weights(model, labels)
    racts = residual_forward(model.transport, latents)
    hacts = dense_forward(model.target_head, racts.output)
    loss, dlogits = softmax_cross_entropy(hacts.output, labels, weights)
    head_grads, d_mapped = dense_backward(model.target_head, hacts, dlogits)
    block_grads, d_latents = residual_backward(model.transport, racts, d_mapped)
    return loss, head_grads, block_grads, d_latents


@dataclass
class ImLosses:
    entropy: float
    diversity: float
    head_grads: GradientSet
    latent_grads: np.ndarray


def im_loss_gradients(logits: np.ndarray):
    """Conditional entropy and diversity values with their logit gradients.

    entropy = mean_i H(softmax(logits_i)), minimized toward confident
    predictions; diversity = sum_k m_k log m_k for the batch-mean softmax m,
    minimized toward a uniform average prediction.
    """
    n = logits.shape[0]
    probs = softmax(logits)
    logp = np.log(np.maximum(probs, 1e-300))
    h = -(probs * logp).sum(axis=1)
    ent = float(h.mean())
    grad_ent = probs * (-logp - h[:, None]) / n

    mean_p = probs.mean(axis=0)
    log_mean = np.log(np.maximum(mean_p, 1e-300))
    div = float((mean_p * log_mean).sum())
    grad_div = probs * (log_mean[None, :] - (probs * log_mean[None, :]).sum(axis=1, keepdims=True)) / n
    return ent, grad_ent, div, grad_div


def im_losses(model: OstarModel, target_latents: np.ndarray) -> ImLosses:
    hacts = dense_forward(model.target_head, target_latents)
    ent, grad_ent, div, grad_div = im_loss_gradients(hacts.output)
    head_grads, d_latents = dense_backward(model.target_head, hacts, grad_ent + grad_div)
    return ImLosses(ent, div, head_grads, d_latents)


def refresh_proportions(model: OstarModel, z_source: np.ndarray, source_labels: np.ndarray,
                        z_target: np.ndarray):
    """One confusion-based estimate folded into the CMA state."""
    z_mapped = residual_forward(model.transport, z_source).output
    confusion = soft_confusion(model.target_head, z_mapped, source_labels, model.n_classes)
    marginal = prediction_marginal(model.target_head, z_target)
    estimate = solve_proportions(confusion, marginal, model.source_proportions)
    model.proportions = cma_update(model.proportions, estimate.values)
    return estimate


def _should_refresh(epoch: int, config: TrainConfig) -> bool:
    if epoch <= config.refresh_switch:
        return epoch % config.refresh_early == 0
    return (epoch - config.refresh_switch) % config.refresh_late == 0


def alignment_epoch(model: OstarModel, source: LabeledDataset, target: LabeledDataset,
                    config: TrainConfig, epoch: int, states: dict) -> dict:
    """One epoch of the alternating alignment and classification updates.

    Per iteration: critic_steps ascent steps on the dual gap minus the
    gradient penalty; one transport-map step on the dual gap plus the weighted
    transport cost; one target-head step on the reweighted classification
    loss. The encoder stays frozen.
    """
    z_source = encode(model.encoder, source.features)
    z_target = encode(model.encoder, target.features)
    iterations = max(1, -(-max(source.size, target.size) // config.batch_size))
    gen = rng.stream(config.seed, "align-epoch", epoch)
    src_batches, tgt_batches = _batch_streams(
        source.size, target.size, config.batch_size, iterations, gen
    )

    sums = {"loss_cls_N": 0.0, "loss_wd": 0.0, "loss_ot": 0.0}
    for it in range(iterations):
        z_s = z_source[src_batches[it]]
        y_s = source.labels[src_batches[it]]
        z_t = z_target[tgt_batches[it]]
        weights = class_weights(model, y_s)

        z_mapped = residual_forward(model.transport, z_s).output
        for step in range(config.critic_steps):
            wd = critic_wd_loss(model.critic, z_mapped, weights, z_t)
            penalty, gp_grads = gradient_penalty(
                model.critic, z_mapped, z_t, (config.seed, epoch, it, step)
            )
            ascent = GradientSet.zeros_like(model.critic)
            ascent.add_(wd.critic_grads, -1.0)
            ascent.add_(gp_grads, config.lambda_gp)
            adam_step(model.critic, ascent, states["critic"])

        racts = residual_forward(model.transport, z_s)
        map_grads = [GradientSet.zeros_like(b) for b in model.transport.blocks]
        wd_value = 0.0
        if config.critic_steps > 0:
            wd = critic_wd_loss(model.critic, racts.output, weights, z_t)
            wd_value = wd.value
            wd_blocks, _ = residual_backward(model.transport, racts, wd.mapped_input_grads)
            for g, extra in zip(map_grads, wd_blocks):
                g.add_(extra)
        groups = [z_s[y_s == k] for k in range(model.n_classes)]
        ot_value, ot_blocks = transport_cost(model.transport, groups, config.transport_mode)
        if config.lambda_ot > 0:
            for g, extra in zip(map_grads, ot_blocks):
                g.add_(extra, config.lambda_ot)
        states["map"].step(model.transport, map_grads)

        cls_loss, head_grads, _, _ = classification_loss_target(model, z_s, y_s)
        adam_step(model.target_head, head_grads, states["head"])

        sums["loss_cls_N"] += cls_loss
        sums["loss_wd"] += wd_value
        sums["loss_ot"] += ot_value
    return {k: v / iterations for k, v in sums.items()}


def stage_ss(model: OstarModel, source: LabeledDataset, target: LabeledDataset,
             config: TrainConfig, epoch: int, states: dict) -> dict:
    """Refinement with the latent space fixed: the target head alone descends
    the reweighted classification loss plus the two target-side terms."""
    if not config.im_enabled:
        return {}
    z_source = encode(model.encoder, source.features)
    z_target = encode(model.encoder, target.features)
    iterations = max(1, -(-max(source.size, target.size) // config.batch_size))
    gen = rng.stream(config.seed, "ss-epoch", epoch)
    src_batches, tgt_batches = _batch_streams(
        source.size, target.size, config.batch_size, iterations, gen
    )
    sums = {"loss_ent": 0.0, "loss_div": 0.0}
    for it in range(iterations):
        z_s = z_source[src_batches[it]]
        y_s = source.labels[src_batches[it]]
        z_t = z_target[tgt_batches[it]]
        _, head_grads, _, _ = classification_loss_target(model, z_s, y_s)
        im = im_losses(model, z_t)
        head_grads.add_(im.head_grads)
        adam_step(model.target_head, head_grads, states["head"])
        sums["loss_ent"] += im.entropy
        sums["loss_div"] += im.diversity
    return {k: v / iterations for k, v in sums.items()}


def stage_ssg(model: OstarModel, source: LabeledDataset, target: LabeledDataset,
              config: TrainConfig, epoch: int, states: dict) -> dict:
    """Late refinement that also moves the encoder, anchored on the source by
    the frozen source head's classification loss."""
    if not config.im_enabled:
        return {}
    iterations = max(1, -(-max(source.size, target.size) // config.batch_size))
    gen = rng.stream(config.seed, "ssg-epoch", epoch)
    src_batches, tgt_batches = _batch_streams(
        source.size, target.size, config.batch_size, iterations, gen
    )
    sums = {"loss_ent": 0.0, "loss_div": 0.0}
    for it in range(iterations):
        x_s = source.features[src_batches[it]]
        y_s = source.labels[src_batches[it]]
        x_t = target.features[tgt_batches[it]]

        eacts_s = dense_forward(model.encoder, x_s)
        eacts_t = dense_forward(model.encoder, x_t)

        _, head_grads, _, d_zs_cls = classification_loss_target(
            model, eacts_s.output, y_s
        )
        im = im_losses(model, eacts_t.output)
        head_grads.add_(im.head_grads)

        sacts = dense_forward(model.source_head, eacts_s.output)
        _, d_source_logits = softmax_cross_entropy(sacts.output, y_s)
        _, d_zs_anchor = dense_backward(model.source_head, sacts, d_source_logits)

        enc_grads, _ = dense_backward(model.encoder, eacts_s, d_zs_cls + d_zs_anchor)
        enc_grads_t, _ = dense_backward(model.encoder, eacts_t, im.latent_grads)
        enc_grads.add_(enc_grads_t)

        adam_step(model.target_head, head_grads, states["head"])
        adam_step(model.encoder, enc_grads, states["encoder"])
        sums["loss_ent"] += im.entropy
        sums["loss_div"] += im.diversity
    return {k: v / iterations for k, v in sums.items()}


def run_ostar(source: LabeledDataset, target: LabeledDataset, config: TrainConfig) -> RunResult:
    """Full training run; one metrics record per alignment epoch.

    Proportion refreshes happen at the start of the scheduled epochs on the
    full datasets. With zero epochs the result is the source-only model. The
    returned records are JSON-serialisable and deterministic per seed.
    """
    model = build_model(source, config)
    states = {
        "critic": adam_init(model.critic, config.lr_critic),
        "head": adam_init(model.target_head, config.lr_head),
        "map": ResidualAdam(model.transport, config.lr_map),
        "encoder": adam_init(model.encoder, config.lr_encoder),
    }
    oracle = target.has_labels()
    emp_target = target.proportions() if oracle else None

    records = []
    for epoch in range(config.epochs):
        # anneal the adversarial pair so the map settles instead of oscillating
        factor = config.lr_decay ** max(0, epoch - config.lr_decay_start)
        states["critic"].lr = config.lr_critic * factor
        for s in states["map"].states:
            s.lr = config.lr_map * factor
        if _should_refresh(epoch, config):
            z_s = encode(model.encoder, source.features)
            z_t = encode(model.encoder, target.features)
            refresh_proportions(model, z_s, source.labels, z_t)

        record = {"epoch": epoch}
        record.update(alignment_epoch(model, source, target, config, epoch, states))
        if not config.im_enabled or epoch < config.im_start:
            stage = "cal"
            record.update({"loss_ent": None, "loss_div": None})
        elif epoch < config.ssg_start:
            stage = "cal+ss"
            record.update(stage_ss(model, source, target, config, epoch, states))
        else:
            stage = "cal+ssg"
            record.update(stage_ssg(model, source, target, config, epoch, states))
        record["stage"] = stage
        record["p_N_estimate"] = [float(v) for v in model.proportions.value]
        record["mean_sq_displacement"] = mean_squared_displacement(
            model.transport, encode(model.encoder, source.features)
        )
        if oracle:
            record["p_N_l1_error"] = l1_proportion_error(model.proportions.value, emp_target)
            record["balanced_accuracy_target"] = balanced_accuracy(
                predict(model, target.features), target.labels, model.n_classes
            )
        records.append(record)

    final = {
        "mean_sq_displacement": mean_squared_displacement(
            model.transport, encode(model.encoder, source.features)
        ),
        "p_N_estimate": [float(v) for v in model.proportions.value],
    }
    if oracle:
        final["p_N_l1_error"] = l1_proportion_error(model.proportions.value, emp_target)
        final["balanced_accuracy_target"] = balanced_accuracy(
            predict(model, target.features), target.labels, model.n_classes
        )
    return RunResult(model, records, final)
