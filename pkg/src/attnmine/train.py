"""Training loops: baseline classification and masked fine-tuning with drift control.

Fine-tuning proceeds in phases, one per mining step: in phase t the
erasure masks fed to the classification loss come from running t-1
erase-and-remine iterations with the current (frozen-for-masking)
weights.  Phase 1 therefore trains with all-ones masks, which is the
plain baseline.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .kp import KPConfig, combined_loss, kp_layer_loss, kp_total_loss, partition_batch
from .mining import MiningConfig, aggregate_final_heatmap, normalize01, run_am
from .model import Network, all_ones_masks

__all__ = ["roc_auc", "train_baseline", "am_finetune", "mine_final_heatmaps"]


def roc_auc(scores, labels):
    """Rank-based ROC AUC for one binary column."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        return float("nan")
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (
        pos[:, None] == neg[None, :]
    ).sum()
    return float(wins / (len(pos) * len(neg)))


def mean_auc(logit_matrix, label_matrix):
    aucs = [
        roc_auc(logit_matrix[:, c], label_matrix[:, c])
        for c in range(label_matrix.shape[1])
    ]
    aucs = [a for a in aucs if not np.isnan(a)]
    return float(np.mean(aucs)) if aucs else float("nan")


def _batches(count, batch_size):
    for start in range(0, count, batch_size):
        yield list(range(start, min(start + batch_size, count)))


def _step(net, loss):
    net.zero_grad()
    loss.backward()
    params = net.param_list()
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
    return params, grads


def predict_logits(net, images):
    feat = net.forward_features(Tensor(images[..., None]))
    return np.stack([l.data for l in net.all_logits(feat)], axis=1)


def train_baseline(net, images, labels, epochs=200, lr=0.5, batch_size=16, patience=0):
    """Plain multi-label training with all-ones masks; returns per-epoch losses.

    With a positive `patience`, stops early when the epoch loss has not
    improved for that many epochs (logged via the returned history, not
    an error); patience 0 disables early stopping.
    """
    labels = np.asarray(labels, dtype=np.float64)
    history = []
    best = np.inf
    stale = 0
    for _ in range(epochs):
        epoch_losses = []
        for idx in _batches(len(images), batch_size):
            batch = Tensor(images[idx][..., None])
            feat = net.forward_features(batch)
            masks = all_ones_masks(net.num_classes, *feat.shape[:3])
            loss = net.classification_loss(feat, masks, labels[idx])
            params, grads = _step(net, loss)
            ad.sgd_step(params, grads, lr)
            epoch_losses.append(float(loss.data))
        mean_loss = float(np.mean(epoch_losses))
        history.append(mean_loss)
        if mean_loss < best - 1e-12:
            best = mean_loss
            stale = 0
        elif patience:
            stale += 1
            if stale >= patience:
                break
    return history


def masks_for_batch(net, feat_data, labels, erase_steps, mining_config):
    """Per-class erasure masks for one batch, detached from the graph.

    For each sample and each positive class the erase-and-remine loop is
    run `erase_steps` times; negative classes keep all-ones masks.
    """
    n, w, h, _ = feat_data.shape
    num_classes = net.num_classes
    masks = np.ones((num_classes, n, w, h))
    if erase_steps == 0:
        return masks
    cfg = MiningConfig(
        num_steps=erase_steps,
        binarize_threshold=mining_config.binarize_threshold,
        connectivity=mining_config.connectivity,
    )
    for c in range(num_classes):
        wvec = net.branch_weight(c).data
        for i in range(n):
            if labels[i, c] != 1:
                continue
            run = run_am(feat_data[i], wvec, cfg)
            masks[c, i] = run.masks[min(erase_steps, len(run.masks) - 1)]
    return masks


def am_finetune(
    net,
    images,
    labels,
    mining_config: MiningConfig,
    kp_config: KPConfig,
    epochs=24,
    lr=0.05,
    batch_size=16,
    shuffle_seed=0,
):
    """Masked fine-tuning with optional drift regularization.

    Batches are drawn in a seeded per-epoch shuffled order so the
    partitioned AM subset rotates over the dataset instead of pinning
    the same few samples every epoch.  Returns (frozen snapshot taken
    before any update, per-step loss log).
    """
    labels = np.asarray(labels, dtype=np.float64)
    frozen = net.snapshot()
    rng = np.random.default_rng(shuffle_seed)
    t_steps = mining_config.num_steps
    phase_epochs = [epochs // t_steps] * t_steps
    for i in range(epochs % t_steps):
        phase_epochs[i] += 1
    log = []
    for phase, n_epochs in enumerate(phase_epochs, start=1):
        for _ in range(n_epochs):
            order = rng.permutation(len(images))
            for batch in _batches(len(images), batch_size):
                idx = [int(order[i]) for i in batch]
                batch_images = images[idx][..., None]
                batch_labels = labels[idx]
                if kp_config.mode == "off" or len(idx) < 2:
                    am_idx = list(range(len(idx)))
                    kp_idx = []
                else:
                    am_idx, kp_idx = partition_batch(len(idx), kp_config.am_fraction)

                am_batch = Tensor(batch_images[am_idx])
                feat = net.forward_features(am_batch)
                masks = masks_for_batch(
                    net, feat.data, batch_labels[am_idx], phase - 1, mining_config
                )
                cls_loss = net.classification_loss(feat, masks, batch_labels[am_idx])
                # normalize over the full batch slot: untouched partition
                # samples contribute zero classification loss
                if len(am_idx) < len(idx):
                    cls_loss = ad.scale(cls_loss, len(am_idx) / len(idx))

                kp_loss = None
                if kp_config.mode == "full" and kp_idx:
                    kp_batch = Tensor(batch_images[kp_idx])
                    cap_a, cap_b = {}, {}
                    feat_a = frozen.forward_features(kp_batch, capture=cap_a)
                    feat_b = net.forward_features(kp_batch, capture=cap_b)
                    cap_a["logits"] = ad.stack_vectors(frozen.all_logits(feat_a))
                    cap_b["logits"] = ad.stack_vectors(net.all_logits(feat_b))
                    layer_losses = [
                        kp_layer_loss(cap_a[name], cap_b[name])
                        for name in kp_config.layers
                    ]
                    kp_loss = kp_total_loss(layer_losses)

                loss = combined_loss(cls_loss, kp_loss, kp_config.weight)
                params, grads = _step(net, loss)
                ad.sgd_step(params, grads, lr)
                log.append(
                    {
                        "phase": phase,
                        "loss": float(loss.data),
                        "cls_loss": float(cls_loss.data),
                        "kp_loss": None if kp_loss is None else float(kp_loss.data),
                    }
                )
    return frozen, log


def mine_final_heatmaps(net, images, labels, mining_config: MiningConfig):
    """Final aggregated heatmap per image per positive class.

    Returns {image_index: {class: heatmap normalized to [0, 1]}}; classes
    whose mining degenerates immediately are omitted.
    """
    labels = np.asarray(labels)
    out = {}
    feat = net.forward_features(Tensor(images[..., None]))
    for i in range(len(images)):
        per_class = {}
        for c in range(net.num_classes):
            if labels[i, c] != 1:
                continue
            run = run_am(feat.data[i], net.branch_weight(c).data, mining_config)
            if run.steps_completed == 0:
                continue
            final = aggregate_final_heatmap(run.heatmaps, run.masks)
            norm, degenerate = normalize01(final)
            if degenerate:
                continue
            per_class[c] = norm
        out[i] = per_class
    return out
