"""Tiny multi-stage CNN with a multi-scale aggregation head and per-class branches.

The backbone is four plain 3x3 conv + ReLU stages.  The aggregation head
reduces the last two stage outputs with 1x1 convolutions, upsamples the
deeper one 2x bilinearly and concatenates (deep stream first).  Each
class owns a bias-free weight vector applied to the GAP feature of the
(optionally erased) aggregated map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_FORMAT_VERSION = 1

__all__ = ["BackboneConfig", "Network", "save_checkpoint", "load_checkpoint"]


@dataclass
class BackboneConfig:
    stage_channels: list = field(default_factory=lambda: [8, 16, 32, 64])
    stage_strides: list = field(default_factory=lambda: [1, 2, 2, 2])
    msa_reduced_channels: tuple = (32, 16)
    num_classes: int = 4
    use_msa: bool = True

    def __post_init__(self):
        if len(self.stage_channels) != len(self.stage_strides):
            raise ValueError("stage_channels and stage_strides must have equal length")
        if len(self.stage_channels) < 2:
            raise ValueError("need at least two stages")
        if min(self.msa_reduced_channels) < 1 or self.num_classes < 1:
            raise ValueError("reduced channels and num_classes must be >= 1")

    @property
    def stride_product(self):
        p = 1
        for s in self.stage_strides:
            p *= s
        return p

    @property
    def feature_channels(self):
        if self.use_msa:
            return sum(self.msa_reduced_channels)
        return self.stage_channels[-1]


def _he_uniform(rng, shape, fan_in):
    # fan-in-only scaling keeps activation variance stable under ReLU;
    # symmetric-fan scaling attenuates ~3x per stage in this stack
    s = np.sqrt(6.0 / fan_in)
    return rng.uniform(-s, s, size=shape)


class Network:
    """Backbone + aggregation head + C classification branches.

    Parameters are held as named Tensors; `snapshot()` produces the
    immutable copy used as the frozen reference during fine-tuning.
    """

    def __init__(self, config: BackboneConfig, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.params = {}
        d_in = 1
        for i, (d_out, _) in enumerate(zip(config.stage_channels, config.stage_strides)):
            self.params[f"stage{i}_w"] = Tensor(
                _he_uniform(rng, (3, 3, d_in, d_out), 9 * d_in),
                requires_grad=True,
            )
            self.params[f"stage{i}_b"] = Tensor(np.zeros(d_out), requires_grad=True)
            d_in = d_out
        if config.use_msa:
            ck, ck1 = config.msa_reduced_channels
            dk = config.stage_channels[-1]
            dk1 = config.stage_channels[-2]
            self.params["msa_deep_w"] = Tensor(
                _he_uniform(rng, (1, 1, dk, ck), dk), requires_grad=True
            )
            self.params["msa_deep_b"] = Tensor(np.zeros(ck), requires_grad=True)
            self.params["msa_shallow_w"] = Tensor(
                _he_uniform(rng, (1, 1, dk1, ck1), dk1), requires_grad=True
            )
            self.params["msa_shallow_b"] = Tensor(np.zeros(ck1), requires_grad=True)
        d_feat = config.feature_channels
        for c in range(config.num_classes):
            self.params[f"branch{c}_w"] = Tensor(
                np.zeros(d_feat), requires_grad=True
            )

    @property
    def num_classes(self):
        return self.config.num_classes

    def param_list(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def snapshot(self):
        """Immutable parameter copy (frozen reference network)."""
        frozen = Network.__new__(Network)
        frozen.config = self.config
        frozen.params = {
            k: Tensor(v.data.copy(), requires_grad=False)
            for k, v in self.params.items()
        }
        return frozen

    def branch_weight(self, c):
        return self.params[f"branch{c}_w"]

    def forward_stages(self, image, preact_sink=None):
        """Run the conv stages; returns (penultimate, last) stage outputs.

        Input spatial dims must be divisible by the cumulative stride
        product so the deep map is exactly half the penultimate one.
        When `preact_sink` is a list, the raw conv outputs (before ReLU)
        are appended to it; gradient checks use this to reject
        configurations sitting on the ReLU kink.
        """
        x = image if isinstance(image, Tensor) else Tensor(image)
        if x.data.ndim != 4 or x.shape[3] != 1:
            raise ValueError(f"expected (N, W, H, 1) input, got {x.shape}")
        div = self.config.stride_product
        if x.shape[1] % div or x.shape[2] % div:
            raise ValueError(
                f"input spatial dims {x.shape[1:3]} must be divisible by {div}"
            )
        outs = []
        n_stages = len(self.config.stage_channels)
        for i in range(n_stages):
            pre = ad.conv2d(
                x,
                self.params[f"stage{i}_w"],
                self.params[f"stage{i}_b"],
                stride=self.config.stage_strides[i],
            )
            if preact_sink is not None:
                preact_sink.append(pre)
            x = ad.relu(pre)
            outs.append(x)
        return outs[-2], outs[-1]

    def relu_kink_margin(self, image):
        """Smallest |preactivation| over all ReLU inputs for this batch."""
        sink = []
        self.forward_stages(image, preact_sink=sink)
        return min(float(np.min(np.abs(t.data))) for t in sink)

    def msa_aggregate(self, x_deep, x_shallow):
        """Reduce, upsample the deep stream 2x and concatenate (deep first)."""
        if (
            2 * x_deep.shape[1] != x_shallow.shape[1]
            or 2 * x_deep.shape[2] != x_shallow.shape[2]
        ):
            raise ValueError(
                f"deep map {x_deep.shape} is not half of shallow map {x_shallow.shape}"
            )
        deep = ad.bilinear_upsample2x(
            ad.conv2d(x_deep, self.params["msa_deep_w"], self.params["msa_deep_b"])
        )
        shallow = ad.conv2d(
            x_shallow, self.params["msa_shallow_w"], self.params["msa_shallow_b"]
        )
        return ad.concat_channels(deep, shallow)

    def forward_features(self, image, capture=None):
        """Full forward to the aggregated feature map X.

        When `capture` is a dict, intermediate activations used by the
        feature-matching regularizer are stored under stable keys.
        """
        x_shallow, x_deep = self.forward_stages(image)
        if self.config.use_msa:
            feat = self.msa_aggregate(x_deep, x_shallow)
        else:
            feat = x_deep
        if capture is not None:
            capture["stage_penultimate"] = x_shallow
            capture["stage_last"] = x_deep
            capture["aggregated"] = feat
        return feat

    def branch_logits(self, feat, c):
        """logit[n] = w_c . gap(feat)[n] for one class branch."""
        w = self.branch_weight(c)
        if feat.shape[3] != w.shape[0]:
            raise ValueError(
                f"feature channels {feat.shape[3]} != branch weight length {w.shape[0]}"
            )
        return ad.matvec(ad.gap(feat), w)

    def all_logits(self, feat):
        """(N, C) logits as a list of per-class Tensors."""
        return [self.branch_logits(feat, c) for c in range(self.num_classes)]

    def classification_loss(self, feat, masks, labels):
        """Mean over classes of per-branch BCE on the erased feature map.

        masks: (C, N, W, H) binary arrays, replicated over channels before
        the elementwise product; gradients treat them as constants.
        labels: (N, C) in {0, 1}.
        """
        labels = np.asarray(labels, dtype=np.float64)
        n = feat.shape[0]
        c_total = self.num_classes
        if labels.shape != (n, c_total):
            raise ValueError(f"labels shape {labels.shape} != ({n}, {c_total})")
        losses = []
        for c in range(c_total):
            mask = np.asarray(masks[c], dtype=np.float64)
            if mask.shape != feat.shape[:3]:
                raise ValueError(
                    f"mask shape {mask.shape} != feature spatial shape {feat.shape[:3]}"
                )
            if not np.all((mask == 0) | (mask == 1)):
                raise ValueError("erasure mask must be binary")
            erased = ad.mul_const(feat, mask[..., None])
            logits = self.branch_logits(erased, c)
            losses.append(ad.sigmoid_bce(logits, labels[:, c]))
        return ad.mean_of(losses)


def all_ones_masks(num_classes, n, w, h):
    return np.ones((num_classes, n, w, h))


def save_checkpoint(path, network):
    arrays = {k: v.data for k, v in network.params.items()}
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "stage_channels": network.config.stage_channels,
        "stage_strides": network.config.stage_strides,
        "msa_reduced_channels": list(network.config.msa_reduced_channels),
        "num_classes": network.config.num_classes,
        "use_msa": int(network.config.use_msa),
    }
    import json

    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path):
    import json

    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta["format_version"] != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(
                f"unsupported checkpoint format version {meta['format_version']}"
            )
        config = BackboneConfig(
            stage_channels=list(meta["stage_channels"]),
            stage_strides=list(meta["stage_strides"]),
            msa_reduced_channels=tuple(meta["msa_reduced_channels"]),
            num_classes=meta["num_classes"],
            use_msa=bool(meta["use_msa"]),
        )
        net = Network(config, seed=0)
        for k in net.params:
            net.params[k] = Tensor(data[k].astype(np.float64), requires_grad=True)
    return net
