"""Two-armed few-shot segmenter: conditioner arm, segmenter arm, SE interaction.

Both arms are encoder/bottleneck/decoder stacks of the generic block
conv(5x5) -> PReLU -> batchnorm. Encoders end in a 2x2 max-pool whose indices
drive the matching unpool in the decoder. The segmenter is recalibrated after
selected blocks by an interaction block fed with the conditioner's feature map
of the same spatial size.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .layers import (
    BatchNormParams,
    ConvParams,
    PReluParams,
    ShapeError,
    batchnorm_backward,
    batchnorm_forward,
    check_tensor4,
    conv2d_backward,
    conv2d_forward_cols,
    maxpool2x2,
    maxpool2x2_backward,
    prelu_backward,
    prelu_forward,
    sigmoid,
    softmax_backward,
    softmax_over_channels,
    unpool2x2,
    unpool2x2_backward,
)

SE_TYPES = ("spatial", "channel", "none")
KERNEL = 5


@dataclass
class FewShotConfig:
    cond_channels: int = 16
    seg_channels: int = 64
    se_type: str = "spatial"
    se_encoder: bool = True
    se_bottleneck: bool = True
    se_decoder: bool = True
    skip_conditioner: bool = False
    skip_segmenter: bool = False
    depth: int = 4

    def __post_init__(self):
        if self.cond_channels < 1 or self.seg_channels < 1:
            raise ValueError("channel widths must be >= 1")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.se_type not in SE_TYPES:
            raise ValueError(f"se_type must be one of {SE_TYPES}, got {self.se_type!r}")
        if self.se_type == "none" and (self.se_encoder or self.se_bottleneck or self.se_decoder):
            raise ValueError("se_type 'none' requires every SE position flag to be false")

    def stages(self) -> list[str]:
        return [f"enc{i}" for i in range(self.depth)] + ["bottleneck"] + [f"dec{i}" for i in range(self.depth)]

    def sites(self) -> list[str]:
        """Interaction sites in forward order."""
        if self.se_type == "none":
            return []
        out = []
        for s in self.stages():
            kind = "bottleneck" if s == "bottleneck" else ("encoder" if s.startswith("enc") else "decoder")
            if getattr(self, f"se_{kind}"):
                out.append(s)
        return out

    def divisor(self) -> int:
        return 2**self.depth


def _se(se_type, enc, bott, dec, **kw):
    return dict(se_type=se_type, se_encoder=enc, se_bottleneck=bott, se_decoder=dec, **kw)


# rows of the SE position/type ablation and the skip-connection ablation
PRESETS: dict[str, dict] = {
    "bl1": _se("spatial", True, False, False),
    "bl2": _se("channel", True, False, False),
    "bl3": _se("spatial", False, True, False),
    "bl4": _se("channel", False, True, False),
    "bl5": _se("spatial", False, False, True),
    "bl6": _se("channel", False, False, True),
    "bl7": _se("spatial", True, True, True),
    "bl8": _se("channel", True, True, True),
    "none": _se("none", False, False, False),
    "skip-none": _se("spatial", True, True, True, skip_conditioner=False, skip_segmenter=False),
    "skip-cond": _se("spatial", True, True, True, skip_conditioner=True, skip_segmenter=False),
    "skip-seg": _se("spatial", True, True, True, skip_conditioner=False, skip_segmenter=True),
    "skip-both": _se("spatial", True, True, True, skip_conditioner=True, skip_segmenter=True),
}


def preset(name: str, base: FewShotConfig | None = None) -> FewShotConfig:
    try:
        overrides = PRESETS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    base = base or FewShotConfig()
    return replace(base, **{"skip_conditioner": False, "skip_segmenter": False, **overrides})


def config_to_dict(cfg: FewShotConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


# --------------------------------------------------------------------------
# parameters


@dataclass
class BlockParams:
    conv: ConvParams
    prelu: PReluParams
    bn: BatchNormParams


@dataclass
class SseParams:
    weight: np.ndarray  # (C',)
    bias: np.ndarray  # (1,)


@dataclass
class CseParams:
    weight: np.ndarray  # (C, C')
    bias: np.ndarray  # (C,)


@dataclass
class NetworkParams:
    """Flat name -> array storage for both arms plus the interaction blocks.

    ``weights`` are trained by SGD; ``buffers`` hold batchnorm running stats.
    Block views returned by :meth:`block` share memory with the storage, so
    in-place updates are visible everywhere.
    """

    cfg: FewShotConfig
    weights: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, cfg: FewShotConfig, seed: int = 0, dtype=np.float32) -> "NetworkParams":
        rng = np.random.default_rng(seed)
        net = cls(cfg)
        for arm, in_c, c, skip in (
            ("cond", 2, cfg.cond_channels, cfg.skip_conditioner),
            ("seg", 1, cfg.seg_channels, cfg.skip_segmenter),
        ):
            for stage in cfg.stages():
                if stage == "enc0":
                    cin = in_c
                elif stage.startswith("dec") and skip:
                    cin = 2 * c
                else:
                    cin = c
                net._add_block(f"{arm}.{stage}", cin, c, rng, dtype)
        conv = ConvParams.init(cfg.seg_channels, 2, 1, rng, dtype)
        net.weights["seg.classifier.weight"] = conv.weight
        net.weights["seg.classifier.bias"] = conv.bias
        cp, c = cfg.cond_channels, cfg.seg_channels
        for site in cfg.sites():
            if cfg.se_type == "spatial":
                w = rng.standard_normal(cp) * np.sqrt(1.0 / cp)
                b = np.zeros(1)
            else:
                w = rng.standard_normal((c, cp)) * np.sqrt(1.0 / cp)
                b = np.zeros(c)
            net.weights[f"se.{site}.weight"] = w.astype(dtype)
            net.weights[f"se.{site}.bias"] = b.astype(dtype)
        return net

    def _add_block(self, prefix, cin, cout, rng, dtype):
        conv = ConvParams.init(cin, cout, KERNEL, rng, dtype)
        bn = BatchNormParams.init(cout, dtype)
        self.weights[f"{prefix}.conv.weight"] = conv.weight
        self.weights[f"{prefix}.conv.bias"] = conv.bias
        self.weights[f"{prefix}.prelu.alpha"] = PReluParams.init(cout, dtype).alpha
        self.weights[f"{prefix}.bn.gamma"] = bn.gamma
        self.weights[f"{prefix}.bn.beta"] = bn.beta
        self.buffers[f"{prefix}.bn.running_mean"] = bn.running_mean
        self.buffers[f"{prefix}.bn.running_var"] = bn.running_var

    def block(self, prefix: str) -> BlockParams:
        w, b = self.weights, self.buffers
        return BlockParams(
            ConvParams(w[f"{prefix}.conv.weight"], w[f"{prefix}.conv.bias"]),
            PReluParams(w[f"{prefix}.prelu.alpha"]),
            BatchNormParams(w[f"{prefix}.bn.gamma"], w[f"{prefix}.bn.beta"],
                            b[f"{prefix}.bn.running_mean"], b[f"{prefix}.bn.running_var"]),
        )

    def classifier(self) -> ConvParams:
        return ConvParams(self.weights["seg.classifier.weight"], self.weights["seg.classifier.bias"])

    def se(self, site: str) -> SseParams | CseParams:
        kind = SseParams if self.cfg.se_type == "spatial" else CseParams
        return kind(self.weights[f"se.{site}.weight"], self.weights[f"se.{site}.bias"])

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(
            self.cfg,
            {k: v.astype(dtype) for k, v in self.weights.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
        )

    def copy(self) -> "NetworkParams":
        return self.astype(next(iter(self.weights.values())).dtype)

    @property
    def dtype(self):
        return next(iter(self.weights.values())).dtype

    def num_weights(self) -> int:
        return int(sum(v.size for v in self.weights.values()))


# --------------------------------------------------------------------------
# blocks


def generic_forward(x, bp: BlockParams, mode="train"):
    """conv(5x5, same) -> PReLU -> batchnorm. Returns (y, cache)."""
    z, cols = conv2d_forward_cols(x, bp.conv)
    a = prelu_forward(z, bp.prelu)
    y, bn_cache = batchnorm_forward(a, bp.bn, mode)
    return y, (x, cols, z, bn_cache)


def generic_backward(bp: BlockParams, cache, grad, need_grad_x=True):
    x, cols, z, bn_cache = cache
    ga, g_gamma, g_beta = batchnorm_backward(bn_cache, bp.bn, grad)
    gz, g_alpha = prelu_backward(z, bp.prelu, ga)
    gx, gw, gb = conv2d_backward(x, bp.conv, gz, cols=cols, need_grad_x=need_grad_x)
    grads = {
        "conv.weight": gw,
        "conv.bias": gb,
        "prelu.alpha": g_alpha,
        "bn.gamma": g_gamma,
        "bn.beta": g_beta,
    }
    return gx, grads


def encoder_block(x, bp: BlockParams, mode="train"):
    """Generic block then 2x2 max-pool.

    Returns (features_pre_pool, pooled, idx, cache); the pre-pool features are
    what a skip connection would carry.
    """
    check_tensor4(x, "encoder input")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"encoder input spatial dims must be even, got {x.shape[2:]}")
    pre, cache = generic_forward(x, bp, mode)
    pooled, idx = maxpool2x2(pre)
    return pre, pooled, idx, cache


def encoder_block_backward(bp, cache, idx, grad_pooled, grad_pre=None, need_grad_x=True):
    g = maxpool2x2_backward(grad_pooled, idx)
    if grad_pre is not None:
        g = g + grad_pre
    return generic_backward(bp, cache, g, need_grad_x)


def decoder_block(x, idx, bp: BlockParams, skip=None, mode="train"):
    """Unpool with stored indices, optionally concatenate skip features, then the generic block."""
    if idx is None:
        raise ShapeError("decoder block needs pooling indices from the matching encoder")
    up = unpool2x2(x, idx)
    if skip is not None:
        if skip.shape[2:] != up.shape[2:]:
            raise ShapeError(f"skip features {skip.shape[2:]} do not match unpooled size {up.shape[2:]}")
        up = np.concatenate([up, skip], axis=1)
    y, cache = generic_forward(up, bp, mode)
    return y, (cache, x.shape[1], skip is not None)


def decoder_block_backward(bp, cache, idx, grad):
    """Returns (grad_x, grad_skip or None, param grads)."""
    inner, c_in, has_skip = cache
    gup, grads = generic_backward(bp, inner, grad)
    g_skip = None
    if has_skip:
        gup, g_skip = gup[:, :c_in], gup[:, c_in:]
    return unpool2x2_backward(np.ascontiguousarray(gup), idx), g_skip, grads


# --------------------------------------------------------------------------
# interaction blocks


def _check_pair(u_con, u_seg):
    check_tensor4(u_con, "conditioner map")
    check_tensor4(u_seg, "segmenter map")
    if u_con.shape[0] != u_seg.shape[0] or u_con.shape[2:] != u_seg.shape[2:]:
        raise ShapeError(
            f"conditioner map {u_con.shape} and segmenter map {u_seg.shape} must share (n, h, w)"
        )


def sse_apply(u_con, u_seg, p: SseParams, return_cache=False):
    """Channel squeeze on the conditioner map, spatial excitation of the segmenter map."""
    _check_pair(u_con, u_seg)
    if p.weight.shape != (u_con.shape[1],):
        raise ShapeError(f"sSE weight length {p.weight.shape[0]} != conditioner channels {u_con.shape[1]}")
    q = np.tensordot(p.weight, u_con, axes=([0], [1])) + p.bias[0]  # (n, h, w)
    gate = sigmoid(q)
    out = gate[:, None] * u_seg
    return (out, (u_con, u_seg, gate)) if return_cache else out


def sse_backward(p: SseParams, cache, grad):
    """Returns (grad_u_con, grad_u_seg, grad_weight, grad_bias)."""
    u_con, u_seg, gate = cache
    g_seg = gate[:, None] * grad
    dq = (grad * u_seg).sum(axis=1) * gate * (1 - gate)
    g_w = np.tensordot(u_con, dq, axes=([0, 2, 3], [0, 1, 2]))
    g_b = np.array([dq.sum()], dtype=grad.dtype)
    g_con = p.weight[None, :, None, None] * dq[:, None]
    return g_con, g_seg, g_w, g_b


def cse_apply(u_con, u_seg, p: CseParams, return_cache=False):
    """Global average pool of the conditioner map, affine map + sigmoid to per-channel segmenter gates."""
    _check_pair(u_con, u_seg)
    if p.weight.shape != (u_seg.shape[1], u_con.shape[1]) or p.bias.shape != (u_seg.shape[1],):
        raise ShapeError(
            f"cSE weight {p.weight.shape} / bias {p.bias.shape} do not match "
            f"(C={u_seg.shape[1]}, C'={u_con.shape[1]})"
        )
    z = u_con.mean(axis=(2, 3))  # (n, C')
    gate = sigmoid(z @ p.weight.T + p.bias)  # (n, C)
    out = gate[:, :, None, None] * u_seg
    return (out, (u_con, u_seg, z, gate)) if return_cache else out


def cse_backward(p: CseParams, cache, grad):
    u_con, u_seg, z, gate = cache
    g_seg = gate[:, :, None, None] * grad
    ds = (grad * u_seg).sum(axis=(2, 3)) * gate * (1 - gate)  # (n, C)
    g_w = ds.T @ z
    g_b = ds.sum(axis=0)
    dz = ds @ p.weight  # (n, C')
    hw = u_con.shape[2] * u_con.shape[3]
    g_con = np.broadcast_to((dz / hw)[:, :, None, None], u_con.shape).copy()
    return g_con, g_seg, g_w, g_b


def _se_apply(cfg, p, u_con, u_seg):
    if cfg.se_type == "spatial":
        return sse_apply(u_con, u_seg, p, return_cache=True)
    return cse_apply(u_con, u_seg, p, return_cache=True)


def _se_backward(cfg, p, cache, grad):
    if cfg.se_type == "spatial":
        return sse_backward(p, cache, grad)
    return cse_backward(p, cache, grad)


# --------------------------------------------------------------------------
# arms


@dataclass
class TaskRepresentation:
    """Conditioner feature maps, one per enabled interaction site, in forward order."""

    sites: list[str]
    maps: list[np.ndarray]
    tape: dict | None = None

    def __len__(self):
        return len(self.maps)

    def get(self, site: str) -> np.ndarray:
        return self.maps[self.sites.index(site)]


def as_image_batch(img, name="image") -> np.ndarray:
    """Accepts (h, w), (n, h, w) or (n, 1, h, w) and returns (n, 1, h, w)."""
    img = np.asarray(img)
    if img.ndim == 2:
        return img[None, None]
    if img.ndim == 3:
        return img[:, None]
    if img.ndim == 4 and img.shape[1] == 1:
        return img
    raise ShapeError(f"{name}: expected (h, w), (n, h, w) or (n, 1, h, w), got {img.shape}")


def _check_divisible(x, cfg, name):
    d = cfg.divisor()
    if x.shape[2] % d or x.shape[3] % d:
        raise ShapeError(
            f"{name}: spatial dims {x.shape[2:]} must be divisible by 2**depth={d}; pad at the data layer"
        )


def _arm_forward(net: NetworkParams, arm: str, x, mode, task: TaskRepresentation | None = None):
    """Runs one arm. For the conditioner, collects site maps and stops after the last site."""
    cfg = net.cfg
    sites = cfg.sites()
    skip = cfg.skip_conditioner if arm == "cond" else cfg.skip_segmenter
    stages = cfg.stages()
    if arm == "cond":
        stages = stages[: stages.index(sites[-1]) + 1] if sites else []
    tape = {"stages": stages, "caches": {}, "idx": [], "se": {}}
    maps = []
    pre_feats = []
    h = x
    for stage in stages:
        bp = net.block(f"{arm}.{stage}")
        if stage.startswith("enc"):
            pre, h, idx, cache = encoder_block(h, bp, mode)
            tape["idx"].append(idx)
            pre_feats.append(pre if skip else None)
        elif stage == "bottleneck":
            h, cache = generic_forward(h, bp, mode)
        else:
            level = cfg.depth - 1 - int(stage[3:])
            h, cache = decoder_block(h, tape["idx"][level], bp, skip=pre_feats[level], mode=mode)
        tape["caches"][stage] = cache
        if stage in sites:
            if arm == "cond":
                maps.append(h)
            else:
                h, se_cache = _se_apply(cfg, net.se(stage), task.get(stage), h)
                tape["se"][stage] = se_cache
    return h, maps, tape


def _arm_backward(net: NetworkParams, arm: str, tape, grad, site_grads=None, grads=None):
    """Backpropagates through one arm; fills ``grads`` and returns conditioner site grads (segmenter arm)."""
    cfg = net.cfg
    grads = {} if grads is None else grads
    skip_grads: dict[int, np.ndarray] = {}
    con_grads = {}
    g = grad
    for stage in reversed(tape["stages"]):
        if stage in tape["se"]:
            p = net.se(stage)
            g_con, g, g_w, g_b = _se_backward(cfg, p, tape["se"][stage], g)
            con_grads[stage] = g_con
            _acc(grads, f"se.{stage}.weight", g_w)
            _acc(grads, f"se.{stage}.bias", g_b)
        if site_grads and stage in site_grads:
            g = site_grads[stage] if g is None else g + site_grads[stage]
        bp = net.block(f"{arm}.{stage}")
        cache = tape["caches"][stage]
        if stage.startswith("dec"):
            level = cfg.depth - 1 - int(stage[3:])
            g, g_skip, pg = decoder_block_backward(bp, cache, tape["idx"][level], g)
            if g_skip is not None:
                skip_grads[level] = g_skip
        elif stage == "bottleneck":
            g, pg = generic_backward(bp, cache, g)
        else:
            i = int(stage[3:])
            g, pg = encoder_block_backward(bp, cache, tape["idx"][i], g, skip_grads.get(i), need_grad_x=i > 0)
        for k, v in pg.items():
            _acc(grads, f"{arm}.{stage}.{k}", v)
    return con_grads, grads


def _acc(grads, name, g):
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = g


def conditioner_forward(support_image, support_mask, net: NetworkParams, mode="infer") -> TaskRepresentation:
    """Stacks image and binary mask into a 2-channel input and collects the task representation."""
    cfg = net.cfg
    img = as_image_batch(support_image, "support image").astype(net.dtype, copy=False)
    mask = as_image_batch(support_mask, "support mask")
    if img.shape != mask.shape:
        raise ShapeError(f"support image {img.shape} and mask {mask.shape} differ")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("support mask must be binary (values in {0, 1})")
    x = np.concatenate([img, mask.astype(net.dtype)], axis=1)
    _check_divisible(x, cfg, "support image")
    sites = cfg.sites()
    if not sites:
        return TaskRepresentation([], [], None)
    _, maps, tape = _arm_forward(net, "cond", x, mode)
    return TaskRepresentation(sites, maps, tape)


def segmenter_probs(query_image, task: TaskRepresentation, net: NetworkParams, mode="infer"):
    """Returns (logits, softmax probabilities, tape)."""
    cfg = net.cfg
    if task.sites != cfg.sites():
        raise ShapeError(f"task representation has {len(task.sites)} sites, config expects {len(cfg.sites())}")
    x = as_image_batch(query_image, "query image").astype(net.dtype, copy=False)
    _check_divisible(x, cfg, "query image")
    if task.maps and task.maps[0].shape[0] == 1 and x.shape[0] > 1:
        # one support shared by a batch of queries (inference only)
        task = TaskRepresentation(task.sites, [np.broadcast_to(m, (x.shape[0],) + m.shape[1:]) for m in task.maps])
    h, _, tape = _arm_forward(net, "seg", x, mode, task)
    cls = net.classifier()
    logits, cols = conv2d_forward_cols(h, cls)
    probs = softmax_over_channels(logits)
    tape["classifier"] = (h, cols, probs)
    return logits, probs, tape


def segmenter_forward(query_image, task: TaskRepresentation, net: NetworkParams, mode="infer"):
    """Returns (logits (n, 2, h, w), binary mask (n, 1, h, w)); foreground is channel 1."""
    logits, _, _ = segmenter_probs(query_image, task, net, mode)
    mask = (logits[:, 1:2] > logits[:, 0:1]).astype(np.uint8)
    return logits, mask


def forward(net: NetworkParams, support_image, support_mask, query_image, mode="train"):
    """Full two-arm forward; returns (foreground probability (n, 1, h, w), tape for :func:`backward`)."""
    task = conditioner_forward(support_image, support_mask, net, mode)
    _, probs, seg_tape = segmenter_probs(query_image, task, net, mode)
    return probs[:, 1:2], {"task": task, "seg": seg_tape}


def backward(net: NetworkParams, tape, grad_fg: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every weight, given d loss / d foreground probability."""
    seg = tape["seg"]
    h, cols, probs = seg["classifier"]
    g_probs = np.zeros_like(probs)
    g_probs[:, 1:2] = grad_fg
    g_logits = softmax_backward(probs, g_probs)
    g_h, g_w, g_b = conv2d_backward(h, net.classifier(), g_logits, cols=cols)
    grads = {"seg.classifier.weight": g_w, "seg.classifier.bias": g_b}
    con_grads, grads = _arm_backward(net, "seg", seg, g_h, grads=grads)
    task = tape["task"]
    if task.tape is not None:
        _arm_backward(net, "cond", task.tape, None, site_grads=con_grads, grads=grads)
    for name, w in net.weights.items():
        if name not in grads:
            grads[name] = np.zeros_like(w)
    return grads


def decoder_input_channels(net: NetworkParams, arm: str) -> list[int]:
    """Input channel count of each decoder conv; exposes whether skip features are concatenated."""
    return [net.weights[f"{arm}.dec{i}.conv.weight"].shape[1] for i in range(net.cfg.depth)]
