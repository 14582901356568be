"""Dual-encoder attention-fusion network for defect segmentation and depth.

Two residual-convolution encoders (PCA and TSR inputs) share an architecture
but not weights. At every level an encoder fusion gate mixes the two feature
maps with a sigmoid weight derived from the PCA features; the decoder climbs
back up through attention-enhanced decoding blocks whose single-channel
attention map, computed from the decoder state and the fused encoder features,
gates the upsampled decoder state.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from thermofuse.engine import ops
from thermofuse.engine.optim import conv_fans, glorot_uniform
from thermofuse.engine.tensor import Parameter, Tensor

HEADS = ("multiclass", "binary_depth")
FUSIONS = ("eafg_aedb", "concat_baseline")
MODALITIES = ("fused", "pca_only", "tsr_only")


@dataclass
class ModelConfig:
    levels: int = 5
    filters: list[int] = field(default_factory=lambda: [64, 128, 256, 512, 1024])
    kernel: int = 3
    pca_channels: int = 10
    tsr_channels: int = 6
    head: str = "binary_depth"
    n_classes: int = 5
    d_max: float = 2.5
    lam: float = 0.5
    fusion: str = "eafg_aedb"
    modality: str = "fused"

    def __post_init__(self):
        self.filters = [int(f) for f in self.filters]
        if len(self.filters) != self.levels:
            raise ValueError(f"{self.levels} levels need {self.levels} filter counts, got {self.filters}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}")
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}")
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")
        if self.head == "multiclass" and self.n_classes < 2:
            raise ValueError("multiclass head needs at least 2 classes")

    @property
    def min_divisor(self) -> int:
        return 2 ** (self.levels - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Predictions:
    logits: Tensor | None = None      # multiclass, (B, C, H, W)
    seg_logit: Tensor | None = None   # binary_depth, (B, 1, H, W)
    depth: Tensor | None = None       # binary_depth, (B, 1, H, W), mm
    attention: list[Tensor] = field(default_factory=list)


# -- building blocks --------------------------------------------------------------

class Weights(dict):
    """Ordered name -> Parameter mapping."""

    def add(self, p: Parameter) -> Parameter:
        if p.name in self:
            raise ValueError(f"duplicate parameter name {p.name!r}")
        self[p.name] = p
        return p


def _conv_param(weights: Weights, name: str, out_c: int, in_c: int, k: int, rng) -> tuple[Parameter, Parameter]:
    fan_in, fan_out = conv_fans(out_c, in_c, k)
    w = weights.add(glorot_uniform((out_c, in_c, k, k), fan_in, fan_out, rng, name + ".w"))
    b = weights.add(Parameter(np.zeros(out_c), name + ".b", fan_in, fan_out))
    return w, b


@dataclass
class ResidualBlock:
    conv1: tuple[Parameter, Parameter]
    conv2: tuple[Parameter, Parameter]
    shortcut: tuple[Parameter, Parameter] | None

    @classmethod
    def build(cls, weights: Weights, name: str, in_c: int, out_c: int, k: int, rng) -> "ResidualBlock":
        c1 = _conv_param(weights, name + ".conv1", out_c, in_c, k, rng)
        c2 = _conv_param(weights, name + ".conv2", out_c, out_c, k, rng)
        sc = _conv_param(weights, name + ".short", out_c, in_c, 1, rng) if in_c != out_c else None
        return cls(c1, c2, sc)


def residual_conv_block(x: Tensor, block: ResidualBlock) -> Tensor:
    """relu(conv(relu(conv(x))) + shortcut(x)); identity shortcut when channels match."""
    h = ops.relu(ops.conv2d(x, *block.conv1))
    h = ops.conv2d(h, *block.conv2)
    skip = x if block.shortcut is None else ops.conv2d(x, *block.shortcut)
    return ops.relu(ops.add(h, skip))


def eafg(fp: Tensor, ft: Tensor, gate_w: Parameter, gate_b: Parameter) -> tuple[Tensor, Tensor]:
    """alpha * Fp + (1 - alpha) * Ft with alpha = sigmoid(1x1 conv(Fp)); returns (fused, alpha)."""
    if fp.shape != ft.shape:
        raise ValueError(f"fusion inputs differ in shape: {fp.shape} vs {ft.shape}")
    alpha = ops.sigmoid(ops.conv2d(fp, gate_w, gate_b))
    fused = ops.add(ft, ops.mul(alpha, ops.sub(fp, ft)))
    return fused, alpha


@dataclass
class AedbWeights:
    wd: tuple[Parameter, Parameter]
    wf: tuple[Parameter, Parameter]
    wpsi: tuple[Parameter, Parameter]
    block: ResidualBlock


def _match_resolution(d_prev: Tensor, target_hw: tuple[int, int]) -> Tensor:
    hw = d_prev.shape[2:]
    if tuple(hw) == tuple(target_hw):
        return d_prev
    if (2 * hw[0], 2 * hw[1]) == tuple(target_hw):
        return ops.upsample2_bilinear(d_prev)
    raise ValueError(f"decoder state {hw} is not at or half of encoder resolution {target_hw}")


def aedb(d_prev: Tensor, f_fused: Tensor, w: AedbWeights) -> tuple[Tensor, Tensor]:
    """Attention-enhanced decoding block; returns (D_m, psi)."""
    u = _match_resolution(d_prev, f_fused.shape[2:])
    d_proj = ops.conv2d(u, *w.wd)
    f_proj = ops.conv2d(f_fused, *w.wf)
    psi = ops.sigmoid(ops.conv2d(ops.relu(ops.add(d_proj, f_proj)), *w.wpsi))
    gated = ops.mul(u, psi)
    return residual_conv_block(gated, w.block), psi


# -- network -------------------------------------------------------------------------

class PtFusion:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float64):
        self.config = config
        self.seed = seed
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        cfg = config
        f, k = cfg.filters, cfg.kernel
        self.weights = Weights()
        W = self.weights
        self.enc = {}
        for branch, in_c in (("pca", cfg.pca_channels), ("tsr", cfg.tsr_channels)):
            chans = [in_c] + f
            self.enc[branch] = [ResidualBlock.build(W, f"enc.{branch}.{m + 1}", chans[m], chans[m + 1], k, rng)
                                for m in range(cfg.levels)]
        self.fuse = {}
        self.dec = {}
        for m in range(cfg.levels, 0, -1):
            fm = f[m - 1]
            if cfg.fusion == "eafg_aedb":
                self.fuse[m] = _conv_param(W, f"eafg.{m}", fm, fm, 1, rng)
            else:
                self.fuse[m] = _conv_param(W, f"cat.{m}", fm, 2 * fm, 1, rng)
            if m == cfg.levels:
                continue
            f_up = f[m]
            if cfg.fusion == "eafg_aedb":
                att = max(1, fm // 2)
                self.dec[m] = AedbWeights(
                    _conv_param(W, f"aedb.{m}.wd", att, f_up, 1, rng),
                    _conv_param(W, f"aedb.{m}.wf", att, fm, 1, rng),
                    _conv_param(W, f"aedb.{m}.wpsi", 1, att, 1, rng),
                    ResidualBlock.build(W, f"aedb.{m}.res", f_up, fm, k, rng))
            else:
                self.dec[m] = (_conv_param(W, f"dec.{m}.reduce", f_up, f_up + fm, 1, rng),
                               ResidualBlock.build(W, f"dec.{m}.res", f_up, fm, k, rng))
        if cfg.head == "multiclass":
            self.head = {"logits": _conv_param(W, "head.logits", cfg.n_classes, f[0], 1, rng)}
        else:
            self.head = {"seg": _conv_param(W, "head.seg", 1, f[0], 1, rng),
                         "depth": _conv_param(W, "head.depth", 1, f[0], 1, rng)}
        prefix = self.frozen_prefix()
        for p in self.weights.values():
            if p.data.dtype != self.dtype:
                p.data = p.data.astype(self.dtype)
                p.grad = np.zeros_like(p.data)
            if prefix is not None and p.name.startswith(prefix):
                p.requires_grad = False

    # parameters -------------------------------------------------------------------
    def parameters(self) -> list[Parameter]:
        return list(self.weights.values())

    def frozen_prefix(self) -> str | None:
        return {"pca_only": "enc.tsr.", "tsr_only": "enc.pca."}.get(self.config.modality)

    def trainable_parameters(self) -> list[Parameter]:
        prefix = self.frozen_prefix()
        return [p for p in self.weights.values() if prefix is None or not p.name.startswith(prefix)]

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.weights.values())

    # forward ----------------------------------------------------------------------
    def encode(self, pca: Tensor, tsr: Tensor) -> list[tuple[Tensor, Tensor]]:
        cfg = self.config
        H, W = pca.shape[2:]
        if H % cfg.min_divisor or W % cfg.min_divisor:
            raise ValueError(f"input {H}x{W} not divisible by {cfg.min_divisor}")
        if tsr.shape[2:] != pca.shape[2:]:
            raise ValueError("PCA and TSR inputs differ in spatial size")
        feats = []
        fp, ft = pca, tsr
        for m in range(cfg.levels):
            if m > 0:
                fp, ft = ops.max_pool2(fp), ops.max_pool2(ft)
            fp = residual_conv_block(fp, self.enc["pca"][m])
            ft = residual_conv_block(ft, self.enc["tsr"][m])
            feats.append((fp, ft))
        return feats

    def _fuse(self, m: int, fp: Tensor, ft: Tensor) -> Tensor:
        if self.config.fusion == "eafg_aedb":
            return eafg(fp, ft, *self.fuse[m])[0]
        return ops.conv2d(ops.concat([fp, ft]), *self.fuse[m])

    def forward(self, pca, tsr) -> Predictions:
        cfg = self.config
        pca, tsr = _as_input(pca, self.dtype), _as_input(tsr, self.dtype)
        if pca.shape[1] != cfg.pca_channels or tsr.shape[1] != cfg.tsr_channels:
            raise ValueError(f"expected {cfg.pca_channels} PCA and {cfg.tsr_channels} TSR channels, "
                             f"got {pca.shape[1]} and {tsr.shape[1]}")
        if cfg.modality == "pca_only":
            tsr = Tensor(np.zeros_like(tsr.data))
        elif cfg.modality == "tsr_only":
            pca = Tensor(np.zeros_like(pca.data))
        feats = self.encode(pca, tsr)
        attention = []
        d = self._fuse(cfg.levels, *feats[-1])
        for m in range(cfg.levels - 1, 0, -1):
            ff = self._fuse(m, *feats[m - 1])
            if cfg.fusion == "eafg_aedb":
                d, psi = aedb(d, ff, self.dec[m])
                attention.append(psi)
            else:
                reduce, block = self.dec[m]
                u = _match_resolution(d, ff.shape[2:])
                d = residual_conv_block(ops.conv2d(ops.concat([u, ff]), *reduce), block)
        if cfg.head == "multiclass":
            return Predictions(logits=ops.conv2d(d, *self.head["logits"]), attention=attention)
        seg = ops.conv2d(d, *self.head["seg"])
        depth = ops.mul(ops.sigmoid(ops.conv2d(d, *self.head["depth"])), cfg.d_max)
        return Predictions(seg_logit=seg, depth=depth, attention=attention)

    __call__ = forward


def _as_input(x, dtype) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)
    if t.data.ndim != 4:
        raise ValueError(f"inputs must be (B, C, H, W), got shape {t.shape}")
    return t


# -- losses -----------------------------------------------------------------------

def loss_multiclass(pred: Predictions, class_mask: np.ndarray) -> Tensor:
    return ops.softmax_ce(pred.logits, class_mask)


def loss_binary_depth(pred: Predictions, class_mask: np.ndarray, depth_map: np.ndarray, lam: float = 0.5) -> Tensor:
    """BCE on the defect/sound mask plus lam * L1 on depth, both averaged over all pixels."""
    binary = (np.asarray(class_mask) > 0).astype(np.float64)
    bce = ops.bce_with_logits(pred.seg_logit, binary)
    if lam == 0:
        return bce
    return ops.add(bce, ops.mul(ops.l1(pred.depth, depth_map), lam))


def model_loss(model: PtFusion, pred: Predictions, class_mask: np.ndarray, depth_map: np.ndarray) -> Tensor:
    if model.config.head == "multiclass":
        return loss_multiclass(pred, class_mask)
    return loss_binary_depth(pred, class_mask, depth_map, model.config.lam)


def loss_terms(model: PtFusion, pred: Predictions, class_mask: np.ndarray, depth_map: np.ndarray) -> np.ndarray:
    """Per-pixel contributions whose sum is ``model_loss`` (plain numpy, no graph)."""
    if model.config.head == "multiclass":
        z = pred.logits.data
        zmax = z.max(axis=1, keepdims=True)
        lse = (np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax)[:, 0]
        picked = np.take_along_axis(z, np.asarray(class_mask)[:, None], axis=1)[:, 0]
        return (lse - picked) / lse.size
    z = pred.seg_logit.data[:, 0]
    y = (np.asarray(class_mask) > 0).astype(np.float64)
    n = z.size
    bce = (np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))) / n
    return bce + model.config.lam * np.abs(pred.depth.data[:, 0] - depth_map) / n
