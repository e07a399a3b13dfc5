"""Model assembly, forward pass, training and inference."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import blocks
from . import losses as L
from . import tensor as tc
from .blocks import BranchConfig
from .taxonomy import NUM_LEVELS, TaxonomyTree, leaf_levels, load_taxonomy
from .tensor import NumericError, ParamSet, ShapeError, Tensor

log = logging.getLogger(__name__)

CKPT_MAGIC = b"HFCK"


@dataclass(frozen=True)
class ModelConfig:
    branch: BranchConfig = BranchConfig()
    # ablation switches
    hierarchy_on: bool = True
    levels_on: tuple[bool, bool, bool, bool] = (True, True, True, True)
    pconv_on: bool = True
    loc_loss_on: bool = True
    teacher_forcing: bool = False
    # objective
    loss_preset: str = "shared"
    lambda_loc: float = 1.0
    w4: float = 100.0
    margin_factor: float = 2.5
    recompute_calibration: bool = False
    # optimisation
    optimizer: str = "adam"
    lr_base: float = 3e-3
    lr_loc: float = 9e-3
    momentum: float = 0.9
    epochs: int = 13
    batch_real: int = 8
    batch_forged: int = 8
    patience: int = 2
    lr_factor: float = 0.5

    def loss_weights(self) -> L.LossWeights:
        loc_scale = 1.0 if self.loc_loss_on else 0.0
        if self.loss_preset == "weighted":
            w = L.LossWeights(loc_forged=self.lambda_loc, loc_real=1.0, w4_forged=self.w4, w4_real=1.0,
                              hierarchy_on=self.hierarchy_on, levels_on=tuple(self.levels_on))
        else:
            w = L.LossWeights.preset(self.loss_preset, lam=self.lambda_loc, hierarchy_on=self.hierarchy_on,
                                     levels_on=tuple(self.levels_on))
        return dataclasses.replace(w, loc_forged=w.loc_forged * loc_scale, loc_real=w.loc_real * loc_scale)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["levels_on"] = list(self.levels_on)
        d["branch"]["widths"] = list(self.branch.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        br = dict(d.pop("branch"))
        br["widths"] = tuple(br["widths"])
        d["levels_on"] = tuple(d["levels_on"])
        return cls(branch=BranchConfig(**br), **d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


PRESETS = {
    "desk": BranchConfig(),
    "tiny": BranchConfig(image_size=8, stem_width=1, widths=(2, 2, 2, 2), attn_channels=2, embed_dim=3,
                         pconv_channels=2, log_size=3, key_stride=1),
    "full": BranchConfig(image_size=256, stem_width=32, widths=(256, 128, 64, 32), attn_channels=32,
                          embed_dim=18, pconv_channels=16, key_stride=8),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown architecture preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(branch=PRESETS[name], **overrides)


@dataclass
class ModelState:
    params: ParamSet
    tree: TaxonomyTree
    config: ModelConfig
    calib: L.LocalizationCalibration | None = None


@dataclass
class Prediction:
    level_probs: list[np.ndarray]
    mask_scores: np.ndarray
    binary_mask: np.ndarray
    is_forged: bool
    leaf: int
    path: list[int | None]
    detection_score: float


# --------------------------------------------------------------------------
# parameters


def param_shapes(config: ModelConfig, tree: TaxonomyTree) -> dict[str, tuple[tuple[int, ...], int, bool]]:
    """name -> (shape, fan_in, followed_by_relu)."""
    br = config.branch
    s, ca, d, cp = br.stem_width, br.attn_channels, br.embed_dim, br.pconv_channels
    shapes: dict[str, tuple[tuple[int, ...], int, bool]] = {}

    def conv(name, cin, cout, k, act=True):
        shapes[f"{name}.w"] = ((cout, cin, k, k), cin * k * k, act)
        shapes[f"{name}.b"] = ((cout,), cin * k * k, act)

    conv("stem.color.0", 3, s, 3)
    conv("stem.color.1", s, s, 3)
    conv("stem.freq.0", 3, s, 3, act=False)
    conv("stem.freq.1", s, s, 3)
    cin = 2 * s
    for b in (4, 3, 2, 1):
        w = br.widths[b - 1]
        conv(f"branch{b}.0", cin, w, 3)
        conv(f"branch{b}.1", w, w, 3)
        cin = w
    if br.fuse:
        for b in (2, 3, 4):
            conv(f"fuse{b}", br.widths[b - 2], br.widths[b - 1], 1, act=False)
    for name in ("g", "phi", "psi"):
        conv(f"attn.{name}", br.widths[3], ca, 1, act=False)
    conv("attn.proj", ca, d, 1, act=False)
    extra = 0
    if config.pconv_on:
        conv("pconv.0", 3, cp, 3)
        conv("pconv.1", cp, cp, 3)
        extra = cp
    for b in range(1, NUM_LEVELS + 1):
        k = tree.sizes[b - 1]
        fin = br.widths[b - 1] + (extra if b == NUM_LEVELS else 0)
        shapes[f"head{b}.w"] = ((k, fin), fin, False)
        shapes[f"head{b}.b"] = ((k,), fin, False)
    return shapes


def init_model(config: ModelConfig, tree: TaxonomyTree, seed: int) -> ModelState:
    """Uniform fan-in initialisation, drawn in sorted parameter order."""
    config.branch.validate()
    if config.branch.embed_dim < 1:
        raise ValueError("embed_dim must be positive")
    rng = np.random.default_rng(seed)
    params = ParamSet()
    for name, (shape, fan_in, act) in sorted(param_shapes(config, tree).items()):
        if name.endswith(".b"):
            data = np.zeros(shape)
        else:
            gain = np.sqrt(2.0) if act else 1.0
            bound = gain * np.sqrt(3.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data)
    return ModelState(params, tree, config)


def is_localization_param(name: str) -> bool:
    return name.startswith("attn.")


# --------------------------------------------------------------------------
# forward


@dataclass
class ForwardOut:
    logits: list[Tensor]
    probs: list[Tensor]
    pixel_embed: Tensor
    mask_scores: np.ndarray
    binary_mask: np.ndarray


def _features(model: ModelState, images: Tensor) -> tuple[list[Tensor], Tensor]:
    br = model.config.branch
    if images.ndim != 4 or images.shape[1] != 3 or images.shape[2:] != (br.image_size, br.image_size):
        raise ShapeError(f"expected images [B,3,{br.image_size},{br.image_size}], got {images.shape}")
    stem = blocks.stems(images, model.params, br)
    feats = blocks.branch_forward(stem, br, model.params)
    _, embed = blocks.attention_localize(feats[3], model.params, br.key_stride, br.attn_residual,
                                         br.max_attention_entries)
    return feats, embed


def _batch(images) -> tuple[Tensor, bool]:
    arr = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        return Tensor(arr[None]), True
    return Tensor(arr), False


def embed_pixels(model: ModelState, images, chunk: int = 32) -> np.ndarray:
    """Per-pixel embeddings [B,D,H,W] (no calibration needed)."""
    x, _ = _batch(images)
    outs = []
    with tc.no_grad():
        for i in range(0, x.shape[0], chunk):
            _, e = _features(model, Tensor(x.data[i:i + chunk]))
            outs.append(e.data)
    return np.concatenate(outs) if outs else np.zeros((0, model.config.branch.embed_dim, 0, 0))


def forward(model: ModelState, images, gt_masks: np.ndarray | None = None,
            mask_override: np.ndarray | None = None) -> ForwardOut:
    """Full forward pass on [B,3,H,W] (or a single [3,H,W]) images.

    The binary mask fed to the partial-convolution pathway is the
    thresholded prediction, the ground truth when teacher forcing is on
    (``gt_masks`` required), or ``mask_override`` when given.  It is always
    a constant (no gradient).
    """
    if model.calib is None:
        raise RuntimeError("model is not calibrated; run calibrate() first")
    x, _ = _batch(images)
    feats, embed = _features(model, x)
    if embed.shape[1] != model.calib.dim:
        raise ShapeError(f"embedding dim {embed.shape[1]} != calibration dim {model.calib.dim}")
    scores = L.mask_score(embed, model.calib)
    binary = L.binarize(scores)
    if mask_override is not None:
        used = np.asarray(mask_override, dtype=np.float64)
    elif model.config.teacher_forcing and gt_masks is not None:
        used = np.asarray(gt_masks, dtype=np.float64)
    else:
        used = binary
    p = model.params
    logits = [blocks.classification_head(feats[b], p[f"head{b + 1}.w"], p[f"head{b + 1}.b"]) for b in range(3)]
    extra = blocks.masked_embed(x, used, p) if model.config.pconv_on else None
    logits.append(blocks.classification_head(feats[3], p["head4.w"], p["head4.b"], extra))
    probs = L.hierarchical_probs(model.tree, logits, model.config.hierarchy_on)
    return ForwardOut(logits, probs, embed, scores, binary)


def to_prediction(model: ModelState, out: ForwardOut, i: int = 0) -> Prediction:
    probs = [pr.data[i].copy() for pr in out.probs]
    leaf = int(np.argmax(probs[-1]))  # first maximum: ties go to the lower index
    real = model.tree.real_index
    path = list(model.tree.path_of(leaf).per_level)
    return Prediction(probs, out.mask_scores[i].copy(), out.binary_mask[i].copy(), leaf != real, leaf, path,
                      float(1.0 - probs[-1][real]))


def predict(model: ModelState, image) -> Prediction:
    with tc.no_grad():
        out = forward(model, image)
    return to_prediction(model, out, 0)


def predict_batch(model: ModelState, images: np.ndarray, chunk: int = 32) -> list[Prediction]:
    preds = []
    with tc.no_grad():
        for i in range(0, len(images), chunk):
            out = forward(model, images[i:i + chunk])
            preds.extend(to_prediction(model, out, j) for j in range(out.probs[0].shape[0]))
    return preds


# --------------------------------------------------------------------------
# calibration


def calibrate(model: ModelState, real_images: np.ndarray, chunk: int = 32) -> L.LocalizationCalibration:
    """Fix the localization center and margin from real images."""
    if len(real_images) == 0:
        raise ValueError("calibrate: no real images")
    chunks = [embed_pixels(model, real_images[i:i + chunk]) for i in range(0, len(real_images), chunk)]
    center = L.compute_center(chunks)
    tau, d_max = L.compute_margin(center, chunks, model.config.margin_factor)
    model.calib = L.LocalizationCalibration(center, tau, d_max, model.config.margin_factor)
    return model.calib


# --------------------------------------------------------------------------
# optimisation


class Optimizer:
    """SGD with momentum or Adam, with a base-rate group and a
    localization-module group."""

    def __init__(self, params: ParamSet, kind: str = "sgd", lr_base: float = 1e-4, lr_loc: float = 3e-4,
                 momentum: float = 0.9, betas=(0.9, 0.999), eps: float = 1e-8):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.params = params
        self.kind = kind
        self.lr = {"base": float(lr_base), "loc": float(lr_loc)}
        self.momentum = momentum
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.state: dict[str, list[np.ndarray]] = {}

    def group(self, name: str) -> str:
        return "loc" if is_localization_param(name) else "base"

    def step(self) -> None:
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            lr = self.lr[self.group(name)]
            g = p.grad
            if self.kind == "sgd":
                st = self.state.setdefault(name, [np.zeros_like(p.data)])
                st[0] *= self.momentum
                st[0] += g
                p.data -= lr * st[0]
            else:
                st = self.state.setdefault(name, [np.zeros_like(p.data), np.zeros_like(p.data)])
                b1, b2 = self.betas
                st[0] *= b1
                st[0] += (1 - b1) * g
                st[1] *= b2
                st[1] += (1 - b2) * g * g
                mhat = st[0] / (1 - b1 ** self.t)
                vhat = st[1] / (1 - b2 ** self.t)
                p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)

    def scale_rates(self, factor: float) -> None:
        for k in self.lr:
            self.lr[k] *= factor


class PlateauScheduler:
    """Multiply rates by ``factor`` once validation loss has failed to
    improve for ``patience`` consecutive epochs."""

    def __init__(self, optimizer: Optimizer, factor: float = 0.5, patience: int = 2):
        self.opt = optimizer
        self.factor = factor
        self.patience = patience
        self.best = float("inf")
        self.bad = 0

    def step(self, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best = val_loss
            self.bad = 0
            return False
        self.bad += 1
        if self.bad >= self.patience:
            self.opt.scale_rates(self.factor)
            self.bad = 0
            return True
        return False


COMPONENTS = ("loc", "cls1", "cls2", "cls3", "cls4")


def batch_loss(model: ModelState, images: np.ndarray, masks: np.ndarray, leaves: np.ndarray,
               mask_override: np.ndarray | None = None) -> tuple[Tensor, dict, ForwardOut]:
    """Summed gated objective for a batch plus mean per-component values."""
    out = forward(model, images, gt_masks=masks, mask_override=mask_override)
    l_loc = L.localization_loss(out.pixel_embed, masks, model.calib, per_sample=True)
    targets = leaf_levels(model.tree, leaves)
    forged = leaves != model.tree.real_index
    l_cls = [L.level_cross_entropy(out.probs[b], np.maximum(targets[:, b], 0)) for b in range(NUM_LEVELS)]
    total, w = L.batch_total_loss(forged, l_loc, l_cls, model.config.loss_weights())
    per_sample = w[:, 0] * l_loc.data + sum(w[:, b + 1] * l_cls[b].data for b in range(NUM_LEVELS))
    bad = np.flatnonzero(~np.isfinite(per_sample))
    if bad.size:
        raise NumericError(f"non-finite loss for sample {int(bad[0])} of the batch")
    parts = {"loc": float(l_loc.data.mean())}
    for b in range(NUM_LEVELS):
        sel = targets[:, b] >= 0
        parts[f"cls{b + 1}"] = float(l_cls[b].data[sel].mean()) if sel.any() else 0.0
    parts["total"] = float(total.data)
    return total, parts, out


def train_step(model: ModelState, images: np.ndarray, masks: np.ndarray, leaves: np.ndarray,
               opt: Optimizer) -> dict:
    for p in model.params.values():
        p.grad = None
    total, parts, _ = batch_loss(model, images, masks, leaves)
    total.backward()
    opt.step()
    return parts


@dataclass
class SplitData:
    images: np.ndarray
    masks: np.ndarray
    leaves: np.ndarray

    def __len__(self) -> int:
        return len(self.leaves)

    def subset(self, idx) -> "SplitData":
        return SplitData(self.images[idx], self.masks[idx], self.leaves[idx])


def epoch_batches(data: SplitData, real_index: int, n_real: int, n_forged: int,
                  rng: np.random.Generator) -> list[np.ndarray]:
    """Index batches of ``n_real`` real + ``n_forged`` forged samples; every
    sample appears at least once, the smaller pool is cycled."""
    real = np.flatnonzero(data.leaves == real_index)
    fake = np.flatnonzero(data.leaves != real_index)
    pools = [(rng.permutation(real), n_real), (rng.permutation(fake), n_forged)]
    pools = [(p, n) for p, n in pools if n > 0 and p.size > 0]
    if not pools:
        raise ValueError("empty training set")
    steps = max(-(-p.size // n) for p, n in pools)
    batches = []
    for s in range(steps):
        parts = [np.take(p, np.arange(s * n, (s + 1) * n) % p.size) for p, n in pools]
        batches.append(np.concatenate(parts))
    return batches


def evaluate_loss(model: ModelState, data: SplitData, chunk: int = 32) -> dict:
    """Per-sample mean of every loss component (and of the weighted total)
    over ``data``, without building a graph."""
    sums = {k: 0.0 for k in COMPONENTS + ("total",)}
    n = 0
    with tc.no_grad():
        for i in range(0, len(data), chunk):
            sl = slice(i, i + chunk)
            _, parts, _ = batch_loss(model, data.images[sl], data.masks[sl], data.leaves[sl])
            m = len(data.leaves[sl])
            for k in COMPONENTS:
                sums[k] += parts[k] * m
            sums["total"] += parts["total"]
            n += m
    return {k: v / n for k, v in sums.items()} if n else sums


@dataclass
class History:
    epochs: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)


def train_loop(model: ModelState, train: SplitData, val: SplitData | None, epochs: int, seed: int = 0,
               out_dir: Path | None = None,
               on_epoch: Callable[[int, ModelState, dict], dict | None] | None = None) -> History:
    """Train for ``epochs`` epochs with plateau-driven rate decay.

    When ``out_dir`` is given a checkpoint is written after every epoch.
    ``on_epoch`` may return extra metrics to log for that epoch.
    """
    if len(train) == 0:
        raise ValueError("train_loop: empty dataset")
    cfg = model.config
    hist = History()
    if epochs <= 0:
        return hist
    opt = Optimizer(model.params, cfg.optimizer, cfg.lr_base, cfg.lr_loc, cfg.momentum)
    sched = PlateauScheduler(opt, cfg.lr_factor, cfg.patience)
    rng = np.random.default_rng(seed)
    step = 0
    real_idx = model.tree.real_index
    for epoch in range(1, epochs + 1):
        if cfg.recompute_calibration and epoch > 1:
            calibrate(model, train.images[train.leaves == real_idx])
        sums: dict[str, float] = {}
        batches = epoch_batches(train, real_idx, cfg.batch_real, cfg.batch_forged, rng)
        for bidx in batches:
            try:
                parts = train_step(model, train.images[bidx], train.masks[bidx], train.leaves[bidx], opt)
            except NumericError as exc:
                raise NumericError(f"step {step}: {exc}") from None
            step += 1
            hist.steps.append({"step": step, "epoch": epoch, **parts})
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
        row = {"epoch": epoch, "split": "train", **{k: v / len(batches) for k, v in sums.items()},
               "lr_base": opt.lr["base"], "lr_loc": opt.lr["loc"]}
        hist.epochs.append(row)
        if val is not None and len(val):
            vrow = {"epoch": epoch, "split": "val", **evaluate_loss(model, val)}
            if on_epoch is not None:
                vrow.update(on_epoch(epoch, model, vrow) or {})
            hist.epochs.append(vrow)
            reduced = sched.step(vrow["total"])
            vrow["lr_reduced"] = int(reduced)
        log.info("epoch %d: %s", epoch, {k: round(v, 4) if isinstance(v, float) else v
                                          for k, v in hist.epochs[-1].items()})
        if out_dir is not None:
            save_checkpoint(model, Path(out_dir) / f"checkpoint_epoch{epoch:02d}.hfck")
    return hist


# --------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(model: ModelState) -> bytes:
    buf = io.BytesIO()
    cfg_digest = model.config.digest()
    tax_digest = model.tree.digest()
    buf.write(CKPT_MAGIC)
    buf.write(bytes.fromhex(cfg_digest))
    buf.write(bytes.fromhex(tax_digest))
    calib = None
    if model.calib is not None:
        calib = {"tau": model.calib.tau, "d_max": model.calib.d_max, "margin_factor": model.calib.margin_factor}
    header = {
        "config": model.config.to_dict(),
        "taxonomy": model.tree.to_document(),
        "flags": {"hierarchy_on": model.config.hierarchy_on, "pconv_on": model.config.pconv_on,
                  "loc_loss_on": model.config.loc_loss_on, "levels_on": list(model.config.levels_on)},
        "calibration": calib,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", 1 if model.calib is not None else 0))
    if model.calib is not None:
        tc.write_tensor(buf, model.calib.center)
    items = model.params.items()
    buf.write(struct.pack("<I", len(items)))
    for name, t in items:
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        tc.write_tensor(buf, t)
    return buf.getvalue()


def save_checkpoint(model: ModelState, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh)


def _read_header(fh) -> dict:
    if fh.read(4) != CKPT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    cfg_digest = fh.read(32).hex()
    tax_digest = fh.read(32).hex()
    (n,) = struct.unpack("<I", fh.read(4))
    header = json.loads(fh.read(n).decode("utf-8"))
    header["config_digest"] = cfg_digest
    header["taxonomy_digest"] = tax_digest
    return header


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as fh:
        header = _read_header(fh)
        config = ModelConfig.from_dict(header["config"])
        tree = load_taxonomy(header["taxonomy"])
        if config.digest() != header["config_digest"] or tree.digest() != header["taxonomy_digest"]:
            raise ValueError("checkpoint digests do not match its header")
        (has_center,) = struct.unpack("<B", fh.read(1))
        calib = None
        if has_center:
            center = tc.read_tensor(fh).data
            c = header["calibration"]
            calib = L.LocalizationCalibration(center, c["tau"], c["d_max"], c["margin_factor"])
        (count,) = struct.unpack("<I", fh.read(4))
        params = ParamSet()
        for _ in range(count):
            (nl,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nl).decode("utf-8")
            params[name] = tc.read_tensor(fh)
    expected = param_shapes(config, tree)
    if set(expected) != set(params.keys()) or any(params[k].shape != expected[k][0] for k in expected):
        raise ValueError("checkpoint parameters do not match its configuration")
    return ModelState(params, tree, config, calib)
