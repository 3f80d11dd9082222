"""Training and evaluation regimes for coupled myocardium/scar segmentation.

Four regimes share one network family:

* ``jdl``: two nets trained jointly; the scar net sees the image gated
  by the myocardium net's foreground probability, and that gate stays
  differentiable, so scar-side error also steers the myocardium net.
* ``direct``: one net, image straight to scar mask.
* ``two_step``: myocardium net trained alone, then a scar net trained
  on images gated by ground-truth myocardium; evaluation gates with
  the predicted myocardium instead.
* ``mtl``: one shared trunk with a decoder per structure, no input
  gating.

Every run is a pure function of (dataset, config, seed).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import losses, metrics, nets, ops, optim
from .config import TrainConfig, validate
from .nets import Arch, MultiHeadParams, NetworkParams
from .synthdata import Sample
from .tensor import Graph, Tensor, backward, zero_grads


class PipelineKind(enum.Enum):
    JDL = "jdl"
    DIRECT = "direct"
    TWO_STEP = "two_step"
    MTL = "mtl"


class TrainingDiverged(RuntimeError):
    """Raised when the objective stops being finite."""


@dataclass(frozen=True)
class HistoryRow:
    """Per-epoch means, all per sample, so total == loss_scar
    + myo_loss_weight * loss_myo + reg holds row by row."""

    epoch: int
    total: float
    loss_myo: float
    loss_scar: float
    reg: float


@dataclass
class TrainedModel:
    kind: PipelineKind
    config: TrainConfig
    seed: int
    history: list[HistoryRow]
    myo_params: Optional[NetworkParams] = None
    scar_params: Optional[NetworkParams] = None
    multi_params: Optional[MultiHeadParams] = None


@dataclass
class AccessLog:
    """Audit trail of every input-gating event: (phase, mask source)."""

    events: list[tuple[str, str]] = field(default_factory=list)

    def record(self, phase: str, source: str) -> None:
        self.events.append((phase, source))

    def sources(self, phase: str) -> set[str]:
        return {src for ph, src in self.events if ph == phase}


def message_pass(image: Tensor, myo_prob: Tensor,
                 g: Optional[Graph] = None) -> Tensor:
    """Gate the image by the myocardium foreground probability.

    The product stays on the graph: scar-side gradients flow back into
    whatever produced ``myo_prob``. Accepts the probability map as HxW
    or 1xHxW.
    """
    if image.data.ndim != 3 or image.shape[0] != 1:
        raise ValueError(f"message_pass expects a 1xHxW image, got {image.shape}")
    if myo_prob.shape == image.shape[1:]:
        myo_prob = ops.reshape(myo_prob, image.shape, g)
    elif myo_prob.shape != image.shape:
        raise ValueError(f"probability map {myo_prob.shape} does not cover "
                         f"image {image.shape}")
    return ops.ew_mul(myo_prob, image, g)


def _arch(cfg: TrainConfig) -> Arch:
    return Arch(in_channels=1, out_channels=2,
                base_channels=cfg.base_channels, depth=cfg.depth)


def _derive_seeds(seed: int) -> tuple[int, int, int, int]:
    """(first net, second net, shuffle, dropout), pinned by the run seed."""
    a, b, c, d = np.random.SeedSequence(seed).generate_state(4, np.uint64)
    return int(a), int(b), int(c), int(d)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _image_tensor(sample: Sample) -> Tensor:
    return Tensor(sample.image.astype(np.float32, copy=False),
                  requires_grad=False)


def _forward_probs(params: NetworkParams, img: Tensor, cfg: TrainConfig,
                   train: bool, rng, g) -> Tensor:
    logits = nets.unet_forward(params, img, dropout_p=cfg.dropout_p,
                               train=train, rng=rng, g=g)
    return ops.softmax_channel(logits, g)


def _check_finite(value: float, epoch: int) -> float:
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
    return value


def _fill_missing_grads(tensors: Sequence[Tensor]) -> None:
    # only legitimate when a cut gate makes a whole net unreachable
    for t in tensors:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)


def train_jdl(dataset: Sequence[Sample], cfg: TrainConfig, *,
              cut_mask_grad: bool = False, warm_start_epochs: int = 0,
              audit: Optional[AccessLog] = None) -> TrainedModel:
    """Joint training: one backward over the whole coupled objective,
    then one optimizer step per net, every batch.

    ``cut_mask_grad`` detaches the gate (ablation: scar error no longer
    reaches the myocardium net). ``warm_start_epochs`` trains the
    myocardium net alone first, consuming that much of the epoch budget.
    """
    validate(cfg)
    if not dataset:
        raise ValueError("empty training dataset")
    if not 0 <= warm_start_epochs <= cfg.epochs:
        raise ValueError(f"warm_start_epochs must be in [0, {cfg.epochs}]")
    seed_m, seed_s, seed_shuffle, seed_drop = _derive_seeds(cfg.seed)
    myo = nets.init_params(_arch(cfg), seed_m)
    scar = nets.init_params(_arch(cfg), seed_s)
    adam_m = optim.init_adam(myo.tensors)
    adam_s = optim.init_adam(scar.tensors)
    shuffle_rng = np.random.default_rng(seed_shuffle)
    drop_rng = np.random.default_rng(seed_drop)
    all_tensors = myo.tensor_list() + scar.tensor_list()

    history = []
    for epoch in range(1, cfg.epochs + 1):
        warm = epoch <= warm_start_epochs
        sums = {"total": 0.0, "lm": 0.0, "ls": 0.0, "reg": 0.0}
        batches = _batches(len(dataset), cfg.batch_size, shuffle_rng)
        for batch in batches:
            g = Graph()
            lm_terms, ls_terms = [], []
            for i in batch:
                sample = dataset[i]
                img = _image_tensor(sample)
                myo_probs = _forward_probs(myo, img, cfg, True, drop_rng, g)
                lm_terms.append(losses.seg_loss(
                    myo_probs, sample.myo, cfg.dice_weight, cfg.dice_smooth, g))
                if warm:
                    continue
                gate = ops.channel_slice(myo_probs, 1, g)
                if cut_mask_grad:
                    gate = gate.detach()
                if audit is not None:
                    audit.record("train", "predicted")
                masked = message_pass(img, gate, g)
                scar_probs = _forward_probs(scar, masked, cfg, True, drop_rng, g)
                ls_terms.append(losses.seg_loss(
                    scar_probs, sample.scar, cfg.dice_weight, cfg.dice_smooth, g))

            reg_m = losses.l2_reg(myo.tensor_list(), g)
            if warm:
                # myocardium-only stage: its loss takes the mandatory slot
                total = losses.joint_total(
                    lm_terms, myo_reg=reg_m,
                    weight_decay_myo=cfg.weight_decay_myo, g=g)
                reg_contrib = cfg.weight_decay_myo * reg_m.item()
            else:
                reg_s = losses.l2_reg(scar.tensor_list(), g)
                total = losses.joint_total(
                    ls_terms, lm_terms, reg_m, reg_s,
                    myo_loss_weight=cfg.myo_loss_weight,
                    weight_decay_myo=cfg.weight_decay_myo,
                    weight_decay_scar=cfg.weight_decay_scar, g=g)
                reg_contrib = (cfg.weight_decay_myo * reg_m.item()
                               + cfg.weight_decay_scar * reg_s.item())
                sums["ls"] += sum(t.item() for t in ls_terms)

            sums["total"] += _check_finite(total.item(), epoch)
            sums["lm"] += sum(t.item() for t in lm_terms)
            sums["reg"] += reg_contrib

            zero_grads(all_tensors)
            backward(total, g)
            if cut_mask_grad and not warm:
                # with the gate detached and both myocardium terms weighted
                # zero, that net is unreachable; a zero grad means Adam
                # leaves it bitwise untouched
                _fill_missing_grads(myo.tensor_list())
            optim.adam_step(adam_m, myo.tensors, cfg.learning_rate)
            if not warm:
                optim.adam_step(adam_s, scar.tensors, cfg.learning_rate)

        n = len(dataset)
        history.append(HistoryRow(epoch, sums["total"] / n, sums["lm"] / n,
                                  sums["ls"] / n, sums["reg"] / n))
    return TrainedModel(PipelineKind.JDL, cfg, cfg.seed, history,
                        myo_params=myo, scar_params=scar)


def _train_single(params: NetworkParams, samples, targets_of, cfg, *,
                  weight_decay: float, epochs: int, epoch_offset: int,
                  loss_slot: str, adam, shuffle_rng, drop_rng, history):
    """Shared loop for the stages that train one net on one target."""
    for epoch in range(epoch_offset + 1, epoch_offset + epochs + 1):
        sums = {"total": 0.0, "loss": 0.0, "reg": 0.0}
        batches = _batches(len(samples), cfg.batch_size, shuffle_rng)
        for batch in batches:
            g = Graph()
            terms = []
            for i in batch:
                img, target = targets_of(samples[i])
                probs = _forward_probs(params, img, cfg, True, drop_rng, g)
                terms.append(losses.seg_loss(
                    probs, target, cfg.dice_weight, cfg.dice_smooth, g))
            reg = losses.l2_reg(params.tensor_list(), g)
            total = losses.joint_total(terms, scar_reg=reg,
                                       weight_decay_scar=weight_decay, g=g)
            sums["total"] += _check_finite(total.item(), epoch)
            sums["loss"] += sum(t.item() for t in terms)
            sums["reg"] += weight_decay * reg.item()
            zero_grads(params.tensor_list())
            backward(total, g)
            optim.adam_step(adam, params.tensors, cfg.learning_rate)
        n = len(samples)
        mean = sums["loss"] / n
        history.append(HistoryRow(
            epoch, sums["total"] / n,
            mean if loss_slot == "loss_myo" else 0.0,
            mean if loss_slot == "loss_scar" else 0.0,
            sums["reg"] / n))


def train_direct(dataset, cfg: TrainConfig,
                 audit: Optional[AccessLog] = None) -> TrainedModel:
    """One net, image to scar mask, no myocardium anywhere."""
    validate(cfg)
    if not dataset:
        raise ValueError("empty training dataset")
    seed_net, _, seed_shuffle, seed_drop = _derive_seeds(cfg.seed)
    net = nets.init_params(_arch(cfg), seed_net)
    history: list[HistoryRow] = []
    _train_single(net, list(dataset),
                  lambda s: (_image_tensor(s), s.scar), cfg,
                  weight_decay=cfg.weight_decay_scar, epochs=cfg.epochs,
                  epoch_offset=0, loss_slot="loss_scar",
                  adam=optim.init_adam(net.tensors),
                  shuffle_rng=np.random.default_rng(seed_shuffle),
                  drop_rng=np.random.default_rng(seed_drop), history=history)
    return TrainedModel(PipelineKind.DIRECT, cfg, cfg.seed, history,
                        scar_params=net)


def train_two_step(dataset, cfg: TrainConfig,
                   audit: Optional[AccessLog] = None) -> TrainedModel:
    """Myocardium net first, then a scar net on ground-truth-gated
    images. Training never sees a predicted mask; evaluation (predict)
    never sees a ground-truth one."""
    validate(cfg)
    if not dataset:
        raise ValueError("empty training dataset")
    seed_m, seed_s, seed_shuffle, seed_drop = _derive_seeds(cfg.seed)
    myo = nets.init_params(_arch(cfg), seed_m)
    scar = nets.init_params(_arch(cfg), seed_s)
    shuffle_rng = np.random.default_rng(seed_shuffle)
    drop_rng = np.random.default_rng(seed_drop)
    stage1 = cfg.epochs // 2
    stage2 = cfg.epochs - stage1
    history: list[HistoryRow] = []

    _train_single(myo, list(dataset),
                  lambda s: (_image_tensor(s), s.myo), cfg,
                  weight_decay=cfg.weight_decay_myo, epochs=stage1,
                  epoch_offset=0, loss_slot="loss_myo",
                  adam=optim.init_adam(myo.tensors), shuffle_rng=shuffle_rng,
                  drop_rng=drop_rng, history=history)

    def gated(s: Sample):
        if audit is not None:
            audit.record("train", "ground_truth")
        gated_img = s.image * s.myo[None].astype(np.float32)
        return Tensor(gated_img, requires_grad=False), s.scar

    _train_single(scar, list(dataset), gated, cfg,
                  weight_decay=cfg.weight_decay_scar, epochs=stage2,
                  epoch_offset=stage1, loss_slot="loss_scar",
                  adam=optim.init_adam(scar.tensors), shuffle_rng=shuffle_rng,
                  drop_rng=drop_rng, history=history)
    return TrainedModel(PipelineKind.TWO_STEP, cfg, cfg.seed, history,
                        myo_params=myo, scar_params=scar)


def train_mtl(dataset, cfg: TrainConfig,
              audit: Optional[AccessLog] = None) -> TrainedModel:
    """Hard parameter sharing: one trunk, one decoder per structure,
    both heads supervised through the joint objective, no input gating.

    Each decay term covers trunk plus its own decoder, so the trunk is
    regularized from both sides.
    """
    validate(cfg)
    if not dataset:
        raise ValueError("empty training dataset")
    seed_net, _, seed_shuffle, seed_drop = _derive_seeds(cfg.seed)
    params = nets.init_multihead_params(_arch(cfg), seed_net)
    adam = optim.init_adam(params.tensors)
    shuffle_rng = np.random.default_rng(seed_shuffle)
    drop_rng = np.random.default_rng(seed_drop)

    history = []
    for epoch in range(1, cfg.epochs + 1):
        sums = {"total": 0.0, "lm": 0.0, "ls": 0.0, "reg": 0.0}
        batches = _batches(len(dataset), cfg.batch_size, shuffle_rng)
        for batch in batches:
            g = Graph()
            lm_terms, ls_terms = [], []
            for i in batch:
                sample = dataset[i]
                img = _image_tensor(sample)
                lm_logits, ls_logits = nets.multihead_forward(
                    params, img, dropout_p=cfg.dropout_p, train=True,
                    rng=drop_rng, g=g)
                lm_terms.append(losses.seg_loss(
                    ops.softmax_channel(lm_logits, g), sample.myo,
                    cfg.dice_weight, cfg.dice_smooth, g))
                ls_terms.append(losses.seg_loss(
                    ops.softmax_channel(ls_logits, g), sample.scar,
                    cfg.dice_weight, cfg.dice_smooth, g))
            reg_m = losses.l2_reg(params.branch_tensors("myo"), g)
            reg_s = losses.l2_reg(params.branch_tensors("scar"), g)
            total = losses.joint_total(
                ls_terms, lm_terms, reg_m, reg_s,
                myo_loss_weight=cfg.myo_loss_weight,
                weight_decay_myo=cfg.weight_decay_myo,
                weight_decay_scar=cfg.weight_decay_scar, g=g)
            sums["total"] += _check_finite(total.item(), epoch)
            sums["lm"] += sum(t.item() for t in lm_terms)
            sums["ls"] += sum(t.item() for t in ls_terms)
            sums["reg"] += (cfg.weight_decay_myo * reg_m.item()
                            + cfg.weight_decay_scar * reg_s.item())
            zero_grads(params.tensor_list())
            backward(total, g)
            optim.adam_step(adam, params.tensors, cfg.learning_rate)
        n = len(dataset)
        history.append(HistoryRow(epoch, sums["total"] / n, sums["lm"] / n,
                                  sums["ls"] / n, sums["reg"] / n))
    return TrainedModel(PipelineKind.MTL, cfg, cfg.seed, history,
                        multi_params=params)


def train_baseline(kind: PipelineKind, dataset, cfg: TrainConfig,
                   audit: Optional[AccessLog] = None) -> TrainedModel:
    if kind == PipelineKind.DIRECT:
        return train_direct(dataset, cfg, audit)
    if kind == PipelineKind.TWO_STEP:
        return train_two_step(dataset, cfg, audit)
    if kind == PipelineKind.MTL:
        return train_mtl(dataset, cfg, audit)
    raise ValueError(f"not a baseline: {kind}")


def train(dataset, cfg: TrainConfig, *, audit: Optional[AccessLog] = None,
          cut_mask_grad: bool = False,
          warm_start_epochs: int = 0) -> TrainedModel:
    """Dispatch on ``cfg.pipeline``."""
    kind = PipelineKind(cfg.pipeline)
    if kind == PipelineKind.JDL:
        return train_jdl(dataset, cfg, cut_mask_grad=cut_mask_grad,
                         warm_start_epochs=warm_start_epochs, audit=audit)
    return train_baseline(kind, dataset, cfg, audit)


def predict(model, image: np.ndarray,
            audit: Optional[AccessLog] = None) -> tuple[Optional[np.ndarray],
                                                         np.ndarray]:
    """Eval-mode foreground probability maps along the model's own
    pathway: (myocardium or None, scar), each HxW in [0, 1]."""
    img = Tensor(np.asarray(image, dtype=np.float32), requires_grad=False)
    if img.data.ndim != 3 or img.shape[0] != 1:
        raise ValueError(f"expected 1xHxW image, got {img.shape}")

    if model.kind == PipelineKind.DIRECT:
        probs = ops.softmax_channel(nets.unet_forward(model.scar_params, img))
        return None, probs.data[1].copy()

    if model.kind == PipelineKind.MTL:
        lm, ls = nets.multihead_forward(model.multi_params, img)
        return (ops.softmax_channel(lm).data[1].copy(),
                ops.softmax_channel(ls).data[1].copy())

    # jdl and two_step gate with their own predicted myocardium
    myo_probs = ops.softmax_channel(nets.unet_forward(model.myo_params, img))
    gate = ops.channel_slice(myo_probs, 1)
    if audit is not None:
        audit.record("eval", "predicted")
    masked = message_pass(img, gate)
    scar_probs = ops.softmax_channel(nets.unet_forward(model.scar_params, masked))
    return myo_probs.data[1].copy(), scar_probs.data[1].copy()


def binarize(prob: np.ndarray, tau: float) -> np.ndarray:
    """Threshold a probability map; ties at ``tau`` count as foreground."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must be in (0, 1), got {tau}")
    return (np.asarray(prob) >= tau).astype(np.uint8)


@dataclass
class MetricsReport:
    tau: float
    n_samples: int
    scar_scores: list[metrics.PairScore]
    scar_summary: dict[str, metrics.Stats]
    myo_scores: Optional[list[metrics.PairScore]] = None
    myo_summary: Optional[dict[str, metrics.Stats]] = None


def evaluate(model, dataset: Sequence[Sample], tau: Optional[float] = None,
             audit: Optional[AccessLog] = None) -> MetricsReport:
    """Score the model on every sample; myocardium rows only for models
    that predict a myocardium."""
    if not dataset:
        raise ValueError("cannot evaluate on an empty dataset")
    if tau is None:
        cfg = getattr(model, "config", None)
        if cfg is None:
            raise ValueError("model carries no threshold; pass tau explicitly")
        tau = cfg.threshold
    scar_scores = []
    myo_scores = []
    for sample in dataset:
        myo_prob, scar_prob = predict(model, sample.image, audit=audit)
        scar_scores.append(metrics.score_pair(
            sample.scar, binarize(scar_prob, tau), sample.id))
        if myo_prob is not None:
            myo_scores.append(metrics.score_pair(
                sample.myo, binarize(myo_prob, tau), sample.id))
    report = MetricsReport(tau=tau, n_samples=len(dataset),
                           scar_scores=scar_scores,
                           scar_summary=metrics.summarize(scar_scores))
    if myo_scores:
        report.myo_scores = myo_scores
        report.myo_summary = metrics.summarize(myo_scores)
    return report


def history_csv(model: TrainedModel) -> str:
    lines = ["epoch,total,loss_myo,loss_scar,reg"]
    for row in model.history:
        lines.append(f"{row.epoch},{row.total!r},{row.loss_myo!r},"
                     f"{row.loss_scar!r},{row.reg!r}")
    return "\n".join(lines) + "\n"


_META_KIND = "__meta__/kind"
_META_ARCH = "__meta__/arch"


def save_model(model, path) -> None:
    """Checkpoint: every parameter tensor plus self-describing metadata,
    so a saved model can be evaluated without its training config."""
    named: dict[str, np.ndarray] = {}
    named[_META_KIND] = np.frombuffer(
        model.kind.value.encode("ascii"), dtype=np.uint8).astype(np.float32)
    arch = None
    for group in ("myo_params", "scar_params", "multi_params"):
        params = getattr(model, group, None)
        if params is None:
            continue
        arch = params.arch
        for name, t in params.tensors.items():
            named[f"{group}/{name}"] = t.data
    if arch is None:
        raise ValueError("model has no parameters to save")
    named[_META_ARCH] = np.array(
        [arch.in_channels, arch.out_channels, arch.base_channels, arch.depth],
        dtype=np.float32)
    nets.save_tensors(path, named)


@dataclass
class InferenceModel:
    """What predict/evaluate need, reconstructed from a checkpoint.
    ``config`` is absent, so evaluation must be given an explicit tau."""

    kind: PipelineKind
    myo_params: Optional[NetworkParams] = None
    scar_params: Optional[NetworkParams] = None
    multi_params: Optional[MultiHeadParams] = None


def load_model(path) -> InferenceModel:
    named = nets.load_tensors(path)
    try:
        kind = PipelineKind(bytes(named.pop(_META_KIND).astype(np.uint8)).decode("ascii"))
        vals = named.pop(_META_ARCH).astype(int)
    except KeyError as e:
        raise ValueError(f"checkpoint lacks metadata record {e}") from None
    arch = Arch(in_channels=int(vals[0]), out_channels=int(vals[1]),
                base_channels=int(vals[2]), depth=int(vals[3]))
    groups: dict[str, dict[str, Tensor]] = {}
    for full, arr in named.items():
        group, sep, name = full.partition("/")
        if not sep:
            raise ValueError(f"unexpected checkpoint record {full!r}")
        groups.setdefault(group, {})[name] = Tensor(arr)
    model = InferenceModel(kind)
    if "myo_params" in groups:
        model.myo_params = NetworkParams(arch, groups.pop("myo_params"))
    if "scar_params" in groups:
        model.scar_params = NetworkParams(arch, groups.pop("scar_params"))
    if "multi_params" in groups:
        model.multi_params = MultiHeadParams(arch, groups.pop("multi_params"))
    if groups:
        raise ValueError(f"unexpected parameter groups {sorted(groups)}")
    return model
