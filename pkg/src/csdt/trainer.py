"""Static/dynamic teacher training loop.

Three networks share one architecture: a static teacher pretrained on the
labeled images and then frozen, a student trained by gradient descent, and a
dynamic teacher that only ever receives an exponential moving average of the
student's weights. Each iteration the teachers label weakly augmented
unlabeled images, the student sees strongly augmented copies, and the
student loss is ``L_s + lambda_c * L_c + lambda_u * L_u``.
"""

from __future__ import annotations

import contextlib
import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import apl
from .losses import LossWeights, consistency_loss, dice_loss, total_loss
from .metrics import pixel_metrics
from .network import MSSANet, NetworkConfig, load_checkpoint, save_checkpoint
from .synthgen import load_manifest, load_split

log = logging.getLogger(__name__)

TEACHER_MODES = ("dual", "st", "dt", "none")


@dataclass
class TrainConfig:
    batch_labeled: int = 8
    batch_unlabeled: int = 8
    max_iterations: int = 25000
    pretrain_iterations: int = 2000
    learning_rate: float = 1e-4
    pretrain_learning_rate: float | None = None  # None: same as learning_rate
    ema_decay: float = 0.99
    lambda_u: float = 0.3
    ramp_scale: float = 5.0
    threshold: float = 0.5
    eps: float = 1e-8
    weak_blur: tuple[float, float] = (0.1, 0.5)
    strong_blur: tuple[float, float] = (0.5, 1.5)
    jitter: float = 0.4
    seed: int = 0
    teacher_mode: str = "dual"
    use_lu: bool = True
    use_lc: bool = True
    pl_strategy: str = "apl"
    gate: str = "prose"
    student_init: str = "static"
    label_rate: str | None = None
    val_every: int = 500
    checkpoint_every: int = 500
    log_decisions: bool = False
    teacher_bn: str = "batch"  # "batch": teachers normalize like the student; "running": eval mode
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def __post_init__(self):
        if isinstance(self.network, dict):
            self.network = NetworkConfig.from_dict(self.network)
        self.weak_blur = tuple(float(v) for v in self.weak_blur)
        self.strong_blur = tuple(float(v) for v in self.strong_blur)
        if not 0.9 <= self.ema_decay <= 0.999:
            raise ValueError(f"ema_decay must be in [0.9, 0.999], got {self.ema_decay}")
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.learning_rate <= 0 or (self.pretrain_learning_rate is not None and self.pretrain_learning_rate <= 0):
            raise ValueError("learning rates must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.pretrain_iterations < 0:
            raise ValueError("pretrain_iterations must be >= 0")
        if self.teacher_mode not in TEACHER_MODES:
            raise ValueError(f"teacher_mode must be one of {TEACHER_MODES}")
        if self.gate not in ("prose", "algorithm"):
            raise ValueError(f"unknown gate {self.gate!r}")
        if self.teacher_bn not in ("batch", "running"):
            raise ValueError(f"unknown teacher_bn {self.teacher_bn!r}")
        if self.student_init not in ("static", "random"):
            raise ValueError(f"unknown student_init {self.student_init!r}")
        self.switch_epochs  # validates pl_strategy

    @property
    def switch_epochs(self) -> int | None:
        s = self.pl_strategy
        if s in ("apl", "intersection", "union"):
            return None
        if s.startswith("switch:"):
            n = int(s.split(":", 1)[1])
            if n < 0:
                raise ValueError("switch epoch count must be >= 0")
            return n
        raise ValueError(f"unknown pl_strategy {s!r}")

    @property
    def uses_st(self) -> bool:
        return self.teacher_mode in ("dual", "st")

    @property
    def uses_dt(self) -> bool:
        return self.teacher_mode in ("dual", "dt")

    @property
    def lu_active(self) -> bool:
        return self.use_lu and self.uses_st

    @property
    def lc_active(self) -> bool:
        return self.use_lc and self.uses_dt

    def to_dict(self) -> dict:
        d = asdict(self)
        d["network"] = self.network.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def apply_ablations(self, ablate) -> "TrainConfig":
        """Return a copy with the named parts (st, dt, lu, lc) switched off."""
        cfg = copy.deepcopy(self)
        ablate = set(ablate or ())
        unknown = ablate - {"st", "dt", "lu", "lc"}
        if unknown:
            raise ValueError(f"unknown ablation(s) {sorted(unknown)}")
        st, dt = "st" not in ablate and cfg.uses_st, "dt" not in ablate and cfg.uses_dt
        cfg.teacher_mode = {(True, True): "dual", (True, False): "st", (False, True): "dt"}.get((st, dt), "none")
        cfg.use_lu = cfg.use_lu and "lu" not in ablate
        cfg.use_lc = cfg.use_lc and "lc" not in ablate
        return cfg


# --------------------------------------------------------------------------
# reproducibility and parameter utilities


def set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def build_model(cfg: NetworkConfig, seed: int) -> MSSANet:
    torch.manual_seed(seed)
    return MSSANet(cfg)


@contextlib.contextmanager
def batch_statistics(*models):
    """Normalize with batch statistics while leaving every BN buffer untouched.

    The student is trained in train mode, so teachers that label in eval mode
    see systematically different activations; matching the normalization keeps
    the consistency target unbiased.
    """
    bns = [m for net in models if net is not None for m in net.modules()
           if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    saved = [(m.training, m.track_running_stats) for m in bns]
    for m in bns:
        m.training, m.track_running_stats = True, False
    try:
        yield
    finally:
        for m, (training, track) in zip(bns, saved):
            m.training, m.track_running_stats = training, track


def _ema_tensors(model):
    return dict(model.named_parameters()) | dict(model.named_buffers())


@torch.no_grad()
def ema_update(teacher: torch.nn.Module, student: torch.nn.Module, alpha: float) -> None:
    """In place: ``p_t <- alpha * p_t + (1 - alpha) * p_s`` for every parameter.

    Floating-point buffers (BN running statistics) follow the same rule;
    integer buffers are copied.
    """
    t_all, s_all = _ema_tensors(teacher), _ema_tensors(student)
    if t_all.keys() != s_all.keys():
        raise ValueError("teacher and student have different structure")
    for name, t in t_all.items():
        s = s_all[name]
        if t.shape != s.shape:
            raise ValueError(f"{name}: shape {tuple(t.shape)} vs {tuple(s.shape)}")
        if t.is_floating_point():
            t.mul_(alpha).add_(s, alpha=1.0 - alpha)
        else:
            t.copy_(s)


def param_hash(model: torch.nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, v in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# augmentation


def _gaussian_kernels(sigmas: torch.Tensor, radius: int) -> torch.Tensor:
    x = torch.arange(-radius, radius + 1, dtype=torch.float32)
    k = torch.exp(-(x[None, :] ** 2) / (2.0 * sigmas[:, None] ** 2))
    return k / k.sum(dim=1, keepdim=True)


def gaussian_blur(x: torch.Tensor, sigmas: torch.Tensor) -> torch.Tensor:
    """Separable blur of each image in ``x`` (B, 1, H, W) with its own sigma."""
    b = x.shape[0]
    radius = max(1, int(math.ceil(3.0 * float(sigmas.max()))))
    k = _gaussian_kernels(sigmas, radius)
    y = x.reshape(1, b, *x.shape[-2:])
    y = F.pad(y, (radius, radius, radius, radius), mode="reflect")
    y = F.conv2d(y, k[:, None, None, :], groups=b)
    y = F.conv2d(y, k[:, None, :, None], groups=b)
    return y.reshape_as(x)


def _uniform(gen, n, lo, hi):
    return lo + (hi - lo) * torch.rand(n, generator=gen)


def weak_augment(x, gen, cfg: TrainConfig):
    return gaussian_blur(x, _uniform(gen, x.shape[0], *cfg.weak_blur))


def strong_augment(x, gen, cfg: TrainConfig):
    n = x.shape[0]
    bright = _uniform(gen, n, 1 - cfg.jitter, 1 + cfg.jitter).view(n, 1, 1, 1)
    contrast = _uniform(gen, n, 1 - cfg.jitter, 1 + cfg.jitter).view(n, 1, 1, 1)
    y = x * bright
    mean = y.mean(dim=(1, 2, 3), keepdim=True)
    y = ((y - mean) * contrast + mean).clamp(0.0, 1.0)
    return gaussian_blur(y, _uniform(gen, n, *cfg.strong_blur))


# --------------------------------------------------------------------------
# data


@dataclass
class TrainData:
    labeled_x: torch.Tensor
    labeled_y: torch.Tensor
    unlabeled_x: torch.Tensor
    val_x: torch.Tensor | None = None
    val_y: torch.Tensor | None = None

    @classmethod
    def from_manifest(cls, manifest: dict, label_rate=None) -> "TrainData":
        from .synthgen import labeled_count, parse_rate

        lx, ly = load_split(manifest, "labeled")
        ux, _ = load_split(manifest, "unlabeled")
        if label_rate is not None:
            n_train = len(lx) + len(ux)
            n_lab = labeled_count(n_train, label_rate)
            if parse_rate(label_rate) > parse_rate(manifest["labeling_rate"]) or n_lab > len(lx):
                raise ValueError(
                    f"label rate {label_rate} exceeds the dataset's labeling rate {manifest['labeling_rate']}"
                )
            # surplus labeled images join the unlabeled pool without their masks
            ux = np.concatenate([lx[n_lab:], ux]) if n_lab < len(lx) else ux
            lx, ly = lx[:n_lab], ly[:n_lab]
        vx, vy = load_split(manifest, "val")
        t = lambda a: None if a is None else torch.from_numpy(np.ascontiguousarray(a))[:, None]  # noqa: E731
        return cls(t(lx), t(ly), t(ux), t(vx), t(vy))


class BatchSampler:
    """Labeled indices drawn with replacement; unlabeled walked per epoch."""

    def __init__(self, n_labeled: int, n_unlabeled: int, cfg: TrainConfig, gen: torch.Generator):
        if n_labeled < 1:
            raise ValueError("need at least one labeled image")
        self.n_l, self.n_u = n_labeled, n_unlabeled
        self.b_l, self.b_u = cfg.batch_labeled, cfg.batch_unlabeled
        self.gen = gen
        self.epoch = -1
        self.order = torch.empty(0, dtype=torch.long)
        self.cursor = 0

    def labeled(self) -> torch.Tensor:
        return torch.randint(self.n_l, (self.b_l,), generator=self.gen)

    def unlabeled(self) -> tuple[torch.Tensor, int]:
        if self.n_u == 0:
            return torch.empty(0, dtype=torch.long), max(self.epoch, 0)
        if self.cursor >= len(self.order):
            self.epoch += 1
            self.order = torch.randperm(self.n_u, generator=self.gen)
            self.cursor = 0
        idx = self.order[self.cursor : self.cursor + self.b_u]
        self.cursor += self.b_u
        return idx, self.epoch

    def state_dict(self):
        return {"epoch": self.epoch, "order": self.order.clone(), "cursor": self.cursor}

    def load_state_dict(self, s):
        self.epoch, self.order, self.cursor = s["epoch"], s["order"], s["cursor"]


# --------------------------------------------------------------------------
# evaluation helpers


@torch.no_grad()
def predict(model: MSSANet, images, batch_size: int = 16) -> np.ndarray:
    """Eval-mode probabilities for (N, H, W) or (N, 1, H, W) images."""
    x = torch.as_tensor(np.asarray(images, dtype=np.float32))
    if x.ndim == 3:
        x = x[:, None]
    was_training = model.training
    model.eval()
    try:
        out = [model(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
    finally:
        model.train(was_training)
    return torch.cat(out)[:, 0].numpy() if out else np.zeros((0,) + tuple(x.shape[-2:]), np.float32)


def mean_dice(model: MSSANet, images, masks, threshold: float = 0.5) -> float:
    """Mean per-image set Dice in percent."""
    probs = predict(model, images)
    gts = np.asarray(masks)[:, 0] if np.asarray(masks).ndim == 4 else np.asarray(masks)
    return 100.0 * float(np.mean([pixel_metrics(p > threshold, g > 0.5)[0] for p, g in zip(probs, gts)]))


def infer(checkpoint, images, batch_size: int = 16) -> np.ndarray:
    """Dynamic-teacher inference from a checkpoint path (or loaded model)."""
    model = checkpoint if isinstance(checkpoint, MSSANet) else load_checkpoint(checkpoint)[0]
    x = np.asarray(images, dtype=np.float32)
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1] != model.cfg.input_channels:
        raise ValueError(f"images of shape {x.shape} do not fit a {model.cfg.input_channels}-channel network")
    k = model.cfg.min_divisor
    if x.shape[2] % k or x.shape[3] % k:
        raise ValueError(f"image size {x.shape[2:]} not divisible by {k}")
    return predict(model, x, batch_size)


# --------------------------------------------------------------------------
# static teacher pretraining


def _check_finite(t, values):
    bad = {k: v for k, v in values.items() if not math.isfinite(v)}
    if bad:
        raise FloatingPointError(f"non-finite loss at iteration {t}: {bad}")


def pretrain_static_teacher(data: TrainData, cfg: TrainConfig, log_path=None, iterations=None) -> MSSANet:
    """Supervised Dice training on the labeled images only."""
    if len(data.labeled_x) == 0:
        raise ValueError("labeled split is empty")
    iterations = cfg.pretrain_iterations if iterations is None else iterations
    set_determinism(cfg.seed)
    model = build_model(cfg.network, cfg.seed)
    lr = cfg.learning_rate if cfg.pretrain_learning_rate is None else cfg.pretrain_learning_rate
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    sampler = BatchSampler(len(data.labeled_x), 0, cfg, gen)
    fh = open(log_path, "w") if log_path else None
    try:
        model.train()
        for t in range(1, iterations + 1):
            idx = sampler.labeled()
            x = weak_augment(data.labeled_x[idx], gen, cfg)
            loss = dice_loss(model(x), data.labeled_y[idx])
            _check_finite(t, {"L_s": float(loss.detach())})
            opt.zero_grad()
            loss.backward()
            opt.step()
            if fh:
                rec = {"t": t, "L_s": float(loss.detach())}
                if data.val_x is not None and (t % cfg.val_every == 0 or t == iterations):
                    rec["val_dice"] = mean_dice(model, data.val_x, data.val_y, cfg.threshold)
                    log.info("pretrain t=%d L_s=%.4f val_dice=%.2f", t, rec["L_s"], rec["val_dice"])
                fh.write(json.dumps(rec) + "\n")
    finally:
        if fh:
            fh.close()
    for p in model.parameters():
        p.requires_grad_(False)
    return model.eval()


# --------------------------------------------------------------------------
# semi-supervised loop


@dataclass
class StepResult:
    t: int
    L_s: float
    L_u: float
    L_c: float
    lambda_c: float
    L_t: float
    T_c: int
    epoch: int
    decisions: list = field(default_factory=list)

    def record(self) -> dict:
        return {
            "t": self.t,
            "L_s": self.L_s,
            "L_u": self.L_u,
            "L_c": self.L_c,
            "lambda_c": self.lambda_c,
            "L_t": self.L_t,
            "T_c": self.T_c,
            "epoch": self.epoch,
        }


class Trainer:
    """Owns the three networks, the optimizer and all random state."""

    def __init__(self, cfg: TrainConfig, data: TrainData, static_teacher: MSSANet | None = None):
        self.cfg = cfg
        self.data = data
        if cfg.uses_st and static_teacher is None:
            raise ValueError(f"teacher_mode={cfg.teacher_mode!r} needs a static teacher")
        set_determinism(cfg.seed)
        if static_teacher is not None:
            self.st = copy.deepcopy(static_teacher).eval()
            for p in self.st.parameters():
                p.requires_grad_(False)
        else:
            self.st = None
        if self.st is not None and cfg.student_init == "static":
            self.student = copy.deepcopy(self.st)
        else:
            self.student = build_model(cfg.network, cfg.seed + 1)
        for p in self.student.parameters():
            p.requires_grad_(True)
        self.student.train()
        self.dt = copy.deepcopy(self.st if self.st is not None else self.student).eval()
        for p in self.dt.parameters():
            p.requires_grad_(False)
        self.opt = torch.optim.Adam(self.student.parameters(), lr=cfg.learning_rate)
        self.gen = torch.Generator().manual_seed(cfg.seed + 2)
        self.sampler = BatchSampler(len(data.labeled_x), len(data.unlabeled_x), cfg, self.gen)
        self.tc = apl.TcTracker()
        self.t = 0

    # -- pseudo labels ------------------------------------------------------

    def pseudo_labels(self, y_st, y_dt, idx, epoch):
        """Pseudo-label batch and per-image decision records."""
        cfg = self.cfg
        if not cfg.uses_dt:
            return y_st, []
        st_masks = [apl.binarize(y, cfg.threshold) for y in y_st[:, 0]]
        st_stats = [apl.prediction_stats(m, cfg.eps) for m in st_masks]
        tc = self.tc.update([s.component_count for s in st_stats], epoch)
        if cfg.pl_strategy in ("intersection", "union"):
            m_st = y_st > cfg.threshold
            m_dt = y_dt > cfg.threshold
            both = (m_st & m_dt) if cfg.pl_strategy == "intersection" else (m_st | m_dt)
            return both.float(), []
        switch = cfg.switch_epochs
        if switch is not None:
            return (y_st if epoch < switch else y_dt), []
        labels, records = [], []
        for k in range(len(y_st)):
            d = apl.select_pseudo_label(
                y_st[k, 0], y_dt[k, 0], tc, cfg.threshold, cfg.eps, cfg.gate, st_stats=st_stats[k]
            )
            labels.append(d.label)
            records.append(d.log_record(iter=self.t + 1, image_id=int(idx[k])))
        return torch.stack(labels)[:, None], records

    # -- one iteration ------------------------------------------------------

    def ssl_step(self, xl, yl, xu, idx_u=None, epoch: int = 0) -> StepResult:
        """One optimizer step on the student followed by the EMA update.

        ``xl``/``xu`` are raw images; augmentation happens here.
        """
        cfg = self.cfg
        gen = self.gen
        t = self.t + 1
        weights = LossWeights(cfg.lambda_u, cfg.ramp_scale, t, cfg.max_iterations)
        lam_c = weights.lambda_c

        xl_in = weak_augment(xl, gen, cfg)
        have_u = len(xu) > 0 and (cfg.lu_active or cfg.lc_active)
        decisions = []
        if have_u:
            xu_weak = weak_augment(xu, gen, cfg)
            xu_strong = strong_augment(xu, gen, cfg)
            # teachers see the same batch composition as the student
            if cfg.teacher_bn == "batch":
                norm, teacher_in, cut = batch_statistics(self.st, self.dt), torch.cat([xl_in, xu_weak]), len(xl)
            else:
                norm, teacher_in, cut = contextlib.nullcontext(), xu_weak, 0
            with torch.no_grad(), norm:
                y_st = self.st(teacher_in)[cut:] if cfg.uses_st else None
                y_dt = self.dt(teacher_in)[cut:] if cfg.uses_dt else None
            student_in = torch.cat([xl_in, xu_strong])
        else:
            student_in = xl_in
        out = self.student(student_in)
        out_l = out[: len(xl)]
        l_s = dice_loss(out_l, yl)
        zero = out.new_zeros(())
        l_u = l_c = zero
        if have_u:
            out_u = out[len(xl) :]
            if cfg.lu_active:
                idx = idx_u if idx_u is not None else torch.arange(len(xu))
                y_hat, decisions = self.pseudo_labels(y_st, y_dt, idx, epoch)
                l_u = dice_loss(out_u, y_hat)
            if cfg.lc_active:
                l_c = consistency_loss(out_u, y_dt)
        l_t = total_loss(l_s, l_u, l_c, weights)
        vals = {k: float(v.detach()) for k, v in (("L_s", l_s), ("L_u", l_u), ("L_c", l_c), ("L_t", l_t))}
        _check_finite(t, vals)

        self.opt.zero_grad()
        l_t.backward()
        self.opt.step()
        ema_update(self.dt, self.student, cfg.ema_decay)
        self.t = t
        return StepResult(
            t=t,
            L_s=vals["L_s"],
            L_u=vals["L_u"],
            L_c=vals["L_c"],
            lambda_c=lam_c,
            L_t=vals["L_t"],
            T_c=self.tc.value,
            epoch=epoch,
            decisions=decisions,
        )

    def next_batch(self):
        li = self.sampler.labeled()
        ui, epoch = self.sampler.unlabeled()
        return self.data.labeled_x[li], self.data.labeled_y[li], self.data.unlabeled_x[ui], ui, epoch

    def step(self) -> StepResult:
        xl, yl, xu, ui, epoch = self.next_batch()
        return self.ssl_step(xl, yl, xu, ui, epoch)

    # -- persistence --------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "student": self.student.state_dict(),
            "dt": self.dt.state_dict(),
            "st": self.st.state_dict() if self.st is not None else None,
            "opt": self.opt.state_dict(),
            "gen": self.gen.get_state(),
            "sampler": self.sampler.state_dict(),
            "tc": self.tc.state_dict(),
            "config": self.cfg.to_dict(),
        }

    def load_state_dict(self, s: dict) -> None:
        self.t = s["t"]
        self.student.load_state_dict(s["student"])
        self.dt.load_state_dict(s["dt"])
        if self.st is not None and s["st"] is not None:
            self.st.load_state_dict(s["st"])
        self.opt.load_state_dict(s["opt"])
        self.gen.set_state(s["gen"])
        self.sampler.load_state_dict(s["sampler"])
        self.tc.load_state_dict(s["tc"])

    def save_state(self, path) -> None:
        torch.save(self.state_dict(), path)

    def load_state(self, path) -> None:
        self.load_state_dict(torch.load(path, weights_only=False))


@dataclass
class TrainResult:
    final_val_dice: float | None
    best_val_dice: float | None
    best_iteration: int | None
    checkpoints: dict
    metrics_log: str
    seconds: float


def _truncate_log(path: Path, t: int) -> None:
    if not path.exists():
        return
    keep = []
    for ln in path.read_text().splitlines():
        rec = json.loads(ln)
        if rec.get("t", rec.get("iter", 0)) <= t:
            keep.append(ln)
    path.write_text("".join(ln + "\n" for ln in keep))


def train(data: TrainData, cfg: TrainConfig, out_dir, static_teacher: MSSANet | None = None, resume: bool = False) -> TrainResult:
    """Run the semi-supervised loop to ``cfg.max_iterations``.

    Writes ``logs/metrics.jsonl`` (one record per iteration), optional
    ``logs/decisions.jsonl``, ``logs/val.jsonl``, the final student / static /
    dynamic checkpoints, the best-validation dynamic checkpoint and a
    resumable ``state.pt``.
    """
    start = time.time()
    out = Path(out_dir)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    ck = out / "checkpoints"
    ck.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "logs" / "metrics.jsonl"
    decisions_path = out / "logs" / "decisions.jsonl"
    val_path = out / "logs" / "val.jsonl"
    state_path = ck / "state.pt"

    trainer = Trainer(cfg, data, static_teacher)
    best = {"dice": None, "t": None}
    mode = "w"
    if resume and state_path.exists():
        trainer.load_state(state_path)
        for p in (metrics_path, decisions_path, val_path):
            _truncate_log(p, trainer.t)
        best_path = ck / "best.json"
        if best_path.exists():
            best = json.loads(best_path.read_text())
        mode = "a"
        log.info("resumed at t=%d", trainer.t)

    have_val = data.val_x is not None and len(data.val_x) > 0
    final_dice = None
    with open(metrics_path, mode) as mfh, open(val_path, mode) as vfh:
        dfh = open(decisions_path, mode) if cfg.log_decisions else None
        try:
            while trainer.t < cfg.max_iterations:
                res = trainer.step()
                mfh.write(json.dumps(res.record()) + "\n")
                if dfh:
                    for rec in res.decisions:
                        dfh.write(json.dumps(rec) + "\n")
                t = res.t
                last = t == cfg.max_iterations
                if have_val and (t % cfg.val_every == 0 or last):
                    dice = mean_dice(trainer.dt, data.val_x, data.val_y, cfg.threshold)
                    vfh.write(json.dumps({"t": t, "val_dice": dice}) + "\n")
                    vfh.flush()
                    log.info("t=%d L_t=%.4f val_dice(DT)=%.2f", t, res.L_t, dice)
                    if best["dice"] is None or dice > best["dice"]:
                        best = {"dice": dice, "t": t}
                        save_checkpoint(ck / "dt_best.npz", trainer.dt, {"role": "DT", "t": t, "val_dice": dice})
                        (ck / "best.json").write_text(json.dumps(best))
                    if last:
                        final_dice = dice
                if t % cfg.checkpoint_every == 0 or last:
                    mfh.flush()
                    if dfh:
                        dfh.flush()
                    trainer.save_state(state_path)
        finally:
            if dfh:
                dfh.close()

    if final_dice is None and have_val:
        final_dice = mean_dice(trainer.dt, data.val_x, data.val_y, cfg.threshold)
    paths = {
        "dt": str(save_checkpoint(ck / "dt_final.npz", trainer.dt, {"role": "DT", "t": trainer.t})),
        "s": str(save_checkpoint(ck / "s_final.npz", trainer.student, {"role": "S", "t": trainer.t})),
    }
    if trainer.st is not None:
        paths["st"] = str(save_checkpoint(ck / "st.npz", trainer.st, {"role": "ST"}))
    if best["t"] is not None:
        paths["dt_best"] = str(ck / "dt_best.npz")
    return TrainResult(final_dice, best["dice"], best["t"], paths, str(metrics_path), time.time() - start)


def train_from_manifest(manifest_or_dir, cfg: TrainConfig, out_dir, st_checkpoint=None, resume=False) -> TrainResult:
    manifest = manifest_or_dir if isinstance(manifest_or_dir, dict) else load_manifest(manifest_or_dir)
    data = TrainData.from_manifest(manifest, cfg.label_rate)
    st = load_checkpoint(st_checkpoint)[0] if st_checkpoint else None
    return train(data, cfg, out_dir, st, resume=resume)
