"""Discriminative re-identification: baseline losses, teacher distillation,
and the joint online training step over real and synthesized crops.

Conventions: identity labels are 1-based (matching the identity memory);
class indices into logit/probability vectors are 0-based. Probability inputs
are clamped at 1e-12 inside the log, so degenerate but valid distributions
stay finite.
"""
from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from itertools import chain
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import PersonCrop
from .data.sampling import sample_training_pairs
from .detect import ConfigError, crops_to_batch
from .synthgan import (
    GanProfile,
    PatchDiscriminator,
    SceneSynthesisModel,
    adversarial_losses,
    generator_adversarial_loss,
    l1_code_loss,
    load_checkpoint,
    save_checkpoint,
)

_LOG_EPS = 1e-12


class TrainingDivergedError(RuntimeError):
    """A loss went non-finite; carries the last good checkpoint path."""

    def __init__(self, step: int, component: str, last_good: Optional[str]):
        self.step = step
        self.component = component
        self.last_good = last_good
        hint = f"; last good checkpoint: {last_good}" if last_good else ""
        super().__init__(f"non-finite {component} at step {step}{hint}")


def softmax(logits: torch.Tensor) -> torch.Tensor:
    """Probabilities over the last dimension, max-shifted for stability."""
    shifted = logits - logits.max(dim=-1, keepdim=True).values
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def cross_entropy(probs: torch.Tensor, true_class) -> torch.Tensor:
    """-log p[true_class], batch mean for 2-d inputs. true_class is 0-based."""
    if probs.ndim == 1:
        idx = int(true_class)
        if not (0 <= idx < probs.shape[0]):
            raise IndexError(f"class {idx} out of range for {probs.shape[0]} classes")
        return -torch.log(torch.clamp(probs[idx], min=_LOG_EPS))
    if probs.ndim == 2:
        idx = torch.as_tensor(true_class, dtype=torch.long)
        if idx.ndim == 0:
            idx = idx.expand(probs.shape[0])
        if int(idx.min()) < 0 or int(idx.max()) >= probs.shape[1]:
            raise IndexError(f"class index out of range for {probs.shape[1]} classes")
        picked = probs[torch.arange(probs.shape[0]), idx]
        return -torch.log(torch.clamp(picked, min=_LOG_EPS)).mean()
    raise ValueError("probs must be 1-d or 2-d")


def oim_loss(
    x: torch.Tensor, centers: torch.Tensor, labels, tau: float
) -> torch.Tensor:
    """Memory-center classification loss over all centers.

    -log of the temperature-scaled softmax probability of the true center.
    `labels` are 1-based identity labels; batch inputs reduce to the mean.
    """
    if tau <= 0:
        raise ConfigError(f"temperature tau={tau} must be > 0")
    single = x.ndim == 1
    xb = x[None, :] if single else x
    lab = torch.as_tensor(
        [labels] if single or np.isscalar(labels) else labels, dtype=torch.long
    )
    if lab.numel() == 1 and xb.shape[0] > 1:
        lab = lab.expand(xb.shape[0])
    if int(lab.min()) < 1 or int(lab.max()) > centers.shape[0]:
        raise IndexError(f"label out of range for {centers.shape[0]} centers")
    logits = (xb @ centers.t()) / tau
    logp = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    return -logp[torch.arange(xb.shape[0]), lab - 1].mean()


def synth_id_loss(student_probs: torch.Tensor, appearance_labels) -> torch.Tensor:
    """Identity loss on a synthesized crop: the target is the identity that
    provided the appearance code. Labels are 1-based."""
    return cross_entropy(student_probs, _to_index(appearance_labels))


def structure_id_loss(student_probs: torch.Tensor, structure_labels) -> torch.Tensor:
    """Structure-consistency identity loss on a synthesized crop: the target
    is the identity that provided the structure code. Labels are 1-based."""
    return cross_entropy(student_probs, _to_index(structure_labels))


def _to_index(labels):
    if np.isscalar(labels):
        return int(labels) - 1
    return torch.as_tensor(labels, dtype=torch.long) - 1


def kl_distill(p_student: torch.Tensor, q_teacher: torch.Tensor) -> torch.Tensor:
    """KL(q || p) = sum_m q(m) log(q(m)/p(m)), batch mean for 2-d inputs.

    Terms with q(m) = 0 contribute zero; p is clamped at 1e-12.
    """
    if p_student.shape != q_teacher.shape:
        raise ValueError("student and teacher distributions must align")
    p = torch.clamp(p_student, min=_LOG_EPS)
    terms = torch.where(
        q_teacher > 0,
        q_teacher * (torch.log(torch.clamp(q_teacher, min=_LOG_EPS)) - torch.log(p)),
        torch.zeros_like(q_teacher),
    )
    per_sample = terms.sum(dim=-1)
    return per_sample.mean()


class TeacherNet(nn.Module):
    """Small convolutional classifier used as the frozen soft-label source."""

    def __init__(self, n_classes: int, width: int = 16):
        super().__init__()
        widths = [width, width * 2, width * 4, width * 4]
        layers: list[nn.Module] = []
        prev = 3
        for c in widths:
            layers += [nn.Conv2d(prev, c, 3, stride=2, padding=1), nn.ReLU(inplace=True)]
            prev = c
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(prev, n_classes)
        self.n_classes = n_classes

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.features(x).mean(dim=(2, 3)))

    def soft_labels(self, x: torch.Tensor) -> torch.Tensor:
        """Probabilities over identities. Parameters stay frozen, but the
        graph is kept so losses on synthetic inputs can reach the generator
        through the teacher."""
        return softmax(self(x))

    def checksum(self) -> float:
        """Cheap immutability probe over all parameters."""
        with torch.no_grad():
            return float(sum(p.double().abs().sum() for p in self.parameters()))


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def train_teacher(
    crops: Sequence[PersonCrop],
    n_identities: int,
    iterations: int = 300,
    seed: int = 0,
    lr: float = 1e-3,
    batch_size: int = 16,
    width: int = 16,
    log_fn: Optional[Callable[[int, float], None]] = None,
) -> TeacherNet:
    """Train the soft-label classifier on real labeled crops, then freeze it."""
    labeled = [c for c in crops if isinstance(c.identity, int)]
    if not labeled:
        raise ValueError("teacher training needs labeled crops")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    net = TeacherNet(n_identities, width=width)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    for it in range(iterations):
        idx = rng.choice(len(labeled), size=min(batch_size, len(labeled)), replace=False)
        batch = [labeled[i] for i in idx]
        logits = net(crops_to_batch(batch))
        target = torch.tensor([c.identity - 1 for c in batch], dtype=torch.long)
        loss = F.cross_entropy(logits, target)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log_fn is not None and (it % 50 == 0 or it == iterations - 1):
            log_fn(it, float(loss.detach()))
    return freeze(net)


def pretrain_appearance(
    app_encoder: nn.Module,
    student_head: nn.Module,
    crops: Sequence[PersonCrop],
    iterations: int = 300,
    seed: int = 0,
    lr: float = 1e-3,
    batch_size: int = 16,
) -> None:
    """Warm up the appearance encoder (and its head) on the real-crop identity
    task before joint training, standing in for a pretrained backbone. Without
    it the appearance codes start uninformative, which both starves the
    synthesized-image identity losses of gradient signal and makes early code
    reconstruction trivially easy."""
    labeled = [c for c in crops if isinstance(c.identity, int)]
    if not labeled:
        raise ValueError("appearance warm-up needs labeled crops")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 104729]))
    opt = torch.optim.Adam(
        chain(app_encoder.parameters(), student_head.parameters()), lr=lr
    )
    for _ in range(iterations):
        idx = rng.choice(len(labeled), size=min(batch_size, len(labeled)), replace=False)
        batch = [labeled[i] for i in idx]
        logits = student_head(app_encoder(crops_to_batch(batch)))
        target = torch.tensor([c.identity - 1 for c in batch], dtype=torch.long)
        loss = F.cross_entropy(logits, target)
        opt.zero_grad()
        loss.backward()
        opt.step()


class StudentHead(nn.Module):
    """Identity classifier over the spatially pooled appearance code."""

    def __init__(self, app_channels: int, n_classes: int):
        super().__init__()
        self.fc = nn.Linear(app_channels, n_classes)
        self.n_classes = n_classes

    def forward(self, app_code: torch.Tensor) -> torch.Tensor:
        return self.fc(app_code.mean(dim=(2, 3)))


class StructureHead(nn.Module):
    """Identity classifier over the spatially pooled structure code."""

    def __init__(self, str_channels: int, n_classes: int):
        super().__init__()
        self.fc = nn.Linear(str_channels, n_classes)
        self.n_classes = n_classes

    def forward(self, str_code: torch.Tensor) -> torch.Tensor:
        return self.fc(str_code.mean(dim=(2, 3)))


def embed(app_encoder: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Unit-norm retrieval embedding: spatially pooled appearance code."""
    with torch.no_grad():
        code = app_encoder(x)
        return F.normalize(code.mean(dim=(2, 3)), dim=1)


def embed_crops(
    app_encoder: nn.Module, crops: Sequence[PersonCrop], batch_size: int = 32
) -> np.ndarray:
    """Embed a crop list to a float32 (N, C) array."""
    outs = []
    for start in range(0, len(crops), batch_size):
        chunk = crops[start : start + batch_size]
        outs.append(embed(app_encoder, crops_to_batch(chunk)).numpy())
    return np.concatenate(outs, axis=0).astype(np.float32)


@dataclass(frozen=True)
class LossWeights:
    """Relative weights of the joint objective's components. Reconstruction is
    up-weighted to stabilize early synthesis; the structure-identity term is
    down-weighted because it targets fine-grained cues."""

    recon: float = 5.0
    id: float = 1.0
    adv: float = 1.0
    kl: float = 1.0
    loc: float = 0.5
    prim: float = 1.0

    def __post_init__(self) -> None:
        for name in ("recon", "id", "adv", "kl", "loc", "prim"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be >= 0")


REPORT_KEYS = (
    "recon_app", "recon_str", "adv_d", "adv_g",
    "id_prim", "id_synth", "kl", "loc", "total",
)


class JointTrainer:
    """One synchronized generative + discriminative update per call.

    The appearance encoder trains with SGD (lr 0.003, momentum 0.9); the
    structure encoder, decoder, heads, and discriminator with Adam (lr 1e-4,
    betas (0, 0.999)). The discriminator takes its sub-step on detached
    fakes before the generator/student sub-step. Owns all parameter state;
    calls must be serialized.
    """

    def __init__(
        self,
        model: SceneSynthesisModel,
        discriminator: PatchDiscriminator,
        student_head: StudentHead,
        structure_head: StructureHead,
        teacher: Optional[TeacherNet],
        weights: LossWeights = LossWeights(),
        lr_app: float = 0.003,
        lr_adam: float = 1e-4,
    ):
        if weights.kl > 0 and teacher is None:
            raise ConfigError("kl weight > 0 requires a teacher")
        if teacher is not None and any(p.requires_grad for p in teacher.parameters()):
            raise ConfigError("teacher must be frozen before joint training")
        self.model = model
        self.discriminator = discriminator
        self.student_head = student_head
        self.structure_head = structure_head
        self.teacher = teacher
        self.weights = weights
        self.opt_app = torch.optim.SGD(
            model.app_encoder.parameters(), lr=lr_app, momentum=0.9
        )
        self.opt_gen = torch.optim.Adam(
            chain(
                model.str_encoder.parameters(),
                model.decoder.parameters(),
                student_head.parameters(),
                structure_head.parameters(),
            ),
            lr=lr_adam,
            betas=(0.0, 0.999),
        )
        self.opt_disc = torch.optim.Adam(
            discriminator.parameters(), lr=lr_adam, betas=(0.0, 0.999)
        )

    def train_step(
        self,
        x_i: torch.Tensor,
        x_j: torch.Tensor,
        y_i: torch.Tensor,
        y_j: torch.Tensor,
    ) -> dict[str, float]:
        """Synthesize both cross-combinations and apply one update.

        x_i provides appearance for x_ji (posed like x_j) and x_j provides
        appearance for x_ij (posed like x_i). Returns every loss component as
        a float, zeros for components whose weight is zero.
        """
        if x_i.shape != x_j.shape:
            raise ValueError("paired batches must share shape")
        w = self.weights
        report = {k: 0.0 for k in REPORT_KEYS}
        zero = x_i.new_zeros(())

        need_synthesis = max(w.recon, w.id, w.adv, w.kl, w.loc) > 0
        a_i = self.model.app_encoder(x_i)
        a_j = self.model.app_encoder(x_j)
        if need_synthesis:
            s_i = self.model.str_encoder(x_i)
            s_j = self.model.str_encoder(x_j)
            x_ji = self.model.decode(a_i, s_j)
            x_ij = self.model.decode(a_j, s_i)

        if w.adv > 0:
            d_real = self.discriminator(torch.cat([x_i, x_j]))
            d_fake = self.discriminator(torch.cat([x_ji, x_ij]).detach())
            d_loss, _ = adversarial_losses(d_real, d_fake)
            self.opt_disc.zero_grad()
            d_loss.backward()
            self.opt_disc.step()
            report["adv_d"] = float(d_loss.detach())

        total = zero
        # encode the synthesized batch once; reconstruction, identity,
        # distillation and structure-identity terms all reuse these codes
        if max(w.recon, w.id, w.kl) > 0:
            a_syn = self.model.app_encoder(torch.cat([x_ji, x_ij]))
        if max(w.recon, w.loc) > 0:
            s_syn = self.model.str_encoder(torch.cat([x_ji, x_ij]))
        if w.recon > 0:
            recon_app = l1_code_loss(a_syn, torch.cat([a_i, a_j]))
            recon_str = l1_code_loss(s_syn, torch.cat([s_j, s_i]))
            total = total + w.recon * (recon_app + recon_str)
            report["recon_app"] = float(recon_app.detach())
            report["recon_str"] = float(recon_str.detach())
        if w.adv > 0:
            g_adv = generator_adversarial_loss(self.discriminator(torch.cat([x_ji, x_ij])))
            total = total + w.adv * g_adv
            report["adv_g"] = float(g_adv.detach())
        if w.prim > 0:
            probs_real = softmax(
                self.student_head(torch.cat([a_i, a_j]))
            )
            id_prim = cross_entropy(probs_real, torch.cat([y_i, y_j]) - 1)
            total = total + w.prim * id_prim
            report["id_prim"] = float(id_prim.detach())
        if max(w.id, w.kl) > 0:
            probs_syn = softmax(self.student_head(a_syn))
        if w.id > 0:
            id_synth = synth_id_loss(probs_syn, torch.cat([y_i, y_j]))
            total = total + w.id * id_synth
            report["id_synth"] = float(id_synth.detach())
        if w.kl > 0:
            q = self.teacher.soft_labels(torch.cat([x_ji, x_ij]))
            kl = kl_distill(probs_syn, q)
            total = total + w.kl * kl
            report["kl"] = float(kl.detach())
        if w.loc > 0:
            probs_loc = softmax(self.structure_head(s_syn))
            loc = structure_id_loss(probs_loc, torch.cat([y_j, y_i]))
            total = total + w.loc * loc
            report["loc"] = float(loc.detach())

        if total.requires_grad:
            self.opt_app.zero_grad()
            self.opt_gen.zero_grad()
            total.backward()
            self.opt_gen.step()
            self.opt_app.step()
        report["total"] = float(total.detach())
        return report

    def sections(self) -> dict[str, dict]:
        out = {
            "app_encoder": self.model.app_encoder.state_dict(),
            "str_encoder": self.model.str_encoder.state_dict(),
            "decoder": self.model.decoder.state_dict(),
            "discriminator": self.discriminator.state_dict(),
            "student_head": self.student_head.state_dict(),
            "structure_head": self.structure_head.state_dict(),
            "opt_app": self.opt_app.state_dict(),
            "opt_gen": self.opt_gen.state_dict(),
            "opt_disc": self.opt_disc.state_dict(),
        }
        if self.teacher is not None:
            out["teacher"] = self.teacher.state_dict()
        return out

    def load_sections(self, sections: dict[str, dict]) -> None:
        self.model.app_encoder.load_state_dict(sections["app_encoder"])
        self.model.str_encoder.load_state_dict(sections["str_encoder"])
        self.model.decoder.load_state_dict(sections["decoder"])
        self.discriminator.load_state_dict(sections["discriminator"])
        self.student_head.load_state_dict(sections["student_head"])
        self.structure_head.load_state_dict(sections["structure_head"])
        self.opt_app.load_state_dict(sections["opt_app"])
        self.opt_gen.load_state_dict(sections["opt_gen"])
        self.opt_disc.load_state_dict(sections["opt_disc"])
        if self.teacher is not None and "teacher" in sections:
            self.teacher.load_state_dict(sections["teacher"])
            freeze(self.teacher)


@dataclass
class JointTrainingResult:
    trainer: JointTrainer
    profile: GanProfile
    iterations_done: int
    log_path: Optional[Path] = None
    checkpoint_path: Optional[Path] = None
    first_logged: dict[str, float] = field(default_factory=dict)
    last_logged: dict[str, float] = field(default_factory=dict)


def _epoch_batches(crops, batch_pairs: int, seed: int, epoch: int):
    epoch_seed = int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])
    return sample_training_pairs(crops, batch_pairs, epoch_seed)


def pairs_to_tensors(
    pairs: Sequence[tuple[PersonCrop, PersonCrop]]
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    x_i = crops_to_batch([p[0] for p in pairs])
    x_j = crops_to_batch([p[1] for p in pairs])
    y_i = torch.tensor([p[0].identity for p in pairs], dtype=torch.long)
    y_j = torch.tensor([p[1].identity for p in pairs], dtype=torch.long)
    return x_i, x_j, y_i, y_j


def run_joint_training(
    crops: Sequence[PersonCrop],
    n_identities: int,
    profile: GanProfile,
    weights: LossWeights = LossWeights(),
    iterations: int = 1000,
    batch_pairs: int = 8,
    seed: int = 0,
    out_dir: Optional[str | Path] = None,
    teacher: Optional[TeacherNet] = None,
    teacher_iterations: int = 300,
    warmup_iterations: int = 300,
    lr_app: float = 0.003,
    lr_adam: float = 1e-4,
    checkpoint_every: int = 500,
    resume_from: Optional[str | Path] = None,
    log_fn: Optional[Callable[[int, dict], None]] = None,
    log_every: int = 50,
) -> JointTrainingResult:
    """Run the joint loop over an up-front crop pool.

    Batches are a pure function of (seed, step), so a resumed run replays the
    exact schedule. Writes one CSV row per step when out_dir is given, and a
    checkpoint every `checkpoint_every` steps plus a final one. A non-finite
    loss aborts with a pointer to the last good checkpoint.
    """
    labeled = [c for c in crops if isinstance(c.identity, int)]
    if not labeled:
        raise ValueError("joint training needs labeled crops")
    torch.manual_seed(seed)
    if teacher is None and weights.kl > 0:
        teacher = train_teacher(
            labeled, n_identities, iterations=teacher_iterations, seed=seed
        )
    model = SceneSynthesisModel(profile)
    student_head = StudentHead(profile.app_channels, n_identities)
    if resume_from is None and warmup_iterations > 0:
        pretrain_appearance(
            model.app_encoder, student_head, labeled,
            iterations=warmup_iterations, seed=seed,
        )
    trainer = JointTrainer(
        model,
        PatchDiscriminator(profile),
        student_head,
        StructureHead(profile.str_channels, n_identities),
        teacher,
        weights,
        lr_app=lr_app,
        lr_adam=lr_adam,
    )

    start = 0
    if resume_from is not None:
        payload = load_checkpoint(resume_from, expect_profile=profile.name)
        trainer.load_sections(payload["sections"])
        start = payload["metadata"]["iteration"]
        torch.set_rng_state(payload["metadata"]["torch_rng"])

    log_path = checkpoint_dir = None
    writer = log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        log_path = out_dir / "logs" / "train_gan.csv"
        checkpoint_dir = out_dir / "checkpoints"
        log_path.parent.mkdir(parents=True, exist_ok=True)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
        fresh = start == 0 or not log_path.exists()
        log_file = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(log_file, lineterminator="\n")
        if fresh:
            writer.writerow(
                ["step", *REPORT_KEYS, "lr_app", "lr_gen", "wall_time_s"]
            )

    batches_per_epoch = None
    epoch = -1
    batches: list = []
    last_good: Optional[Path] = None
    first_logged: dict[str, float] = {}
    report: dict[str, float] = {}
    t0 = time.monotonic()
    try:
        for step in range(start, iterations):
            if batches_per_epoch is None:
                batches = _epoch_batches(labeled, batch_pairs, seed, 0)
                batches_per_epoch = len(batches)
                epoch = 0
            e, b = divmod(step, batches_per_epoch)
            if e != epoch:
                batches = _epoch_batches(labeled, batch_pairs, seed, e)
                epoch = e
            x_i, x_j, y_i, y_j = pairs_to_tensors(batches[b])
            report = trainer.train_step(x_i, x_j, y_i, y_j)
            for key, value in report.items():
                if not np.isfinite(value):
                    raise TrainingDivergedError(
                        step, key, str(last_good) if last_good else None
                    )
            if not first_logged:
                first_logged = dict(report)
            if writer is not None:
                writer.writerow(
                    [step]
                    + [f"{report[k]:.6f}" for k in REPORT_KEYS]
                    + [
                        f"{trainer.opt_app.param_groups[0]['lr']:.6g}",
                        f"{trainer.opt_gen.param_groups[0]['lr']:.6g}",
                        f"{time.monotonic() - t0:.3f}",
                    ]
                )
            if log_fn is not None and (step % log_every == 0 or step == iterations - 1):
                log_fn(step, report)
            if checkpoint_dir is not None and (
                (step + 1) % checkpoint_every == 0 or step == iterations - 1
            ):
                tag = "final" if step == iterations - 1 else f"{step + 1:06d}"
                path = checkpoint_dir / f"gan_{tag}.pt"
                save_checkpoint(
                    path,
                    profile,
                    trainer.sections(),
                    metadata={
                        "iteration": step + 1,
                        "torch_rng": torch.get_rng_state(),
                        "n_identities": n_identities,
                        "weights": asdict(weights),
                    },
                )
                last_good = path
    finally:
        if log_file is not None:
            log_file.close()

    return JointTrainingResult(
        trainer=trainer,
        profile=profile,
        iterations_done=iterations,
        log_path=log_path,
        checkpoint_path=last_good,
        first_logged=first_logged,
        last_logged=dict(report),
    )
