"""Two-stage training: facial-motion cycle (stage 1), identity cycle (stage 2)."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import Config, dump_config
from .dataset import FrameIndex, PairBatchStream, sample_batch, scan_corpus
from .losses import LossReport, LossWeights, loss_expression, loss_flow, loss_identity, loss_margin
from .nets import FaceCycle, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class NonFiniteLoss(FloatingPointError):
    pass


def loss_weights(cfg: Config) -> LossWeights:
    c = cfg.loss
    return LossWeights(c.lambda_perc, c.alpha_margin, c.flow, c.expression, c.identity, c.margin)


@dataclass
class Stage1Outputs:
    fw: torch.Tensor
    bw: torch.Tensor
    fw_t: torch.Tensor
    bw_t: torch.Tensor
    neutral: torch.Tensor
    neutral_t: torch.Tensor
    recon: torch.Tensor
    recon_t: torch.Tensor


@dataclass
class Stage2Outputs:
    neutral1: torch.Tensor
    neutral2: torch.Tensor
    mean1: torch.Tensor
    mean2: torch.Tensor
    recon1: torch.Tensor
    recon2: torch.Tensor


def stage1_forward(model: FaceCycle, face, face_t, w: LossWeights):
    """Facial-motion cycle on a same-identity pair; returns (report, outputs)."""
    fw, bw = model.flows(face)
    fw_t, bw_t = model.flows(face_t)
    with torch.no_grad():
        feats = model.extract_features(face, deep=True)
        feats_t = model.extract_features(face_t, deep=True)
    neutral = model.de_expression(face, fw, feats)
    neutral_t = model.de_expression(face_t, fw_t, feats_t)
    # swap: each neutral face is re-expressed with the other image's backward flow
    recon = model.re_expression(neutral_t, bw)
    recon_t = model.re_expression(neutral, bw_t)

    flow_term = loss_flow(face, fw) + loss_flow(face_t, fw_t)
    exp = loss_expression(model.vgg, face, face_t, recon, recon_t, w, (feats, feats_t))
    terms = {"flow": flow_term, "exp_l1": exp.terms["l1"], "exp_perc": exp.terms["perc"]}
    weights = {"flow": w.flow, "exp_l1": w.expression, "exp_perc": w.expression * w.lambda_perc}
    total = sum(weights[k] * v for k, v in terms.items())
    out = Stage1Outputs(fw, bw, fw_t, bw_t, neutral, neutral_t, recon, recon_t)
    return LossReport(terms, total, weights), out


def stage2_forward(model: FaceCycle, face1, face2, w: LossWeights):
    """Identity cycle on a cross-identity pair; stage-1 nets run without gradients."""
    with torch.no_grad():
        neutral1 = model.de_expression(face1, model.flows(face1)[0])
        neutral2 = model.de_expression(face2, model.flows(face2)[0])
    code1 = model.encode_identity(face1)
    code2 = model.encode_identity(face2)
    mean1 = model.de_identity(neutral1, code1)
    mean2 = model.de_identity(neutral2, code2)
    # re-identity of the other identity's mean face
    recon1 = model.re_identity(mean2, code1)
    recon2 = model.re_identity(mean1, code2)

    ident = loss_identity(model.vgg, neutral1, neutral2, recon1, recon2, w)
    margin = loss_margin(mean1, neutral1, w.alpha_margin, per_sample=True) + loss_margin(
        mean2, neutral2, w.alpha_margin, per_sample=True
    )
    terms = {"id_l1": ident.terms["l1"], "id_perc": ident.terms["perc"], "margin": margin}
    weights = {"id_l1": w.identity, "id_perc": w.identity * w.lambda_perc, "margin": w.margin}
    total = sum(weights[k] * v for k, v in terms.items())
    out = Stage2Outputs(neutral1, neutral2, mean1, mean2, recon1, recon2)
    return LossReport(terms, total, weights), out


def _optimize(report: LossReport, optimizer, params, grad_clip: float, dump_path=None, batch=None):
    if not torch.isfinite(report.total):
        if dump_path is not None:
            torch.save({"batch": batch, "terms": report.values()}, dump_path)
        raise NonFiniteLoss(f"non-finite loss {report.values()}; batch dumped to {dump_path}")
    optimizer.zero_grad(set_to_none=True)
    report.total.backward()
    norm = torch.nn.utils.clip_grad_norm_(params, grad_clip) if grad_clip > 0 else None
    optimizer.step()
    if norm is not None and norm > grad_clip:
        log.info("gradient norm %.3g clipped to %.3g", float(norm), grad_clip)
        return float(norm), True
    return (float(norm) if norm is not None else None), False


def stage1_step(model, optimizer, face, face_t, w: LossWeights, grad_clip: float = 10.0, dump_path=None):
    """One optimizer update of the stage-1 subnetworks."""
    report, _ = stage1_forward(model, face, face_t, w)
    norm, clipped = _optimize(report, optimizer, list(model.stage_parameters(1)), grad_clip, dump_path, (face, face_t))
    report.extra = {"grad_norm": norm, "clipped": clipped}
    return report


def stage2_step(model, optimizer, face1, face2, w: LossWeights, grad_clip: float = 10.0, dump_path=None):
    report, _ = stage2_forward(model, face1, face2, w)
    norm, clipped = _optimize(report, optimizer, list(model.stage_parameters(2)), grad_clip, dump_path, (face1, face2))
    report.extra = {"grad_norm": norm, "clipped": clipped}
    return report


def lr_at(epoch: int, total_epochs: int, lr0: float, drop_factor: float) -> float:
    """Initial rate until half of the epochs (rounded down), then divided once."""
    return lr0 / drop_factor if epoch >= total_epochs // 2 else lr0


def make_optimizer(model: FaceCycle, cfg: Config):
    t = cfg.train
    return torch.optim.Adam(model.stage_parameters(t.stage), lr=t.lr, betas=(t.adam_beta1, t.adam_beta2))


def build_model(cfg: Config) -> FaceCycle:
    m = cfg.model
    return FaceCycle(m.d_exp, m.d_id, cfg.data.image_size, m.backbone_weights)


class Trainer:
    """Owns the model, optimizer, sampler RNG and the metric log of one stage."""

    def __init__(self, cfg: Config, out_dir, corpus=None):
        cfg.train.validate()
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        t = cfg.train
        records = corpus if corpus is not None else scan_corpus(cfg.data.corpus_root)
        self.index = FrameIndex(records, cfg.data.image_size, cache=cfg.data.cache_images)
        if t.stage == 2 and len(self.index.identities) < 2:
            raise ValueError("stage 2 needs a corpus with at least two identities")

        torch.manual_seed(t.seed)
        self.rng = np.random.default_rng(t.seed)
        self.step = 0
        if t.resume:
            self.model, payload = load_checkpoint(t.resume, cfg.model.backbone_weights)
            if payload["meta"]["stage"] != t.stage:
                raise ValueError(f"resume checkpoint is stage {payload['meta']['stage']}, config is stage {t.stage}")
        else:
            payload = None
            if t.stage == 2:
                if not Path(t.stage1_checkpoint).exists():
                    raise FileNotFoundError(f"stage-1 checkpoint {t.stage1_checkpoint} not found")
                self.model, s1 = load_checkpoint(t.stage1_checkpoint, cfg.model.backbone_weights)
                if s1["meta"]["stage"] < 1:
                    raise ValueError("stage-1 checkpoint has no trained stage-1 networks")
            else:
                self.model = build_model(cfg)
        self.model.set_stage(t.stage)
        self.model.train()
        self.optimizer = make_optimizer(self.model, cfg)
        if payload is not None:
            self.optimizer.load_state_dict(payload["optimizer"])
            self.step = payload["meta"]["step"]
            self.rng.bit_generator.state = payload["rng"]
            torch.set_rng_state(payload["torch_rng"])
        self.weights = loss_weights(cfg)
        n_frames = len(self.index.records)
        self.steps_per_epoch = t.steps_per_epoch or max(1, n_frames // t.batch_size)
        self.total_steps = t.max_steps or t.epochs * self.steps_per_epoch
        self.log_path = self.out_dir / f"metrics_stage{t.stage}.jsonl"
        self._loader = None

    def header(self) -> dict:
        return {
            "header": True,
            "stage": self.cfg.train.stage,
            "config": self.cfg.flat(),
            "steps_per_epoch": self.steps_per_epoch,
            "total_steps": self.total_steps,
            "corpus": {
                "identities": len(self.index.identities),
                "clips": len(self.index.clips),
                "frames": len(self.index.records),
            },
        }

    def current_lr(self) -> float:
        t = self.cfg.train
        epoch = self.step // self.steps_per_epoch
        return lr_at(epoch, t.epochs, t.lr, t.lr_drop_factor)

    def _next_batch(self):
        t = self.cfg.train
        if self.cfg.data.workers <= 0:
            a, b, _ = sample_batch(self.index, self.rng, t.stage, t.batch_size, self.cfg.data.flip_probability)
            return a, b
        if self._loader is None:
            stream = PairBatchStream(self.index.records, self.cfg.data.image_size, t.stage, t.batch_size,
                                     self.cfg.data.flip_probability, t.seed, self.step)
            # prefetch_factor bounds the queue between workers and the training loop
            self._loader = iter(torch.utils.data.DataLoader(
                stream, batch_size=None, num_workers=self.cfg.data.workers, prefetch_factor=2))
        return next(self._loader)

    def train_step(self) -> LossReport:
        t = self.cfg.train
        lr = self.current_lr()
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        a, b = self._next_batch()
        step_fn = stage1_step if t.stage == 1 else stage2_step
        dump = self.out_dir / f"nonfinite_step{self.step}.pt"
        report = step_fn(self.model, self.optimizer, a, b, self.weights, t.grad_clip, dump)
        self.step += 1
        report.extra.update(lr=lr, epoch=(self.step - 1) // self.steps_per_epoch)
        return report

    def checkpoint(self, name: str) -> Path:
        extra = {
            "optimizer": self.optimizer.state_dict(),
            "rng": self.rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
            "config": self.cfg.flat(),
        }
        return save_checkpoint(self.out_dir / name, self.model, self.cfg.train.stage, self.step, extra)

    def run(self, until: int | None = None, callback=None) -> Path:
        """Train to ``until`` (default: the configured length); return the final checkpoint."""
        until = self.total_steps if until is None else min(until, self.total_steps)
        t = self.cfg.train
        mode = "a" if self.step > 0 and self.log_path.exists() else "w"
        with open(self.log_path, mode) as fh:
            if mode == "w":
                fh.write(json.dumps(self.header(), sort_keys=True) + "\n")
            started = time.time()
            while self.step < until:
                report = self.train_step()
                fh.write(report.to_json(self.step, t.stage, **report.extra) + "\n")
                fh.flush()
                if callback is not None:
                    callback(self, report)
                if self.step % t.checkpoint_every == 0:
                    self.checkpoint("last.pt")
                if self.step % 50 == 0:
                    log.info("stage %d step %d/%d total %.4f (%.1fs)", t.stage, self.step, self.total_steps,
                             float(report.total.detach()), time.time() - started)
        path = self.checkpoint("last.pt")
        if self.step >= self.total_steps:
            path = self.checkpoint(f"stage{t.stage}_final.pt")
        return path


def run_training(cfg: Config, out_dir) -> Path:
    """Validate, train the configured stage and return the final checkpoint path."""
    cfg.train.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(dump_config(cfg))
    trainer = Trainer(cfg, out_dir)
    return trainer.run()


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    mse = float((a - b).pow(2).mean())
    return math.inf if mse == 0 else 10 * math.log10(1.0 / mse)
