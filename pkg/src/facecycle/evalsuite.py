"""Linear-protocol probes and cosine-similarity verification on frozen codes."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.metrics import roc_curve
from sklearn.model_selection import KFold

from .dataset import load_face

log = logging.getLogger(__name__)

TASKS = ("expression_classify", "pose_regress")
POSE_COLUMNS = ("yaw", "pitch", "roll")

# Reported at VoxCeleb scale; kept only as reference metadata in reports.
REFERENCE_RESULTS = {
    "fer2013_accuracy": 48.76,
    "rafdb_accuracy": 71.01,
    "aflw2000_mae": {"yaw": 11.70, "pitch": 12.76, "roll": 12.94, "mae": 12.47},
    "lfw_accuracy": 73.72,
    "cplfw_accuracy": 58.52,
}


class ProbeDivergence(FloatingPointError):
    pass


@dataclass
class ProbeConfig:
    task: str = "expression_classify"
    epochs: int = 300
    lr_initial: float = 30.0
    lr_drop_every: int = 80
    batch_size: int = 256
    momentum: float = 0.9
    weight_decay: float = 0.0
    num_classes: int = 7
    target_dim: int = 3
    seed: int = 0

    @classmethod
    def for_task(cls, task: str, **overrides) -> "ProbeConfig":
        if task not in TASKS:
            raise ValueError(f"unknown probe task {task!r}")
        base = {"task": task}
        if task == "pose_regress":
            base.update(lr_initial=0.01, batch_size=16)
        base.update({k: v for k, v in overrides.items() if v})
        cfg = cls(**base)
        cfg.validate()
        return cfg

    def validate(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown probe task {self.task!r}")
        for name in ("epochs", "lr_initial", "lr_drop_every", "batch_size", "num_classes", "target_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"probe {name} must be positive")


@dataclass
class LabeledFeatureSet:
    features: np.ndarray
    labels: np.ndarray
    label_schema: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels)
        if self.features.ndim != 2:
            raise ValueError("features must be an N x d matrix")
        if len(self.features) != len(self.labels):
            raise ValueError(f"{len(self.features)} feature rows but {len(self.labels)} labels")
        if not np.isfinite(self.features).all():
            raise ValueError("features contain NaN or Inf")

    def save(self, path):
        """Raw little-endian float32 matrix at ``path`` plus ``path.json`` sidecar."""
        path = Path(path)
        path.write_bytes(self.features.astype("<f4").tobytes(order="C"))
        meta = {
            "rows": int(self.features.shape[0]),
            "dim": int(self.features.shape[1]),
            "dtype": "<f4",
            "label_schema": self.label_schema,
            "labels": self.labels.tolist(),
        }
        Path(str(path) + ".json").write_text(json.dumps(meta))

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = json.loads(Path(str(path) + ".json").read_text())
        feats = np.frombuffer(path.read_bytes(), dtype=meta["dtype"]).reshape(meta["rows"], meta["dim"])
        return cls(feats.copy(), np.asarray(meta["labels"]), meta.get("label_schema", {}))


def extract_frozen_features(model, faces, which: str = "expr", batch_size: int = 64) -> np.ndarray:
    """Encoder outputs for each face, computed in eval mode without gradients."""
    if which not in ("expr", "id"):
        raise ValueError("which must be 'expr' or 'id'")
    encode = model.encode_expression if which == "expr" else model.encode_identity
    if isinstance(faces, (list, tuple)):
        faces = torch.stack(list(faces))
    was_training = model.training
    model.eval()
    rows = []
    try:
        with torch.no_grad():
            for i in range(0, len(faces), batch_size):
                rows.append(encode(faces[i : i + batch_size]).cpu().numpy())
    finally:
        model.train(was_training)
    return np.concatenate(rows).astype(np.float32) if rows else np.zeros((0, 0), np.float32)


class LinearProbe(nn.Module):
    def __init__(self, dim: int, out: int, task: str):
        super().__init__()
        self.linear = nn.Linear(dim, out)
        self.task = task
        self.degenerate = False
        self.constant_class: int | None = None

    def forward(self, x):
        return self.linear(x)

    def predict(self, features) -> np.ndarray:
        x = torch.as_tensor(np.asarray(features, dtype=np.float32))
        if self.constant_class is not None:
            return np.full(len(x), self.constant_class)
        with torch.no_grad():
            out = self.linear(x)
        return out.argmax(1).numpy() if self.task == "expression_classify" else out.numpy()


def train_linear_probe(train_set: LabeledFeatureSet, config: ProbeConfig) -> LinearProbe:
    """SGD on a single linear layer; the rate drops 10x every ``lr_drop_every`` epochs."""
    config.validate()
    classify = config.task == "expression_classify"
    x = torch.from_numpy(train_set.features)
    if classify:
        y = torch.as_tensor(train_set.labels, dtype=torch.long)
        out_dim = max(config.num_classes, int(y.max()) + 1)
    else:
        y = torch.as_tensor(train_set.labels, dtype=torch.float32).reshape(len(x), -1)
        out_dim = y.shape[1]
    gen = torch.Generator().manual_seed(config.seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        probe = LinearProbe(x.shape[1], out_dim, config.task)

    if classify and len(torch.unique(y)) == 1:
        log.warning("probe training set has a single class; returning a constant predictor")
        probe.degenerate = True
        probe.constant_class = int(y[0])
        return probe

    opt = torch.optim.SGD(probe.parameters(), lr=config.lr_initial, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=config.lr_drop_every, gamma=0.1)
    n = len(x)
    for epoch in range(config.epochs):
        perm = torch.randperm(n, generator=gen)
        for i in range(0, n, config.batch_size):
            idx = perm[i : i + config.batch_size]
            out = probe(x[idx])
            loss = F.cross_entropy(out, y[idx]) if classify else F.mse_loss(out, y[idx])
            if not torch.isfinite(loss):
                raise ProbeDivergence(
                    f"probe loss became {float(loss.detach())} at epoch {epoch}; lower lr_initial (now {config.lr_initial})"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
        sched.step()
    return probe


def evaluate_classification(probe: LinearProbe, test_set: LabeledFeatureSet) -> float:
    pred = probe.predict(test_set.features)
    return float((pred == np.asarray(test_set.labels)).mean())


def evaluate_pose(probe: LinearProbe, test_set: LabeledFeatureSet) -> dict:
    """Per-angle mean absolute error in degrees, plus their mean as ``mae``."""
    pred = np.asarray(probe.predict(test_set.features), dtype=np.float64)
    return pose_errors(pred, test_set.labels)


def pose_errors(pred, target) -> dict:
    err = np.abs(np.asarray(pred, np.float64) - np.asarray(target, np.float64)).mean(axis=0)
    out = {name: float(e) for name, e in zip(POSE_COLUMNS, err)}
    out["mae"] = float(np.mean(err))
    return out


# -- verification -----------------------------------------------------------


def cosine_similarity(a, b) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise cosine similarity; rows with a zero vector get 0 and are flagged."""
    a = np.atleast_2d(np.asarray(a, np.float64))
    b = np.atleast_2d(np.asarray(b, np.float64))
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    zero = (na == 0) | (nb == 0)
    denom = np.where(zero, 1.0, na * nb)
    sim = np.where(zero, 0.0, (a * b).sum(axis=1) / denom)
    return np.clip(sim, -1.0, 1.0), zero


def best_threshold(similarity, same) -> tuple[float, float]:
    """Threshold maximizing accuracy of ``similarity > t`` over all midpoints."""
    s = np.asarray(similarity, np.float64)
    y = np.asarray(same, bool)
    u = np.unique(s)
    candidates = np.concatenate([[u[0] - 1.0], (u[:-1] + u[1:]) / 2, [u[-1] + 1.0]])
    acc = ((s[None, :] > candidates[:, None]) == y[None, :]).mean(axis=1)
    k = int(np.argmax(acc))
    return float(candidates[k]), float(acc[k])


@dataclass
class VerificationResult:
    accuracy: float
    threshold: float
    similarity: np.ndarray
    zero_norm: np.ndarray
    roc: dict
    fold_accuracies: list = field(default_factory=list)

    def metrics(self) -> dict:
        out = {
            "accuracy": self.accuracy,
            "threshold": self.threshold,
            "pairs": int(len(self.similarity)),
            "zero_norm_pairs": int(self.zero_norm.sum()),
        }
        if self.fold_accuracies:
            out["fold_accuracies"] = self.fold_accuracies
        return out


def verify_embeddings(emb_a, emb_b, same, folds: int = 0, seed: int = 0) -> VerificationResult:
    """Cosine-similarity verification of embedding pairs.

    With ``folds`` > 1 the threshold is chosen on the other folds and the
    reported accuracy is the mean held-out accuracy.
    """
    same = np.asarray(same, bool)
    sim, zero = cosine_similarity(emb_a, emb_b)
    if zero.any():
        log.warning("%d pairs have a zero-norm embedding; similarity set to 0", int(zero.sum()))
    thr, acc = best_threshold(sim, same)
    fold_acc = []
    if folds and folds > 1:
        for tr, te in KFold(folds, shuffle=True, random_state=seed).split(sim):
            t, _ = best_threshold(sim[tr], same[tr])
            fold_acc.append(float(((sim[te] > t) == same[te]).mean()))
        acc = float(np.mean(fold_acc))
    if same.all() or not same.any():
        roc = {"fpr": [], "tpr": [], "thresholds": []}
    else:
        fpr, tpr, th = roc_curve(same, sim)
        roc = {"fpr": fpr.tolist(), "tpr": tpr.tolist(), "thresholds": [t if math.isfinite(t) else None for t in th.tolist()]}
    return VerificationResult(acc, thr, sim, zero, roc, fold_acc)


def verify_pairs(model, pairs, folds: int = 0, batch_size: int = 64) -> VerificationResult:
    """``pairs`` is a sequence of ``(face_a, face_b, same)``."""
    a = torch.stack([p[0] for p in pairs])
    b = torch.stack([p[1] for p in pairs])
    same = [bool(p[2]) for p in pairs]
    ea = extract_frozen_features(model, a, "id", batch_size)
    eb = extract_frozen_features(model, b, "id", batch_size)
    return verify_embeddings(ea, eb, same, folds)


# -- dataset adapters -------------------------------------------------------
#
# FER-2013:   the official csv (emotion,pixels,Usage); 48x48 gray upsampled.
# folders:    root/<class_name>/*.png|jpg, classes in sorted order (RAF-DB export).
# pose csv:   path,yaw,pitch,roll in degrees, paths relative to the csv (300W-LP, AFLW2000).
# pairs csv:  path_a,path_b,same with same in {0,1} (LFW, CPLFW pair lists).


def _gray_to_face(pixels: str, image_size: int) -> torch.Tensor:
    arr = np.asarray(pixels.split(), dtype=np.float32).reshape(48, 48) / 255.0
    t = torch.from_numpy(arr)[None, None]
    t = F.interpolate(t, size=(image_size, image_size), mode="bilinear", align_corners=False)
    return t[0].expand(3, -1, -1).clamp(0, 1).contiguous()


def read_fer2013(path, usage: str = "Training", image_size: int = 64):
    faces, labels = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if usage and row.get("Usage") != usage:
                continue
            faces.append(_gray_to_face(row["pixels"], image_size))
            labels.append(int(row["emotion"]))
    return torch.stack(faces), np.asarray(labels), {"kind": "class", "num_classes": 7}


def read_class_folders(root, image_size: int = 64):
    root = Path(root)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    faces, labels = [], []
    for k, name in enumerate(classes):
        for p in sorted((root / name).iterdir()):
            if p.suffix.lower() in (".png", ".jpg", ".jpeg"):
                faces.append(load_face(p, image_size))
                labels.append(k)
    return torch.stack(faces), np.asarray(labels), {"kind": "class", "num_classes": len(classes), "classes": classes}


def read_pose_csv(path, image_size: int = 64):
    path = Path(path)
    faces, targets = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            faces.append(load_face(path.parent / row["path"], image_size))
            targets.append([float(row[c]) for c in POSE_COLUMNS])
    return torch.stack(faces), np.asarray(targets), {"kind": "pose", "columns": list(POSE_COLUMNS), "unit": "degrees"}


def read_pairs_csv(path, image_size: int = 64):
    path = Path(path)
    pairs = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            pairs.append(
                (
                    load_face(path.parent / row["path_a"], image_size),
                    load_face(path.parent / row["path_b"], image_size),
                    bool(int(row["same"])),
                )
            )
    return pairs


def load_labeled_faces(path, image_size: int = 64, usage: str = ""):
    """Dispatch on the source layout; returns (faces, labels, schema)."""
    path = Path(path)
    if path.is_dir():
        return read_class_folders(path, image_size)
    header = path.open().readline()
    if "pixels" in header:
        return read_fer2013(path, usage, image_size)
    return read_pose_csv(path, image_size)


def write_report(out_dir, name: str, metrics: dict, rows: list[dict] | None = None) -> Path:
    """``name.json`` with metrics (plus reference results) and optional ``name.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"metrics": metrics, "reference_results": REFERENCE_RESULTS}
    path = out_dir / f"{name}.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    if rows:
        with open(out_dir / f"{name}.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return path
