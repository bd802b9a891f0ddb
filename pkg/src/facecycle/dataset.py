"""Frame corpora laid out as ``identity_id/clip_id/frame_*.{png,jpg}`` and pair samplers."""

from __future__ import annotations

import logging
import re
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
PAIR_KINDS = ("same_identity_flip", "same_identity_frames", "cross_identity")


class CorpusError(RuntimeError):
    """Corpus cannot be used as configured (fatal)."""


class FaceLoadError(RuntimeError):
    """A single frame failed to decode (recoverable)."""


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class FrameRecord:
    identity_id: str
    clip_id: str
    frame_index: int
    path: Path

    @property
    def key(self):
        return (self.identity_id, self.clip_id, self.frame_index)


@dataclass
class PairSample:
    face_a: torch.Tensor
    face_b: torch.Tensor
    pair_kind: str
    records: tuple[FrameRecord, FrameRecord] | None = None


def _frame_index(path: Path, fallback: int) -> int:
    m = re.search(r"(\d+)$", path.stem)
    return int(m.group(1)) if m else fallback


def _decodable(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except (OSError, UnidentifiedImageError, SyntaxError):
        return False


def scan_corpus(root) -> list[FrameRecord]:
    """Collect every decodable frame under ``root``, sorted by identity, clip, frame."""
    root = Path(root)
    if not root.is_dir():
        raise CorpusError(f"corpus root {root} is not a directory")
    records = []
    skipped = 0
    for ident in sorted(p for p in root.iterdir() if p.is_dir()):
        for clip in sorted(p for p in ident.iterdir() if p.is_dir()):
            frames = sorted(p for p in clip.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
            for i, path in enumerate(frames):
                if not _decodable(path):
                    log.warning("skipping undecodable frame %s", path)
                    skipped += 1
                    continue
                records.append(FrameRecord(ident.name, clip.name, _frame_index(path, i), path))
    if not records:
        raise CorpusError(f"no frames found under {root}")
    records.sort(key=lambda r: r.key)
    keys = [r.key for r in records]
    if len(set(keys)) != len(keys):
        raise CorpusError(f"duplicate (identity, clip, frame_index) entries under {root}")
    s = summarize(records)
    log.info(
        "corpus %s: %d identities, %d clips, %d frames, %d skipped",
        root, s["identities"], s["clips"], s["frames"], skipped,
    )
    return records


def summarize(records: Sequence[FrameRecord]) -> dict:
    return {
        "identities": len({r.identity_id for r in records}),
        "clips": len({(r.identity_id, r.clip_id) for r in records}),
        "frames": len(records),
    }


def write_manifest(records: Sequence[FrameRecord], path, root=None) -> None:
    """One line per frame: identity, clip, frame index and path, tab separated."""
    with open(path, "w") as fh:
        for r in records:
            rel = r.path.relative_to(root) if root is not None else r.path
            fh.write(f"{r.identity_id}\t{r.clip_id}\t{r.frame_index}\t{rel}\n")


def read_manifest(path, root=None) -> list[FrameRecord]:
    base = Path(root) if root is not None else Path(path).parent
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        ident, clip, idx, rel = line.split("\t")
        out.append(FrameRecord(ident, clip, int(idx), base / rel))
    return out


def load_face(record: FrameRecord | str | Path, image_size: int = 64) -> torch.Tensor:
    """Decode a frame as a ``3 x S x S`` float tensor in [0, 1]."""
    path = record.path if isinstance(record, FrameRecord) else Path(record)
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (image_size, image_size):
                im = im.resize((image_size, image_size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError, SyntaxError) as exc:
        raise FaceLoadError(f"cannot decode {path}: {exc}") from exc
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def flip(face: torch.Tensor) -> torch.Tensor:
    """Horizontal mirror of a ``... x H x W`` tensor."""
    return face.flip(-1)


class FrameIndex:
    """Records grouped by identity and clip, with an optional decoded-image cache."""

    def __init__(self, records: Sequence[FrameRecord], image_size: int = 64, cache: bool = True):
        self.records = list(records)
        self.image_size = image_size
        self.by_identity: dict[str, dict[str, list[FrameRecord]]] = defaultdict(lambda: defaultdict(list))
        for r in self.records:
            self.by_identity[r.identity_id][r.clip_id].append(r)
        self.identities = sorted(self.by_identity)
        self.clips = [(i, c) for i in self.identities for c in sorted(self.by_identity[i])]
        self.multi_frame_clips = [(i, c) for i, c in self.clips if len(self.by_identity[i][c]) >= 2]
        self._cache = {} if cache else None

    def load(self, record: FrameRecord) -> torch.Tensor:
        if self._cache is None:
            return load_face(record, self.image_size)
        face = self._cache.get(record.path)
        if face is None:
            face = self._cache[record.path] = load_face(record, self.image_size)
        return face


def _as_index(records, image_size) -> FrameIndex:
    return records if isinstance(records, FrameIndex) else FrameIndex(records, image_size, cache=False)


def sample_stage1_pair(records, rng: np.random.Generator, flip_probability: float = 0.5, image_size: int = 64) -> PairSample:
    """A same-identity pair: a face and its mirror, or two frames of one clip."""
    index = _as_index(records, image_size)
    use_flip = flip_probability >= 1 or rng.random() < flip_probability
    if use_flip:
        rec = index.records[rng.integers(len(index.records))]
        face = index.load(rec)
        return PairSample(face, flip(face), "same_identity_flip", (rec, rec))
    if not index.multi_frame_clips:
        raise SamplingError("no clip has two or more frames; use flip_probability=1")
    # uniform identity, then uniform clip within it
    eligible = defaultdict(list)
    for ident, clip in index.multi_frame_clips:
        eligible[ident].append(clip)
    idents = sorted(eligible)
    ident = idents[rng.integers(len(idents))]
    clip = eligible[ident][rng.integers(len(eligible[ident]))]
    frames = index.by_identity[ident][clip]
    i, j = rng.choice(len(frames), size=2, replace=False)
    ra, rb = frames[i], frames[j]
    return PairSample(index.load(ra), index.load(rb), "same_identity_frames", (ra, rb))


def sample_stage2_pair(records, rng: np.random.Generator, image_size: int = 64) -> PairSample:
    """Two faces of distinct identities, each a uniform frame of a uniform clip."""
    index = _as_index(records, image_size)
    if len(index.identities) < 2:
        raise SamplingError("stage-2 pairs need at least two identities")
    a, b = rng.choice(len(index.identities), size=2, replace=False)
    picked = []
    for k in (a, b):
        clips = index.by_identity[index.identities[k]]
        names = sorted(clips)
        frames = clips[names[rng.integers(len(names))]]
        picked.append(frames[rng.integers(len(frames))])
    ra, rb = picked
    return PairSample(index.load(ra), index.load(rb), "cross_identity", (ra, rb))


def sample_batch(index: FrameIndex, rng: np.random.Generator, stage: int, batch_size: int, flip_probability: float = 0.5):
    """Stack ``batch_size`` pairs into two ``B x 3 x S x S`` tensors."""
    pairs = [
        sample_stage1_pair(index, rng, flip_probability) if stage == 1 else sample_stage2_pair(index, rng)
        for _ in range(batch_size)
    ]
    return torch.stack([p.face_a for p in pairs]), torch.stack([p.face_b for p in pairs]), pairs


class PairBatchStream(torch.utils.data.IterableDataset):
    """Endless stream of pair batches for DataLoader workers.

    Each worker owns a generator seeded from ``(seed, start, worker_id)``, so
    a run is reproducible for a fixed worker count.
    """

    def __init__(self, records, image_size, stage, batch_size, flip_probability, seed, start=0):
        self.records = list(records)
        self.image_size = image_size
        self.stage = stage
        self.batch_size = batch_size
        self.flip_probability = flip_probability
        self.seed = seed
        self.start = start

    def __iter__(self):
        info = torch.utils.data.get_worker_info()
        wid = info.id if info is not None else 0
        index = FrameIndex(self.records, self.image_size)
        rng = np.random.default_rng([self.seed, self.start, wid])
        while True:
            a, b, _ = sample_batch(index, rng, self.stage, self.batch_size, self.flip_probability)
            yield a, b
