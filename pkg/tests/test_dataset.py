import logging
from collections import Counter

import numpy as np
import pytest
import torch
from PIL import Image
from scipy.stats import chisquare

from facecycle.dataset import (
    CorpusError,
    FaceLoadError,
    FrameIndex,
    FrameRecord,
    SamplingError,
    flip,
    load_face,
    read_manifest,
    sample_batch,
    sample_stage1_pair,
    sample_stage2_pair,
    scan_corpus,
    write_manifest,
)


def test_scan_toy(toy_root, caplog):
    with caplog.at_level(logging.INFO):
        recs = scan_corpus(toy_root)
    assert len(recs) == 8
    assert len({r.identity_id for r in recs}) == 2
    assert [r.key for r in recs] == sorted(r.key for r in recs)
    assert "2 identities, 2 clips, 8 frames, 0 skipped" in caplog.text


def test_scan_skips_corrupt(tmp_path, caplog):
    for i in range(2):
        d = tmp_path / f"id{i}" / "c0"
        d.mkdir(parents=True)
        for f in range(4):
            Image.new("RGB", (8, 8), (i * 100, 0, 0)).save(d / f"frame_{f:03d}.png")
    (tmp_path / "id1" / "c0" / "frame_002.png").write_bytes(b"not an image")
    with caplog.at_level(logging.INFO):
        recs = scan_corpus(tmp_path)
    assert len(recs) == 7
    assert "skipping undecodable frame" in caplog.text and "1 skipped" in caplog.text


def test_scan_empty(tmp_path):
    with pytest.raises(CorpusError, match="no frames found"):
        scan_corpus(tmp_path)


def test_manifest_round_trip(toy_root, tmp_path):
    recs = scan_corpus(toy_root)
    write_manifest(recs, tmp_path / "m.tsv", root=toy_root)
    line = (tmp_path / "m.tsv").read_text().splitlines()[0]
    assert line.split("\t") == ["id00000", "clip000", "0", "id00000/clip000/frame_0000.png"]
    assert read_manifest(tmp_path / "m.tsv", root=toy_root) == recs


def test_load_face_resizes(tmp_path):
    Image.fromarray(np.random.default_rng(0).integers(0, 256, (128, 128, 3), dtype=np.uint8)).save(tmp_path / "a.png")
    face = load_face(tmp_path / "a.png", 64)
    assert face.shape == (3, 64, 64) and face.min() >= 0 and face.max() <= 1


def test_load_face_white_and_identity(tmp_path):
    Image.new("RGB", (32, 32), (255, 255, 255)).save(tmp_path / "w.png")
    assert torch.equal(load_face(tmp_path / "w.png", 64), torch.ones(3, 64, 64))
    arr = np.random.default_rng(1).integers(0, 256, (64, 64, 3), dtype=np.uint8)
    Image.fromarray(arr).save(tmp_path / "n.png")
    face = load_face(tmp_path / "n.png", 64)
    assert torch.equal(face, torch.from_numpy(arr.transpose(2, 0, 1).astype(np.float32) / 255))
    assert torch.equal(face, load_face(tmp_path / "n.png", 64))


def test_load_face_error(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"junk")
    with pytest.raises(FaceLoadError):
        load_face(FrameRecord("a", "b", 0, tmp_path / "bad.png"))


def test_flip_involution():
    x = torch.rand(3, 5, 7)
    assert torch.equal(flip(flip(x)), x)
    assert torch.equal(flip(x)[..., 0], x[..., -1])


def test_stage1_flip_pairs(toy_root):
    recs = scan_corpus(toy_root)
    rng = np.random.default_rng(0)
    for _ in range(5):
        p = sample_stage1_pair(recs, rng, flip_probability=1.0)
        assert p.pair_kind == "same_identity_flip"
        assert torch.equal(p.face_b, flip(p.face_a))


def test_stage1_frame_pairs(toy_root):
    index = FrameIndex(scan_corpus(toy_root))
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = sample_stage1_pair(index, rng, flip_probability=0.0)
        ra, rb = p.records
        assert p.pair_kind == "same_identity_frames"
        assert ra.identity_id == rb.identity_id and ra.clip_id == rb.clip_id
        assert ra.frame_index != rb.frame_index


def test_stage1_needs_multi_frame_clip(tmp_path):
    recs = [FrameRecord(f"i{k}", "c", 0, tmp_path / f"{k}.png") for k in range(3)]
    with pytest.raises(SamplingError):
        sample_stage1_pair(recs, np.random.default_rng(0), flip_probability=0.0)


def test_stage2_pairs(toy_root):
    index = FrameIndex(scan_corpus(toy_root))
    rng = np.random.default_rng(0)
    for _ in range(10):
        p = sample_stage2_pair(index, rng)
        assert p.pair_kind == "cross_identity"
        assert p.records[0].identity_id != p.records[1].identity_id


def test_stage2_single_identity(tmp_path):
    recs = [FrameRecord("i", "c", k, tmp_path / f"{k}.png") for k in range(3)]
    with pytest.raises(SamplingError):
        sample_stage2_pair(recs, np.random.default_rng(0))


def test_stage2_identity_marginals_uniform(tmp_path):
    # 5994 identities, one frame each; images are never decoded here
    recs = [FrameRecord(f"id{k:05d}", "c", 0, tmp_path / f"{k}.png") for k in range(5994)]
    index = FrameIndex(recs)
    index.load = lambda r: torch.zeros(1)
    rng = np.random.default_rng(0)
    counts = Counter()
    for _ in range(60_000):
        p = sample_stage2_pair(index, rng)
        counts[p.records[0].identity_id] += 1
        counts[p.records[1].identity_id] += 1
    observed = np.array([counts[f"id{k:05d}"] for k in range(5994)])
    assert chisquare(observed).pvalue > 1e-3


def test_sampling_reproducible(toy_root):
    index = FrameIndex(scan_corpus(toy_root))
    a1, b1, _ = sample_batch(index, np.random.default_rng(7), 1, 6, 0.5)
    a2, b2, _ = sample_batch(index, np.random.default_rng(7), 1, 6, 0.5)
    assert torch.equal(a1, a2) and torch.equal(b1, b2)
