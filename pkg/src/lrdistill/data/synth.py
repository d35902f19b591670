"""Deterministic synthetic faces-and-teachers fixture.

All randomness comes from one ``numpy.random.Generator(PCG64(seed))``, drawn
in this order:

1. shared base pattern: ``SHARED_BLOBS`` blobs, each (cy, cx, sigma, amp)
2. per class, in label order: ``CLASS_BLOBS`` blobs, same layout
3. generative-teacher prototypes, (classes, gen_dim) standard normal
4. discriminative-teacher prototypes, (classes, disc_dim) standard normal
5. per class, per sample: jitter (dy, dx) in [-3, 3], pixel noise
   (side, side), gen-feature noise (gen_dim), disc-feature noise (disc_dim),
   logit noise (classes)

A blob is the isotropic Gaussian ``amp * exp(-r^2 / (2 sigma^2))`` on the
112x112 grid. Class templates mix the shared base with class blobs and are
rescaled to [0.15, 0.85]. Prototypes are unit-normalized before noise is
added; the noisy vectors are normalized again.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from ..exceptions import PreconditionError
from .formats import TeacherStore, write_teacher_store
from .images import quantize, write_pgm
from .manifest import Manifest, Record, save_manifest

HR_SIDE = 112
SHARED_BLOBS = 24
CLASS_BLOBS = 12
CLASS_WEIGHT = 0.15
JITTER = 3
PIXEL_SIGMA = 0.02
GEN_SIGMA = 0.05
DISC_SIGMA = 0.02
LOGIT_SCALE = 10.0
LOGIT_SIGMA = 0.1


@dataclass
class SynthData:
    manifest: Manifest
    images: np.ndarray  # (N, 112, 112) uint8
    gen_store: TeacherStore
    disc_store: TeacherStore
    gen_prototypes: np.ndarray
    disc_prototypes: np.ndarray


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _blobs(rng: np.random.Generator, count: int, side: int) -> np.ndarray:
    params = rng.uniform(size=(count, 4))
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    field = np.zeros((side, side))
    for u_y, u_x, u_s, u_a in params:
        cy, cx = u_y * side, u_x * side
        sigma = 5.0 + 11.0 * u_s
        amp = 2.0 * u_a - 1.0
        field += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma * sigma))
    return field


def _rescale(img: np.ndarray, lo: float = 0.15, hi: float = 0.85) -> np.ndarray:
    mn, mx = img.min(), img.max()
    if mx - mn < 1e-12:
        return np.full_like(img, 0.5 * (lo + hi))
    return lo + (hi - lo) * (img - mn) / (mx - mn)


def _shift(img: np.ndarray, dy: int, dx: int, pad: int) -> np.ndarray:
    padded = np.pad(img, pad, mode="edge")
    h, w = img.shape
    return padded[pad + dy : pad + dy + h, pad + dx : pad + dx + w]


def generate(
    classes: int,
    per_class: int,
    seed: int = 7,
    gen_dim: int = 512,
    disc_dim: int = 512,
    side: int = HR_SIDE,
    class_weight: float = CLASS_WEIGHT,
) -> SynthData:
    """Build the fixture in memory; see the module docstring for the draw order."""
    if classes < 2:
        raise PreconditionError(f"need at least 2 classes, got {classes}")
    if per_class < 2:
        raise PreconditionError(f"need at least 2 samples per class, got {per_class}")
    rng = np.random.Generator(np.random.PCG64(seed))
    base = _blobs(rng, SHARED_BLOBS, side)
    templates = [
        _rescale((1.0 - class_weight) * base + class_weight * _blobs(rng, CLASS_BLOBS, side))
        for _ in range(classes)
    ]
    gen_protos = _unit(rng.standard_normal((classes, gen_dim)))
    disc_protos = _unit(rng.standard_normal((classes, disc_dim)))

    n = classes * per_class
    images = np.empty((n, side, side), np.uint8)
    gen_feats = np.empty((n, gen_dim), np.float32)
    disc_feats = np.empty((n, disc_dim), np.float32)
    logits = np.empty((n, classes), np.float32)
    records = []
    k = 0
    for label in range(classes):
        for s in range(per_class):
            dy, dx = rng.integers(-JITTER, JITTER + 1, size=2)
            noise = rng.normal(0.0, PIXEL_SIGMA, size=(side, side))
            img = np.clip(_shift(templates[label], int(dy), int(dx), JITTER) + noise, 0.0, 1.0)
            images[k] = quantize(img)
            gen_feats[k] = _unit(gen_protos[label] + rng.normal(0.0, GEN_SIGMA, gen_dim))
            disc_feats[k] = _unit(disc_protos[label] + rng.normal(0.0, DISC_SIGMA, disc_dim))
            logits[k] = LOGIT_SCALE * np.eye(classes)[label] + rng.normal(0.0, LOGIT_SIGMA, classes)
            ident = f"c{label:04d}_s{s:04d}"
            records.append(Record(ident, f"images/{ident}.pgm", label))
            k += 1
    ids = [r.id for r in records]
    return SynthData(
        manifest=Manifest(records),
        images=images,
        gen_store=TeacherStore(ids, gen_feats),
        disc_store=TeacherStore(ids, disc_feats, logits),
        gen_prototypes=gen_protos,
        disc_prototypes=disc_protos,
    )


def split_per_class(manifest: Manifest, test_per_class: int):
    """Last ``test_per_class`` samples of every class go to the test split."""
    by_label: dict = {}
    for r in manifest.records:
        by_label.setdefault(r.label, []).append(r)
    train, test = [], []
    for label in sorted(by_label):
        rows = by_label[label]
        if test_per_class >= len(rows):
            raise PreconditionError(f"class {label} has {len(rows)} samples; cannot hold out {test_per_class}")
        cut = len(rows) - test_per_class
        train.extend(rows[:cut])
        test.extend(rows[cut:])
    return Manifest(train, manifest.root), Manifest(test, manifest.root)


def synth_generate(
    classes: int,
    per_class: int,
    seed: int,
    out_dir,
    test_per_class: int = 0,
    class_weight: float = CLASS_WEIGHT,
) -> dict:
    """Write manifest(s), PGM images and both GTEN stores under ``out_dir``.

    Returns a summary dict of the written paths and counts.
    """
    data = generate(classes, per_class, seed, class_weight=class_weight)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    for r, img in zip(data.manifest.records, data.images):
        write_pgm(os.path.join(out_dir, r.path), img)
    data.manifest.root = os.path.abspath(out_dir)
    save_manifest(data.manifest, os.path.join(out_dir, "manifest.json"))
    summary = {
        "classes": classes,
        "per_class": per_class,
        "seed": seed,
        "records": len(data.manifest),
        "manifest": "manifest.json",
        "gen_store": "gen_teacher.gten",
        "disc_store": "disc_teacher.gten",
    }
    if test_per_class:
        train, test = split_per_class(data.manifest, test_per_class)
        save_manifest(train, os.path.join(out_dir, "train_manifest.json"))
        save_manifest(test, os.path.join(out_dir, "test_manifest.json"))
        summary.update(train_manifest="train_manifest.json", test_manifest="test_manifest.json",
                       train_records=len(train), test_records=len(test))
    write_teacher_store(data.gen_store, os.path.join(out_dir, "gen_teacher.gten"))
    write_teacher_store(data.disc_store, os.path.join(out_dir, "disc_teacher.gten"))
    with open(os.path.join(out_dir, "synth.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return summary
