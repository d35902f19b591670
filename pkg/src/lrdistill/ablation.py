"""Four-arm ablation: no distillation, generative only, discriminative only, both."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import replace
from typing import Dict, Optional, Sequence

import numpy as np

from .data.formats import TeacherStore
from .data.manifest import ImageSet
from .evaluation import VerificationSet, build_pairs, embed_all, verify
from .model import ModelConfig, StudentModel
from .train import LOSS_COMPONENTS, OptimConfig, TrainLog, train_stage1, train_stage2

logger = logging.getLogger(__name__)

# arm name -> (runs stage 1, stage-2 loss switches)
ARMS = {
    "wo_dist": (False, ("cls",)),
    "gen": (True, ("cls",)),
    "dis": (False, LOSS_COMPONENTS),
    "gen_dis": (True, LOSS_COMPONENTS),
}


def data_digest(data: ImageSet) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(data.images).tobytes())
    h.update(np.asarray(data.labels, dtype=np.int64).tobytes())
    h.update("\n".join(data.ids).encode())
    return h.hexdigest()


def run_ablation(
    train: ImageSet,
    test: ImageSet,
    gen_store: TeacherStore,
    disc_store: TeacherStore,
    seeds: Sequence[int] = (7, 8, 9),
    optim: Optional[OptimConfig] = None,
    model_config: Optional[ModelConfig] = None,
    pairs: Optional[VerificationSet] = None,
    n_pos: int = 300,
    n_neg: int = 300,
    pair_seed: int = 7,
    arms: Sequence[str] = tuple(ARMS),
) -> dict:
    """Train every arm for every seed and score verification on one shared pair set.

    Arms with a stage-1 backbone reuse a single stage-1 run per seed.
    """
    optim = optim or OptimConfig()
    model_config = model_config or ModelConfig()
    pairs = pairs or build_pairs(test.ids, test.labels, n_pos, n_neg, pair_seed)
    unknown = set(arms) - set(ARMS)
    if unknown:
        raise ValueError(f"unknown ablation arms: {sorted(unknown)}")
    classes = max(train.num_classes, test.num_classes)
    results: Dict[str, Dict[str, float]] = {a: {} for a in arms}
    for seed in seeds:
        cfg = replace(optim, seed=int(seed))
        stage1 = None
        if any(ARMS[a][0] for a in arms):
            model = StudentModel(model_config, classes, seed=int(seed))
            stage1 = train_stage1(model, train, gen_store, cfg, TrainLog())
        for arm in arms:
            uses_stage1, switches = ARMS[arm]
            try:
                model = StudentModel(model_config, classes, seed=int(seed))
                train_stage2(model, stage1 if uses_stage1 else None, train, disc_store, cfg, switches,
                             TrainLog(), arm=arm)
                acc = verify(embed_all(model, test), pairs).accuracy
            except Exception as exc:
                raise RuntimeError(f"ablation arm {arm!r} (seed {seed}) failed: {exc}") from exc
            logger.info("arm=%s seed=%s accuracy=%.4f", arm, seed, acc)
            results[arm][str(seed)] = acc
    return {
        "arms": {
            arm: {
                "backbone": "stage1" if ARMS[arm][0] else "seed",
                "switches": list(ARMS[arm][1]),
                "accuracy": results[arm],
                "mean": float(np.mean(list(results[arm].values()))),
            }
            for arm in arms
        },
        "seeds": [int(s) for s in seeds],
        "protocol": {"pairs": len(pairs.pairs), "positive": pairs.n_pos, "negative": pairs.n_neg,
                     "pairs_sha256": pairs.digest()},
        "train_sha256": data_digest(train),
        "test_sha256": data_digest(test),
        "optim": optim.to_dict(),
        "model_config": model_config.to_dict(),
    }
