"""Train a tiny detector on synthetic scenes and watch validation mAP rise.

This uses a 64x64 sensor and a one-block-per-stage backbone, and takes a few
minutes on a CPU. The full desk-scale run lives in the acceptance suite.

    python demos/train_small.py [graph_mode]
"""

import logging
import sys

from cvheat.config import PipelineConfig
from cvheat.heat import count_parameters
from cvheat.pipeline import evaluate, synthetic_splits, train


def main(graph_mode="all"):
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = PipelineConfig(
        resolution=64,
        stage_depths=(1, 1, 1, 1),
        stage_widths=(16, 32, 64, 128),
        gcn_width=32,
        fe_dim=8,
        num_queries=4,
        noise_rate=0.15,
        max_objects=2,
        graph_mode=graph_mode,
        train_scenes=256,
        val_scenes=64,
        steps=1500,
        batch_size=8,
        eval_every=300,
    )
    train_samples, val_samples = synthetic_splits(cfg)
    result = train(cfg, train_samples, val_samples)
    print(f"{count_parameters(result.model)} parameters, final loss {result.losses[-1]:.3f}")
    _, metrics = evaluate(result.model, val_samples)
    print(" ".join(f"{k} {v:.3f}" for k, v in metrics.items()))


if __name__ == "__main__":
    main(*sys.argv[1:])
