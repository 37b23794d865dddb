"""Pretrain a small model on the jigsaw-heatmap task and watch accuracy move.

Deliberately tiny (48 px, N=2, a few epochs) so it finishes in about a minute
on one core.  The acceptance suite runs the full-size version.
"""
import numpy as np

from hsjp.config import build_config
from hsjp.evaluation import evaluate_hsjp
from hsjp.model import build_network
from hsjp.synthdata import gen_pretext_corpus
from hsjp.train import pretrain

cfg = build_config({}, {"size": 48, "n": 2, "epochs": 12, "batch": 8, "eval_every": 3})
train = gen_pretext_corpus(160, cfg.size, seed=1)
heldout = gen_pretext_corpus(40, cfg.size, seed=2)

# before training: close to chance (1/4 of the cells, minus the edge effects)
untrained = evaluate_hsjp(build_network(cfg.size, cfg.n ** 2, 0), heldout, cfg.n, cfg.size)
print("untrained patch accuracy", round(untrained.patch_accuracy, 3))

result = pretrain(train, cfg, heldout)
for rec in result.records:
    extra = f"  precision {rec.precision:.3f}  accuracy {rec.accuracy:.3f}" if rec.accuracy is not None else ""
    print(f"epoch {rec.epoch:2d}  loss {rec.loss:.5f}  lr {rec.lr:g}{extra}")

print("kept epoch", result.best_epoch, "after", result.steps, "steps")
final = evaluate_hsjp(result.state, heldout, cfg.n, cfg.size)
errors = np.concatenate([r.errors for r in final.results])
print("median peak error (heatmap px)", round(float(np.median(errors)), 2))
