"""Reuse pretext weights for keypoints: head swap, freezing, finetuning.

Compares a pretrained start with a scratch start at toy scale.  One seed and
a few epochs is far too little to say which wins; the point is the plumbing.
"""
from hsjp.config import build_config
from hsjp.evaluation import evaluate_pose, format_table, transfer_sweep
from hsjp.model import GROUPS, swap_head
from hsjp.synthdata import gen_keypoint_corpus, gen_pretext_corpus
from hsjp.train import finetune, pretrain

size = 48
pre_cfg = build_config({}, {"size": size, "n": 2, "epochs": 6, "batch": 8})
pretrained = pretrain(gen_pretext_corpus(120, size, seed=3), pre_cfg).state
print("pretext head channels", pretrained.head_channels)

# the backbone is kept, the 1x1 head becomes 13 keypoint channels
swapped = swap_head(pretrained, 13)
same = all((swapped.params[k] == pretrained.params[k]).all()
           for k in pretrained.params if not k.startswith("head"))
print("backbone preserved by head swap:", same)

train = gen_keypoint_corpus(120, size, seed=4)
evals = gen_keypoint_corpus(40, size, seed=5)
ft_cfg = build_config({}, {"size": size, "epochs": 6, "batch": 8})

rows = []
for name, init in (("pretrained", pretrained), ("scratch", None)):
    rows.append((name, evaluate_pose(finetune(train, init, ft_cfg).state, evals).map))
print(format_table(["start", "mAP"], rows))

# freeze depth d keeps the first d of these groups fixed
print("groups:", ", ".join(GROUPS))
print(format_table(["freeze_depth", "mAP"],
                   transfer_sweep(pretrained, train, evals, [0, 3, 5, 6], ft_cfg)))
