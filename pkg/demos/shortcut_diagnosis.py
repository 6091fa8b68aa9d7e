"""Why the masker learns nothing on the default benchmark.

With spurious_rho = 0.95 the warm-up classifier reads the background colour.
The masker is trained to keep the pixels the classifier relies on, so it is
asked for the background, and the sparsity weight makes even that too
expensive: an all-zero mask wins. This script shows the classifier's
behaviour under four oracle masks, then repeats the warm-up on a benchmark
without the spurious cue. There the object mask is the only sparse mask that
raises confidence (positive dist). At initialization the empty mask is still
cheaper, but once joint training starts the alignment loss pulls the two
networks toward the object, and a 600 + 300 step run reaches IoU of about 0.8.

Runs in a few minutes on one core.
"""

import numpy as np

from align.data import SyntheticSpec, build_splits, stack
from align.losses import LossConfig, dist, loss_dist
from align.tensor import Tensor, no_grad
from align.trainer import TrainSchedule, train_align


def oracle_masks(rho, warmup):
    spec = SyntheticSpec(image_size=(32, 32), spurious_rho=rho, seed=0)
    splits = build_splits(spec)
    clf, _, _, _ = train_align(splits[0]["train"], splits[0]["val"], TrainSchedule(warmup_iters=warmup, joint_iters=0),
                               LossConfig(), report=False)
    x, y, g, _ = stack(splits[0]["test"])
    xt, yt, _, _ = stack(splits[1]["test"])
    print(f"\nspurious_rho={rho}, {warmup} warm-up steps")
    print(f"  in-domain acc {np.mean(clf.predict_proba(x).argmax(1) == y):.3f}, "
          f"held-out acc {np.mean(clf.predict_proba(xt).argmax(1) == yt):.3f}")
    cfg = LossConfig()
    for name, m in (("object", g), ("background", 1 - g), ("everything", np.ones_like(g)), ("nothing", np.zeros_like(g))):
        with no_grad():
            d = dist(clf, None, Tensor(x), y, mask=Tensor(m))
            cost = loss_dist(d).item() + cfg.lambda1 * m.mean()
        print(f"  mask={name:<10}  mean dist {d.data.mean():+.3f}   L_dist + lambda1*L_sparsity = {cost:.3f}")


if __name__ == "__main__":
    oracle_masks(0.95, 200)
    oracle_masks(0.0, 600)
