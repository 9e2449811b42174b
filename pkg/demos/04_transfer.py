"""A perturbation crafted on one network still wrecks a second one, but not in the attacker's chosen way.

Run:  python demos/04_transfer.py [output_dir]
"""

from common import out_dir, scenes, static_target, victim
from segadv import attacks, metrics, targets

out = out_dir("04_transfer")
model_a, model_b = victim(seed=0), victim(seed=2)
x, _ = scenes(200)
xv, yv = scenes(50, offset=400)
target = static_target(model_a, x)
pert = attacks.universal_perturbation(model_a, x, [targets.static_target(target)] * len(x),
                                      attacks.AttackConfig(omega=None))
for name, model in (("A (source)", model_a), ("B (independent)", model_b)):
    rep = metrics.transfer_eval(pert, model, xv, yv, target)
    print(f"{name:16s} mIoU {rep.clean_mean_iou:.3f} -> {rep.mean_iou:.3f}, "
          f"targeted success {rep.success_rate:.3f}")
