"""Remove every figure (class 4) from the segmentation while keeping the rest.

Compares a periodic universal perturbation with per-image perturbations and
shows how omega trades hiding against background preservation.

Run:  python demos/03_hide_figures.py [output_dir]
"""

import numpy as np

from common import out_dir, scenes, victim
from segadv import attacks, imageio, metrics, segnet, targets

FIGURE = 4
out = out_dir("03_hide_figures")
model = victim()
x, _ = scenes(200)
xv, _ = scenes(50, offset=400)

train_targets = [targets.dynamic_target(p, FIGURE) for p in segnet.predict_labels(model, x)]
for omega in (None, 0.99, 0.9999):
    cfg = attacks.AttackConfig(eps=10 / 255, omega=omega)
    pert = attacks.universal_perturbation(model, x, train_targets, cfg, tile=(32, 32))
    rep = metrics.evaluate_perturbation(model, xv, pert, o=FIGURE)
    print(f"universal, omega={omega}: hidden {rep.hidden_rate:.3f}, background kept {rep.background_preserved:.3f}")

val_targets = [targets.dynamic_target(p, FIGURE) for p in segnet.predict_labels(model, xv)]
xi = attacks.iterative_targeted(model, xv, val_targets, attacks.AttackConfig())
rep = metrics.evaluate_perturbation(model, xv, xi, o=FIGURE)
print(f"image-dependent: hidden {rep.hidden_rate:.3f}, background kept {rep.background_preserved:.3f}")

k = int(np.argmax([(t.partition.fg).sum() for t in val_targets]))
adv = attacks.apply(xi[k], xv[k])
imageio.write_ppm(out / "clean.ppm", xv[k])
imageio.write_ppm(out / "adv.ppm", adv)
imageio.write_ppm_u8(out / "pred_clean.ppm", imageio.colorize(segnet.predict(model, xv[k]).labels))
imageio.write_ppm_u8(out / "target.ppm", imageio.colorize(val_targets[k].y_target))
imageio.write_ppm_u8(out / "pred_adv.ppm", imageio.colorize(segnet.predict(model, adv).labels))
print(f"images in {out}")
