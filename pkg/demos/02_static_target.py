"""One universal perturbation makes the network output the same (upside-down) scene for every input.

Run:  python demos/02_static_target.py [output_dir]
"""

from common import out_dir, scenes, static_target, victim
from segadv import attacks, imageio, metrics, segnet, targets

out = out_dir("02_static_target")
model = victim()
x, _ = scenes(200)
xv, yv = scenes(50, offset=400)

target = static_target(model, x)
cfg = attacks.AttackConfig(eps=10 / 255, omega=None)
pert = attacks.universal_perturbation(model, x, [targets.static_target(target)] * len(x), cfg)
attacks.save_perturbation(pert, out / "universal.tnsr")

for split, imgs in (("train", x), ("validation", xv)):
    rep = metrics.evaluate_perturbation(model, imgs, pert, static_target=target)
    print(f"{split:10s} success rate {rep.success_rate:.3f}")

adv = attacks.apply(pert, xv[:2])
for i, pred in enumerate(segnet.predict_labels(model, adv)):
    imageio.write_ppm(out / f"{i}_adv.ppm", adv[i])
    imageio.write_ppm_u8(out / f"{i}_pred_adv.ppm", imageio.colorize(pred))
imageio.write_ppm(out / "perturbation_x4.ppm", imageio.amplify(pert.full()))
imageio.write_ppm_u8(out / "target.ppm", imageio.colorize(target))
print(f"images in {out}")
