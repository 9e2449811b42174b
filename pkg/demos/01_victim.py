"""Train the toy segmentation network and look at what it predicts.

Run:  python demos/01_victim.py [output_dir]
"""

import numpy as np

from common import out_dir, scenes, victim
from segadv import imageio, metrics, segnet

out = out_dir("01_victim")
model = victim()
segnet.save(model, out / "victim.ckpt")

xv, yv = scenes(50, offset=400)
pred = segnet.predict_labels(model, xv)
miou, per_class = metrics.mean_iou(pred, yv, 5)
print(f"validation pixel accuracy {np.mean(pred == yv):.3f}, mean IoU {miou:.3f}")
for name, iou in zip(("sky", "ground", "building", "vehicle", "figure"), per_class):
    print(f"  {name:9s} IoU {iou:.3f}")

for i in range(3):
    imageio.write_ppm(out / f"{i}_image.ppm", xv[i])
    imageio.write_ppm_u8(out / f"{i}_truth.ppm", imageio.colorize(yv[i]))
    imageio.write_ppm_u8(out / f"{i}_pred.ppm", imageio.colorize(pred[i]))
print(f"images in {out}")
