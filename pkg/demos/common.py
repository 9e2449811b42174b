"""Helpers shared by the demo scripts: a victim trained on synthetic street scenes."""

import sys
import time
from pathlib import Path

from segadv import scenegen, segnet, targets

SPEC = scenegen.SceneSpec(contrast=0.15)
MODEL = segnet.ModelConfig(input_scale=4.0)


def out_dir(name: str) -> Path:
    root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_out")
    path = root / name
    path.mkdir(parents=True, exist_ok=True)
    return path


def scenes(n: int, offset: int = 0):
    return scenegen.stack(scenegen.generate_dataset(SPEC, n, offset))


def victim(seed: int = 0, n: int = 400, epochs: int = 40, config: segnet.ModelConfig = MODEL):
    x, y = scenes(n)
    t = time.perf_counter()
    model = segnet.train(segnet.build_model(config, seed), (x, y), epochs, 0.1, seed, batch_size=8)
    print(f"trained victim seed={seed} on {n} scenes in {time.perf_counter() - t:.0f}s, "
          f"final loss {model.meta['final_loss']:.3f}")
    return model


def static_target(model, images, pool: int = 50):
    """An upside-down scene sharing as little as possible with the model's predictions on ``images``."""
    cands = [scenegen.generate_sample(SPEC, 10_000 + k).truth[::-1].copy() for k in range(pool)]
    k, agreement = targets.least_overlap(cands, segnet.predict_labels(model, images))
    print(f"static target: candidate {k}, agrees with clean predictions on {agreement[k]:.1%} of pixels")
    return cands[k]
