"""What the synthetic benchmark hides in its training split.

Two confounds are planted: classes 0 and 1 co-occur far more often than the
rest, and class 2 usually sits on background texture 0.  The decorrelated
evaluation split removes both, so a detector that leaned on them is exposed.

    python3 demos/synthetic_confounds.py
"""

import numpy as np

from ci_sed.synthdata import GeneratorConfig, generate_clip


def summarize(cfg, split, count=2000):
    together = np.zeros((cfg.k, cfg.k))
    seen = np.zeros(cfg.k)
    on_texture0 = np.zeros(cfg.k)
    for i in range(count):
        clip = generate_clip(cfg, split, i)
        for a in clip.weak:
            seen[a] += 1
            on_texture0[a] += clip.background == 0
            for b in clip.weak:
                if a != b:
                    together[a, b] += 1
    return together / np.maximum(seen[:, None], 1), on_texture0 / np.maximum(seen, 1)


def main():
    train = GeneratorConfig()
    for name, cfg, split in (("confounded train", train, "train"),
                             ("decorrelated eval", train.decorrelated(), "eval_decorrelated")):
        pair, texture = summarize(cfg, split)
        a, b = cfg.confounded_pair
        print(f"{name}:")
        print(f"  P(class {b} present | class {a} present) = {pair[a, b]:.2f}")
        print(f"  P(class 3 present | class {a} present) = {pair[a, 3]:.2f}")
        print(f"  P(texture 0 | class {cfg.entangled_class}) = {texture[cfg.entangled_class]:.2f}, "
              f"other classes {np.delete(texture, cfg.entangled_class).mean():.2f}")


if __name__ == "__main__":
    main()
