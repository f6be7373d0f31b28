"""Heat conduction on a feature map, seen through the cosine transform.

Diffusion with diffusivity k for time t damps the cosine coefficient at
frequency w by exp(-k * |w|^2 * t). A sharp square therefore blurs, the
mean never moves and energy only ever decreases.

    python demos/heat_conduction.py
"""

import numpy as np

from cvheat import dct2, hco_apply, idct2


def show(name, x):
    rows = [" ".join(f"{v:5.2f}" for v in row) for row in x]
    print(f"{name}\n  " + "\n  ".join(rows))


def main():
    x = np.zeros((8, 8))
    x[2:6, 2:6] = 1.0
    show("square", x)

    c = dct2(x)
    print(f"\nDC coefficient {c[0, 0]:.3f} = sum / sqrt(64); roundtrip error {np.abs(idct2(c) - x).max():.1e}")

    for k in (0.1, 0.5, 2.0):
        y = hco_apply(x, k)
        print(f"\nk={k}: mean {y.mean():.4f}, energy {np.sum(y**2):.3f} (was {np.sum(x**2):.1f})")
        if k == 0.5:
            show("conducted", y)

    # two short conductions equal one long one
    a = hco_apply(hco_apply(x, 0.5, 0.3), 0.5, 0.7)
    print(f"\nsemigroup gap {np.abs(a - hco_apply(x, 0.5, 1.0)).max():.1e}")


if __name__ == "__main__":
    main()
