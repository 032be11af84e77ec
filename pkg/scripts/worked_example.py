"""Pool the 7x7 ramp-edge patch with all three pooling kinds and show the window reading."""

import numpy as np

from ceemkit import layers as L
from ceemkit.tensor import windows

PATCH = np.array([
    [109, 111, 111, 110, 111, 112, 112],
    [113, 114, 116, 115, 117, 115, 117],
    [119, 118, 117, 120, 120, 122, 151],
    [135, 128, 127, 126, 128, 130, 161],
    [143, 142, 142, 141, 139, 142, 142],
    [158, 157, 154, 157, 151, 154, 151],
    [170, 169, 165, 165, 162, 163, 160],
])


def main():
    x = PATCH[None, :, :, None]
    for kind in ("max", "maxmin", "twomaxmin"):
        out, _ = L.pool_forward(x, L.PoolSpec(kind, (3, 3), 2))
        print(f"{kind}:\n{out[0, :, :, 0]}\n")
    print(f"{'window':<8}{'max':>4}{'min':>5}{'mode':>6}{'max-mode':>10}{'mode-min':>10}{'2max-min':>10}")
    for w in windows(PATCH.astype(float), (3, 3), 2):
        up, down = w.deviations()
        print(f"{str(w.origin):<8}{w.max:>4.0f}{w.min:>5.0f}{w.mode():>6.0f}{up:>10.0f}{down:>10.0f}"
              f"{2 * w.max - w.min:>10.0f}")


if __name__ == "__main__":
    main()
