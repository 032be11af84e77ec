"""Write original / negative / negative+2Max-Min previews for one synthetic image per class."""

import argparse
from pathlib import Path

from ceemkit.data import SynthSpec, apply_ops, rescale_for_display, synth_generate
from ceemkit.imageio import write_image


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="previews")
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = synth_generate(SynthSpec(counts=(1,) * 6, size=a.size, seed=a.seed))
    for img, y in zip(ds.images[..., 0], ds.labels):
        name = ds.class_names[y]
        write_image(out / f"{name}_0_original.png", img)
        write_image(out / f"{name}_1_negative.png", apply_ops(img, ["negative"]))
        write_image(out / f"{name}_2_negative_twomaxmin.png",
                    rescale_for_display(apply_ops(img, ["negative", "twomaxmin"])))
    print(f"wrote {3 * len(ds)} images to {out}")


if __name__ == "__main__":
    main()
