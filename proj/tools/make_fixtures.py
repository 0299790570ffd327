"""Regenerate the small PGM corpora under tests/fixtures from scikit-image's sample data."""

import pathlib

import numpy as np
import skimage.color
import skimage.data
import skimage.transform

ROOT = pathlib.Path(__file__).resolve().parent.parent / "tests" / "fixtures"
SETS = {
    "train": ["camera", "coins", "astronaut", "coffee"],
    "heldout": ["chelsea", "rocket", "clock", "moon"],
}
SIZE = 128


def write_pgm(path, img):
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(img.astype(np.uint8).tobytes())


def load(name):
    img = getattr(skimage.data, name)()
    if img.ndim == 3:
        img = skimage.color.rgb2gray(img[..., :3])
    else:
        img = img / 255.0
    side = min(img.shape)
    top = (img.shape[0] - side) // 2
    left = (img.shape[1] - side) // 2
    img = img[top : top + side, left : left + side]
    img = skimage.transform.resize(img, (SIZE, SIZE), anti_aliasing=True)
    return np.clip(np.round(img * 255.0), 0, 255)


def main():
    for subset, names in SETS.items():
        out = ROOT / subset
        out.mkdir(parents=True, exist_ok=True)
        for name in names:
            write_pgm(out / f"{name}.pgm", load(name))


if __name__ == "__main__":
    main()
