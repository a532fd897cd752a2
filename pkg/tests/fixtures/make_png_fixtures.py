"""Write the committed PNG fixture set under ``tests/fixtures/png``.

Pixel (r, c) of image i in class k is ``pixel_value(k, i, r, c)``.
"""
from pathlib import Path

import numpy as np
from PIL import Image

SIDE = 6
CLASSES = ("alpha", "beta", "gamma")
PER_CLASS = 3


def pixel_value(k: int, i: int, r: int, c: int) -> int:
    return (37 * k + 11 * i + 7 * r + 3 * c) % 256


def image_array(k: int, i: int) -> np.ndarray:
    return np.array([[pixel_value(k, i, r, c) for c in range(SIDE)] for r in range(SIDE)], dtype=np.uint8)


def main(root: Path = Path(__file__).parent / "png") -> None:
    for k, name in enumerate(CLASSES):
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        for i in range(PER_CLASS):
            Image.fromarray(image_array(k, i), mode="L").save(d / f"{i:02d}.png")


if __name__ == "__main__":
    main()
