"""Move and resize an object's features about its centroid.

Prints the transparency footprint before and after each operation as a small
character map, plus centroid and mass.

    python3 demos/geometry.py
"""

import numpy as np

from layered_edit import centroid, move_map, resize_map


def show(label, tau):
    print(f"{label}: centroid ({centroid(tau)[0]:.2f}, {centroid(tau)[1]:.2f}), mass {tau.sum():.2f}")
    for row in tau:
        print("  " + "".join("#" if v >= 0.5 else "+" if v > 0.05 else "." for v in row))


def main():
    tau = np.zeros((14, 14))
    tau[5:9, 5:9] = 1.0
    show("original", tau)

    # a canvas whose only channel is the object itself; after the move the
    # destination holds the object and the vacated cells keep their canvas value
    canvas = tau[:, :, None].copy()
    moved = move_map(canvas, tau, -3, 4)[..., 0]
    show("moved by (-3, 4), source left in place", moved)

    ones = np.ones((14, 14, 1))
    for s in (1.5, 0.5):
        # features of ones over an empty canvas leave the resized transparency behind
        resized = resize_map(ones, np.zeros((14, 14, 1)), tau, s)[..., 0]
        show(f"resized by {s}", resized)


if __name__ == "__main__":
    main()
