"""Recover blending weights from a constructed two-layer mixture.

The source is an exact alpha-blend of two object layers on their overlap, so
gradient descent on the transparency loss should find (alpha, 1 - alpha).

    python3 demos/transparency_recovery.py
"""

import numpy as np

from layered_edit import TransparencyField, optimize_transparency, transparency_loss


def main():
    g = np.random.default_rng(0)
    for alpha in (0.25, 0.5, 0.6, 0.9):
        feats = g.normal(size=(2, 8, 8, 8))
        canvas = g.normal(size=(8, 8, 8))
        source = alpha * feats[0] + (1 - alpha) * feats[1]
        masks = np.zeros((2, 8, 8))
        masks[0, :, :6] = 1
        masks[1, :, 2:] = 1
        start = transparency_loss(masks, feats, canvas, source)
        tf = optimize_transparency(TransparencyField(masks), feats, canvas, source, step_size=1e-2,
                                   iterations=500)
        on = tf.overlap > 0
        found = tf.tau[:, on].mean(axis=1)
        end = transparency_loss(tf.tau, feats, canvas, source)
        print(f"alpha={alpha:.2f}  recovered=({found[0]:.4f}, {found[1]:.4f})  loss {start:.2f} -> {end:.2e}")


if __name__ == "__main__":
    main()
