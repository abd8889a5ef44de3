"""mrxray: MR-projection to X-ray-projection image translation toolkit.

Synthesizes geometrically matched projection pairs from procedural
phantoms, trains a residual image-to-image generator with an
edge-weighted perceptual loss, and evaluates the result quantitatively.
"""

__version__ = "0.1.0"
