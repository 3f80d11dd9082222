"""Joint myocardium/scar segmentation at desk scale.

Two small encoder-decoder networks are trained together: the first
segments the myocardium ring, its probability map multiplicatively
masks the input image, and the masked image feeds the scar network.
The package also ships three baselines (direct, two-step, multitask),
a seeded synthetic data generator, evaluation metrics, and a CLI that
drives the full generate/train/eval/compare loop deterministically.
"""

__version__ = "0.1.0"
