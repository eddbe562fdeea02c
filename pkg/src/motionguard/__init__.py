"""Adversarial attack and motion-consistency purification testbed for
flow-based video classifiers.

Modules:
    autodiff    reverse-mode tape over numpy arrays
    video       synthetic clip rendering, .vclip format, PPM export
    flow        Horn-Schunck optical flow with a differentiable twin
    losses      photometric / smoothness / motion-consistency objectives
    classifier  two-layer convolutional flow classifier
    attacks     PGD, one-frame, adaptive, BPDA, and flickering attacks
    defense     consistency-guided input purification
    report      paired experiment driver, histograms, flow panels
    cli         command-line front end
"""

from . import attacks, autodiff, classifier, defense, flow, losses, report, video

__version__ = "0.1.0"

__all__ = [
    "attacks",
    "autodiff",
    "classifier",
    "defense",
    "flow",
    "losses",
    "report",
    "video",
    "__version__",
]
