"""Knee joint localization and osteoarthritis severity grading.

Two-stage pipeline on radiograph-like images: a fully convolutional
localizer finds the two knee joints, fixed-aspect crops are cut around
them, and a convolutional network grades each joint on the 0..4 scale,
either as plain classification or with a joint classification plus
regression objective. Everything runs on a small numpy-backed
reverse-mode autodiff engine in this package.
"""

__version__ = "0.1.0"
