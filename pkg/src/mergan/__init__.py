"""Continual learning for conditional GANs.

A conditional critic-regularized GAN trained over a sequence of single-category
tasks, with strategies that prevent the generator from forgetting earlier
categories: joint training (upper bound), sequential fine tuning (lower bound),
elastic weight consolidation, joint retraining with replayed samples, and
replay alignment. Includes a desk-scale evaluation protocol (proxy-classifier
accuracy, reverse accuracy, Frechet distance) and a deterministic CLI.
"""

__version__ = "0.1.0"
