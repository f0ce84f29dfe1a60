"""Text+video conditioned audio-latent diffusion with a modality adapter.

A frozen text-conditioned latent diffusion transformer is extended with a
trainable temporal adapter that injects video-derived features through
zero-initialized bridge layers, so that adding the adapter changes nothing
until it is trained.  Everything runs on a small self-contained numerical
core (hand-rolled reverse-mode autodiff over numpy, with an optional
compiled kernel backend).
"""

__version__ = "0.1.0"
