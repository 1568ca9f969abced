"""Toy-scale story visualization with a two-stage conditional diffusion pipeline.

Stage 1 predicts the semantic embedding of every frame that has to be
generated; stage 2 denoises all of those frames in one joint pass, conditioned
on the reference frames at the image level and on caption/embedding features
at the feature level.
"""

__version__ = "0.1.0"
