"""Novel-view prediction for infrared-style imagery.

Two-block pipeline: a plain convolutional autoencoder learns target-view
embeddings, then a pose-conditioned predictor is trained against those
embeddings plus the target images. Includes the synthetic data generator,
training loops, and the evaluation suite (error reports, low-shot
classification, embedding cluster analysis with exact t-SNE).
"""

__version__ = "0.1.0"
