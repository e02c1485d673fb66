"""Desk-scale laboratory for adversarial training of discrete sequence generators.

Subpackages:

- ``autodiff``      reverse-mode tape over dense float64 tensors
- ``captioner``     LSTM generator with context-aware sentinel attention
- ``discriminator`` co-attention and joint-embedding image/caption scorers
- ``training``      adversarial losses, SCST and Gumbel estimators, Adam
- ``metrics``       CIDEr-D, BLEU4, ROUGE-L, vocabulary coverage, CCA score
- ``data``          synthetic compositional dataset, feature files, checkpoints
- ``cli``           experiment runner (train / eval / grad-probe / plots / gen-data)
"""

__version__ = "0.1.0"
