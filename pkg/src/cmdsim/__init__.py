"""cmdsim: a command-line similarity toolkit.

Synthesizes Windows command lines through a pool of chat-completion
providers, builds similar-command pairs and natural-language
explanations, deduplicates by explanation-embedding clusters, trains a
linear embedding adapter with an in-batch-negative contrastive loss,
and evaluates retrieval, malicious-command detection, and command
classification.
"""

__version__ = "0.1.0"
