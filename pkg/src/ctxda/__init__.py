"""Context-window dialogue act classification.

A no-context feed-forward baseline and an utterance-level attention BiRNN,
implemented on a small hand-differentiated tensor kernel, together with the
corpus tooling, training loop, and analysis suite around them.
"""

__version__ = "0.1.0"
