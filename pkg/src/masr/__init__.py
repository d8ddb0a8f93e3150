"""Metadata-aware self-supervised speech representations at desk scale.

Submodules: ``datasets`` (manifests, feature files, synthetic corpora),
``features`` (log-mel front end), ``ssl_backbone`` (masked prediction with a
random-projection quantizer), ``metadata`` (fixed label encodings),
``masr_loss`` (metadata-guided triplet mining), ``training``, ``evaluation``
and ``cli``.
"""

__version__ = "0.1.0"
