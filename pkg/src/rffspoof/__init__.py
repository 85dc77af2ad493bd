"""Spoofing detection from RF fingerprints with episodic meta-learning.

Modules: ``sigmodel`` (scene synthesis), ``features`` (spectrograms),
``tracking`` (C/A codes and DLL/PLL/FLL observables), ``tensor`` (reverse-mode
autodiff), ``embedder`` (dual-branch prototype encoder), ``metalearn``
(episodes, first-order MAML, ADMM), ``dataio`` (IQ files, caches, registry)
and ``cli``.
"""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"
