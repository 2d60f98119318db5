"""Equalization and soft detection for a two-reader TDMR read channel.

Modules: ``channel`` (synthetic readback and sector files), ``trellis``
(Viterbi and max-log soft output with exact gradients), ``equalizers``
(linear, MLP, RBF and reduced-complexity networks), ``training`` (MSE and
cross-entropy adaptation), ``metrics`` (BER, LLR mutual information) and
``experiment``/``cli`` (config-driven runs).
"""

__version__ = "0.1.0"
