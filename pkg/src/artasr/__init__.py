"""Articulation-informed CTC speech recognition at desk scale.

A numpy autodiff core, a transformer CTC recognizer with an auxiliary
tract-variable head and cross-attention fusion, CTC decoding with an
n-gram LM, evaluation metrics and a synthetic articulatory corpus.
"""

__version__ = "0.1.0"
