"""Instance-level genre prediction for CoNLL-U treebank collections."""

__version__ = "0.1.0"
