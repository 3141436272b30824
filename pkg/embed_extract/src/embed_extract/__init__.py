"""Sentence embedding extraction for CoNLL-U collections."""
