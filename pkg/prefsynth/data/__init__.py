"""Shipped data files: lexicon and stopword list."""
