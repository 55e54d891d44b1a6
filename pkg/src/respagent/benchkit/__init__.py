"""Synthetic corpus, label unification, text QA, shared metrics and the CLI."""
