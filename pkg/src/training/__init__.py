"""Distillation, pruning, training stages and evaluation."""
