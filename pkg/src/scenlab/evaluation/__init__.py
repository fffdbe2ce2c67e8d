"""Synthetic datasets, editing metrics and ablation sweeps."""
