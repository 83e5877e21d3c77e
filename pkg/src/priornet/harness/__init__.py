"""Training, evaluation, ablation and diagnostics."""
